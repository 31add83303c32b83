"""Great-circle geometry and monthly travel-distance computation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius


@dataclass(frozen=True)
class CityLocation:
    city_id: str
    latitude: float
    longitude: float
    country_id: str

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range [-90, 90]: {self.latitude}")
        if not -180.0 < self.longitude <= 180.0:
            raise ValueError(f"longitude out of range (-180, 180]: {self.longitude}")


def haversine_km(a: CityLocation, b: CityLocation) -> float:
    """Great-circle distance between two cities in kilometers.

    Symmetric, non-negative, and zero iff the coordinates coincide.
    """
    lat1, lon1 = math.radians(a.latitude), math.radians(a.longitude)
    lat2, lon2 = math.radians(b.latitude), math.radians(b.longitude)
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def monthly_travel_distance(
    home: CityLocation,
    visited_city_ids: set[str],
    gazetteer: dict[str, CityLocation],
    mode: str = "sum",
) -> tuple[float, int]:
    """Total (or mean) haversine distance from home to each distinct visited city.

    The home city itself never counts. Visited cities missing from the
    gazetteer are excluded; their count is the second return value.
    Returns 0.0 for an empty visited set.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"mode must be 'sum' or 'mean', got {mode!r}")
    distances = []
    unknown = 0
    for city_id in sorted(visited_city_ids):
        if city_id == home.city_id:
            continue
        loc = gazetteer.get(city_id)
        if loc is None:
            unknown += 1
            continue
        distances.append(haversine_km(home, loc))
    if not distances:
        return 0.0, unknown
    total = sum(distances)
    if mode == "mean":
        return total / len(distances), unknown
    return total, unknown


def load_gazetteer(path: str | Path, delimiter: str = ",") -> dict[str, CityLocation]:
    """Read a city gazetteer file: city_id, latitude, longitude, country_id."""
    cities: dict[str, CityLocation] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        for row in reader:
            loc = CityLocation(
                city_id=row["city_id"],
                latitude=float(row["latitude"]),
                longitude=float(row["longitude"]),
                country_id=row["country_id"],
            )
            if loc.city_id in cities:
                raise ValueError(f"duplicate city_id in gazetteer: {loc.city_id}")
            cities[loc.city_id] = loc
    return cities


def write_gazetteer(path: str | Path, cities: list[CityLocation], delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["city_id", "latitude", "longitude", "country_id"])
        for c in cities:
            writer.writerow([c.city_id, repr(c.latitude), repr(c.longitude), c.country_id])
