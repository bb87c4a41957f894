"""Waypoint following: haversine distance, bearings and turn instructions."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import ValidationError

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_ARRIVAL_RADIUS_M = 10.0
STRAIGHT_BUCKET_DEG = 30.0


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def initial_bearing(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Forward azimuth in degrees, [0, 360)."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    y = math.sin(dl) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    return math.degrees(math.atan2(y, x)) % 360.0


def normalize_angle(deg: float) -> float:
    """Map to (-180, 180]."""
    d = math.fmod(deg, 360.0)
    if d > 180.0:
        d -= 360.0
    elif d <= -180.0:
        d += 360.0
    return d


def turn_direction(delta_deg: float, straight_deg: float = STRAIGHT_BUCKET_DEG) -> str:
    d = normalize_angle(delta_deg)
    if abs(d) < straight_deg:
        return "straight"
    return "right" if d > 0 else "left"


@dataclass(frozen=True)
class Route:
    waypoints: tuple[tuple[float, float], ...]
    arrival_radius: float = DEFAULT_ARRIVAL_RADIUS_M

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise ValidationError("a route needs at least two waypoints")
        if not self.arrival_radius > 0:
            raise ValidationError("arrival radius must be positive")
        for lat, lon in self.waypoints:
            validate_fix(lat, lon)


def validate_fix(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValidationError(f"invalid GPS fix ({lat}, {lon})")


@dataclass(frozen=True)
class Instruction:
    kind: str  # "turn" or "arrived"
    direction: str | None = None
    distance_m: float = 0.0

    @property
    def text(self) -> str:
        if self.kind == "arrived":
            return "destination reached"
        return f"turn {self.direction} in {self.distance_m:.0f} meters"

    @property
    def summary(self) -> str:
        """Instruction without the distance, e.g. ``"turn left"``."""
        return "destination reached" if self.kind == "arrived" else f"turn {self.direction}"


@dataclass(frozen=True)
class NavigationState:
    """Progress along a route. ``waypoints[0]`` is the origin, so the first target is index 1."""

    route: Route
    next_index: int = 1

    @property
    def finished(self) -> bool:
        return self.next_index >= len(self.route.waypoints)


def navigate_step(
    nav: NavigationState,
    fix: tuple[float, float],
    heading: float | None = None,
    straight_deg: float = STRAIGHT_BUCKET_DEG,
) -> tuple[NavigationState, Instruction | None]:
    """Advance on arrival at the next waypoint.

    Arriving at an intermediate waypoint yields a turn from the incoming
    leg's bearing to the outgoing leg's bearing. ``heading`` stands in for
    the incoming bearing only when the waypoint has no predecessor.
    Arriving at the last waypoint yields ``destination reached`` once;
    afterwards every call returns ``None``.
    """
    if nav.finished:
        return nav, None
    lat, lon = fix
    validate_fix(lat, lon)
    wps = nav.route.waypoints
    i = nav.next_index
    dist = haversine_m(lat, lon, *wps[i])
    if dist > nav.route.arrival_radius:
        return nav, None
    advanced = replace(nav, next_index=i + 1)
    if i == len(wps) - 1:
        return advanced, Instruction("arrived")
    outgoing = initial_bearing(*wps[i], *wps[i + 1])
    if i > 0:
        incoming = initial_bearing(*wps[i - 1], *wps[i])
    elif heading is not None:
        incoming = heading
    else:
        incoming = outgoing
    return advanced, Instruction("turn", turn_direction(outgoing - incoming, straight_deg), dist)


def parse_route(text: str, arrival_radius: float = DEFAULT_ARRIVAL_RADIUS_M) -> Route:
    """One ``lat lon`` (or ``lat,lon``) pair per line; ``#`` starts a comment."""
    points: list[tuple[float, float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValidationError(f"route line {lineno}: expected 'lat lon'")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ValidationError(f"route line {lineno}: bad coordinate") from None
    return Route(tuple(points), arrival_radius)


def waypoints_from(points: Sequence[Sequence[float]], arrival_radius: float = DEFAULT_ARRIVAL_RADIUS_M) -> Route:
    return Route(tuple((float(a), float(b)) for a, b in points), arrival_radius)
