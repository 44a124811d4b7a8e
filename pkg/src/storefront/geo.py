"""Geo-locating detections and merging repeated sightings of a business."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Detection
from .synth import EARTH_RADIUS_M, GeoPose, offset_latlng


@dataclass(frozen=True)
class GeoDetection:
    lat: float
    lng: float
    bearing: float
    source_pano: str
    score: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lng < 180.0:
            raise ValueError(f"invalid position ({self.lat}, {self.lng})")
        if not 0.0 <= self.bearing < 360.0:
            raise ValueError(f"bearing {self.bearing} outside [0, 360)")


@dataclass(frozen=True)
class BusinessCluster:
    members: tuple[GeoDetection, ...]
    lat: float
    lng: float
    score: float

    def to_dict(self) -> dict:
        return {
            "lat": self.lat, "lng": self.lng, "score": self.score,
            "members": [m.__dict__ for m in self.members],
        }


def detection_bearing(heading: float, x_center: float) -> float:
    return (heading + 360.0 * (x_center - 0.5)) % 360.0


def locate_detection(pose: GeoPose, det: Detection, pano_width: int | None = None,
                     facade_range: float = 10.0) -> GeoDetection:
    """Place a detection ``facade_range`` metres from the camera along the
    bearing of its box centre.

    ``pano_width`` is accepted for callers holding pixel boxes; normalized
    boxes need no conversion.
    """
    cx = det.box.center[0] % 1.0
    bearing = detection_bearing(pose.heading, cx)
    b = math.radians(bearing)
    lat, lng = offset_latlng(pose.lat, pose.lng, facade_range * math.sin(b), facade_range * math.cos(b))
    return GeoDetection(lat, lng, bearing, det.pano_id, det.final_score)


def destination_spherical(lat: float, lng: float, bearing: float, distance: float) -> tuple[float, float]:
    """Great-circle destination point, used to bound the flat-earth error."""
    d = distance / EARTH_RADIUS_M
    p1, l1, th = math.radians(lat), math.radians(lng), math.radians(bearing)
    p2 = math.asin(math.sin(p1) * math.cos(d) + math.cos(p1) * math.sin(d) * math.cos(th))
    l2 = l1 + math.atan2(math.sin(th) * math.sin(d) * math.cos(p1), math.cos(d) - math.sin(p1) * math.sin(p2))
    return math.degrees(p2), (math.degrees(l2) + 180.0) % 360.0 - 180.0


def haversine_m(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lng2 - lng1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def local_xy(points) -> np.ndarray:
    """Project points to metres on a tangent plane at their mean position."""
    lat = np.array([p.lat for p in points])
    lng = np.array([p.lng for p in points])
    lat0 = lat.mean()
    # unwrap longitudes around the first point
    dlng = (lng - lng[0] + 180.0) % 360.0 - 180.0
    x = np.radians(dlng) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    y = np.radians(lat - lat0) * EARTH_RADIUS_M
    return np.column_stack([x, y])


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller index wins so roots do not depend on union order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _member_key(p: GeoDetection):
    return (p.source_pano, p.lat, p.lng, p.bearing, p.score)


def geo_cluster(points, epsilon_meters: float = 5.0) -> list[BusinessCluster]:
    """Single-linkage clusters: connected components of the graph joining
    detections closer than ``epsilon_meters``."""
    if epsilon_meters <= 0:
        raise ValueError("epsilon must be positive")
    points = list(points)
    if not points:
        return []
    xy = local_xy(points)
    uf = UnionFind(len(points))
    for a, b in sorted(cKDTree(xy).query_pairs(epsilon_meters)):
        uf.union(a, b)
    groups: dict[int, list[GeoDetection]] = {}
    for i, p in enumerate(points):
        groups.setdefault(uf.find(i), []).append(p)
    clusters = []
    for members in groups.values():
        members = sorted(members, key=_member_key)
        clusters.append(BusinessCluster(
            tuple(members),
            float(np.mean([m.lat for m in members])),
            float(np.mean([m.lng for m in members])),
            max(m.score for m in members),
        ))
    clusters.sort(key=lambda c: _member_key(c.members[0]))
    return clusters


def end_to_end_report(detections_confirmed: int, false_positives: int, unique_clusters: int,
                      true_businesses: int) -> tuple[float, float]:
    """Precision over verified detections and recall over unique businesses."""
    for v in (detections_confirmed, false_positives, unique_clusters, true_businesses):
        if v < 0:
            raise ValueError("counts must be non-negative")
    if detections_confirmed == 0 or true_businesses == 0:
        raise ValueError("zero denominator in end-to-end report")
    if false_positives > detections_confirmed:
        raise ValueError("more false positives than detections")
    precision = (detections_confirmed - false_positives) / detections_confirmed
    recall = unique_clusters / true_businesses
    return precision, recall


def write_clusters(path, clusters) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in clusters], fh, indent=1, sort_keys=True)
        fh.write("\n")
