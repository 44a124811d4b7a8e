"""Synthetic equirectangular street scenes with abutting storefronts.

A single flat facade runs parallel to the street, ``facade_distance`` metres
in front of the camera.  Panorama column ``x = 0.5`` looks along the camera
heading; the facade therefore occupies the middle half of the image and the
back half shows only road and sky.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box, read_boxes, write_boxes

EARTH_RADIUS_M = 6371008.8

# full-resolution statistics, rescaled to the rendered width
FULL_PANO_WIDTH = 13312
FULL_WIDTH_RANGE_PX = (200.0, 2000.0)
ASPECT_RANGE = (1.0 / 5.0, 5.0)
MAX_ELEVATION_DEG = 45.0

# (R, G, B) storefront palettes; even ids are light, odd ids dark
STYLES = (
    (232, 196, 80), (40, 60, 140), (236, 120, 110), (30, 110, 60),
    (180, 220, 235), (120, 40, 40), (240, 240, 225), (70, 50, 90),
)
SIGN_COLORS = ((250, 250, 250), (20, 20, 20), (200, 30, 30), (30, 30, 180))


class GeoPose:
    """Camera position and heading (degrees clockwise from north)."""

    __slots__ = ("lat", "lng", "heading")

    def __init__(self, lat: float, lng: float, heading: float = 0.0):
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} out of range")
        if not -180.0 <= lng < 180.0:
            raise ValueError(f"longitude {lng} out of range")
        self.lat = float(lat)
        self.lng = float(lng)
        self.heading = float(heading) % 360.0

    def __repr__(self):
        return f"GeoPose(lat={self.lat!r}, lng={self.lng!r}, heading={self.heading!r})"

    def __eq__(self, other):
        return isinstance(other, GeoPose) and (self.lat, self.lng, self.heading) == (
            other.lat, other.lng, other.heading)

    def to_dict(self) -> dict:
        return {"lat": self.lat, "lng": self.lng, "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "GeoPose":
        return cls(d["lat"], d["lng"], d["heading"])


def offset_latlng(lat: float, lng: float, east_m: float, north_m: float) -> tuple[float, float]:
    """Local flat-earth displacement."""
    dlat = math.degrees(north_m / EARTH_RADIUS_M)
    dlng = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    lng2 = (lng + dlng + 180.0) % 360.0 - 180.0
    return lat + dlat, lng2


@dataclass(frozen=True)
class Business:
    position: float  # along-street centre, metres
    width: float
    height: float
    style: int = 0


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    pano_width_px: int = 1664
    pano_height_px: int = 832
    businesses: tuple[Business, ...] = ()
    pose: GeoPose = field(default_factory=lambda: GeoPose(0.0, 0.0, 0.0))
    street_offset: float = 0.0  # camera position along the street, metres
    facade_distance: float = 10.0
    camera_height: float = 2.5
    building_height: float = 9.0
    wall_color: tuple[int, int, int] = (150, 140, 130)
    noise_sigma: float = 3.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose"] = self.pose.to_dict()
        d["businesses"] = [asdict(b) for b in self.businesses]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["pose"] = GeoPose.from_dict(d["pose"])
        d["businesses"] = tuple(Business(**b) for b in d["businesses"])
        d["wall_color"] = tuple(d["wall_color"])
        return cls(**d)

    def facade_latlng(self, along: float) -> tuple[float, float]:
        """Geo position of the facade point at along-street coordinate ``along``."""
        h = math.radians(self.pose.heading)
        fwd = (math.sin(h), math.cos(h))
        right = (math.cos(h), -math.sin(h))
        a = along - self.street_offset
        east = self.facade_distance * fwd[0] + a * right[0]
        north = self.facade_distance * fwd[1] + a * right[1]
        return offset_latlng(self.pose.lat, self.pose.lng, east, north)


@dataclass
class Scene:
    spec: SceneSpec
    image: np.ndarray  # (H, W, 3) uint8
    gts: list[Box]
    business_index: list[int]  # spec.businesses index of each gt

    @property
    def pose(self) -> GeoPose:
        return self.spec.pose


def _storefront_projection(spec: SceneSpec, b: Business) -> tuple[float, float, float, float]:
    """Normalized panorama bounds of a storefront (may be unclipped)."""
    d = spec.facade_distance
    a0 = b.position - b.width / 2 - spec.street_offset
    a1 = b.position + b.width / 2 - spec.street_offset
    x0 = 0.5 + math.degrees(math.atan2(a0, d)) / 360.0
    x1 = 0.5 + math.degrees(math.atan2(a1, d)) / 360.0
    a_near = min(max(0.0, a0), a1)
    r_near = math.hypot(d, a_near)
    r_far = max(math.hypot(d, a0), math.hypot(d, a1))
    top = b.height - spec.camera_height
    phi_top = math.degrees(math.atan2(top, r_near if top > 0 else r_far))
    phi_bot = math.degrees(math.atan2(-spec.camera_height, r_near))
    return x0, 0.5 - phi_top / 180.0, x1, 0.5 - phi_bot / 180.0


def storefront_boxes(spec: SceneSpec) -> tuple[list[Box], list[int]]:
    """Ground-truth boxes of storefronts that satisfy the size statistics.

    Storefronts projecting outside the width/aspect ranges are not labelled
    (and are painted as plain wall by the renderer).
    """
    scale = spec.pano_width_px / FULL_PANO_WIDTH
    wmin, wmax = (v * scale for v in FULL_WIDTH_RANGE_PX)
    ylo = 0.5 - MAX_ELEVATION_DEG / 180.0
    yhi = 0.5 + MAX_ELEVATION_DEG / 180.0
    boxes, index = [], []
    for k, b in enumerate(spec.businesses):
        x0, y0, x1, y1 = _storefront_projection(spec, b)
        if x1 - x0 <= 0:
            continue
        y0, y1 = max(y0, ylo), min(y1, yhi)
        if y1 <= y0:
            continue
        wpx = (x1 - x0) * spec.pano_width_px
        hpx = (y1 - y0) * spec.pano_height_px
        if not (wmin <= wpx <= wmax and ASPECT_RANGE[0] <= wpx / hpx <= ASPECT_RANGE[1]):
            continue
        boxes.append(Box(x0, y0, x1, y1))
        index.append(k)
    return boxes, index


def _facade_colors(spec: SceneSpec, s: np.ndarray, z: np.ndarray, labelled: set[int]) -> np.ndarray:
    """Colour of facade points at along-street ``s`` and height ``z``."""
    col = np.empty(s.shape + (3,))
    col[:] = spec.wall_color
    # faint upper-floor windows
    win = (np.mod(s, 3.0) > 1.0) & (np.mod(s, 3.0) < 2.0) & (np.mod(z, 3.0) > 1.0) & (z > 5.5)
    col[win] = np.array(spec.wall_color) * 0.75
    line = 0.12
    for k, b in enumerate(spec.businesses):
        if k not in labelled:
            continue
        left, right = b.position - b.width / 2, b.position + b.width / 2
        idx = np.flatnonzero((s >= left) & (s < right) & (z < b.height))
        if len(idx) == 0:
            continue
        ss, zz = s[idx], z[idx]
        base = np.array(STYLES[b.style % len(STYLES)], dtype=np.float64)
        sub = np.empty((len(idx), 3))
        sub[:] = base
        sign_lo = b.height * 0.78
        sign = (zz >= sign_lo) & (zz < b.height - line)
        sub[sign] = SIGN_COLORS[(b.style // 2 + k) % len(SIGN_COLORS)]
        # door and display window
        door_c = left + b.width * (0.2 + 0.6 * ((k * 0.37 + b.style * 0.13) % 1.0))
        door = (np.abs(ss - door_c) < 0.5) & (zz < 2.1)
        sub[door] = base * 0.35
        glass = ~door & (zz > 0.8) & (zz < min(2.2, sign_lo - 0.2)) & (ss > left + 0.4) & (ss < right - 0.4)
        sub[glass] = 0.5 * base + 0.5 * np.array((90.0, 110.0, 130.0))
        edge = (ss - left < line) | (right - ss < line) | (zz > b.height - line)
        sub[edge] = (15.0, 15.0, 15.0)
        col[idx] = sub
    return col


def gen_scene(spec: SceneSpec) -> Scene:
    """Render a panorama and its ground-truth storefront boxes."""
    W, H = spec.pano_width_px, spec.pano_height_px
    rng = np.random.default_rng(spec.seed)
    gts, index = storefront_boxes(spec)
    labelled = set(index)

    x = (np.arange(W) + 0.5) / W
    y = (np.arange(H) + 0.5) / H
    rel = np.radians(360.0 * (x - 0.5))  # bearing relative to heading
    phi = np.radians(90.0 - 180.0 * y)
    rel_g, phi_g = np.meshgrid(rel, phi)

    img = np.empty((H, W, 3), dtype=np.float32)
    sky = np.array((150.0, 190.0, 235.0))
    sky_top = np.array((90.0, 130.0, 205.0))
    # sky gradient depends on the row only
    t = np.clip(phi / (math.pi / 2), 0, 1)[:, None, None]
    img[:] = (1 - t) * sky + t * sky_top
    ground = phi_g < 0
    road = np.array((85.0, 85.0, 90.0))
    img[ground] = road

    front = np.cos(rel_g) > 1e-6
    d = spec.facade_distance
    with np.errstate(divide="ignore", invalid="ignore"):
        r = d / np.cos(rel_g)
        a = d * np.tan(rel_g)
        z = r * np.tan(phi_g) + spec.camera_height
    hit = front & (z >= 0) & (z <= spec.building_height)
    # sidewalk strip in front of the facade
    img[front & (z < 0)] = (120.0, 118.0, 112.0)
    img[hit] = _facade_colors(spec, a[hit] + spec.street_offset, z[hit], labelled)

    noise = rng.standard_normal(img.shape, dtype=np.float32)
    noise *= spec.noise_sigma
    img += noise
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Scene(spec, image, gts, index)


def random_scene_spec(seed: int, pano_width_px: int = 1664, pano_height_px: int = 832,
                      lat: float | None = None, lng: float | None = None,
                      street_offset: float = 0.0, max_bearing_deg: float = 60.0) -> SceneSpec:
    """Random street: abutting storefronts within ``max_bearing_deg`` of the
    heading, adjacent ones alternating light/dark palettes."""
    rng = np.random.default_rng(seed)
    d = float(rng.uniform(8.0, 14.0))
    half = d * math.tan(math.radians(max_bearing_deg))
    pos = -half + float(rng.uniform(0.0, 2.0))
    businesses = []
    light = bool(rng.integers(2))
    while True:
        w = float(rng.uniform(3.0, 8.0))
        if pos + w > half:
            break
        h = float(rng.uniform(3.0, 5.0))
        style = 2 * int(rng.integers(4)) + (0 if light else 1)
        businesses.append(Business(pos + w / 2 + street_offset, w, h, style))
        pos += w
        light = not light
    if lat is None:
        lat = float(rng.uniform(-50.0, 60.0))
    if lng is None:
        lng = float(rng.uniform(-179.0, 179.0))
    wall = tuple(int(v) for v in rng.integers(110, 190, size=3))
    return SceneSpec(
        seed=seed, pano_width_px=pano_width_px, pano_height_px=pano_height_px,
        businesses=tuple(businesses), pose=GeoPose(lat, lng, float(rng.uniform(0, 360))),
        street_offset=street_offset, facade_distance=d,
        building_height=float(rng.uniform(6.0, 12.0)), wall_color=wall,
    )


# ---------------------------------------------------------------------------
# dataset utilities

CELL_DEG = 0.001


def geo_cell(pose: GeoPose) -> tuple[int, int]:
    return (math.floor(pose.lat / CELL_DEG), math.floor(pose.lng / CELL_DEG))


def split_location_aware(scenes, test_fraction: float, seed: int):
    """Split whole geographic cells into train and test sides.

    ``scenes`` holds objects with a ``pose`` attribute (or GeoPose values).
    Cells are shuffled with ``seed`` and moved to the test side until it
    holds at least ``test_fraction`` of the scenes; both sides keep at least
    one cell.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    poses = [s if isinstance(s, GeoPose) else s.pose for s in scenes]
    cells: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(poses):
        cells.setdefault(geo_cell(p), []).append(i)
    if len(cells) < 2:
        raise ValueError("location-aware split needs scenes in at least two cells")
    keys = sorted(cells)
    rng = np.random.default_rng(seed)
    rng.shuffle(keys)
    target = test_fraction * len(poses)
    test_idx: list[int] = []
    n_test_cells = 0
    for key in keys[:-1]:
        if len(test_idx) >= target:
            break
        test_idx.extend(cells[key])
        n_test_cells += 1
    test_set = set(test_idx)
    train = [s for i, s in enumerate(scenes) if i not in test_set]
    test = [s for i, s in enumerate(scenes) if i in test_set]
    return train, test


def degrade_labels(gts, keep_fraction: float = 0.27, seed: int = 0):
    """Independently keep each box with probability ``keep_fraction``."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    gts = list(gts)
    if keep_fraction == 1.0:
        return gts
    keep = np.random.default_rng(seed).random(len(gts)) < keep_fraction
    return [g for g, k in zip(gts, keep) if k]


def write_ppm(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PPM":
            raise ValueError(f"{path} is not a PPM image")
        return np.asarray(im.convert("RGB"))


def write_scene(directory, scene_id: str, scene: Scene) -> None:
    d = Path(directory) / "scenes"
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{scene_id}.ppm", scene.image)
    write_boxes(d / f"{scene_id}.gt.jsonl", scene.gts, pano_id=scene_id)
    pose = {"pose": scene.pose.to_dict(), "spec": scene.spec.to_dict(),
            "business_index": scene.business_index}
    (d / f"{scene_id}.pose.json").write_text(json.dumps(pose, indent=1, sort_keys=True) + "\n")


def read_scene(directory, scene_id: str) -> Scene:
    d = Path(directory) / "scenes"
    image = read_ppm(d / f"{scene_id}.ppm")
    gts = read_boxes(d / f"{scene_id}.gt.jsonl")
    meta = json.loads((d / f"{scene_id}.pose.json").read_text())
    spec = SceneSpec.from_dict(meta["spec"])
    return Scene(spec, image, gts, meta.get("business_index", []))


def make_streets(num_streets: int, seed: int = 0, passes: int = 1, pass_spacing_m: float = 4.0,
                 pano_width_px: int = 1664, pano_height_px: int = 832) -> list[tuple[str, Scene]]:
    """Render ``num_streets`` random streets seen from ``passes`` camera
    positions each.  Returns ``(scene_id, scene)`` pairs."""
    if num_streets < 0 or passes <= 0:
        raise ValueError("num_streets must be non-negative and passes positive")
    rng = np.random.default_rng(seed)
    street_seeds = rng.integers(0, 2**31 - 1, size=num_streets)
    out = []
    for k, s in enumerate(street_seeds):
        srng = np.random.default_rng(int(s))
        # street origins snapped to cell centres so every pass shares a cell
        lat = (math.floor(srng.uniform(-50, 60) / CELL_DEG) + 0.5) * CELL_DEG
        lng = (math.floor(srng.uniform(-179, 179) / CELL_DEG) + 0.5) * CELL_DEG
        base = random_scene_spec(int(s), pano_width_px, pano_height_px, lat=lat, lng=lng)
        for p in range(passes):
            off = (p - (passes - 1) / 2) * pass_spacing_m
            spec = moved_camera(base, off, seed=int(s) + p)
            out.append((f"s{k:05d}p{p}", gen_scene(spec)))
    return out


def assign_splits(scenes, test_fraction: float, val_fraction: float = 0.0, seed: int = 0) -> list[str]:
    """Location-aware ``train``/``val``/``test`` label per scene.

    The test side is split off first; validation cells are then taken from
    what remains.  A pool too small to split stays entirely ``train``.
    """
    scenes = list(scenes)
    labels = ["train"] * len(scenes)
    cells = {geo_cell(s if isinstance(s, GeoPose) else s.pose) for s in scenes}
    if len(cells) < 2:
        return labels
    idx = list(range(len(scenes)))
    rest, test = split_location_aware([_Indexed(i, scenes[i]) for i in idx], test_fraction, seed)
    for t in test:
        labels[t.index] = "test"
    if val_fraction > 0 and len({geo_cell(t.pose) for t in rest}) >= 2:
        _, val = split_location_aware(rest, val_fraction, seed + 1)
        for v in val:
            labels[v.index] = "val"
    return labels


@dataclass(frozen=True)
class _Indexed:
    index: int
    item: object

    @property
    def pose(self) -> GeoPose:
        return self.item if isinstance(self.item, GeoPose) else self.item.pose


def generate_dataset(directory, num_streets: int, seed: int = 0, passes: int = 1,
                     pass_spacing_m: float = 4.0, test_fraction: float = 0.2, val_fraction: float = 0.0,
                     pano_width_px: int = 1664, pano_height_px: int = 832) -> dict:
    """Render streets, write them under ``directory`` and return the manifest."""
    pairs = make_streets(num_streets, seed, passes, pass_spacing_m, pano_width_px, pano_height_px)
    for scene_id, scene in pairs:
        write_scene(directory, scene_id, scene)
    labels = assign_splits([sc for _, sc in pairs], test_fraction, val_fraction, seed)
    manifest = {
        "ids": [sid for sid, _ in pairs], "seeds": [sc.spec.seed for _, sc in pairs],
        "split": {sid: lab for (sid, _), lab in zip(pairs, labels)},
        "seed": seed, "passes": passes, "num_streets": num_streets,
    }
    (Path(directory) / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_split(directory, split: str) -> list[tuple[str, Scene]]:
    manifest = load_manifest(directory)
    return [(sid, read_scene(directory, sid)) for sid in manifest["ids"] if manifest["split"][sid] == split]


def moved_camera(spec: SceneSpec, along_m: float, seed: int | None = None) -> SceneSpec:
    """The same street seen from a camera moved ``along_m`` metres along it."""
    h = math.radians(spec.pose.heading)
    east, north = along_m * math.cos(h), -along_m * math.sin(h)
    lat, lng = offset_latlng(spec.pose.lat, spec.pose.lng, east, north)
    return SceneSpec(
        seed=spec.seed if seed is None else seed, pano_width_px=spec.pano_width_px,
        pano_height_px=spec.pano_height_px, businesses=spec.businesses,
        pose=GeoPose(lat, lng, spec.pose.heading), street_offset=spec.street_offset + along_m,
        facade_distance=spec.facade_distance, camera_height=spec.camera_height,
        building_height=spec.building_height, wall_color=spec.wall_color,
        noise_sigma=spec.noise_sigma,
    )


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
