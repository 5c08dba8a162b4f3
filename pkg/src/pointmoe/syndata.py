"""Procedural point-cloud domains for joint-training experiments.

Two heterogeneous generators: a dense planar "room" domain (floor,
ceiling, walls, furniture boxes) and a sparse "ring" domain mimicking
rotating-scanner captures (concentric ground rings whose density falls
with range, plus poles, vehicle boxes and wall segments). Their label
sets overlap only partially -- both know "wall", while horizontal support
is "floor" in one and "ground" in the other -- which is exactly the
mismatch the shared-embedding head has to bridge. A third held-out room
variant swaps in unseen box proportions and one novel class name.

Everything is a pure function of (spec, scene_seed): same seed, same
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .langhead import LabelSpace

INDOOR_SPACE = LabelSpace("roomsim", ("floor", "ceiling", "wall", "box_a", "box_b"))
OUTDOOR_SPACE = LabelSpace("ringsim", ("ground", "wall", "pole", "vehicle"))
HELDOUT_SPACE = LabelSpace("roomsim_v2", ("floor", "ceiling", "wall", "box_a", "box_c"))

# surrogate colour per class concept, shared across domains
BASE_COLORS = {
    "floor": (0.45, 0.30, 0.20),
    "ceiling": (0.92, 0.92, 0.88),
    "wall": (0.70, 0.68, 0.60),
    "box_a": (0.20, 0.40, 0.80),
    "box_b": (0.85, 0.20, 0.20),
    "box_c": (0.30, 0.75, 0.35),
    "ground": (0.33, 0.31, 0.28),
    "pole": (0.55, 0.55, 0.58),
    "vehicle": (0.75, 0.12, 0.15),
}
COLOR_NOISE = 0.05


@dataclass
class PointCloud:
    coords: np.ndarray              # [M, 3] metres
    feats: np.ndarray               # [M, F] surrogate colour
    labels: np.ndarray              # [M] ints into the label space, -1 allowed
    dataset_tag: str | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.coords)):
            raise InputError("non-finite coordinates in point cloud")

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    generator_kind: str             # "indoor" | "outdoor"
    label_space: LabelSpace
    points_min: int
    points_max: int
    seed: int
    cell_size: float
    num_scenes: int = 30
    # room domain
    room_min: float = 4.0
    room_max: float = 7.0
    height_min: float = 2.6
    height_max: float = 3.2
    num_boxes: int = 4
    box_footprint: tuple[float, float] = (0.5, 1.4)
    box_height: tuple[float, float] = (0.4, 1.1)
    # ring domain
    num_rings: int = 10
    max_range: float = 30.0
    num_poles: int = 6
    num_vehicles: int = 4
    num_walls: int = 2

    def __post_init__(self):
        if self.generator_kind not in ("indoor", "outdoor"):
            raise ConfigError(f"unknown generator kind {self.generator_kind!r}")
        if self.points_min < 1 or self.points_max < self.points_min:
            raise ConfigError("invalid points_per_scene range")
        if self.room_max <= 0 or self.height_max <= 0 or self.max_range <= 0:
            raise ConfigError("degenerate scene extent")


def default_specs(indoor_points=(8000, 16000), outdoor_points=(2000, 6000),
                  num_scenes=30, indoor_cell=0.3, outdoor_cell=1.0,
                  heldout_scenes=10) -> list[DatasetSpec]:
    """The three desk domains: two for training, one held out."""
    return [
        DatasetSpec(name="roomsim", generator_kind="indoor", label_space=INDOOR_SPACE,
                    points_min=indoor_points[0], points_max=indoor_points[1],
                    seed=101, cell_size=indoor_cell, num_scenes=num_scenes),
        DatasetSpec(name="ringsim", generator_kind="outdoor", label_space=OUTDOOR_SPACE,
                    points_min=outdoor_points[0], points_max=outdoor_points[1],
                    seed=202, cell_size=outdoor_cell, num_scenes=num_scenes),
        DatasetSpec(name="roomsim_v2", generator_kind="indoor", label_space=HELDOUT_SPACE,
                    points_min=indoor_points[0], points_max=indoor_points[1],
                    seed=303, cell_size=indoor_cell, num_scenes=heldout_scenes,
                    num_boxes=6, box_footprint=(0.25, 0.6), box_height=(1.2, 2.2)),
    ]


# ---------------------------------------------------------------------------
# helpers


def _apportion(total: int, weights: np.ndarray, floor_one: bool = False) -> np.ndarray:
    """Largest-remainder apportionment of `total` by weight, deterministic."""
    weights = np.asarray(weights, dtype=np.float64)
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    if floor_one:
        counts = np.maximum(counts, 1)
    rest = total - counts.sum()
    if rest > 0:
        order = np.argsort(-(quota - np.floor(quota)), kind="stable")
        counts[order[:rest]] += 1
    elif rest < 0:
        order = np.argsort(quota - np.floor(quota), kind="stable")
        for i in order:
            if rest == 0:
                break
            if counts[i] > (1 if floor_one else 0):
                counts[i] -= 1
                rest += 1
    return counts


def _sample_rect(rng, corner, eu, ev, n):
    """n uniform samples on the parallelogram corner + a*eu + b*ev."""
    a = rng.uniform(size=(n, 1))
    b = rng.uniform(size=(n, 1))
    return np.asarray(corner) + a * np.asarray(eu) + b * np.asarray(ev)


def _colorize(rng, labels, class_names):
    base = np.array([BASE_COLORS[class_names[l]] for l in labels])
    return np.clip(base + rng.normal(0.0, COLOR_NOISE, size=base.shape), 0.0, 1.0)


def _box_faces(corner, size):
    """Five sampled faces of an axis-aligned box (bottom face omitted)."""
    x0, y0, z0 = corner
    sx, sy, sz = size
    return [
        ((x0, y0, z0 + sz), (sx, 0, 0), (0, sy, 0), sx * sy),         # top
        ((x0, y0, z0), (0, sy, 0), (0, 0, sz), sy * sz),              # x = x0
        ((x0 + sx, y0, z0), (0, sy, 0), (0, 0, sz), sy * sz),
        ((x0, y0, z0), (sx, 0, 0), (0, 0, sz), sx * sz),              # y = y0
        ((x0, y0 + sy, z0), (sx, 0, 0), (0, 0, sz), sx * sz),
    ]


# ---------------------------------------------------------------------------
# generators


def gen_indoor(spec: DatasetSpec, scene_seed: int) -> PointCloud:
    """Axis-aligned room: floor, ceiling, 4 walls, plus labelled boxes."""
    rng = np.random.default_rng([spec.seed, scene_seed])
    names = list(spec.label_space.class_names)
    lx = rng.uniform(spec.room_min, spec.room_max)
    ly = rng.uniform(spec.room_min, spec.room_max)
    h = rng.uniform(spec.height_min, spec.height_max)
    total = int(rng.integers(spec.points_min, spec.points_max + 1))

    surfaces = [
        ((0, 0, 0), (lx, 0, 0), (0, ly, 0), lx * ly, names.index("floor")),
        ((0, 0, h), (lx, 0, 0), (0, ly, 0), lx * ly, names.index("ceiling")),
        ((0, 0, 0), (0, ly, 0), (0, 0, h), ly * h, names.index("wall")),
        ((lx, 0, 0), (0, ly, 0), (0, 0, h), ly * h, names.index("wall")),
        ((0, 0, 0), (lx, 0, 0), (0, 0, h), lx * h, names.index("wall")),
        ((0, ly, 0), (lx, 0, 0), (0, 0, h), lx * h, names.index("wall")),
    ]
    # the last two classes in a room-style space are the two box kinds
    box_classes = [names.index(names[3]), names.index(names[4])]
    footprints = []
    for b in range(spec.num_boxes):
        w = rng.uniform(*spec.box_footprint)
        d = rng.uniform(*spec.box_footprint)
        bh = min(rng.uniform(*spec.box_height), h - 0.2)
        x0 = rng.uniform(0.3, max(0.4, lx - w - 0.3))
        y0 = rng.uniform(0.3, max(0.4, ly - d - 0.3))
        footprints.append((x0, x0 + w, y0, y0 + d))
        label = box_classes[b % 2]
        for corner, eu, ev, area in _box_faces((x0, y0, 0.0), (w, d, bh)):
            surfaces.append((corner, eu, ev, area, label))

    counts = _apportion(total, np.array([s[3] for s in surfaces]), floor_one=True)
    coords, labels = [], []
    floor_id = names.index("floor")
    for (corner, eu, ev, _, label), n in zip(surfaces, counts):
        pts = _sample_rect(rng, corner, eu, ev, n)
        if label == floor_id and footprints:
            # furniture occludes the floor beneath it: resample shadowed points
            for _ in range(64):
                shadowed = np.zeros(len(pts), dtype=bool)
                for fx0, fx1, fy0, fy1 in footprints:
                    shadowed |= ((pts[:, 0] >= fx0) & (pts[:, 0] <= fx1)
                                 & (pts[:, 1] >= fy0) & (pts[:, 1] <= fy1))
                if not shadowed.any():
                    break
                pts[shadowed] = _sample_rect(rng, corner, eu, ev,
                                             int(shadowed.sum()))
        coords.append(pts)
        labels.append(np.full(n, label, dtype=np.int64))
    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    feats = _colorize(rng, labels, names)
    return PointCloud(coords, feats, labels, dataset_tag=spec.name)


def ring_radii(spec: DatasetSpec) -> np.ndarray:
    """Scan-ring radii, strictly increasing with ring index."""
    i = np.arange(1, spec.num_rings + 1, dtype=np.float64)
    return spec.max_range * i / spec.num_rings


def expected_ring_counts(total: int, radii: np.ndarray) -> np.ndarray:
    """The ground density law: points per ring proportional to 1/radius."""
    return _apportion(total, 1.0 / np.asarray(radii, dtype=np.float64))


def gen_outdoor(spec: DatasetSpec, scene_seed: int) -> PointCloud:
    """Concentric scan rings plus poles, vehicle boxes and wall segments."""
    rng = np.random.default_rng([spec.seed, scene_seed])
    names = list(spec.label_space.class_names)
    total = int(rng.integers(spec.points_min, spec.points_max + 1))

    n_objects = spec.num_poles + spec.num_vehicles + spec.num_walls
    ground_share = 0.7 if n_objects else 1.0
    n_ground = int(round(total * ground_share))
    radii = ring_radii(spec)
    per_ring = expected_ring_counts(n_ground, radii)

    coords, labels = [], []
    g = names.index("ground")
    for r, n in zip(radii, per_ring):
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        z = rng.normal(0.0, 0.02, size=n)
        coords.append(np.column_stack([r * np.cos(theta), r * np.sin(theta), z]))
        labels.append(np.full(n, g, dtype=np.int64))

    rest = total - n_ground
    if n_objects:
        shares = np.array([spec.num_poles * 1.0, spec.num_vehicles * 2.0,
                           spec.num_walls * 2.5])
        shares[shares == 0] = 1e-9
        pole_pts, veh_pts, wall_pts = _apportion(rest, shares)

        if spec.num_poles:
            per_pole = _apportion(pole_pts, np.ones(spec.num_poles), floor_one=True)
            for n in per_pole:
                r = rng.uniform(3.0, 0.8 * spec.max_range)
                th = rng.uniform(0.0, 2 * np.pi)
                height = rng.uniform(3.0, 6.0)
                z = rng.uniform(0.0, height, size=n)
                xy = np.array([r * np.cos(th), r * np.sin(th)])
                jitter = rng.normal(0.0, 0.02, size=(n, 2))
                coords.append(np.column_stack([xy[0] + jitter[:, 0],
                                               xy[1] + jitter[:, 1], z]))
                labels.append(np.full(n, names.index("pole"), dtype=np.int64))

        if spec.num_vehicles:
            per_veh = _apportion(veh_pts, np.ones(spec.num_vehicles), floor_one=True)
            for n in per_veh:
                r = rng.uniform(4.0, 0.7 * spec.max_range)
                th = rng.uniform(0.0, 2 * np.pi)
                cx, cy = r * np.cos(th), r * np.sin(th)
                faces = _box_faces((cx - 2.1, cy - 0.9, 0.0), (4.2, 1.8, 1.5))
                per_face = _apportion(n, np.array([f[3] for f in faces]))
                for (corner, eu, ev, _), m in zip(faces, per_face):
                    coords.append(_sample_rect(rng, corner, eu, ev, m))
                    labels.append(np.full(m, names.index("vehicle"), dtype=np.int64))

        if spec.num_walls:
            per_wall = _apportion(wall_pts, np.ones(spec.num_walls), floor_one=True)
            for n in per_wall:
                r = rng.uniform(6.0, 0.8 * spec.max_range)
                th = rng.uniform(0.0, 2 * np.pi)
                cx, cy = r * np.cos(th), r * np.sin(th)
                length = rng.uniform(6.0, 12.0)
                height = rng.uniform(2.5, 4.0)
                # facade tangent to the viewing direction
                tang = np.array([-np.sin(th), np.cos(th), 0.0]) * length
                corner = np.array([cx, cy, 0.0]) - tang / 2
                coords.append(_sample_rect(rng, corner, tang, (0, 0, height), n))
                labels.append(np.full(n, names.index("wall"), dtype=np.int64))

    coords = np.concatenate(coords)
    labels = np.concatenate(labels)
    feats = _colorize(rng, labels, names)
    return PointCloud(coords, feats, labels, dataset_tag=spec.name)


def generate_scene(spec: DatasetSpec, scene_seed: int) -> PointCloud:
    if spec.generator_kind == "indoor":
        return gen_indoor(spec, scene_seed)
    return gen_outdoor(spec, scene_seed)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    rotate: bool = True
    scale_min: float = 0.9
    scale_max: float = 1.1
    jitter_sigma: float = 0.005


def augment(cloud: PointCloud, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> PointCloud:
    """Random z-rotation, uniform scale and coordinate jitter about the centroid."""
    if not cfg.enabled:
        return cloud
    coords = cloud.coords
    center = coords.mean(axis=0)
    out = coords - center
    if cfg.rotate:
        a = rng.uniform(0.0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        out = out @ rot.T
    out = out * rng.uniform(cfg.scale_min, cfg.scale_max) + center
    if cfg.jitter_sigma > 0:
        out = out + rng.normal(0.0, cfg.jitter_sigma, size=out.shape)
    return PointCloud(out, cloud.feats, cloud.labels, cloud.dataset_tag)


# ---------------------------------------------------------------------------
# registry


class Registry:
    """Deterministic scene store with a fixed train/val split per dataset."""

    def __init__(self, specs: list[DatasetSpec]):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dataset names in {names}")
        self.specs = {s.name: s for s in specs}
        self._cache: dict[tuple[str, int], PointCloud] = {}

    @property
    def names(self) -> list[str]:
        return list(self.specs)

    def label_space(self, name: str) -> LabelSpace:
        return self.specs[name].label_space

    def scene(self, name: str, scene_seed: int) -> PointCloud:
        key = (name, scene_seed)
        if key not in self._cache:
            self._cache[key] = generate_scene(self.specs[name], scene_seed)
        return self._cache[key]

    def train_seeds(self, name: str) -> list[int]:
        return [s for s in range(self.specs[name].num_scenes) if s % 10 != 0]

    def val_seeds(self, name: str) -> list[int]:
        return [s for s in range(self.specs[name].num_scenes) if s % 10 == 0]


# ---------------------------------------------------------------------------
# scene dumps


def save_scene(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{cloud.num_points} {cloud.feats.shape[1]}\n")
        for p, f, l in zip(cloud.coords, cloud.feats, cloud.labels):
            row = " ".join(f"{v:.17g}" for v in p) + " " \
                + " ".join(f"{v:.17g}" for v in f) + f" {int(l)}"
            fh.write(row + "\n")


def load_scene(path, dataset_tag: str | None = None) -> PointCloud:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise FormatError(f"bad scene header in {path}")
        m, f = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (m, 3 + f + 1):
        raise FormatError(f"scene body {data.shape} does not match header ({m}, {3 + f + 1})")
    return PointCloud(data[:, :3], data[:, 3:3 + f],
                      data[:, -1].astype(np.int64), dataset_tag=dataset_tag)
