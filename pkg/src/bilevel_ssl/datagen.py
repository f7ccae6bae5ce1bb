"""Procedural point clouds with an open-set cohort structure.

Eight surface families stand in for object classes. Out-of-distribution
cohorts are built from them: cropped scene blocks with floor and clutter
(``W``), the same blocks rotated and drowned in unit-variance noise (``S``),
and crops of perturbed bounding boxes in small scenes (``O``).

Each sample is generated from its own stream ``default_rng([seed, id])`` so
any sample can be rebuilt in isolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import COHORTS, Dataset, Sample

log = logging.getLogger(__name__)

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "planes", "helix", "cross")


@dataclass
class DatasetSpec:
    num_classes: int = 8
    num_points: int = 256
    counts: dict[str, int] = field(default_factory=lambda: {
        "L": 40, "U": 400, "W": 200, "S": 200, "O": 0, "T": 400})
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"only {len(SHAPES)} shape families are available")
        unknown = set(self.counts) - set(COHORTS)
        if unknown:
            raise ValueError(f"unknown cohorts {sorted(unknown)}")
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("cohort counts must be non-negative")
        self.counts = {c: int(self.counts.get(c, 0)) for c in COHORTS}

    def layout(self) -> list[tuple[str, int]]:
        """``(cohort, index within cohort)`` for every sample id, ids in order."""
        return [(c, i) for c in COHORTS for i in range(self.counts[c])]


@dataclass
class Box:
    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("box sizes must be positive")

    @classmethod
    def around(cls, points: np.ndarray) -> "Box":
        lo, hi = points.min(axis=0), points.max(axis=0)
        return cls((lo + hi) / 2, np.maximum(hi - lo, 1e-9))

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all(np.abs(points - self.center) <= self.size / 2, axis=1)


# -- surfaces ----------------------------------------------------------------

def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    pts = rng.uniform(-1, 1, size=(n, 3))
    axis = rng.integers(0, 3, size=n)
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign
    return pts


def _cylinder(rng, n, r=0.6, h=0.9):
    lateral, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + 2 * cap)
    t = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-h, h, size=n), rng.choice([-h, h], size=n))
    return np.stack([rad * np.cos(t), rad * np.sin(t), z], axis=1)


def _cone(rng, n, r=0.8, h=1.6):
    slant = np.hypot(r, h)
    lateral, base = np.pi * r * slant, np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    frac = np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * np.pi, size=n)
    rad = r * frac
    z = np.where(on_side, h / 2 - h * frac, -h / 2)
    return np.stack([rad * np.cos(t), rad * np.sin(t), z], axis=1)


def _torus(rng, n, big=0.7, small=0.28):
    out = np.zeros((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u, v = rng.uniform(0, 2 * np.pi, size=(2, m))
        keep = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
    return out[:n]


def _planes(rng, n, gap=0.45, half=0.9):
    pts = rng.uniform(-half, half, size=(n, 3))
    pts[:, 2] = rng.choice([-gap, gap], size=n)
    return pts


def _helix(rng, n, radius=0.6, turns=2.5, tube=0.04):
    t = rng.uniform(0, 1, size=n)
    ang = 2 * np.pi * turns * t
    pts = np.stack([radius * np.cos(ang), radius * np.sin(ang), -0.9 + 1.8 * t], axis=1)
    return pts + rng.normal(0, tube, size=pts.shape)


def _cross(rng, n, long=0.9, thin=0.12, tall=0.5):
    pts = rng.uniform(-1, 1, size=(n, 3)) * np.array([long, thin, tall])
    swap = rng.uniform(size=n) < 0.5
    pts[swap] = pts[swap][:, [1, 0, 2]]
    return pts


_SURFACES = dict(zip(SHAPES, (_sphere, _cube, _cylinder, _cone, _torus, _planes, _helix, _cross)))


def rotation(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    return centered / scale if scale > 0 else centered


def shape_points(rng: np.random.Generator, class_id: int, n: int,
                 scale_range=(0.8, 1.2), tilt=np.pi / 12, spin=np.pi / 4) -> np.ndarray:
    """Raw (unnormalized) instance of a shape family with pose and scale jitter."""
    if not 0 <= class_id < len(SHAPES):
        raise ValueError(f"unknown class id {class_id}")
    pts = _SURFACES[SHAPES[class_id]](rng, n)
    pts = pts * rng.uniform(*scale_range, size=3)
    angles = (rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt), rng.uniform(-spin, spin))
    return pts @ rotation(angles).T


def make_shape(rng: np.random.Generator, class_id: int, n: int) -> np.ndarray:
    return normalize_unit_sphere(shape_points(rng, class_id, n))


# -- out-of-distribution ------------------------------------------------------

BLOCK = Box(center=(0.0, 0.0, 0.5), size=(1.0, 1.0, 1.0))


def make_block(rng: np.random.Generator, n: int, num_classes: int, n_shapes: int | None = None,
               noise_fraction: float | None = None, floor_fraction: float | None = None,
               clip: Box | None = None, normalize: bool = True) -> tuple[np.ndarray, dict]:
    """A 1x1x1 scene block: partial objects on a floor patch with background clutter."""
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 3))
    if noise_fraction is None:
        noise_fraction = rng.uniform(0.1, 0.3)
    if floor_fraction is None:
        floor_fraction = rng.uniform(0.1, 0.25)
    clip = BLOCK if clip is None else clip
    objects = []
    for _ in range(n_shapes):
        size = rng.uniform(0.25, 0.45)
        obj = normalize_unit_sphere(shape_points(rng, int(rng.integers(num_classes)), 4 * n)) * size
        obj += np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), size])
        objects.append(obj)
    obj_pts = np.vstack(objects)
    inside = obj_pts[clip.contains(obj_pts)]

    n_noise = int(round(noise_fraction * n))
    n_floor = int(round(floor_fraction * n))
    n_obj = n - n_noise - n_floor
    if len(inside) == 0:
        n_floor, n_obj = n_floor + n_obj, 0
    lo, hi = clip.center - clip.size / 2, clip.center + clip.size / 2
    noise = rng.uniform(lo, hi, size=(n_noise, 3))
    floor = rng.uniform(lo, hi, size=(n_floor, 3))
    floor[:, 2] = lo[2]
    picked = inside[rng.choice(len(inside), size=n_obj, replace=len(inside) < n_obj)] if n_obj else np.zeros((0, 3))
    pts = np.vstack([picked, floor, noise])
    info = {"noise": n_noise, "floor": n_floor, "object": n_obj, "shapes": n_shapes}
    return (normalize_unit_sphere(pts) if normalize else pts), info


def strong_transform(points: np.ndarray, rng: np.random.Generator, max_angle: float = np.pi / 2,
                     sigma: float = 1.0) -> np.ndarray:
    """Random per-axis rotation up to ``max_angle`` plus N(0, sigma^2) jitter; no renormalization."""
    rot = rotation(rng.uniform(-max_angle, max_angle, size=3))
    out = points @ rot.T
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return out


def make_weak_ood(seed: int, ids, spec: DatasetSpec) -> list[Sample]:
    out = []
    for sid in ids:
        rng = np.random.default_rng([seed, int(sid)])
        pts, _ = make_block(rng, spec.num_points, spec.num_classes)
        out.append(Sample(int(sid), pts, None, "W"))
    return out


def make_strong_ood(samples: list[Sample], seed: int) -> list[Sample]:
    """Strong OOD from block samples: heavy rotation and unit-variance jitter."""
    out = []
    for s in samples:
        rng = np.random.default_rng([seed, s.id, 1])
        out.append(Sample(s.id, strong_transform(s.points, rng), None, "S"))
    return out


def perturb_box(box: Box, rng: np.random.Generator) -> Box:
    """Shift each axis by +/-[0.5, 1.0] of its size and rescale by 1 + N(0, 0.2^2)."""
    alpha = rng.uniform(0.5, 1.0, size=3) * rng.choice([-1.0, 1.0], size=3)
    factor = np.empty(3)
    for i in range(3):
        f = 1.0 + rng.normal(0.0, 0.2)
        while f <= 0.1:
            f = 1.0 + rng.normal(0.0, 0.2)
        factor[i] = f
    return Box(box.center + alpha * box.size, factor * box.size)


def crop_box(points: np.ndarray, box: Box) -> np.ndarray:
    return points[box.contains(points)]


@dataclass
class Scene:
    points: np.ndarray
    objects: list[np.ndarray]
    boxes: list[Box]


def make_scene(rng: np.random.Generator, n: int, num_classes: int, n_objects: int = 3) -> Scene:
    """Objects on a 3x3 floor, each with a known axis-aligned box."""
    slots = rng.permutation(9)[:n_objects]
    objects, boxes = [], []
    for slot in slots:
        size = rng.uniform(0.3, 0.45)
        obj = normalize_unit_sphere(shape_points(rng, int(rng.integers(num_classes)), n)) * size
        obj += np.array([slot % 3 - 1.0, slot // 3 - 1.0, size]) + rng.uniform(-0.1, 0.1, size=3) * [1, 1, 0]
        objects.append(obj)
        boxes.append(Box.around(obj))
    floor = np.column_stack([rng.uniform(-1.5, 1.5, size=(2 * n, 2)), np.zeros(2 * n)])
    return Scene(np.vstack(objects + [floor]), objects, boxes)


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return points[rng.choice(len(points), size=n, replace=len(points) < n)]


def make_box_ood(scene: Scene, rng: np.random.Generator, n: int, tries: int = 10) -> np.ndarray | None:
    """Crop a perturbed object box out of a scene; ``None`` if every try is empty."""
    box = scene.boxes[int(rng.integers(len(scene.boxes)))]
    for _ in range(tries):
        crop = crop_box(scene.points, perturb_box(box, rng))
        if len(crop):
            return normalize_unit_sphere(resample(crop, n, rng))
    log.warning("perturbed box crop stayed empty after %d tries; skipping", tries)
    return None


def epoch_split(pool_ids, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random halves of the labeled pool; an odd pool gives validation the smaller half."""
    pool = np.asarray(pool_ids)
    if len(pool) < 2:
        raise ValueError("labeled pool needs at least two samples to split")
    perm = rng.permutation(pool)
    n_train = (len(pool) + 1) // 2
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# -- datasets -----------------------------------------------------------------

def generate_sample(spec: DatasetSpec, sample_id: int) -> Sample:
    layout = spec.layout()
    if not 0 <= sample_id < len(layout):
        raise IndexError(f"sample id {sample_id} outside dataset")
    cohort, index = layout[sample_id]
    rng = np.random.default_rng([spec.seed, sample_id])
    n = spec.num_points
    if cohort in ("L", "U", "T"):
        label = index % spec.num_classes
        pts = make_shape(rng, label, n)
        return Sample(sample_id, pts, None if cohort == "U" else label, cohort)
    if cohort == "W":
        return Sample(sample_id, make_block(rng, n, spec.num_classes)[0], None, "W")
    if cohort == "S":
        block, _ = make_block(rng, n, spec.num_classes)
        return Sample(sample_id, strong_transform(block, rng), None, "S")
    # O: retry with fresh scenes until a crop succeeds
    for _ in range(100):
        pts = make_box_ood(make_scene(rng, n, spec.num_classes), rng, n)
        if pts is not None:
            return Sample(sample_id, pts, None, "O")
    raise RuntimeError(f"could not crop a box sample for id {sample_id}")


def generate_dataset(spec: DatasetSpec) -> Dataset:
    samples = [generate_sample(spec, i) for i in range(len(spec.layout()))]
    return Dataset(samples, spec.num_classes, spec.num_points, spec.seed)


def generate_shapes(spec: DatasetSpec, seed: int | None = None) -> list[Sample]:
    """The in-distribution labeled and unlabeled cohorts only."""
    if seed is not None and seed != spec.seed:
        spec = DatasetSpec(spec.num_classes, spec.num_points, dict(spec.counts), seed)
    return [generate_sample(spec, i) for i, (c, _) in enumerate(spec.layout()) if c in ("L", "U")]


def generate_unseen(spec: DatasetSpec, count: int, first_id: int, seed: int | None = None) -> list[Sample]:
    """Unlabeled in-distribution classes drawn from a shifted pose/scale distribution.

    Stretch is stronger and one random half-space of each cloud is thinned,
    loosely mimicking a second source of the same object categories.
    """
    seed = spec.seed if seed is None else seed
    out = []
    for k in range(count):
        sid = first_id + k
        rng = np.random.default_rng([seed, sid, 7])
        pts = shape_points(rng, k % spec.num_classes, 2 * spec.num_points, scale_range=(0.6, 1.4))
        normal = rng.normal(size=3)
        side = pts @ normal > 0
        keep = ~side | (rng.uniform(size=len(pts)) < 0.35)
        pts = normalize_unit_sphere(resample(pts[keep], spec.num_points, rng))
        out.append(Sample(sid, pts, None, "U"))
    return out
