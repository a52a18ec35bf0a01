"""Procedural 3D phantoms: blobs (organs), tubes (vessels) and specks (tumours)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vxf.volume import Volume

SHAPE_KINDS = ("blob", "tube", "speck")

DEFAULT_FRACTIONS = {
    "blob": (0.01, 0.25),
    "tube": (0.002, 0.08),
    "speck": (0.0005, 0.03),
}


class OvercrowdedError(RuntimeError):
    """Shapes could not be placed within the retry budget."""


@dataclass
class ShapeClass:
    kind: str
    intensity: float
    count: int = 1
    fraction: tuple[float, float] | None = None  # allowed labelled-volume fraction

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.fraction is None:
            self.fraction = DEFAULT_FRACTIONS[self.kind]
        self.fraction = tuple(self.fraction)


@dataclass
class PhantomSpec:
    """Label ``k`` (1-based) is drawn by ``classes[k - 1]``; later classes overwrite earlier ones."""

    extents: tuple[int, int, int] = (32, 32, 32)
    classes: list[ShapeClass] = field(default_factory=list)
    background: float = 0.0
    noise_std: float = 0.3
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tube_radius: tuple[float, float] = (1.6, 2.4)
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        if min(self.extents) < 16:
            raise ValueError(f"phantom extents must be >= 16 per axis, got {self.extents}")
        self.classes = [c if isinstance(c, ShapeClass) else ShapeClass(**c) for c in self.classes]

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return {
            "extents": list(self.extents),
            "classes": [{"kind": c.kind, "intensity": c.intensity, "count": c.count,
                         "fraction": list(c.fraction)} for c in self.classes],
            "background": self.background,
            "noise_std": self.noise_std,
            "spacing": list(self.spacing),
            "tube_radius": list(self.tube_radius),
            "seed": self.seed,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


def vessel_tumor_spec(seed: int = 0, extents=(32, 32, 32)) -> PhantomSpec:
    """Organ + vessel + tumour task (K = 4)."""
    return PhantomSpec(extents, [ShapeClass("blob", 1.0), ShapeClass("tube", 2.0),
                                 ShapeClass("speck", 3.0)], seed=seed)


def multi_organ_spec(seed: int = 0, extents=(32, 32, 32)) -> PhantomSpec:
    """Three disjoint organs with distinct intensities (K = 4)."""
    return PhantomSpec(extents, [ShapeClass("blob", 1.0), ShapeClass("blob", 2.0),
                                 ShapeClass("blob", 3.0)], seed=seed)


def _grid(extents):
    return np.stack(np.meshgrid(*[np.arange(n) for n in extents], indexing="ij"), axis=-1).astype(float)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _blob(rng, extents, coords, shrink: float = 1.0) -> np.ndarray:
    """Ellipsoid with a smooth, low-frequency radial wobble."""
    lo = min(extents)
    radii = rng.uniform(0.14, 0.26, size=3) * lo * shrink
    margin = radii.max() + 1
    center = np.array([rng.uniform(margin, n - 1 - margin) for n in extents])
    local = (coords - center) @ _random_rotation(rng)
    r = np.sqrt(((local / radii) ** 2).sum(axis=-1))
    direction = local / (np.linalg.norm(local, axis=-1, keepdims=True) + 1e-9)
    wobble = np.zeros(extents)
    for _ in range(3):
        w = rng.normal(size=3)
        wobble += 0.08 * np.sin(2.0 * direction @ w + rng.uniform(0, 2 * np.pi))
    return r <= 1.0 + wobble


def _tube(rng, extents, coords, radius_range) -> np.ndarray:
    """Random-walk centreline swept by a ball."""
    ext = np.array(extents, dtype=float)
    pos = np.array([rng.uniform(0.25, 0.75) * n for n in extents])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(*radius_range)
    points = []
    for _ in range(int(1.2 * ext.max())):
        points.append(pos.copy())
        direction = direction + 0.25 * rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        pos = pos + direction
        for axis in range(3):
            if pos[axis] < 2 or pos[axis] > ext[axis] - 3:
                direction[axis] *= -1
                pos[axis] = np.clip(pos[axis], 2, ext[axis] - 3)
    mask = np.zeros(extents, dtype=bool)
    for p in points:
        lo = np.maximum(np.floor(p - radius).astype(int), 0)
        hi = np.minimum(np.ceil(p + radius).astype(int) + 1, extents)
        sub = coords[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= ((sub - p) ** 2).sum(-1) <= radius ** 2
    return mask


def _speck(rng, extents, coords, occupied: np.ndarray) -> np.ndarray | None:
    """Sphere of radius 2-5 touching an existing structure from outside."""
    radius = rng.uniform(2.0, 5.0)
    idx = np.argwhere(occupied)
    if len(idx) == 0:
        center = np.array([rng.uniform(radius + 1, n - 2 - radius) for n in extents])
    else:
        anchor = idx[rng.integers(len(idx))].astype(float)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = anchor + direction * radius * 0.8
    if ((center - radius < 0) | (center + radius > np.array(extents) - 1)).any():
        return None
    return ((coords - center) ** 2).sum(-1) <= radius ** 2


def _draw(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray | None:
    """One attempt at placing every shape; ``None`` if some shape found no room."""
    coords = _grid(spec.extents)
    labels = np.zeros(spec.extents, dtype=np.int32)
    blobs = np.zeros(spec.extents, dtype=bool)
    n_blobs = sum(c.count for c in spec.classes if c.kind == "blob")
    shrink = max(n_blobs, 1) ** (-1.0 / 3.0)
    for k, cls in enumerate(spec.classes, start=1):
        for _ in range(cls.count):
            for _attempt in range(spec.max_retries):
                if cls.kind == "blob":
                    shape = _blob(rng, spec.extents, coords, shrink)
                    if (shape & blobs).any():
                        continue
                    blobs |= shape
                elif cls.kind == "tube":
                    shape = _tube(rng, spec.extents, coords, spec.tube_radius)
                else:
                    shape = _speck(rng, spec.extents, coords, labels > 0)
                    if shape is None:
                        continue
                labels[shape] = k
                break
            else:
                return None
    return labels


def _fractions_ok(spec: PhantomSpec, labels: np.ndarray) -> bool:
    total = labels.size
    for k, cls in enumerate(spec.classes, start=1):
        frac = (labels == k).sum() / total
        lo, hi = cls.fraction
        if not lo <= frac <= hi:
            return False
    return True


def generate(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Image and label volumes for ``spec``; deterministic in ``spec.seed``.

    Raises :class:`OvercrowdedError` if no draw within ``max_retries`` places
    every shape and respects every class's volume-fraction bounds.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_retries):
        labels = _draw(spec, rng)
        if labels is not None and _fractions_ok(spec, labels):
            break
    else:
        raise OvercrowdedError(f"could not place every shape within its volume-fraction bounds "
                               f"after {spec.max_retries} attempts")
    levels = np.array([spec.background] + [c.intensity for c in spec.classes])
    image = levels[labels] + rng.normal(0.0, spec.noise_std, size=spec.extents)
    image_vol = Volume(image[..., None].astype(np.float32), spec.spacing)
    label_vol = Volume(labels[..., None].astype(np.float32), spec.spacing)
    return image_vol, label_vol
