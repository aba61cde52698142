"""Point-cloud I/O, synthetic labeled shapes, augmentation, and sampling.

Clouds are position+normal arrays with either a class label or per-point
part labels. The text format is one point per line, ``x y z nx ny nz`` with
an optional trailing integer part id. The synthetic generator produces four
shape classes (sphere, cube, cylinder, torus) with analytic normals, a
random rigid rotation per instance, and unit-sphere normalization, sized so
a small model separates them on a CPU in minutes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import pointops

CLASS_NAMES = ("sphere", "cube", "cylinder", "torus")

SCALE_RANGE = (0.66, 1.5)
SHIFT_RANGE = (-0.2, 0.2)


class DataFormatError(ValueError):
    """A point file or manifest that does not parse."""


@dataclass
class PointCloud:
    """Positions and unit normals with an optional class or part labeling.

    Attributes:
        positions: (n, 3) float32.
        normals: (n, 3) float32, rows unit length within 1e-4.
        label: class id for classification sets, or None.
        parts: (n,) int64 per-point part ids for segmentation sets, or None.
    """

    positions: np.ndarray
    normals: np.ndarray
    label: int | None = None
    parts: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        self.normals = np.asarray(self.normals, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DataFormatError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.normals.shape != self.positions.shape:
            raise DataFormatError(
                f"normals shape {self.normals.shape} != positions shape {self.positions.shape}"
            )
        if self.positions.shape[0] < 1:
            raise DataFormatError("a cloud needs at least one point")
        lens = np.linalg.norm(self.normals.astype(np.float64), axis=1)
        if np.any(np.abs(lens - 1.0) > 1e-4):
            worst = float(np.abs(lens - 1.0).max())
            raise DataFormatError(f"normals must be unit length within 1e-4 (off by {worst:.2e})")
        if self.parts is not None:
            self.parts = np.asarray(self.parts, dtype=np.int64)
            if self.parts.shape != (self.positions.shape[0],):
                raise DataFormatError(
                    f"parts length {self.parts.shape} != point count {self.positions.shape[0]}"
                )

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.positions.copy(),
            self.normals.copy(),
            self.label,
            None if self.parts is None else self.parts.copy(),
        )


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return v / n


# ---------------------------------------------------------------------------
# text I/O


def read_xyzn(path: str) -> PointCloud:
    """Parse an ``x y z nx ny nz [part]`` text file.

    Raises:
        DataFormatError: empty file, malformed line (reported with its line
            number), or mixed 6/7-column rows.
    """
    rows = []
    parts = []
    n_cols = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            fields = text.split()
            if len(fields) not in (6, 7):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected 6 or 7 columns, got {len(fields)}"
                )
            if n_cols is None:
                n_cols = len(fields)
            elif len(fields) != n_cols:
                raise DataFormatError(
                    f"{path}: line {lineno}: inconsistent column count "
                    f"({len(fields)} after {n_cols})"
                )
            try:
                rows.append([float(v) for v in fields[:6]])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if n_cols == 7:
                try:
                    parts.append(int(fields[6]))
                except ValueError as exc:
                    raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no points")
    arr = np.array(rows, dtype=np.float32)
    part_arr = np.array(parts, dtype=np.int64) if n_cols == 7 else None
    return PointCloud(arr[:, :3], arr[:, 3:], parts=part_arr)


def write_xyzn(path: str, cloud: PointCloud) -> None:
    """Write a cloud as text with 6 significant digits per value; part
    labels, when present, go in a 7th integer column."""
    with open(path, "w") as f:
        for i in range(cloud.n_points):
            vals = " ".join(
                "%.6g" % v for v in (*cloud.positions[i], *cloud.normals[i])
            )
            if cloud.parts is not None:
                vals += f" {int(cloud.parts[i])}"
            f.write(vals + "\n")


# ---------------------------------------------------------------------------
# synthetic shapes


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (uniform quaternion construction).

    Draw order is pinned: one uniform triple per call.
    """
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    t2, t3 = 2.0 * math.pi * u2, 2.0 * math.pi * u3
    x, y, z, w = a * math.sin(t2), a * math.cos(t2), b * math.sin(t3), b * math.cos(t3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _sample_sphere(n: int, rng: np.random.Generator):
    # Antithetic pairs keep the sample mean at zero exactly, so unit-sphere
    # normalization leaves positions equal to their normals.
    half = rng.standard_normal(((n + 1) // 2, 3))
    half = _unit_rows(half)
    pts = np.concatenate([half, -half], axis=0)[:n]
    return pts, pts.copy(), None


def _sample_cube(n: int, rng: np.random.Generator):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    axis, sign = face % 3, np.where(face < 3, 1.0, -1.0)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for i in range(3):
        m = axis == i
        others = [j for j in range(3) if j != i]
        pts[m, i] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
        nrm[m, i] = sign[m]
    return pts, nrm, None


def _sample_cylinder(n: int, rng: np.random.Generator):
    r = 0.35 * rng.uniform(0.9, 1.1)
    h = 1.8 * rng.uniform(0.9, 1.1)
    a_lat, a_cap = 2 * math.pi * r * h, math.pi * r * r
    u = rng.random(n)
    theta = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(-h / 2, h / 2, n)
    disk = r * np.sqrt(rng.random(n))
    p_lat = a_lat / (a_lat + 2 * a_cap)
    lateral = u < p_lat
    top = ~lateral & (u < p_lat + (1 - p_lat) / 2)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    c, s = np.cos(theta), np.sin(theta)
    pts[lateral] = np.column_stack([r * c, r * s, z])[lateral]
    nrm[lateral] = np.column_stack([c, s, np.zeros(n)])[lateral]
    for m, zsign in ((top, 1.0), (~lateral & ~top, -1.0)):
        pts[m] = np.column_stack([disk * c, disk * s, np.full(n, zsign * h / 2)])[m]
        nrm[m, 2] = zsign
    return pts, nrm, None


def _sample_torus(n: int, rng: np.random.Generator):
    r = 0.45 * rng.uniform(0.95, 1.05)
    big = 1.0 - r  # major radius; keeps the outer rim at unit distance
    theta = rng.uniform(0.0, 2 * math.pi, n)
    phi = np.empty(n)
    got = 0
    while got < n:  # rejection keeps the sampling uniform per surface area
        cand = rng.uniform(0.0, 2 * math.pi, 2 * (n - got))
        keep = rng.random(2 * (n - got)) < (big + r * np.cos(cand)) / (big + r)
        take = cand[keep][: n - got]
        phi[got : got + take.size] = take
        got += take.size
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    ring = big + r * cp
    pts = np.column_stack([ring * ct, ring * st, r * sp])
    nrm = np.column_stack([cp * ct, cp * st, sp])
    parts = (cp < 0).astype(np.int64)  # inner half of the tube
    return pts, nrm, parts


_SAMPLERS = (_sample_sphere, _sample_cube, _sample_cylinder, _sample_torus)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to unit norm."""
    pts, _, _ = pointops.normalize_points(cloud.positions.astype(np.float64))
    return PointCloud(pts.astype(np.float32), cloud.normals, cloud.label, cloud.parts)


def synth_shapes(
    n_per_class: int,
    n_points: int,
    seed: int,
    variant: str = "classification",
) -> list[PointCloud]:
    """Generate the four-class labeled shape set.

    Each instance is sampled on its canonical surface, rigidly rotated by a
    uniform random rotation, and normalized to the unit sphere. The
    ``"segmentation"`` variant attaches two-part labels: spheres by
    hemisphere (z >= 0 in the final frame), tori by inner/outer tube half;
    cubes and cylinders get a single part. Clouds are ordered class-major:
    all spheres, then cubes, cylinders, tori.

    Args:
        n_per_class: instances per class, >= 1.
        n_points: points per cloud, >= 64.
        seed: generator seed; the full dataset is bitwise-reproducible.
        variant: "classification" or "segmentation".
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if n_points < 64:
        raise ValueError(f"n_points must be >= 64, got {n_points}")
    if variant not in ("classification", "segmentation"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(seed)
    out = []
    for label, sampler in enumerate(_SAMPLERS):
        for _ in range(n_per_class):
            pts, nrm, parts = sampler(n_points, rng)
            rot = random_rotation(rng)
            pts = pts @ rot.T
            nrm = nrm @ rot.T
            pts, _, _ = pointops.normalize_points(pts)
            if variant == "segmentation":
                if label == 0:
                    parts = (pts[:, 2] >= 0).astype(np.int64)
                elif parts is None:
                    parts = np.zeros(n_points, dtype=np.int64)
            else:
                parts = None
            out.append(
                PointCloud(pts.astype(np.float32), _unit_rows(nrm).astype(np.float32),
                           label, parts)
            )
    return out


def split_synth(
    clouds: list[PointCloud], n_train_per_class: int
) -> tuple[list[PointCloud], list[PointCloud]]:
    """Split a class-major synthetic set into train/test by per-class prefix."""
    by_label: dict[int, list[PointCloud]] = {}
    for c in clouds:
        by_label.setdefault(c.label, []).append(c)
    train, test = [], []
    for label in sorted(by_label):
        group = by_label[label]
        if n_train_per_class >= len(group):
            raise ValueError(
                f"class {label}: asked for {n_train_per_class} training clouds "
                f"out of {len(group)}"
            )
        train.extend(group[:n_train_per_class])
        test.extend(group[n_train_per_class:])
    return train, test


# ---------------------------------------------------------------------------
# augmentation, sampling, noise


def augment(cloud: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Random anisotropic scale then translation.

    Per-axis scale factors are uniform in [0.66, 1.5] and the translation is
    uniform in [-0.2, 0.2]; draw order is pinned (one uniform triple each).
    Normals transform by the inverse scale and are renormalized.
    """
    s = rng.uniform(*SCALE_RANGE, 3)
    t = rng.uniform(*SHIFT_RANGE, 3)
    pts = cloud.positions * s.astype(np.float32) + t.astype(np.float32)
    nrm = _unit_rows(cloud.normals / s.astype(np.float32))
    return PointCloud(pts, nrm.astype(np.float32), cloud.label, cloud.parts)


def sample_points(
    cloud: PointCloud,
    m: int,
    policy: str = "uniform",
    rng: np.random.Generator | None = None,
) -> PointCloud:
    """Subsample to ``m`` points.

    ``"uniform"`` draws without replacement from ``rng``; ``"fps"`` takes the
    farthest-point-sampling prefix from the lexicographically lowest start,
    which is deterministic. Normals and part labels follow their points.
    """
    n = cloud.n_points
    if m > n:
        raise ValueError(f"cannot sample {m} points from a cloud of {n}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if policy == "uniform":
        if rng is None:
            raise ValueError("uniform sampling needs an rng")
        idx = rng.choice(n, size=m, replace=False)
    elif policy == "fps":
        idx = pointops.farthest_point_sample(cloud.positions.astype(np.float64), m)
    else:
        raise ValueError(f"unknown sampling policy {policy!r}")
    return PointCloud(
        cloud.positions[idx],
        cloud.normals[idx],
        cloud.label,
        None if cloud.parts is None else cloud.parts[idx],
    )


def inject_noise(cloud: PointCloud, n_noise: int, rng: np.random.Generator) -> PointCloud:
    """Append ``n_noise`` outlier points uniform in [-1, 1]^3 with random unit
    normals. Meant for already-normalized clouds so the noise range matches
    the data range. Part labels, when present, extend with part 0."""
    if n_noise < 0:
        raise ValueError(f"n_noise must be >= 0, got {n_noise}")
    if n_noise == 0:
        return cloud.copy()
    pts = rng.uniform(-1.0, 1.0, (n_noise, 3)).astype(np.float32)
    nrm = _unit_rows(rng.standard_normal((n_noise, 3))).astype(np.float32)
    parts = cloud.parts
    if parts is not None:
        parts = np.concatenate([parts, np.zeros(n_noise, dtype=np.int64)])
    return PointCloud(
        np.concatenate([cloud.positions, pts]),
        np.concatenate([cloud.normals, nrm]),
        cloud.label,
        parts,
    )


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetManifest:
    """File-level index of a dataset: class-name table plus train/test
    entries of (path, label)."""

    class_names: list[str]
    train: list[tuple[str, int]] = field(default_factory=list)
    test: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "train": [{"path": p, "label": l} for p, l in self.train],
            "test": [{"path": p, "label": l} for p, l in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            m = cls(
                class_names=list(d["class_names"]),
                train=[(e["path"], int(e["label"])) for e in d["train"]],
                test=[(e["path"], int(e["label"])) for e in d["test"]],
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"bad manifest structure: {exc}") from None
        k = len(m.class_names)
        for path, label in m.train + m.test:
            if not 0 <= label < k:
                raise DataFormatError(f"{path}: label {label} outside class table (size {k})")
        return m

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: {exc}") from None
        return cls.from_dict(d)


def _import_tree(root: str, require_parts: bool) -> DatasetManifest:
    """Scan ``root/<class>/<train|test>/*.xyzn`` into a manifest.

    Class ids follow lexicographic directory order. Every referenced file is
    parsed once so a bad file fails at import time, not mid-training.
    """
    if not os.path.isdir(root):
        raise DataFormatError(f"{root}: not a directory")
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise DataFormatError(f"{root}: no class directories")
    manifest = DatasetManifest(class_names=classes)
    for label, name in enumerate(classes):
        for split in ("train", "test"):
            split_dir = os.path.join(root, name, split)
            if not os.path.isdir(split_dir):
                raise DataFormatError(f"{split_dir}: missing split directory")
            for fname in sorted(os.listdir(split_dir)):
                if not fname.endswith(".xyzn"):
                    continue
                path = os.path.join(split_dir, fname)
                cloud = read_xyzn(path)
                if require_parts and cloud.parts is None:
                    raise DataFormatError(f"{path}: no part-label column")
                getattr(manifest, split).append((path, label))
    if not manifest.train and not manifest.test:
        raise DataFormatError(f"{root}: no .xyzn files under any split")
    return manifest


def import_modelnet(root: str) -> DatasetManifest:
    """Import a classification tree (``root/<class>/<train|test>/*.xyzn``)."""
    return _import_tree(root, require_parts=False)


def import_partnet(root: str) -> DatasetManifest:
    """Import a segmentation tree; every file must carry the 7th part-label
    column."""
    return _import_tree(root, require_parts=True)


def load_entry(entry: tuple[str, int]) -> PointCloud:
    """Read one manifest entry and attach its class label."""
    path, label = entry
    cloud = read_xyzn(path)
    cloud.label = int(label)
    return cloud
