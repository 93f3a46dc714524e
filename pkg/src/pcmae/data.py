"""Synthetic shape generation, XYZ file I/O, manifests, and episode sampling.

The synthetic corpus is six parametric surface families sampled uniformly
by area, jittered, and normalized to the unit sphere.  Files are plain
text (one ``x y z`` per line) indexed by a manifest of
``relative/path.xyz,<label>,<train|test>`` lines.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError, UsageError
from .geometry import PointCloud, normalize_unit_sphere

FAMILIES = ("sphere", "box", "cylinder", "torus", "cone", "plane-cross")


@dataclass
class SyntheticSpec:
    """One synthetic cloud: surface family, point count, jitter, seed."""

    family: str
    points: int = 1024
    noise: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise UsageError(f"unknown family {self.family!r}, have {FAMILIES}")
        if self.points < 1:
            raise UsageError(f"points must be >= 1, got {self.points}")
        if self.noise < 0:
            raise UsageError(f"noise must be >= 0, got {self.noise}")


def _sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    # Antipodal pairs: for even n the sample centroid is exactly zero, so
    # normalization keeps every point at radius 1.
    half = (n + 1) // 2
    v = rng.standard_normal((half, 3))
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    while (norms < 1e-12).any():
        bad = norms[:, 0] < 1e-12
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    v = v / norms
    return np.concatenate([v, -v])[:n]


def _sample_box(n: int, rng: np.random.Generator) -> np.ndarray:
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        others = [j for j in range(3) if j != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _sample_cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    # Radius 1, z in [-1, 1], closed by two caps; parts weighted by area
    # (lateral 4*pi, caps pi each).
    pts = np.empty((n, 3))
    part = rng.uniform(0.0, 6.0, size=n)  # of total area 6*pi
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    for i in range(n):
        if part[i] < 4.0:
            pts[i] = (np.cos(theta[i]), np.sin(theta[i]), 2.0 * u[i] - 1.0)
        else:
            r = np.sqrt(u[i])
            z = 1.0 if part[i] < 5.0 else -1.0
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), z)
    return pts


def _sample_torus(n: int, rng: np.random.Generator) -> np.ndarray:
    # Major radius 1, minor 0.4; rejection keeps the area measure uniform.
    big_r, small_r = 1.0, 0.4
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 8
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
        accept = rng.uniform(0.0, 1.0, size=m) < (
            (big_r + small_r * np.cos(phi)) / (big_r + small_r)
        )
        theta, phi = theta[accept], phi[accept]
        take = min(len(theta), n - filled)
        ring = big_r + small_r * np.cos(phi[:take])
        out[filled : filled + take, 0] = ring * np.cos(theta[:take])
        out[filled : filled + take, 1] = ring * np.sin(theta[:take])
        out[filled : filled + take, 2] = small_r * np.sin(phi[:take])
        filled += take
    return out


def _sample_cone(n: int, rng: np.random.Generator) -> np.ndarray:
    # Apex (0,0,1), base circle radius 1 at z=-1, closed base; slant area
    # pi*sqrt(5) vs base area pi.
    slant = np.sqrt(5.0)
    p_lateral = slant / (slant + 1.0)
    pts = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    lateral = rng.uniform(0.0, 1.0, size=n) < p_lateral
    for i in range(n):
        r = np.sqrt(u[i])
        if lateral[i]:
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), 1.0 - 2.0 * r)
        else:
            pts[i] = (r * np.cos(theta[i]), r * np.sin(theta[i]), -1.0)
    return pts


def _sample_plane_cross(n: int, rng: np.random.Generator) -> np.ndarray:
    # Two unit squares crossing at a right angle along the y axis.
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    first = rng.uniform(0.0, 1.0, size=n) < 0.5
    pts = np.empty((n, 3))
    pts[first] = np.stack(
        [uv[first, 0], uv[first, 1], np.zeros(int(first.sum()))], axis=1)
    rest = ~first
    pts[rest] = np.stack(
        [np.zeros(int(rest.sum())), uv[rest, 0], uv[rest, 1]], axis=1)
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
    "plane-cross": _sample_plane_cross,
}


def gen_synthetic(spec: SyntheticSpec) -> PointCloud:
    """Uniform surface sample + Gaussian jitter, normalized to the unit sphere."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    pts = _SAMPLERS[spec.family](spec.points, rng)
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
    return PointCloud(
        points=normalize_unit_sphere(pts), label=FAMILIES.index(spec.family))


# -- file I/O -------------------------------------------------------------


def load_xyz(path, label: int | None = None) -> PointCloud:
    """Parse whitespace-separated x y z lines; '#' comments and blanks skip."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no points found")
    return PointCloud(points=np.asarray(rows, dtype=np.float64), label=label)


def save_xyz(path, pc: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in pc.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


# -- manifests ------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str  # relative to the manifest root
    label: int
    split: str  # train | test


@dataclass
class DatasetManifest:
    """Index of a dataset directory: entries plus class names."""

    root: str
    entries: list
    classes: list

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: ManifestEntry) -> PointCloud:
        if not hasattr(self, "_cache"):
            self._cache = {}
        if entry.path not in self._cache:
            self._cache[entry.path] = load_xyz(
                os.path.join(self.root, entry.path), label=entry.label)
        return self._cache[entry.path]

    def load_split(self, name: str) -> list:
        return [self.load(e) for e in self.split(name)]


def _validate_manifest(manifest: DatasetManifest, check_files: bool) -> None:
    labels = sorted({e.label for e in manifest.entries})
    if labels != list(range(len(labels))):
        raise ParseError(
            f"labels must be dense in [0, n), got {labels} in {manifest.root}")
    if manifest.classes and len(manifest.classes) != len(labels):
        raise ParseError(
            f"{len(manifest.classes)} class names for {len(labels)} labels")
    if check_files:
        for e in manifest.entries:
            full = os.path.join(manifest.root, e.path)
            if not os.path.isfile(full):
                raise ParseError(f"manifest names a missing file: {full}")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read `relative/path.xyz,<label>,<train|test>` lines."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if len(fields) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected path,label,split, got {text!r}")
            rel, label_s, split = (f.strip() for f in fields)
            if split not in ("train", "test"):
                raise ParseError(
                    f"{path}:{lineno}: split must be train or test, got {split!r}")
            try:
                label = int(label_s)
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: label must be an integer, got {label_s!r}"
                ) from None
            entries.append(ManifestEntry(path=rel, label=label, split=split))
    if not entries:
        raise ParseError(f"{path}: empty manifest")
    classes_file = os.path.join(root, "classes.txt")
    classes = []
    if os.path.isfile(classes_file):
        with open(classes_file, "r", encoding="utf-8") as fh:
            classes = [ln.strip() for ln in fh if ln.strip()]
    if not classes:
        classes = [f"class{i}" for i in sorted({e.label for e in entries})]
    manifest = DatasetManifest(root=root, entries=entries, classes=classes)
    _validate_manifest(manifest, check_files)
    return manifest


def generate_dataset(out_dir, num_classes: int, per_class: int, points: int,
                     noise: float, seed: int,
                     train_fraction: float = 0.8) -> DatasetManifest:
    """Write one XYZ file per cloud plus manifest.txt and classes.txt."""
    if not 1 <= num_classes <= len(FAMILIES):
        raise UsageError(
            f"num_classes must lie in [1, {len(FAMILIES)}], got {num_classes}")
    if per_class < 1:
        raise UsageError(f"per_class must be >= 1, got {per_class}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    n_train = int(round(train_fraction * per_class))
    for label in range(num_classes):
        family = FAMILIES[label]
        for i in range(per_class):
            spec = SyntheticSpec(
                family=family, points=points, noise=noise,
                seed=seed * 1_000_003 + label * 10_007 + i)
            pc = gen_synthetic(spec)
            rel = f"{family}_{i:04d}.xyz"
            save_xyz(os.path.join(out_dir, rel), pc)
            split = "train" if i < n_train else "test"
            entries.append(ManifestEntry(path=rel, label=label, split=split))
    with open(os.path.join(out_dir, "classes.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(FAMILIES[label] + "\n" for label in range(num_classes)))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.path},{e.label},{e.split}\n")
    manifest = DatasetManifest(
        root=os.path.abspath(out_dir), entries=entries,
        classes=list(FAMILIES[:num_classes]))
    _validate_manifest(manifest, check_files=True)
    return manifest


# -- sampling and augmentation --------------------------------------------


def sample_points(pc: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform subsample; falls back to replacement (and flags it) when n > N."""
    if n < 1:
        raise UsageError(f"sample size must be >= 1, got {n}")
    if pc.size >= n:
        idx = rng.choice(pc.size, size=n, replace=False)
        return PointCloud(points=pc.points[idx], label=pc.label)
    idx = rng.choice(pc.size, size=n, replace=True)
    return PointCloud(points=pc.points[idx], label=pc.label,
                      sampled_with_replacement=True)


AUGMENTATIONS = ("none", "rotate", "scale_translate")


def augment(pc: PointCloud, kind: str, rng: np.random.Generator) -> PointCloud:
    """Apply one configured transform; 'rotate' spins about the vertical axis."""
    if kind == "none":
        return pc
    if kind == "rotate":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return PointCloud(points=pc.points @ rot.T, label=pc.label)
    if kind == "scale_translate":
        factor = rng.uniform(0.8, 1.2)
        shift = rng.uniform(-0.1, 0.1, size=3)
        return PointCloud(points=pc.points * factor + shift, label=pc.label)
    raise UsageError(f"unknown augmentation {kind!r}, have {AUGMENTATIONS}")


QUERY_PER_CLASS = 20


def few_shot_episode(manifest: DatasetManifest, n_way: int, m_shot: int,
                     rng: np.random.Generator) -> tuple:
    """Sample one n-way m-shot episode.

    Returns (support, query, class_ids): support holds m_shot training
    clouds per sampled class, query holds 20 test clouds per class, and
    labels are remapped to the episode range [0, n_way).
    """
    if n_way > manifest.num_classes:
        raise UsageError(
            f"n_way {n_way} exceeds {manifest.num_classes} classes")
    class_ids = sorted(rng.choice(manifest.num_classes, size=n_way,
                                  replace=False).tolist())
    support, query = [], []
    for episode_label, cls in enumerate(class_ids):
        train_items = [e for e in manifest.split("train") if e.label == cls]
        test_items = [e for e in manifest.split("test") if e.label == cls]
        name = manifest.classes[cls]
        if len(train_items) < m_shot:
            raise UsageError(
                f"class {name!r} has {len(train_items)} train items, "
                f"needs {m_shot}")
        if len(test_items) < QUERY_PER_CLASS:
            raise UsageError(
                f"class {name!r} has {len(test_items)} test items, "
                f"needs {QUERY_PER_CLASS}")
        pick_s = rng.choice(len(train_items), size=m_shot, replace=False)
        pick_q = rng.choice(len(test_items), size=QUERY_PER_CLASS, replace=False)
        for i in pick_s:
            support.append(replace(manifest.load(train_items[i]),
                                   label=episode_label))
        for i in pick_q:
            query.append(replace(manifest.load(test_items[i]),
                                 label=episode_label))
    return support, query, class_ids
