"""Toy data regimes: a simplex Gaussian mixture with saddle and outlier
companion mixtures, a two-Gaussian separation task, and a branching fractal
manifold with labeled samples."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .rng import generator

REGIONS = ("mode", "saddle", "outlier")


@dataclass(frozen=True)
class GmmSpec:
    """Exact mixture-of-Gaussians parameters.

    ``covariances`` is either shape (k,) of per-component isotropic variances
    or shape (k, n, n) of full SPD matrices. ``labels`` gives one class id per
    component (component index by default) and doubles as the conditioning id
    for class-conditional training.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.covariances, dtype=float)
        if m.ndim != 2:
            raise ValueError("means must be a (k, n) array")
        k, n = m.shape
        if w.shape != (k,):
            raise ValueError(f"weights shape {w.shape} != ({k},)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        if c.shape == (k,):
            if np.any(c <= 0):
                raise ValueError("isotropic variances must be strictly positive")
        elif c.shape == (k, n, n):
            asym = np.abs(c - np.swapaxes(c, 1, 2)).max()
            if asym > 1e-12:
                raise ValueError(f"covariances asymmetric by {asym:g} (> 1e-12)")
            for i in range(k):
                if np.linalg.eigvalsh(c[i]).min() <= 0:
                    raise ValueError(f"covariance {i} is not positive definite")
        else:
            raise ValueError(f"covariances shape {c.shape} incompatible with {k} components in {n}-d")
        lab = self.labels
        lab = np.arange(k) if lab is None else np.asarray(lab, dtype=int)
        if lab.shape != (k,):
            raise ValueError("labels must have one entry per component")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariances", c)
        object.__setattr__(self, "labels", lab)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def isotropic(self) -> bool:
        return self.covariances.ndim == 1

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True)
class FractalSpec:
    """Binary-tree fractal: trunk of length 1 plus rotated, shrunken children."""

    depth: int
    branch_angle: float
    shrink_ratio: float
    jitter_sigma: float
    n_classes: int = 2

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise ValueError("depth must be an integer >= 1")
        if not (0.0 < self.shrink_ratio < 1.0):
            raise ValueError("shrink_ratio must lie strictly inside (0, 1)")
        if not np.isfinite(self.jitter_sigma) or self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be finite and >= 0")
        if not np.isfinite(self.branch_angle):
            raise ValueError("branch_angle must be finite")
        if self.n_classes not in (1, 2):
            raise ValueError("n_classes must be 1 (unconditional) or 2 (one per trunk child)")
        if self.depth == 1 and self.n_classes != 1:
            raise ValueError("a trunk-only fractal has a single class")


class LabeledPointSet:
    """N points with class labels and optional region tags."""

    def __init__(self, points, labels, region_tag=None):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError("points must be a (N, n) array")
        self.labels = np.asarray(labels, dtype=int)
        n = self.points.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels must have length N")
        if region_tag is not None:
            region_tag = list(region_tag)
            if len(region_tag) != n:
                raise ValueError("region tags must have length N")
        self.region_tag = region_tag

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path) -> None:
        """Write `x0,...,x{n-1},label,region` rows, floats at 9 significant digits."""
        n = self.dim
        header = ",".join([f"x{i}" for i in range(n)] + ["label", "region"])
        lines = [header]
        regions = self.region_tag if self.region_tag is not None else [""] * len(self)
        for row, lab, reg in zip(self.points, self.labels, regions):
            coords = ",".join(f"{v:.9g}" for v in row)
            lines.append(f"{coords},{lab},{reg}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "LabeledPointSet":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[-2:] != ["label", "region"]:
                raise ValueError(f"{path}: not a point-set CSV (header {header})")
            n = len(header) - 2
            pts, labs, regs = [], [], []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                pts.append([float(v) for v in parts[:n]])
                labs.append(int(parts[n]))
                regs.append(parts[n + 1])
        region = regs if any(regs) else None
        return cls(np.asarray(pts, dtype=float).reshape(len(labs), n), labs, region)


def make_simplex_gmm(n_components: int, ambient_dim: int, scale: float) -> GmmSpec:
    """Uniform mixture at the first ``n_components`` standard basis vectors.

    Every pair of means is exactly sqrt(2) apart; components are isotropic
    with variance scale**2.
    """
    if n_components > ambient_dim:
        raise ValueError(
            f"simplex needs n_components <= ambient_dim, got {n_components} > {ambient_dim}"
        )
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if scale <= 0:
        raise ValueError("scale must be positive")
    means = np.zeros((n_components, ambient_dim))
    means[np.arange(n_components), np.arange(n_components)] = 1.0
    k = n_components
    return GmmSpec(np.full(k, 1.0 / k), means, np.full(k, scale * scale), np.arange(k))


def _uniform_isotropic_variance(base: GmmSpec) -> float:
    if not base.isotropic or not np.allclose(base.covariances, base.covariances[0]):
        raise ValueError("expected an isotropic mixture with a single shared scale")
    return float(base.covariances[0])


def make_saddle_gmm(base: GmmSpec) -> GmmSpec:
    """One component per unordered mean pair, centered at the edge midpoint."""
    k = base.n_components
    if k < 2:
        raise ValueError("need at least 2 base components to bisect edges")
    var = _uniform_isotropic_variance(base)
    pairs = list(itertools.combinations(range(k), 2))
    means = np.stack([(base.means[i] + base.means[j]) / 2.0 for i, j in pairs])
    m = len(pairs)
    return GmmSpec(np.full(m, 1.0 / m), means, np.full(m, var), np.arange(m))


def make_outlier_gmm(base: GmmSpec) -> GmmSpec:
    """Same structure at doubled means: a twice-as-large companion mixture."""
    var = _uniform_isotropic_variance(base)
    k = base.n_components
    return GmmSpec(np.full(k, 1.0 / k), 2.0 * base.means, np.full(k, var), base.labels.copy())


def make_two_gaussian(separation: float, base_variance: float, ambient_dim: int) -> GmmSpec:
    """Two equal, isotropic components at +-(separation/2) e1, labeled 0 and 1."""
    if separation <= 0:
        raise ValueError("separation must be positive")
    if base_variance <= 0:
        raise ValueError("base_variance must be positive")
    if ambient_dim < 1:
        raise ValueError("ambient_dim must be >= 1")
    means = np.zeros((2, ambient_dim))
    means[0, 0] = -separation / 2.0
    means[1, 0] = +separation / 2.0
    return GmmSpec(np.array([0.5, 0.5]), means, np.full(2, base_variance), np.array([0, 1]))


class Fractal:
    """Deterministic 2D binary-tree fractal with a length-weighted sampler.

    Trunk runs from the origin to (0, 1); every segment spawns two children
    rotated by +-branch_angle and scaled by shrink_ratio, for ``depth`` levels
    (2**depth - 1 segments total). Segment class is the index of its level-1
    ancestor: 0 for the +angle child of the trunk, 1 for the -angle child.
    Trunk samples have no level-1 ancestor and get a fair coin flip when two
    classes are in play.
    """

    def __init__(self, spec: FractalSpec):
        self.spec = spec
        starts = [np.zeros(2)]
        ends = [np.array([0.0, 1.0])]
        dirs = [np.array([0.0, 1.0])]
        lengths = [1.0]
        labels = [-1]  # trunk: resolved at sampling time
        level_start = 0
        for level in range(1, spec.depth):
            next_start = len(starts)
            for i in range(level_start, next_start):
                for j, sign in enumerate((+1.0, -1.0)):
                    a = sign * spec.branch_angle
                    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
                    d = rot @ dirs[i]
                    length = lengths[i] * spec.shrink_ratio
                    starts.append(ends[i])
                    ends.append(ends[i] + length * d)
                    dirs.append(d)
                    lengths.append(length)
                    labels.append(j if level == 1 else labels[i])
            level_start = next_start
        self.starts = np.stack(starts)
        self.ends = np.stack(ends)
        self.lengths = np.asarray(lengths)
        self.seg_labels = np.asarray(labels)

    @property
    def n_segments(self) -> int:
        return len(self.lengths)

    def sample(self, n: int, seed: int) -> LabeledPointSet:
        """Uniform point on a length-weighted segment plus isotropic jitter."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = generator(seed)
        p = self.lengths / self.lengths.sum()
        idx = rng.choice(self.n_segments, size=n, p=p)
        t = rng.random(n)
        pts = self.starts[idx] + t[:, None] * (self.ends[idx] - self.starts[idx])
        if self.spec.jitter_sigma > 0:
            pts = pts + self.spec.jitter_sigma * rng.standard_normal((n, 2))
        labels = self.seg_labels[idx].copy()
        trunk = labels < 0
        if trunk.any():
            if self.spec.n_classes == 2:
                labels[trunk] = rng.integers(0, 2, size=int(trunk.sum()))
            else:
                labels[trunk] = 0
        if self.spec.n_classes == 1:
            labels[:] = 0
        return LabeledPointSet(pts, labels)


def make_fractal(spec: FractalSpec) -> Fractal:
    return Fractal(spec)


def sample_gmm(spec: GmmSpec, n: int, seed: int) -> LabeledPointSet:
    """Ancestral sampling: component by weight, then the component Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = generator(seed)
    comps = rng.choice(spec.n_components, size=n, p=spec.weights)
    eps = rng.standard_normal((n, spec.dim))
    if spec.isotropic:
        pts = spec.means[comps] + eps * np.sqrt(spec.covariances[comps])[:, None]
    else:
        pts = np.empty((n, spec.dim))
        for j in range(spec.n_components):
            rows = comps == j
            if rows.any():
                chol = np.linalg.cholesky(spec.covariances[j])
                pts[rows] = spec.means[j] + eps[rows] @ chol.T
    return LabeledPointSet(pts, spec.labels[comps])
