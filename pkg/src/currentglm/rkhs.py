"""Gaussian vector-valued RKHS: kernel, evaluation grid, currents, projection.

The matrix-valued kernel is ``K(x, y) = k(x, y) I_3`` with the scalar
Gaussian ``k(x, y) = exp(-|x - y|^2 / bandwidth^2)``.  Because of the
identity factor every vector-valued operator on the grid is the scalar
``N x N`` kernel matrix acting independently on each coordinate axis, and
that is how everything here is computed.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import DataError, SingularSystemError
from .geometry import TriangleDescriptors

# smallest (lambda_min + ridge) / (lambda_max + ridge) accepted by the projection
_SINGULAR_RCOND = 1e-13


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float

    def __post_init__(self):
        bw = float(self.bandwidth)
        if not (bw > 0 and math.isfinite(bw)):
            raise DataError(f"kernel bandwidth must be positive, got {self.bandwidth!r}")
        object.__setattr__(self, "bandwidth", bw)

    def scalar(self, X, Y):
        """Scalar kernel matrix ``k(X_i, Y_j)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        return np.exp(-cdist(X, Y, "sqeuclidean") / self.bandwidth**2)

    def gram(self, X):
        """Exactly symmetric ``k(X_i, X_j)``, each unordered pair computed once."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(X) == 1:
            return np.ones((1, 1))
        K = squareform(np.exp(-pdist(X, "sqeuclidean") / self.bandwidth**2))
        np.fill_diagonal(K, 1.0)
        return K


def kernel_eval(kernel: KernelSpec, x, y):
    """The 3x3 matrix ``K(x, y) = k(x, y) I_3``."""
    d2 = float(np.sum((np.asarray(x, float) - np.asarray(y, float)) ** 2))
    return math.exp(-d2 / kernel.bandwidth**2) * np.eye(3)


def default_bandwidth(centers, max_points=2000):
    """Median pairwise distance between atom centers (strided subsample if large)."""
    centers = np.asarray(centers, dtype=float)
    if len(centers) < 2:
        raise DataError("need at least two centers to pick a default bandwidth")
    step = max(1, -(-len(centers) // max_points))
    return float(np.median(pdist(centers[::step])))


# --------------------------------------------------------------------------
# Grid


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular grid of cell centers covering an axis-aligned box.

    Points are ordered lexicographically by ``(x, y, z)``.  ``weight`` is
    the quadrature weight attached to every point.
    """

    lower: np.ndarray
    upper: np.ndarray
    gap: float
    points: np.ndarray
    weight: float
    shape: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return len(self.points)

    @property
    def hash(self):
        h = self._cache.get("hash")
        if h is None:
            m = hashlib.sha256()
            m.update(np.ascontiguousarray(self.points, dtype="<f8").tobytes())
            m.update(np.float64(self.weight).astype("<f8").tobytes())
            h = self._cache["hash"] = m.hexdigest()[:16]
        return h

    def kernel_matrix(self, kernel: KernelSpec):
        key = ("K", kernel.bandwidth)
        K = self._cache.get(key)
        if K is None:
            K = kernel.gram(self.points)
            K.setflags(write=False)
            self._cache[key] = K
        return K

    def kernel_eigh(self, kernel: KernelSpec):
        """Eigen-decomposition of the scalar kernel matrix, descending order."""
        key = ("eigh", kernel.bandwidth)
        out = self._cache.get(key)
        if out is None:
            vals, vecs = linalg.eigh(self.kernel_matrix(kernel))
            vals, vecs = vals[::-1].copy(), vecs[:, ::-1].copy()
            out = self._cache[key] = (vals, vecs)
        return out

    def same_as(self, other):
        return self is other or (self.n == other.n and self.hash == other.hash)


def build_grid(lower, upper, gap, weight=None) -> Grid:
    """Cell-center grid over the box ``[lower, upper]`` with spacing ``gap``.

    Each axis of length ``L`` gets ``ceil(L / gap)`` cells.  Their centers
    are spaced by ``gap`` and the block is centered in the box, so every
    point lies inside it (when ``L`` is a multiple of ``gap`` this is exactly
    ``lower + (m + 1/2) gap``).
    """
    lower = np.asarray(lower, dtype=float).reshape(3)
    upper = np.asarray(upper, dtype=float).reshape(3)
    gap = float(gap)
    if not (gap > 0 and math.isfinite(gap)):
        raise DataError(f"grid gap must be positive, got {gap!r}")
    length = upper - lower
    if not np.all(length > 0):
        raise DataError(f"empty or inverted grid box: lower={lower}, upper={upper}")
    axes = []
    for lo, L in zip(lower, length):
        # guard against ceil(1.0000000000000002) from the division
        m = max(1, math.ceil(L / gap - 1e-9))
        offset = lo + 0.5 * (L - m * gap)
        axes.append(offset + (np.arange(m) + 0.5) * gap)
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    pts.setflags(write=False)
    w = gap**3 if weight is None else float(weight)
    return Grid(lower, upper, gap, pts, w, tuple(len(a) for a in axes))


def bounding_box(point_sets, margin=0.0):
    """Axis-aligned box around all point arrays, padded by ``margin`` per side."""
    allp = np.vstack([np.asarray(p, float).reshape(-1, 3) for p in point_sets])
    return allp.min(axis=0) - margin, allp.max(axis=0) + margin


# --------------------------------------------------------------------------
# Currents


@dataclass(frozen=True, eq=False)
class RawCurrent:
    """Discrete current ``sum_j K(x_j, .)(tau_j)`` of a triangulated surface."""

    centers: np.ndarray
    vectors: np.ndarray
    kernel: KernelSpec
    label: str = ""

    def __post_init__(self):
        c = np.asarray(self.centers, float).reshape(-1, 3)
        v = np.asarray(self.vectors, float).reshape(-1, 3)
        if len(c) == 0 or len(c) != len(v):
            raise DataError("a current needs at least one (center, vector) atom")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(v))):
            raise DataError("non-finite current atom")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "vectors", v)

    def atoms(self):
        return self.centers, self.vectors

    def evaluate(self, points):
        """Field values ``sum_j k(x_j, y) tau_j`` at each row of ``points``."""
        return self.kernel.scalar(points, self.centers) @ self.vectors


def current_from_mesh(descriptors: TriangleDescriptors, kernel: KernelSpec, label=None):
    if len(descriptors) == 0:
        raise DataError("empty descriptor list")
    return RawCurrent(descriptors.centers, descriptors.area_vectors, kernel,
                      descriptors.label if label is None else label)


@dataclass(frozen=True, eq=False)
class CurrentRepr:
    """Grid-anchored representative ``sum_i K(a_i, .)(beta_i)``."""

    grid: Grid
    kernel: KernelSpec
    beta: np.ndarray
    label: str = ""
    residual: float = 0.0
    ridge: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float)
        if b.shape != (self.grid.n, 3):
            raise DataError(f"beta must have shape ({self.grid.n}, 3), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise DataError("non-finite representer coefficients")
        object.__setattr__(self, "beta", b)

    def atoms(self):
        return self.grid.points, self.beta

    def values(self):
        """Field values at the grid points."""
        return self.grid.kernel_matrix(self.kernel) @ self.beta

    def evaluate(self, points):
        return self.kernel.scalar(points, self.grid.points) @ self.beta


def default_ridge(grid: Grid, kernel: KernelSpec):
    K = grid.kernel_matrix(kernel)
    return 1e-10 * float(np.trace(K)) / grid.n


def project_to_grid(current: RawCurrent, grid: Grid, ridge=None) -> CurrentRepr:
    """Representer-theorem projection of a raw current onto grid atoms.

    Solves ``(K_grid + ridge I) beta = g`` for all three axes at once, where
    ``g`` holds the raw current evaluated at the grid points.
    """
    kernel = current.kernel
    K = grid.kernel_matrix(kernel)
    eps = default_ridge(grid, kernel) if ridge is None else float(ridge)
    if eps < 0:
        raise DataError("ridge must be non-negative")
    vals = grid.kernel_eigh(kernel)[0]
    lo, hi = vals[-1] + eps, vals[0] + eps
    if not lo > _SINGULAR_RCOND * hi:
        raise SingularSystemError(
            f"grid kernel system is numerically singular (rcond ~ {max(lo, 0) / hi:.1e}) "
            f"for bandwidth {kernel.bandwidth:g} and gap {grid.gap:g}; "
            "increase the ridge or change the bandwidth")
    g = current.evaluate(grid.points)
    A = K + eps * np.eye(grid.n) if eps else K
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        raise SingularSystemError(f"Cholesky factorization failed: {e}") from e
    beta = linalg.cho_solve(cf, g, check_finite=False)
    resid = float(np.max(np.linalg.norm(K @ beta - g, axis=1))) if grid.n else 0.0
    return CurrentRepr(grid, kernel, beta, current.label, resid, eps)


def represent_values(values, grid: Grid, kernel: KernelSpec, ridge=None, label=""):
    """Grid representer whose grid evaluations approximate ``values``."""
    values = np.asarray(values, float).reshape(grid.n, 3)
    K = grid.kernel_matrix(kernel)
    eps = default_ridge(grid, kernel) if ridge is None else float(ridge)
    try:
        cf = linalg.cho_factor(K + eps * np.eye(grid.n), lower=True)
    except linalg.LinAlgError as e:
        raise SingularSystemError(f"Cholesky factorization failed: {e}") from e
    beta = linalg.cho_solve(cf, values)
    resid = float(np.max(np.linalg.norm(K @ beta - values, axis=1)))
    return CurrentRepr(grid, kernel, beta, label, resid, eps)


# --------------------------------------------------------------------------
# Inner products


def hk_inner(f, g) -> float:
    """H_K inner product of two kernel expansions (raw or grid-anchored).

    ``sum_j sum_l k(p_j, q_l) beta_j . beta'_l``.
    """
    if f.kernel != g.kernel:
        raise DataError(
            f"kernel mismatch: bandwidth {f.kernel.bandwidth} vs {g.kernel.bandwidth}")
    if isinstance(f, CurrentRepr) and isinstance(g, CurrentRepr) and f.grid.same_as(g.grid):
        return float(np.sum(f.beta * (f.grid.kernel_matrix(f.kernel) @ g.beta)))
    p, bp = f.atoms()
    q, bq = g.atoms()
    return float(np.sum(bp * (f.kernel.scalar(p, q) @ bq)))


def l2_inner(f_values, g_values, grid: Grid) -> float:
    """Quadrature L2 pairing ``w * sum_i f(a_i) . g(a_i)``."""
    f = np.asarray(f_values, float)
    g = np.asarray(g_values, float)
    if f.shape != (grid.n, 3) or g.shape != (grid.n, 3):
        raise DataError(
            f"field arrays must have shape ({grid.n}, 3), got {f.shape} and {g.shape}")
    return grid.weight * float(np.sum(f * g))


# --------------------------------------------------------------------------
# Serialization

_CURRENT_MAGIC = "# currentglm CurrentRepr v1"


def format_current(rep: CurrentRepr) -> str:
    g = rep.grid
    head = [
        _CURRENT_MAGIC,
        f"# label: {rep.label}",
        f"# grid_hash: {g.hash}",
        f"# bandwidth: {rep.kernel.bandwidth!r}",
        f"# ridge: {rep.ridge!r}",
        f"# residual: {rep.residual!r}",
        f"# gap: {g.gap!r}",
        "# lower: " + " ".join(repr(float(x)) for x in g.lower),
        "# upper: " + " ".join(repr(float(x)) for x in g.upper),
        f"# weight: {g.weight!r}",
        f"# n_points: {g.n}",
        "# columns: ax ay az beta_x beta_y beta_z",
    ]
    body = [" ".join(repr(float(x)) for x in (*a, *b)) for a, b in zip(g.points, rep.beta)]
    return "\n".join(head + body) + "\n"


def write_current(rep: CurrentRepr, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_current(rep))
    os.replace(tmp, path)


def read_current(path, grid: Grid | None = None) -> CurrentRepr:
    """Load a CurrentRepr file.  If ``grid`` is given it is reused after a hash check."""
    path = Path(path)
    header, rows = {}, []
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _CURRENT_MAGIC:
        raise DataError(f"{path}: not a CurrentRepr file")
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            header[key.strip()] = val.strip()
        elif line.strip():
            try:
                rows.append([float(x) for x in line.split()])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row") from None
    try:
        gap = float(header["gap"])
        lower = [float(x) for x in header["lower"].split()]
        upper = [float(x) for x in header["upper"].split()]
        weight = float(header["weight"])
        bw = float(header["bandwidth"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: bad header ({e})") from None
    if grid is None:
        grid = build_grid(lower, upper, gap, weight)
    if grid.hash != header.get("grid_hash"):
        raise DataError(f"{path}: grid hash mismatch")
    data = np.array(rows, dtype=float).reshape(-1, 6)
    if len(data) != grid.n or not np.array_equal(data[:, :3], grid.points):
        raise DataError(f"{path}: grid points do not match the header grid")
    return CurrentRepr(grid, KernelSpec(bw), data[:, 3:], header.get("label", ""),
                       float(header.get("residual", 0.0)), float(header.get("ridge", 0.0)))
