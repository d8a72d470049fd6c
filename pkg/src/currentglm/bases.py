"""Operator-derived bases of the vector-valued RKHS.

All fields are sampled on a :class:`~currentglm.rkhs.Grid` and stored as
``(N, 3)`` arrays.  With grid weight ``w`` and scalar kernel matrix ``Kg``
the discretized operators are

* kernel operator      ``S = w Kg`` (per axis),
* covariance operator  ``C = (w / n) X^T X`` with ``X`` the centered sample,
* mixed operator       ``G = S^{1/2} C S^{1/2}``,

and the L2 pairing is ``w * sum(f * g)``.  Inverses and square roots of
``S`` act only on the span of its retained eigenvectors (eigenvalues above
``RANK_RTOL`` times the largest).

Three bases are built from these:

``kernel``
    ``rho_l = sqrt(lambda_l) psi_l``, H_K-orthonormal, sample independent.
``covariance``
    eigenfields ``v_l`` of ``C``, L2-orthonormal (functional PCA).
``mixed``
    ``u_j = S^{1/2} w_j`` for the eigenfields ``w_j`` of ``G``; these
    simultaneously diagonalize ``S`` and ``C`` and are H_K-orthonormal.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import null_space

from .errors import DataError, NumericalError
from .rkhs import CurrentRepr, Grid, KernelSpec, build_grid

log = logging.getLogger(__name__)

RANK_RTOL = 1e-12
TIE_RTOL = 1e-9
TAIL_WARN = 0.01
KINDS = ("kernel", "covariance", "mixed")
DEFAULT_R = {"kernel": 7, "covariance": 8, "mixed": 7}


def _sign_fix(vecs):
    """Flip rows so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(vecs), axis=1)
    s = np.sign(vecs[np.arange(len(vecs)), idx])
    s[s == 0] = 1.0
    return vecs * s[:, None], s


def _tie_clusters(vals):
    """Index ranges of (relatively) equal consecutive values in a descending array."""
    out, start = [], 0
    for i in range(1, len(vals) + 1):
        if i == len(vals) or abs(vals[i - 1] - vals[i]) > TIE_RTOL * abs(vals[i - 1]):
            out.append((start, i))
            start = i
    return out


def _canonical_rotation(B):
    """Orthogonal ``T`` making the columns of ``B @ T`` axis-ordered.

    ``B`` is ``(3N, k)`` with orthonormal columns spanning a degenerate
    eigenspace.  Columns are picked in passes over the axes x, y, z, each
    time taking the direction of the remaining subspace with the most mass
    on that axis.  Axis-separable spaces come out as ``[e_x, e_y, e_z]``
    components in that order.
    """
    k = B.shape[1]
    T_rem = np.eye(k)
    picked = []
    while T_rem.shape[1]:
        progressed = False
        for a in range(3):
            if not T_rem.shape[1]:
                break
            Ra = (B @ T_rem)[a::3]
            vals, vecs = np.linalg.eigh(Ra.T @ Ra)
            if vals[-1] < 1e-12:
                continue
            y = vecs[:, -1]
            picked.append(T_rem @ y)
            T_rem = T_rem @ null_space(y[None, :]) if T_rem.shape[1] > 1 else T_rem[:, :0]
            progressed = True
        if not progressed:  # pragma: no cover - mass must sit on some axis
            picked.extend(T_rem.T)
            break
    return np.column_stack(picked)


def _order_eigvecs(vals, vecs, partner=None):
    """Apply tie canonicalization and the sign convention.

    ``vecs`` holds flattened fields as rows.  ``partner`` (rows paired with
    ``vecs``, e.g. left singular vectors) receives the same rotations/signs.
    """
    vecs = vecs.copy()
    partner = None if partner is None else partner.copy()
    for lo, hi in _tie_clusters(vals):
        if hi - lo > 1:
            T = _canonical_rotation(vecs[lo:hi].T)
            vecs[lo:hi] = (vecs[lo:hi].T @ T).T
            if partner is not None:
                partner[lo:hi] = (partner[lo:hi].T @ T).T
    vecs, s = _sign_fix(vecs)
    if partner is not None:
        partner = partner * s[:, None]
    return vecs, partner


# --------------------------------------------------------------------------
# Spectra


@dataclass(frozen=True, eq=False)
class KernelSpectrum:
    """Retained eigenpairs of the scalar kernel matrix on a grid.

    ``scalar_values`` are eigenvalues of ``Kg``; the operator eigenvalues are
    ``w * scalar_values``.  ``U`` has orthonormal columns.
    """

    grid: Grid
    kernel: KernelSpec
    scalar_values: np.ndarray
    U: np.ndarray
    tail_mass: float

    @property
    def rank(self):
        return len(self.scalar_values)

    @property
    def operator_values(self):
        return self.grid.weight * self.scalar_values

    def _apply(self, F, power):
        """``S^power`` applied per axis to an ``(..., N, 3)`` field array."""
        d = self.operator_values**power
        C = np.einsum("nl,...na->...la", self.U, F)
        return np.einsum("nl,l,...la->...na", self.U, d, C)

    def sqrt(self, F):
        return self._apply(F, 0.5)

    def project(self, F):
        """Orthogonal projection onto the retained kernel eigenspace."""
        return self._apply(F, 0.0)

    def hk_gram(self, A, B=None):
        """H_K Gram of field arrays via the truncated eigen-sum.

        ``<a, b>_HK = sum_l lambda_l^{-1} <a, psi_l>_L2 <b, psi_l>_L2``
        over the retained kernel spectrum.
        """
        A = np.asarray(A, float).reshape(-1, self.grid.n, 3)
        B = A if B is None else np.asarray(B, float).reshape(-1, self.grid.n, 3)
        ca = np.einsum("nl,kna->kla", self.U, A)
        cb = np.einsum("nl,kna->kla", self.U, B)
        return np.einsum("kla,l,mla->km", ca, 1.0 / self.scalar_values, cb)

    def hk_norm2(self, F):
        return float(self.hk_gram(F)[0, 0])

    @property
    def approximate(self):
        return self.tail_mass > TAIL_WARN


def kernel_spectrum(grid: Grid, kernel: KernelSpec) -> KernelSpectrum:
    key = ("spectrum", kernel.bandwidth)
    cached = grid._cache.get(key)
    if cached is not None:
        return cached
    vals, vecs = grid.kernel_eigh(kernel)
    keep = vals > RANK_RTOL * vals[0]
    tail = float(np.sum(np.clip(vals[~keep], 0, None)) / np.sum(vals[keep]))
    U, _ = _sign_fix(vecs[:, keep].T)
    spec = KernelSpectrum(grid, kernel, vals[keep].copy(), U.T.copy(), tail)
    grid._cache[key] = spec
    return spec


@dataclass(frozen=True, eq=False)
class OperatorSpectrum:
    """Retained eigenpairs of a discretized operator.

    ``eigenvectors`` is ``(m, N, 3)`` and L2-orthonormal.
    """

    kind: str
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    numerical_rank: int


@dataclass(frozen=True, eq=False)
class BasisSet:
    """Truncated basis plus what is needed to extract and use coefficients.

    ``coef_fields`` (covariance/mixed kinds) are the fields ``g_l`` such
    that the coefficient of a field ``f`` is ``<f - mean, g_l>_L2``: the
    eigenfields ``v_l`` themselves for the covariance kind and
    ``L_K^{-1} u_l`` for the mixed kind.
    """

    kind: str
    r: int
    elements: np.ndarray
    hk_gram: np.ndarray
    spectrum: OperatorSpectrum
    kspec: KernelSpectrum
    grid: Grid
    kernel: KernelSpec
    coef_fields: np.ndarray | None = None
    sample_mean: np.ndarray | None = None
    n_sample: int = 0
    gram_approximate: bool = False

    def truncate(self, r):
        """Leading-``r`` sub-basis (no recomputation)."""
        if not 1 <= r <= self.r:
            raise DataError(f"cannot truncate a basis of order {self.r} to {r}")
        return BasisSet(self.kind, r, self.elements[:r], self.hk_gram[:r, :r],
                        self.spectrum, self.kspec, self.grid, self.kernel,
                        None if self.coef_fields is None else self.coef_fields[:r],
                        self.sample_mean, self.n_sample, self.gram_approximate)

    def reconstruct(self, coefs):
        """Grid field ``sum_l c_l phi_l`` (+ sample mean for centered kinds)."""
        coefs = np.asarray(coefs, float)
        F = np.einsum("...l,lna->...na", coefs, self.elements)
        if self.sample_mean is not None:
            F = F + self.sample_mean
        return F


def _kspec_or_new(grid, kernel, kspec):
    if kspec is None:
        return kernel_spectrum(grid, kernel)
    if not kspec.grid.same_as(grid) or kspec.kernel != kernel:
        raise DataError("kernel spectrum does not match grid/kernel")
    return kspec


def kernel_basis(grid: Grid, kernel: KernelSpec, r: int = DEFAULT_R["kernel"]) -> BasisSet:
    """H_K-orthonormal basis ``rho_l = sqrt(lambda_l) psi_l`` of the kernel operator.

    Each scalar eigenvector is paired with the axes x, y, z in turn, so the
    vector-valued eigenvalues come in triplets.
    """
    r = int(r)
    if r < 1:
        raise DataError("truncation order r must be >= 1")
    ks = kernel_spectrum(grid, kernel)
    if r > 3 * ks.rank:
        raise DataError(
            f"r = {r} exceeds three times the kernel numerical rank ({ks.rank})")
    w = grid.weight
    m = 3 * ks.rank
    idx = np.arange(m)
    lidx, axis = idx // 3, idx % 3
    psi = np.zeros((m, grid.n, 3))
    psi[idx, :, axis] = ks.U[:, lidx].T / np.sqrt(w)
    lam = ks.operator_values[lidx]
    spectrum = OperatorSpectrum("kernel", lam, psi, m)
    rho = psi[:r] * np.sqrt(lam[:r])[:, None, None]
    gram = ks.hk_gram(rho)
    if not np.allclose(gram, np.eye(r), rtol=0, atol=1e-8):
        raise NumericalError(
            f"kernel basis is not H_K-orthonormal (max dev "
            f"{np.max(np.abs(gram - np.eye(r))):.2e}); grid too fine for the bandwidth")
    return BasisSet("kernel", r, rho, np.eye(r), spectrum, ks, grid, kernel,
                    gram_approximate=ks.approximate)


def _sample_matrix(sample, grid, kernel):
    """Stack a sample (CurrentReprs or ``(n, N, 3)`` arrays) into grid values."""
    if isinstance(sample, np.ndarray):
        F = np.asarray(sample, float)
    else:
        sample = list(sample)
        for s in sample:
            if not isinstance(s, CurrentRepr):
                F = np.asarray(sample, float)
                break
            if not s.grid.same_as(grid) or s.kernel != kernel:
                raise DataError(f"sample member {s.label!r} is on a different grid/kernel")
        else:
            F = np.array([s.values() for s in sample]).reshape(-1, grid.n, 3)
    if F.ndim != 3 or F.shape[1:] != (grid.n, 3):
        raise DataError(f"sample fields must have shape (n, {grid.n}, 3), got {F.shape}")
    n = len(F)
    if n < 2:
        raise DataError(f"sample size n ≥ 2 required (got n = {n})")
    mean = F.mean(axis=0)
    X = F - mean
    if np.abs(X).max() <= 1e-12 * max(np.abs(F).max(), np.finfo(float).tiny):
        raise DataError("degenerate sample: all fields are identical")
    return X, mean


def _retained(vals, what):
    keep = vals > RANK_RTOL * vals[0]
    if not np.any(keep):
        raise DataError(f"{what} has no eigenvalue above the rank threshold")
    return keep


def covariance_basis(sample, grid: Grid, kernel: KernelSpec, r: int = DEFAULT_R["covariance"],
                     kspec: KernelSpectrum | None = None) -> BasisSet:
    """Functional-PCA basis: L2-orthonormal eigenfields of the covariance operator.

    Computed from the SVD of the centered ``n x 3N`` data matrix, which
    equals the dual (n x n Gram) eigenproblem when ``n < 3N``.
    """
    ks = _kspec_or_new(grid, kernel, kspec)
    X, mean = _sample_matrix(sample, grid, kernel)
    n = len(X)
    w = grid.weight
    _, s, Vt = np.linalg.svd(X.reshape(n, -1), full_matrices=False)
    ev = (w / n) * s**2
    keep = _retained(ev, "covariance operator")
    ev, Vt = ev[keep], Vt[keep]
    if r > len(ev):
        raise DataError(
            f"r = {r} exceeds the covariance numerical rank ({len(ev)}) for n = {n}")
    Vt, _ = _order_eigvecs(ev, Vt)
    v = Vt.reshape(-1, grid.n, 3) / np.sqrt(w)
    spectrum = OperatorSpectrum("covariance", ev, v, len(ev))
    elements = v[:r].copy()
    gram = ks.hk_gram(elements)
    return BasisSet("covariance", r, elements, 0.5 * (gram + gram.T), spectrum, ks, grid,
                    kernel, coef_fields=elements, sample_mean=mean, n_sample=n,
                    gram_approximate=ks.approximate)


def mixed_basis(sample, grid: Grid, kernel: KernelSpec, r: int = DEFAULT_R["mixed"],
                kspec: KernelSpectrum | None = None) -> BasisSet:
    """Basis ``u_j = L_K^{1/2} w_j`` from the eigenpairs of ``G = S^{1/2} C S^{1/2}``.

    ``G = (w/n) Y^T Y`` with ``Y = X S^{1/2}``, so its eigenvectors are the
    right singular vectors of ``Y``.  With left singular vectors ``q_j`` the
    coefficient fields are obtained without inverting ``S``:
    ``S^{-1/2} w_j = P X^T q_j / sigma_j`` (``P`` the retained-span projector).
    """
    ks = _kspec_or_new(grid, kernel, kspec)
    X, mean = _sample_matrix(sample, grid, kernel)
    n = len(X)
    w = grid.weight
    Y = ks.sqrt(X).reshape(n, -1)
    Q, s, Wt = np.linalg.svd(Y, full_matrices=False)
    eta = (w / n) * s**2
    keep = _retained(eta, "mixed operator")
    if r > np.count_nonzero(keep):
        raise DataError(
            f"r = {r} exceeds the mixed-operator numerical rank ({np.count_nonzero(keep)}); "
            "the bandwidth may be too large or the grid too coarse")
    eta, s, Wt, Q = eta[keep], s[keep], Wt[keep], Q[:, keep]
    Wt, Qt = _order_eigvecs(eta, Wt, Q.T)
    W = Wt.reshape(-1, grid.n, 3)
    wfields = W / np.sqrt(w)
    spectrum = OperatorSpectrum("mixed", eta, wfields, len(eta))
    u = ks.sqrt(wfields[:r])
    XtQ = np.einsum("kj,kna->jna", Qt[:r].T, X)
    g = ks.project(XtQ) / (s[:r, None, None] * np.sqrt(w))
    gram = ks.hk_gram(u)
    return BasisSet("mixed", r, u, 0.5 * (gram + gram.T), spectrum, ks, grid, kernel,
                    coef_fields=g, sample_mean=mean, n_sample=n,
                    gram_approximate=ks.approximate)


def build_basis(kind, sample, grid, kernel, r=None, kspec=None) -> BasisSet:
    r = DEFAULT_R[kind] if r is None else int(r)
    if kind == "kernel":
        return kernel_basis(grid, kernel, r)
    if kind == "covariance":
        return covariance_basis(sample, grid, kernel, r, kspec)
    if kind == "mixed":
        return mixed_basis(sample, grid, kernel, r, kspec)
    raise DataError(f"unknown basis kind {kind!r}; expected one of {KINDS}")


# --------------------------------------------------------------------------
# Coefficients and Gram


def basis_hk_gram(basis: BasisSet):
    """r x r H_K Gram of the basis elements (exact identity for the kernel kind)."""
    if basis.kind == "kernel":
        return np.eye(basis.r)
    if basis.gram_approximate:
        log.warning("H_K Gram is approximate: kernel spectrum tail mass %.3g > %.0f%%",
                    basis.kspec.tail_mass, 100 * TAIL_WARN)
    G = basis.kspec.hk_gram(basis.elements)
    return 0.5 * (G + G.T)


def field_coefficients(values, basis: BasisSet):
    """Coefficients of grid-valued field(s) in a covariance or mixed basis."""
    if basis.kind == "kernel":
        raise DataError("kernel-basis coefficients need representer coefficients; "
                        "use coefficients() with a CurrentRepr")
    F = np.asarray(values, float) - basis.sample_mean
    return basis.grid.weight * np.einsum("...na,lna->...l", F, basis.coef_fields)


def coefficients(current: CurrentRepr, basis: BasisSet):
    """Coefficient vector of a grid-anchored current in ``basis``.

    kernel: ``mu_l = <phi, rho_l>_HK = sum_i beta_i . rho_l(a_i)``;
    covariance: ``<phi - mean, v_l>_L2``; mixed: ``<phi - mean, L_K^{-1} u_l>_L2``.
    """
    if not current.grid.same_as(basis.grid) or current.kernel != basis.kernel:
        raise DataError(f"current {current.label!r} does not share the basis grid/kernel")
    if basis.kind == "kernel":
        return np.einsum("na,lna->l", current.beta, basis.elements)
    return field_coefficients(current.values(), basis)


def coefficient_matrix(currents, basis: BasisSet):
    """Stacked coefficients, one row per current."""
    currents = list(currents)
    if not currents:
        return np.zeros((0, basis.r))
    return np.array([coefficients(c, basis) for c in currents])


def reconstruction_errors(currents, basis: BasisSet, norm=None):
    """Mean truncated-reconstruction error for r = 1..basis.r.

    The error is measured in the norm in which the basis expansion is an
    orthogonal projection: L2 for the covariance kind, H_K otherwise.
    """
    norm = norm or ("l2" if basis.kind == "covariance" else "hk")
    out = np.zeros(basis.r)
    for c in currents:
        F = c.values()
        target = F if basis.sample_mean is None else F - basis.sample_mean
        coefs = coefficients(c, basis)
        partial = np.cumsum(coefs[:, None, None] * basis.elements, axis=0)
        R = target[None] - partial
        if norm == "l2":
            e = basis.grid.weight * np.einsum("rna,rna->r", R, R)
        else:
            e = np.einsum("rr->r", basis.kspec.hk_gram(R))
        out += np.sqrt(np.clip(e, 0, None))
    return out / max(len(currents), 1)


# --------------------------------------------------------------------------
# Serialization


def save_basis(basis: BasisSet, path):
    """Write a basis to ``.npz`` (header as JSON + arrays); atomic."""
    g = basis.grid
    header = {
        "format": "currentglm BasisSet v1",
        "kind": basis.kind,
        "r": basis.r,
        "grid_hash": g.hash,
        "gap": g.gap,
        "lower": [float(x) for x in g.lower],
        "upper": [float(x) for x in g.upper],
        "weight": g.weight,
        "bandwidth": basis.kernel.bandwidth,
        "rank_rtol": RANK_RTOL,
        "kernel_rank": basis.kspec.rank,
        "numerical_rank": basis.spectrum.numerical_rank,
        "n_sample": basis.n_sample,
        "gram_approximate": bool(basis.gram_approximate),
    }
    arrays = {
        "header": np.array(json.dumps(header, sort_keys=True)),
        "eigenvalues": basis.spectrum.eigenvalues,
        "eigenvectors": basis.spectrum.eigenvectors,
        "elements": basis.elements,
        "hk_gram": basis.hk_gram,
    }
    if basis.coef_fields is not None:
        arrays["coef_fields"] = basis.coef_fields
        arrays["sample_mean"] = basis.sample_mean
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_basis(path, grid: Grid | None = None) -> BasisSet:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        arrs = {k: z[k] for k in z.files if k != "header"}
    if header.get("format") != "currentglm BasisSet v1":
        raise DataError(f"{path}: not a BasisSet file")
    if grid is None:
        grid = build_grid(header["lower"], header["upper"], header["gap"], header["weight"])
    if grid.hash != header["grid_hash"]:
        raise DataError(f"{path}: grid hash mismatch")
    kernel = KernelSpec(header["bandwidth"])
    ks = kernel_spectrum(grid, kernel)
    spectrum = OperatorSpectrum(header["kind"], arrs["eigenvalues"], arrs["eigenvectors"],
                                int(header["numerical_rank"]))
    return BasisSet(header["kind"], int(header["r"]), arrs["elements"], arrs["hk_gram"],
                    spectrum, ks, grid, kernel, arrs.get("coef_fields"),
                    arrs.get("sample_mean"), int(header["n_sample"]),
                    bool(header["gram_approximate"]))
