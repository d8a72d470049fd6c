"""Cumulative-logit (proportional-odds) ordinal regression.

Model for an observation with covariates ``x`` and basis coefficients ``z``::

    logit P(Y <= j) = alpha_j + beta . x + b^T G z (+ u_subject),   j < J

where ``G`` is the H_K Gram of the basis.  Internally categories are coded
``0..J-1``; ``categories`` maps codes back to the user labels.

Thresholds are optimized through ``alpha_1 = theta_1`` and
``alpha_{j+1} = alpha_j + exp(theta_{j+1})``, which keeps them ordered.

The random-intercept model integrates ``u ~ N(0, sigma^2)`` out of each
subject's likelihood by adaptive Gauss-Hermite quadrature (one node is the
Laplace approximation) and maximizes over ``(theta, beta, b, log sigma)``
with BFGS using the exact gradient of the quadrature approximation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit, logsumexp

from .errors import ConvergenceError, DataError

log = logging.getLogger(__name__)

DEFAULT_CATEGORIES = (-1, 0, 1)


# --------------------------------------------------------------------------
# Data


def _as_rows(A, n):
    A = np.asarray(A, dtype=float)
    if A.ndim == 2 and len(A) == n:
        return A
    if n == 0:
        return A.reshape(0, A.shape[1] if A.ndim == 2 else 0)
    return A.reshape(n, -1)


@dataclass(frozen=True, eq=False)
class OrdinalDataset:
    """Observations for an ordinal model.

    ``y`` holds category codes ``0..J-1`` into ``categories``.
    """

    subjects: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    categories: tuple = DEFAULT_CATEGORIES
    covariate_names: tuple = ()
    hk_gram: np.ndarray | None = None

    def __post_init__(self):
        subj = np.asarray(self.subjects).astype(str)
        y = np.asarray(self.y, dtype=np.int64).ravel()
        n = len(y)
        X = _as_rows(self.X, n)
        Z = _as_rows(self.Z, n)
        if len(subj) != n:
            raise DataError("subjects and responses differ in length")
        J = len(self.categories)
        if J < 2:
            raise DataError("need at least two ordered categories")
        if n and (y.min() < 0 or y.max() >= J):
            raise DataError(f"response code outside 0..{J - 1}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise DataError("non-finite covariate or feature value")
        names = tuple(self.covariate_names) or tuple(f"x{i + 1}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError("covariate_names does not match the covariate columns")
        object.__setattr__(self, "subjects", subj)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "covariate_names", names)
        if self.hk_gram is not None:
            G = np.asarray(self.hk_gram, float)
            if G.shape != (Z.shape[1], Z.shape[1]):
                raise DataError(f"hk_gram shape {G.shape} does not match r = {Z.shape[1]}")
            object.__setattr__(self, "hk_gram", G)

    @classmethod
    def from_labels(cls, subjects, responses, X, Z, categories=DEFAULT_CATEGORIES,
                    covariate_names=(), hk_gram=None):
        cats = list(categories)
        codes = []
        for v in responses:
            try:
                codes.append(cats.index(type(cats[0])(v)))
            except (ValueError, TypeError):
                raise DataError(f"response {v!r} not in categories {tuple(cats)}") from None
        return cls(subjects, np.array(codes, dtype=np.int64), X, Z, tuple(cats),
                   covariate_names, hk_gram)

    def __len__(self):
        return len(self.y)

    @property
    def J(self):
        return len(self.categories)

    @property
    def m(self):
        return self.X.shape[1]

    @property
    def r(self):
        return self.Z.shape[1]

    @property
    def labels(self):
        return np.array(self.categories)[self.y]

    def subject_ids(self):
        return sorted(set(self.subjects.tolist()))

    def subset(self, mask):
        mask = np.asarray(mask)
        return OrdinalDataset(self.subjects[mask], self.y[mask], self.X[mask], self.Z[mask],
                              self.categories, self.covariate_names, self.hk_gram)

    def canonical(self):
        """Rows sorted by (subject, covariates, features, response)."""
        if len(self) == 0:
            return self
        keys = [self.y] + [self.Z[:, i] for i in range(self.r)][::-1]
        keys += [self.X[:, i] for i in range(self.m)][::-1] + [self.subjects]
        order = np.lexsort(keys)
        return self.subset(order)

    def missing_categories(self):
        present = set(np.unique(self.y).tolist())
        return [c for i, c in enumerate(self.categories) if i not in present]


# --------------------------------------------------------------------------
# Model


@dataclass
class FitInfo:
    loglik: float
    iterations: int
    converged: bool
    method: str
    n_obs: int
    n_subjects: int
    separated: bool = False
    boundary: bool = False
    nq: int | None = None
    grad_norm: float = float("nan")
    se: dict = field(default_factory=dict)
    message: str = ""


@dataclass
class OrdinalModel:
    thresholds: np.ndarray
    scalar_coefs: np.ndarray
    functional_coefs: np.ndarray
    hk_gram: np.ndarray
    random_intercept_sd: float | None = None
    categories: tuple = DEFAULT_CATEGORIES
    covariate_names: tuple = ()
    fit_info: FitInfo | None = None

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, float).ravel()
        self.scalar_coefs = np.asarray(self.scalar_coefs, float).ravel()
        self.functional_coefs = np.asarray(self.functional_coefs, float).ravel()
        r = len(self.functional_coefs)
        self.hk_gram = np.asarray(self.hk_gram, float).reshape(r, r)
        if np.any(np.diff(self.thresholds) <= 0):
            raise DataError("thresholds must be strictly increasing")
        if len(self.thresholds) != len(self.categories) - 1:
            raise DataError("need J - 1 thresholds")
        if self.random_intercept_sd is not None and self.random_intercept_sd < 0:
            raise DataError("random-intercept SD must be non-negative")

    @property
    def J(self):
        return len(self.categories)

    def to_dict(self):
        fi = self.fit_info
        d = {
            "categories": list(self.categories),
            "covariate_names": list(self.covariate_names),
            "thresholds": self.thresholds.tolist(),
            "scalar_coefs": self.scalar_coefs.tolist(),
            "functional_coefs": self.functional_coefs.tolist(),
            "hk_gram": self.hk_gram.tolist(),
            "random_intercept_sd": self.random_intercept_sd,
        }
        if fi is not None:
            d["fit_info"] = {
                "loglik": fi.loglik, "iterations": fi.iterations, "converged": fi.converged,
                "method": fi.method, "n_obs": fi.n_obs, "n_subjects": fi.n_subjects,
                "separated": fi.separated, "boundary": fi.boundary, "nq": fi.nq,
                "grad_norm": fi.grad_norm, "message": fi.message,
                "se": {k: np.asarray(v).tolist() for k, v in fi.se.items()},
            }
        return d

    @classmethod
    def from_dict(cls, d):
        fi = d.get("fit_info")
        info = None
        if fi is not None:
            info = FitInfo(**{k: v for k, v in fi.items() if k != "se"},
                           se={k: np.asarray(v) for k, v in fi.get("se", {}).items()})
        return cls(np.array(d["thresholds"]), np.array(d["scalar_coefs"]),
                   np.array(d["functional_coefs"]), np.array(d["hk_gram"]),
                   d.get("random_intercept_sd"), tuple(d["categories"]),
                   tuple(d.get("covariate_names", ())), info)


def linear_predictor(model: OrdinalModel, covariates, z):
    """``beta . x + b^T G z``; vectorized over leading dimensions."""
    x = np.asarray(covariates, float)
    z = np.asarray(z, float)
    if x.shape[-1:] != model.scalar_coefs.shape or z.shape[-1:] != model.functional_coefs.shape:
        raise DataError(
            f"dimension mismatch: model has {len(model.scalar_coefs)} covariates and "
            f"{len(model.functional_coefs)} features, got {x.shape[-1:]} and {z.shape[-1:]}")
    return x @ model.scalar_coefs + z @ (model.hk_gram @ model.functional_coefs)


def cumulative_probs(thresholds, eta):
    """``P(Y <= j)`` for j = 1..J (last column is 1)."""
    eta = np.asarray(eta, float)
    cum = expit(np.asarray(thresholds)[None, :] + eta.reshape(-1, 1))
    return np.concatenate([cum, np.ones((len(cum), 1))], axis=1).reshape(
        eta.shape + (len(thresholds) + 1,))


def predict_probs(model: OrdinalModel, covariates, z, random_effect=0.0):
    """Category probabilities, shape ``(..., J)``."""
    eta = linear_predictor(model, covariates, z) + random_effect
    cum = cumulative_probs(model.thresholds, eta)
    return np.diff(cum, axis=-1, prepend=0.0)


def predict_category(model: OrdinalModel, covariates, z, random_effect=0.0):
    """Modal category label."""
    p = predict_probs(model, covariates, z, random_effect)
    return np.array(model.categories)[np.argmax(np.atleast_2d(p), axis=-1)]


# --------------------------------------------------------------------------
# Per-observation log-likelihood derivatives


def _obs_terms(a, b, order=2):
    """``log(F(a) - F(b))`` and its partial derivatives in ``a`` and ``b``.

    ``a`` may be ``+inf`` (top category), ``b`` may be ``-inf`` (bottom).
    Returns a dict with keys ``l, a, b, aa, ab, bb`` (and third-order keys
    ``aaa, aab, abb, bbb`` when ``order >= 3``).
    """
    with np.errstate(invalid="ignore", over="ignore"):
        Fa, Ga = expit(a), expit(-a)
        Fb, Gb = expit(b), expit(-b)
        D = -np.expm1(b - a)
        l = -np.logaddexp(0.0, -a) - np.logaddexp(0.0, b) + np.log(D)
        ra = Ga / (D * Gb)
        rb = Fb / (D * Fa)
    ca, cb = 1.0 - 2.0 * Fa, 1.0 - 2.0 * Fb
    out = {
        "l": l,
        "a": ra,
        "b": -rb,
        "aa": ra * ca - ra**2,
        "bb": -rb * cb - rb**2,
        "ab": ra * rb,
    }
    if order >= 3:
        out["aaa"] = ra * (1 - 6 * Fa + 6 * Fa**2) - 3 * ra**2 * ca + 2 * ra**3
        out["bbb"] = -rb * (1 - 6 * Fb + 6 * Fb**2) - 3 * rb**2 * cb - 2 * rb**3
        out["aab"] = ra * rb * ca - 2 * ra**2 * rb
        out["abb"] = ra * rb * cb + 2 * ra * rb**2
    return out


def thresholds_from_theta(theta):
    theta = np.asarray(theta, float)
    with np.errstate(over="ignore"):
        return np.cumsum(np.concatenate([theta[:1], np.exp(theta[1:])]))


def theta_from_thresholds(alpha):
    alpha = np.asarray(alpha, float)
    return np.concatenate([alpha[:1], np.log(np.diff(alpha))])


def _alpha_jacobian(theta):
    """``d alpha / d theta`` (lower triangular) and the diagonal second derivatives."""
    k = len(theta)
    with np.errstate(over="ignore"):
        e = np.exp(theta)
    Jac = np.zeros((k, k))
    Jac[:, 0] = 1.0
    for j in range(k):
        Jac[j, 1:j + 1] = e[1:j + 1]
    return Jac, e


class _Design:
    """Precomputed arrays for one dataset / Gram pair."""

    def __init__(self, data: OrdinalDataset, hk_gram, scale=False):
        self.data = data
        G = np.asarray(hk_gram, float).reshape(data.r, data.r)
        D = np.hstack([data.X, data.Z @ G])
        # optimizers work on unit-RMS columns; estimates are mapped back after
        cs = np.ones(D.shape[1])
        if scale and len(D):
            rms = np.sqrt(np.mean(D * D, axis=0))
            cs = np.where(rms > 0, rms, 1.0)
        self.col_scale = cs
        self.D = D / cs
        self.y = data.y
        self.J = data.J
        self.n, self.p = self.D.shape
        self.k = self.J - 1
        self.has_a = self.y < self.J - 1
        self.has_b = self.y > 0
        subj, inv = np.unique(data.subjects, return_inverse=True)
        self.subject_index = inv
        self.n_subjects = len(subj)

    def ends(self, alpha, eta):
        ext = np.concatenate([[-np.inf], alpha, [np.inf]])
        return ext[self.y + 1] + eta, ext[self.y] + eta

    def jac_rows(self, theta):
        """Rows of ``d a / d theta`` and ``d b / d theta`` per observation."""
        Jac, e = _alpha_jacobian(theta)
        ext = np.vstack([np.zeros(self.k), Jac, np.zeros(self.k)])
        Ja, Jb = ext[self.y + 1], ext[self.y]
        # diagonal second derivatives of alpha_j: exp(theta_m) for 1 <= m <= j
        mask = np.tril(np.ones((self.k, self.k)), 0)
        mask[:, 0] = 0.0
        d2 = np.vstack([np.zeros(self.k), mask * e, np.zeros(self.k)])
        return Ja, Jb, d2[self.y + 1], d2[self.y]

    def split(self, params):
        return params[:self.k], params[self.k:self.k + self.p]

    def _T(self, n_params):
        t = np.ones(n_params)
        t[self.k:self.k + self.p] = 1.0 / self.col_scale
        return t

    def unscale(self, params):
        return params * self._T(len(params))

    def to_scaled(self, params):
        return params / self._T(len(params))

    def unscale_cov(self, cov):
        if cov is None:
            return None
        t = self._T(len(cov))
        return cov * np.outer(t, t)


def _fixed_eval(params, des: _Design, need_hess=True):
    theta, gamma = des.split(params)
    alpha = thresholds_from_theta(theta)
    eta = des.D @ gamma
    a, b = des.ends(alpha, eta)
    t = _obs_terms(a, b)
    ll = float(np.sum(t["l"]))
    Ja, Jb, d2a, d2b = des.jac_rows(theta)
    la, lb = t["a"], t["b"]
    g_theta = la @ Ja + lb @ Jb
    g_gamma = (la + lb) @ des.D
    grad = np.concatenate([g_theta, g_gamma])
    if not need_hess:
        return ll, grad, None, t
    Htt = (Ja.T * t["aa"]) @ Ja + (Jb.T * t["bb"]) @ Jb
    cross = (Ja.T * t["ab"]) @ Jb
    Htt += cross + cross.T + np.diag(la @ d2a + lb @ d2b)
    Htg = (Ja.T * (t["aa"] + t["ab"])) @ des.D + (Jb.T * (t["ab"] + t["bb"])) @ des.D
    Hgg = (des.D.T * (t["aa"] + 2 * t["ab"] + t["bb"])) @ des.D
    H = np.block([[Htt, Htg], [Htg.T, Hgg]])
    return ll, grad, 0.5 * (H + H.T), t


def fixed_objective(params, data: OrdinalDataset, hk_gram):
    """Log-likelihood, gradient and Hessian at ``params = (theta, beta, b)``."""
    ll, g, H, _ = _fixed_eval(np.asarray(params, float), _Design(data, hk_gram))
    return ll, g, H


def loglik(model: OrdinalModel, data: OrdinalDataset, nq=15):
    """Log-likelihood of ``data`` under ``model`` (marginal when it has a random intercept)."""
    des = _Design(data.canonical(), model.hk_gram)
    gamma = np.concatenate([model.scalar_coefs, model.functional_coefs])
    params = np.concatenate([theta_from_thresholds(model.thresholds), gamma])
    sd = model.random_intercept_sd
    if not sd:
        return _fixed_eval(params, des, need_hess=False)[0]
    return _MixedEvaluator(des, nq).value(np.concatenate([params, [math.log(sd)]]))


# --------------------------------------------------------------------------
# Fixed-effects fit


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    tol: float | None = None
    nq: int = 15
    coef_cap: float = 1e3
    sigma_start: float = 0.5
    fix_sigma: float | None = None
    compute_se: bool = True
    raise_on_failure: bool = True
    min_sigma: float = 1e-4


def _resolve_gram(data, hk_gram):
    if hk_gram is not None:
        return np.asarray(hk_gram, float)
    return np.eye(data.r) if data.hk_gram is None else data.hk_gram


def _start_params(data: OrdinalDataset):
    counts = np.bincount(data.y, minlength=data.J).astype(float) + 0.5
    cum = np.cumsum(counts)[:-1] / counts.sum()
    alpha = np.log(cum / (1 - cum))
    return np.concatenate([theta_from_thresholds(alpha), np.zeros(data.m + data.r)])


def _alpha_cov(theta, cov_theta):
    Jac, _ = _alpha_jacobian(theta)
    return Jac @ cov_theta @ Jac.T


def _standard_errors(params, cov, k, m, r, extra=0):
    if cov is None:
        nan = np.full(k + m + r + extra, np.nan)
        cov = np.diag(nan)
    theta = params[:k]
    ca = _alpha_cov(theta, cov[:k, :k])
    d = np.sqrt(np.clip(np.diag(cov), 0, None))
    se = {"thresholds": np.sqrt(np.clip(np.diag(ca), 0, None)),
          "scalar_coefs": d[k:k + m], "functional_coefs": d[k + m:k + m + r]}
    return se


def _invert_info(H):
    try:
        return np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return None


def fit_fixed(data: OrdinalDataset, hk_gram=None, options: FitOptions | None = None):
    """Maximum-likelihood proportional-odds fit by damped Newton iterations.

    Stops when the gradient's infinity norm is below ``options.tol``
    (default 1e-8) or the Newton decrement reaches the rounding level of
    the log-likelihood.  Complete separation (every observation fitted with
    probability ~1) or coefficients running past ``coef_cap`` are reported
    through ``fit_info.separated`` instead of raising.
    """
    opts = options or FitOptions()
    tol = 1e-8 if opts.tol is None else opts.tol
    data = data.canonical()
    if len(data) == 0:
        raise DataError("empty dataset")
    missing = data.missing_categories()
    if missing:
        raise DataError(f"categories never observed: {missing}; thresholds unidentified")
    G = _resolve_gram(data, hk_gram)
    des = _Design(data, G, scale=True)
    params = _start_params(data)
    ll, g, H, t = _fixed_eval(params, des)
    converged = separated = False
    it = 0
    msg = ""
    for it in range(1, opts.max_iter + 1):
        gn = float(np.max(np.abs(g)))
        if gn <= tol:
            converged = True
            it -= 1
            break
        if np.max(np.abs(params)) > opts.coef_cap:
            separated = True
            msg = "coefficients reached the cap; likelihood appears unbounded"
            break
        A = -H
        mu = 0.0
        scale = max(1.0, float(np.max(np.abs(np.diag(A)))))
        while True:
            try:
                L = np.linalg.cholesky(A + mu * np.eye(len(A)))
                break
            except np.linalg.LinAlgError:
                mu = max(1e-10 * scale, 10 * mu)
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        if mu == 0.0 and float(g @ step) <= 1e-14 * max(1.0, abs(ll)):
            # Newton decrement at the rounding level of the log-likelihood
            converged = True
            it -= 1
            break
        lam = 1.0
        while True:
            cand = params + lam * step
            ll_c, g_c, H_c, t_c = _fixed_eval(cand, des)
            if np.isfinite(ll_c) and ll_c >= ll:
                break
            lam *= 0.5
            if lam < 1e-12:
                break
        if lam < 1e-12:
            msg = "line search failed"
            break
        params, ll, g, H, t = cand, ll_c, g_c, H_c, t_c
    gn = float(np.max(np.abs(g)))
    if gn <= tol:
        converged = True
    if np.max(-t["l"]) < 1e-6:
        separated = True
        msg = msg or "complete separation: every observation fitted with probability ~1"
    if separated:
        warnings.warn(f"fit_fixed: {msg}", RuntimeWarning, stacklevel=2)
    elif not converged:
        text = f"fit_fixed did not converge after {it} iterations (|grad|_inf = {gn:.2e})"
        if opts.raise_on_failure:
            raise ConvergenceError(text)
        warnings.warn(text, RuntimeWarning, stacklevel=2)
        msg = text
    k, m, r = des.k, data.m, data.r
    cov = _invert_info(H) if opts.compute_se and not separated else None
    params = des.unscale(params)
    se = _standard_errors(params, des.unscale_cov(cov), k, m, r)
    info = FitInfo(ll, it, converged and not separated, "newton", len(data),
                   des.n_subjects, separated=separated, grad_norm=gn, se=se, message=msg)
    theta, gamma = des.split(params)
    return OrdinalModel(thresholds_from_theta(theta), gamma[:m], gamma[m:], G, None,
                        data.categories, data.covariate_names, info)


# --------------------------------------------------------------------------
# Random-intercept model


# log-SD range handled by the quadrature; flat outside
TAU_BOUNDS = (-20.0, 10.0)


class _MixedEvaluator:
    """Adaptive Gauss-Hermite marginal log-likelihood and its exact gradient.

    Parameters are ``(theta, gamma, tau)`` with ``sigma = exp(tau)``.
    Subject modes are warm-started from the previous call.
    """

    def __init__(self, des: _Design, nq):
        if nq < 1:
            raise DataError("nq must be >= 1")
        self.des = des
        self.nq = int(nq)
        z, w = np.polynomial.hermite.hermgauss(self.nq)
        self.z = z
        self.logw = np.log(w) + z**2
        self.K = des.n_subjects
        self.idx = des.subject_index
        self.u = np.zeros(self.K)

    def _sum_subj(self, v):
        return np.bincount(self.idx, weights=v, minlength=self.K)

    def _sum_subj_rows(self, M):
        out = np.zeros((self.K,) + M.shape[1:])
        np.add.at(out, self.idx, M)
        return out

    def _mode(self, a0, b0, sigma):
        u = self.u.copy()
        s2 = sigma * sigma
        for _ in range(100):
            t = _obs_terms(a0 + u[self.idx], b0 + u[self.idx])
            h1 = self._sum_subj(t["a"] + t["b"]) - u / s2
            h2 = self._sum_subj(t["aa"] + 2 * t["ab"] + t["bb"]) - 1.0 / s2
            step = -h1 / h2
            lim = 2.0 * sigma + 1.0
            step = np.clip(step, -lim, lim)
            u = u + step
            if np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(u))):
                break
        self.u = u
        return u

    def value(self, params):
        return self.evaluate(params, grad=False)[0]

    def evaluate(self, params, grad=True):
        des = self.des
        theta, gamma = des.split(params)
        tau_raw = float(params[-1])
        tau = min(max(tau_raw, TAU_BOUNDS[0]), TAU_BOUNDS[1])
        sigma = math.exp(tau)
        alpha = thresholds_from_theta(theta)
        eta = des.D @ gamma
        a0, b0 = des.ends(alpha, eta)
        uh = self._mode(a0, b0, sigma)
        s2 = sigma * sigma
        at, bt = a0 + uh[self.idx], b0 + uh[self.idx]
        t0 = _obs_terms(at, bt, order=3)
        Hk = 1.0 / s2 - self._sum_subj(t0["aa"] + 2 * t0["ab"] + t0["bb"])
        s = 1.0 / np.sqrt(Hk)
        # nodes t_q = u_hat + sqrt(2) s z_q, shape (K, nq)
        tq = uh[:, None] + math.sqrt(2.0) * s[:, None] * self.z[None, :]
        tqo = tq[self.idx]
        tn = _obs_terms(at[:, None] - uh[self.idx, None] + tqo,
                        bt[:, None] - uh[self.idx, None] + tqo, order=1)
        hq = self._sum_subj_rows(tn["l"]) - tq**2 / (2 * s2)
        lq = self.logw[None, :] + hq
        lse = logsumexp(lq, axis=1)
        const = -0.5 * math.log(2 * math.pi) + 0.5 * math.log(2.0)
        llk = const - tau + np.log(s) + lse
        ll = float(np.sum(llk))
        if not grad:
            return ll, None
        om = np.exp(lq - lse[:, None])  # (K, nq)
        omo = om[self.idx]
        Ja, Jb, _, _ = des.jac_rows(theta)
        P = des.k + des.p + 1
        # d a / d params and d b / d params per observation (tau column is zero)
        da = np.hstack([Ja, des.D * des.has_a[:, None], np.zeros((des.n, 1))])
        db = np.hstack([Jb, des.D * des.has_b[:, None], np.zeros((des.n, 1))])
        # sum_q omega_q h_param(t_q)
        la_w = np.sum(omo * tn["a"], axis=1)
        lb_w = np.sum(omo * tn["b"], axis=1)
        g_direct = la_w @ da + lb_w @ db
        g_direct[-1] += float(np.sum(om * tq**2) / s2)
        # h_u(t_q) and its weighted moments
        hu_q = self._sum_subj_rows(tn["a"] + tn["b"]) - tq / s2
        A = np.sum(om * hu_q, axis=1)
        B = np.sum(om * hu_q * math.sqrt(2.0) * self.z[None, :], axis=1)
        # mode sensitivity: du/dparam = h_u,param / H
        c1 = t0["aa"] + t0["ab"]
        c2 = t0["ab"] + t0["bb"]
        huP = self._sum_subj_rows(c1[:, None] * da + c2[:, None] * db)
        huP[:, -1] += 2.0 * uh / s2
        du = huP / Hk[:, None]
        d1 = t0["aaa"] + 2 * t0["aab"] + t0["abb"]
        d2 = t0["aab"] + 2 * t0["abb"] + t0["bbb"]
        huuP = self._sum_subj_rows(d1[:, None] * da + d2[:, None] * db)
        huuP[:, -1] += 2.0 / s2
        huuu = self._sum_subj(t0["aaa"] + 3 * t0["aab"] + 3 * t0["abb"] + t0["bbb"])
        dH = -(huuP + huuu[:, None] * du)
        ds = -0.5 * (s**3)[:, None] * dH
        g = g_direct + A @ du + (B + 1.0 / s) @ ds
        g[-1] -= self.K
        if tau != tau_raw:
            g[-1] = 0.0
        assert g.shape == (P,)
        return ll, g


def mixed_objective(params, data: OrdinalDataset, hk_gram, nq=15):
    """Marginal log-likelihood and exact gradient at ``(theta, beta, b, log sigma)``."""
    ev = _MixedEvaluator(_Design(data.canonical(), hk_gram), nq)
    return ev.evaluate(np.asarray(params, float))


def _fd_hessian(fun_grad, x, rel=1e-5):
    n = len(x)
    H = np.zeros((n, n))
    for i in range(n):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (fun_grad(x + e) - fun_grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def fit_mixed(data: OrdinalDataset, hk_gram=None, options: FitOptions | None = None):
    """Cumulative link model with a per-subject Gaussian random intercept.

    Falls back to :func:`fit_fixed` (with a warning) when fewer than two
    subjects have two or more observations, and reports ``boundary`` when
    the SD estimate collapses to zero.
    """
    opts = options or FitOptions()
    tol = 1e-6 if opts.tol is None else opts.tol
    data = data.canonical()
    G = _resolve_gram(data, hk_gram)
    _, counts = np.unique(data.subjects, return_counts=True)
    if np.count_nonzero(counts >= 2) < 2:
        warnings.warn("fit_mixed: fewer than two subjects with >= 2 observations; "
                      "random-intercept SD unidentified, fitting fixed effects",
                      RuntimeWarning, stacklevel=2)
        return fit_fixed(data, G, replace(opts, tol=None))
    fixed = fit_fixed(data, G, replace(opts, compute_se=False, raise_on_failure=False))
    if opts.fix_sigma is not None and opts.fix_sigma == 0:
        fixed.random_intercept_sd = 0.0
        fixed.fit_info.boundary = True
        return fixed
    des = _Design(data, G, scale=True)
    ev = _MixedEvaluator(des, opts.nq)
    start = des.to_scaled(np.concatenate([theta_from_thresholds(fixed.thresholds),
                                          fixed.scalar_coefs, fixed.functional_coefs]))
    if opts.fix_sigma is not None:
        tau_fixed = math.log(opts.fix_sigma)

        def f(x):
            ll, g = ev.evaluate(np.append(x, tau_fixed))
            return -ll, -g[:-1]
        x0 = start
    else:
        def f(x):
            ll, g = ev.evaluate(x)
            return -ll, -g
        x0 = np.append(start, math.log(opts.sigma_start))

    res = optimize.minimize(f, x0, jac=True, method="BFGS",
                            options={"gtol": tol, "maxiter": opts.max_iter})
    x = res.x.copy()
    if opts.fix_sigma is None:
        # the objective is flat in tau outside the clamp range
        x[-1] = min(max(x[-1], TAU_BOUNDS[0]), TAU_BOUNDS[1])
    nit = int(res.nit)

    def grad(v):
        return f(v)[1]

    H = None
    gn = float(np.max(np.abs(res.jac)))
    # polish with Newton steps on a finite-difference Hessian
    for _ in range(10):
        if gn <= tol:
            break
        H = _fd_hessian(grad, x)
        try:
            step = -np.linalg.solve(H, grad(x))
        except np.linalg.LinAlgError:
            break
        fx = f(x)[0]
        lam = 1.0
        while lam > 1e-8 and not f(x + lam * step)[0] <= fx:
            lam *= 0.5
        if lam <= 1e-8:
            break
        x = x + lam * step
        nit += 1
        H = None
        gn = float(np.max(np.abs(grad(x))))
    negll = f(x)[0]
    converged = gn <= tol
    sigma = opts.fix_sigma if opts.fix_sigma is not None else math.exp(x[-1])
    k, m, r = des.k, data.m, data.r
    if opts.fix_sigma is None and sigma < opts.min_sigma:
        warnings.warn("fit_mixed: random-intercept SD collapsed to 0; "
                      "returning the fixed-effects fit", RuntimeWarning, stacklevel=2)
        out = fit_fixed(data, G, replace(opts, tol=None))
        out.random_intercept_sd = 0.0
        out.fit_info.boundary = True
        out.fit_info.message = "random-intercept SD at the boundary 0"
        return out
    if not converged:
        text = f"fit_mixed did not converge (|grad|_inf = {gn:.2e}, {res.message})"
        if opts.raise_on_failure:
            raise ConvergenceError(text)
        warnings.warn(text, RuntimeWarning, stacklevel=2)
    se = {}
    if opts.compute_se:
        if H is None:
            H = _fd_hessian(grad, x)
        try:
            cov = np.linalg.inv(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            cov = None
        cov = des.unscale_cov(cov)
        se = _standard_errors(des.unscale(x), cov, k, m, r,
                              extra=0 if opts.fix_sigma is not None else 1)
        if cov is not None and opts.fix_sigma is None:
            se["random_intercept_sd"] = np.array(sigma * math.sqrt(max(cov[-1, -1], 0.0)))
    info = FitInfo(-negll, nit, converged, "agq-bfgs", len(data), des.n_subjects,
                   nq=opts.nq, grad_norm=gn, se=se,
                   message="" if converged else str(res.message))
    theta, gamma = des.split(des.unscale(x))
    return OrdinalModel(thresholds_from_theta(theta), gamma[:m], gamma[m:], G, float(sigma),
                        data.categories, data.covariate_names, info)


# --------------------------------------------------------------------------
# I/O


def write_dataset(data: OrdinalDataset, path, extra_columns=None):
    """Tab-separated table: subject, response, covariates, z_1..z_r."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(["subject", "response", *data.covariate_names,
                     *[f"z_{i + 1}" for i in range(data.r)]])
        for i in range(len(data)):
            wr.writerow([data.subjects[i], data.categories[data.y[i]],
                         *[repr(float(v)) for v in data.X[i]],
                         *[repr(float(v)) for v in data.Z[i]]])
    os.replace(tmp, path)


def read_dataset(path, categories=DEFAULT_CATEGORIES):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0][:2] != ["subject", "response"]:
        raise DataError(f"{path}: header must start with 'subject\\tresponse'")
    head = rows[0]
    zcols = [i for i, h in enumerate(head) if h.startswith("z_")]
    xcols = [i for i in range(2, len(head)) if i not in zcols]
    subj, resp, X, Z = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise DataError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        try:
            subj.append(row[0])
            resp.append(int(row[1]))
            X.append([float(row[i]) for i in xcols])
            Z.append([float(row[i]) for i in zcols])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed value") from None
    n = len(subj)
    return OrdinalDataset.from_labels(subj, resp, np.array(X).reshape(n, len(xcols)),
                                      np.array(Z).reshape(n, len(zcols)), categories,
                                      tuple(head[i] for i in xcols))


def write_model(model: OrdinalModel, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_model(path):
    return OrdinalModel.from_dict(json.loads(Path(path).read_text()))
