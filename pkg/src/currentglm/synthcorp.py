"""Synthetic population of closed body-like meshes with ordinal fit responses.

Bodies are subdivided icospheres, deformed radially by low-order harmonics
and stretched to torso proportions.  Every child gets a stature, from which a
"correct" shirt size follows; up to three consecutive sizes are tried on and
the fit is drawn from a cumulative-logit model with a random intercept.

Randomness is split from one master seed: the stream for purpose ``tag`` and
index ``i`` is ``default_rng(SeedSequence([master, tag, i]))``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DataError
from .geometry import TriMesh, write_off
from .ordreg import DEFAULT_CATEGORIES, OrdinalDataset

# nominal ages of the available shirt sizes
SHIRT_SIZES = (3, 4, 5, 6, 8, 10, 12)

_TAG_BODY, _TAG_SUBJECT, _TAG_RESPONSE, _TAG_SIM = 1, 2, 3, 4


def stream(master_seed, tag, index=0):
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(tag), int(index)]))


# --------------------------------------------------------------------------
# Meshes


def icosphere(level):
    """Unit icosphere with ``20 * 4**level`` outward-oriented faces."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
         (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts)
    F = np.array(faces, dtype=np.int64)
    # make every face point outward
    n = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    out = np.einsum("ij,ij->i", n, V[F].mean(axis=1)) < 0
    F[out] = F[out][:, [0, 2, 1]]
    return V, F


def _harmonics(P):
    """Low-order polynomial harmonics on the unit sphere, one column each."""
    x, y, z = P.T
    return np.stack([z, x, y, x * x - y * y, 3 * z * z - 1, x * z, y * z, x * y,
                     z * (5 * z * z - 3), x * (5 * z * z - 1)], axis=1)


N_SHAPE = 10


@dataclass(frozen=True)
class BodyParams:
    """Parameters of one synthetic body.

    ``height`` and ``girth`` are half-extents along z and x; ``depth`` is
    the y half-extent relative to ``girth``.  ``shape`` holds up to
    ``N_SHAPE`` radial harmonic coefficients; ``noise`` adds seeded harmonic
    perturbations of that amplitude.
    """

    height: float = 1.0
    girth: float = 1.0
    depth: float = 1.0
    shape: tuple = ()
    sex: int = 0
    age: float = 0.0
    resolution: int = 2
    seed: int = 0
    noise: float = 0.0

    def __post_init__(self):
        if min(self.height, self.girth, self.depth) <= 0:
            raise DataError("body scales must be positive")
        if self.resolution < 1:
            raise DataError("mesh resolution must be >= 1")
        if len(self.shape) > N_SHAPE:
            raise DataError(f"at most {N_SHAPE} shape coefficients")


def generate_body(params: BodyParams, label="") -> TriMesh:
    """Closed, outward-oriented body mesh; deterministic in ``params``."""
    V, F = icosphere(params.resolution)
    H = _harmonics(V)
    c = np.zeros(N_SHAPE)
    c[:len(params.shape)] = params.shape
    if params.noise:
        c += params.noise * np.random.default_rng(params.seed).standard_normal(N_SHAPE)
    r = 1.0 + H @ c
    if np.min(r) <= 0.05:
        raise DataError("shape coefficients too large: radius became non-positive")
    P = V * r[:, None]
    P = P * np.array([params.girth, params.girth * params.depth, params.height])
    return TriMesh(P, F, label)


# --------------------------------------------------------------------------
# Corpus


@dataclass(frozen=True)
class CorpusConfig:
    n_subjects: int = 60
    resolution: int = 2
    shape_noise: float = 0.03
    # probabilities of 1, 2 and 3 tried sizes (9, 24 and 45 of 78 children)
    n_obs_probs: tuple = (9 / 78, 24 / 78, 45 / 78)
    age_range: tuple = (3.0, 12.0)


@dataclass(frozen=True)
class Subject:
    id: str
    sex: int
    age: float
    stature: float
    size_index: float
    correct_size: int
    sizes: tuple
    body: BodyParams


@dataclass
class Corpus:
    subjects: list
    meshes: dict
    master_seed: int
    config: CorpusConfig

    def ids(self):
        return [s.id for s in self.subjects]

    def covariate_rows(self):
        """(subject, shirt_size, sex, age) rows, ordered by subject then size."""
        return [(s.id, size, s.sex, s.age) for s in self.subjects for size in s.sizes]


def stature_to_index(stature):
    """Continuous position on the size scale (0 = size 3, 6 = size 12).

    Size boundaries follow 60 mm stature steps from 950 mm for the first
    four sizes and 120 mm steps (two years) above.
    """
    s = np.asarray(stature, float)
    lo = (s - 980.0) / 60.0
    hi = 3.0 + (s - 1160.0) / 120.0
    return np.where(lo <= 3.0, lo, hi)


def _subject(master_seed, k, cfg: CorpusConfig):
    rng = stream(master_seed, _TAG_SUBJECT, k)
    sex = int(rng.integers(0, 2))
    age = float(np.round(rng.uniform(*cfg.age_range), 2))
    stature = 950.0 + 60.0 * (age - 3.0) + rng.normal(0.0, 45.0)
    idx = float(stature_to_index(stature))
    correct = int(np.clip(np.round(idx), 0, len(SHIRT_SIZES) - 1))
    n_obs = int(rng.choice([1, 2, 3], p=np.asarray(cfg.n_obs_probs) / sum(cfg.n_obs_probs)))
    last = len(SHIRT_SIZES) - 1
    window = [i for i in (correct - 1, correct, correct + 1) if 0 <= i <= last]
    if n_obs >= len(window):
        chosen = window
    elif n_obs == 2:
        start = int(rng.integers(0, len(window) - 1))
        chosen = window[start:start + 2]
    else:
        chosen = [window[int(rng.integers(0, len(window)))]]
    girth = 0.16 * stature * (1.0 + rng.normal(0.0, 0.06)) * (1.03 if sex == 0 else 0.97)
    depth = 0.56 * (1.0 + rng.normal(0.0, 0.05))
    shape = tuple(float(v) for v in np.round(
        rng.normal(0.0, 0.04, 4) + [0.0, 0.0, 0.0, 0.05 * (1 - 2 * sex)], 6))
    body = BodyParams(height=0.38 * stature, girth=girth, depth=depth, shape=shape, sex=sex,
                      age=age, resolution=cfg.resolution,
                      seed=int(stream(master_seed, _TAG_BODY, k).integers(2**31)),
                      noise=cfg.shape_noise)
    return Subject(f"S{k + 1:03d}", sex, age, float(stature), idx, correct,
                   tuple(SHIRT_SIZES[i] for i in chosen), body)


def generate_corpus(master_seed, config: CorpusConfig | None = None) -> Corpus:
    """Population of subjects and meshes, reproducible from ``(master_seed, config)``."""
    cfg = config or CorpusConfig()
    if cfg.n_subjects < 1:
        raise DataError("n_subjects must be >= 1")
    subjects = [_subject(master_seed, k, cfg) for k in range(cfg.n_subjects)]
    meshes = {s.id: generate_body(s.body, s.id) for s in subjects}
    return Corpus(subjects, meshes, int(master_seed), cfg)


def write_corpus(corpus: Corpus, outdir):
    """Write OFF meshes plus ``manifest.json`` (per subject: mesh path, covariates, seed)."""
    outdir = Path(outdir)
    (outdir / "meshes").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in corpus.subjects:
        rel = f"meshes/{s.id}.off"
        write_off(corpus.meshes[s.id], outdir / rel)
        d = asdict(s)
        d["sizes"] = list(s.sizes)
        d["body"]["shape"] = list(s.body.shape)
        d["mesh"] = rel
        entries.append(d)
    manifest = {"master_seed": corpus.master_seed, "config": asdict(corpus.config),
                "shirt_sizes": list(SHIRT_SIZES), "subjects": entries}
    tmp = outdir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, outdir / "manifest.json")
    return outdir / "manifest.json"


def read_corpus_manifest(path):
    """Subjects listed in a corpus manifest (meshes are loaded separately)."""
    m = json.loads(Path(path).read_text())
    subs = []
    for d in m["subjects"]:
        body = dict(d["body"])
        body["shape"] = tuple(body["shape"])
        subs.append(Subject(d["id"], d["sex"], d["age"], d["stature"], d["size_index"],
                            d["correct_size"], tuple(d["sizes"]), BodyParams(**body)))
    cfg = m["config"]
    cfg["n_obs_probs"] = tuple(cfg["n_obs_probs"])
    cfg["age_range"] = tuple(cfg["age_range"])
    return subs, m["master_seed"], CorpusConfig(**cfg), {d["id"]: d["mesh"] for d in m["subjects"]}


# --------------------------------------------------------------------------
# Responses


@dataclass(frozen=True)
class LatentFitModel:
    """True parameters of the generating cumulative-logit model.

    ``functional_coefs`` are ``b*`` in the basis passed to
    :func:`generate_responses`; covariates are (shirt_size, sex, age).
    """

    thresholds: tuple = (-1.6, 1.6)
    scalar_coefs: tuple = (-1.2, 0.0, 0.0)
    functional_coefs: tuple = ()
    random_intercept_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if np.any(np.diff(self.thresholds) <= 0):
            raise DataError("thresholds must be increasing")
        if self.random_intercept_sd < 0:
            raise DataError("random-intercept SD must be non-negative")


def plant_signal(Z, target, n_components, rcond=1e-10):
    """``b*`` supported on the first ``n_components`` coefficients with ``Z b* ~ target``.

    ``Z`` is the (subjects x r) coefficient matrix; both sides are centered,
    so only the variation of ``target`` is matched (intercepts absorb the rest).
    """
    Z = np.asarray(Z, float)
    A = Z[:, :n_components] - Z[:, :n_components].mean(axis=0)
    t = np.asarray(target, float) - np.mean(target)
    b = np.zeros(Z.shape[1])
    if not np.any(A):
        return b
    # minimum-norm least squares, relative cutoff ``rcond`` on singular values
    b[:n_components] = np.linalg.lstsq(A, t, rcond=rcond)[0]
    return b


@dataclass
class GeneratedResponses:
    data: OrdinalDataset
    eta: np.ndarray
    random_effects: dict
    probs: np.ndarray


def generate_responses(corpus: Corpus, Z, hk_gram, model: LatentFitModel,
                       categories=DEFAULT_CATEGORIES) -> GeneratedResponses:
    """Sample one fit evaluation per (subject, size).

    ``Z`` holds each subject's basis coefficients in corpus order.  A random
    intercept is drawn once per subject; ``eta`` (without it) is recorded
    for oracle use.
    """
    Z = np.asarray(Z, float)
    b = np.asarray(model.functional_coefs, float)
    if Z.shape != (len(corpus.subjects), len(b)):
        raise DataError(f"coefficient matrix has shape {Z.shape}, expected "
                        f"({len(corpus.subjects)}, {len(b)})")
    rng = stream(model.seed, _TAG_RESPONSE)
    u = rng.standard_normal(len(corpus.subjects)) * model.random_intercept_sd
    G = np.asarray(hk_gram, float)
    fterm = Z @ (G @ b)
    subj, y, X, Zr, eta, probs = [], [], [], [], [], []
    alpha = np.asarray(model.thresholds, float)
    beta = np.asarray(model.scalar_coefs, float)
    for k, s in enumerate(corpus.subjects):
        for size in s.sizes:
            x = np.array([size, s.sex, s.age], float)
            e = float(x @ beta + fterm[k])
            cum = np.append(expit(alpha + e + u[k]), 1.0)
            p = np.diff(cum, prepend=0.0)
            code = int(np.searchsorted(cum, rng.uniform(), side="right"))
            subj.append(s.id)
            y.append(min(code, len(alpha)))
            X.append(x)
            Zr.append(Z[k])
            eta.append(e)
            probs.append(p)
    n = len(y)
    data = OrdinalDataset(np.array(subj), np.array(y, dtype=np.int64),
                          np.array(X).reshape(n, 3), np.array(Zr).reshape(n, len(b)),
                          tuple(categories), ("shirt_size", "sex", "age"))
    return GeneratedResponses(data, np.array(eta), dict(zip(corpus.ids(), u.tolist())),
                              np.array(probs).reshape(n, len(alpha) + 1))


def marginal_probs(thresholds, eta, sd, nq=40):
    """Category probabilities with the random intercept integrated out."""
    eta = np.asarray(eta, float)
    if not sd:
        cum = expit(np.asarray(thresholds)[None, :] + eta[:, None])
    else:
        z, w = np.polynomial.hermite.hermgauss(nq)
        u = math.sqrt(2.0) * sd * z
        cum = np.einsum("q,nqj->nj", w / math.sqrt(math.pi),
                        expit(np.asarray(thresholds)[None, None, :]
                              + eta[:, None, None] + u[None, :, None]))
    cum = np.concatenate([cum, np.ones((len(eta), 1))], axis=1)
    return np.diff(cum, axis=1, prepend=0.0)


def oracle_agreement(gen: GeneratedResponses, model: LatentFitModel):
    """Agreement (%) of Bayes-rule predictions from the true model.

    ``marginal``: modal category of the probabilities with the random
    intercept integrated out (the best rule for a new subject);
    ``conditional``: modal category at ``u = 0``.
    """
    y = gen.data.y
    out = {}
    for name, sd in (("marginal", model.random_intercept_sd), ("conditional", 0.0)):
        p = marginal_probs(model.thresholds, gen.eta, sd)
        out[name] = round(100.0 * float(np.mean(np.argmax(p, axis=1) == y)), 2)
        out[name + "_expected"] = round(100.0 * float(np.mean(np.max(p, axis=1))), 2)
    return out


# --------------------------------------------------------------------------
# Plain tabular simulation (no meshes), for estimator checks


def simulate_dataset(seed, n_subjects, n_per_subject, thresholds, scalar_coefs,
                     functional_coefs, random_intercept_sd, hk_gram=None,
                     categories=DEFAULT_CATEGORIES):
    """Draw a dataset from a known cumulative-logit model with Gaussian covariates."""
    rng = stream(seed, _TAG_SIM)
    alpha = np.asarray(thresholds, float)
    beta = np.asarray(scalar_coefs, float)
    b = np.asarray(functional_coefs, float)
    G = np.eye(len(b)) if hk_gram is None else np.asarray(hk_gram, float)
    n = n_subjects * n_per_subject
    subj = np.repeat([f"S{k + 1:04d}" for k in range(n_subjects)], n_per_subject)
    X = rng.standard_normal((n, len(beta)))
    Z = np.repeat(rng.standard_normal((n_subjects, len(b))), n_per_subject, axis=0)
    u = np.repeat(rng.standard_normal(n_subjects) * random_intercept_sd, n_per_subject)
    eta = X @ beta + Z @ (G @ b) + u
    cum = expit(alpha[None, :] + eta[:, None])
    y = np.sum(rng.uniform(size=(n, 1)) > cum, axis=1)
    return OrdinalDataset(subj, y, X, Z, tuple(categories))


__all__ = [
    "SHIRT_SIZES", "BodyParams", "CorpusConfig", "Corpus", "Subject", "LatentFitModel",
    "GeneratedResponses", "icosphere", "generate_body", "generate_corpus", "write_corpus",
    "read_corpus_manifest", "generate_responses", "plant_signal", "marginal_probs",
    "oracle_agreement", "simulate_dataset", "stature_to_index", "stream",
]

