"""One-dimensional Gaussian mixture model for fractional forecast errors.

Fitting uses expectation-maximization; the component count is chosen by
minimum description length. CDF and quantile queries turn a probabilistic
margin into a deterministic one.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from scipy.special import logsumexp, ndtr

VAR_FLOOR = 1e-10
EM_TOL = 1e-8
EM_MAX_ITER = 500
QUANTILE_TOL = 1e-10


class FitError(ValueError):
    """Raised when the data cannot support the requested fit."""


class DegenerateDataError(FitError):
    """Raised when every sample is identical and more than one component is requested."""


@dataclass(frozen=True)
class GmmModel:
    """Finite mixture of univariate normals.

    Components with zero variance are point masses; fitted models never
    produce them because EM clamps variances at ``VAR_FLOOR``.
    """

    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, means and variances must be equal-length 1-D sequences")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got sum {w.sum()!r}")
        if np.any(v < 0) or not np.all(np.isfinite(np.concatenate([m, v]))):
            raise ValueError("variances must be finite and nonnegative")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(float(x) for x in m))
        object.__setattr__(self, "variances", tuple(float(x) for x in v))

    @classmethod
    def point_mass(cls, value: float = 0.0) -> "GmmModel":
        return cls((1.0,), (value,), (0.0,))

    @classmethod
    def normal(cls, mean: float, std: float) -> "GmmModel":
        return cls((1.0,), (mean,), (std * std,))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def stds(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.variances))

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def pdf(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None]
        w, m, v = (np.asarray(a) for a in (self.weights, self.means, self.variances))
        if np.any(v == 0):
            raise ValueError("pdf undefined for point-mass components")
        return np.sum(w * np.exp(-0.5 * (t - m) ** 2 / v) / np.sqrt(2 * np.pi * v), axis=-1)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``size`` samples using ``rng``."""
        comp = rng.choice(self.n_components, size=size, p=np.asarray(self.weights))
        z = rng.standard_normal(size)
        return np.asarray(self.means)[comp] + self.stds[comp] * z

    def to_text(self) -> str:
        return "".join(
            f"component {k} weight={w!r} mean={m!r} var={v!r}\n"
            for k, (w, m, v) in enumerate(zip(self.weights, self.means, self.variances), start=1)
        )

    @classmethod
    def from_text(cls, text: str) -> "GmmModel":
        rows = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] != "component" or len(tokens) != 5:
                raise ValueError(f"line {lineno}: expected 'component <n> weight= mean= var='")
            kv = dict(tok.split("=", 1) for tok in tokens[2:])
            try:
                rows.append((int(tokens[1]), float(kv["weight"]), float(kv["mean"]), float(kv["var"])))
            except (KeyError, ValueError):
                raise ValueError(f"line {lineno}: malformed component record") from None
        if not rows:
            raise ValueError("no components found")
        rows.sort()
        if [r[0] for r in rows] != list(range(1, len(rows) + 1)):
            raise ValueError("component numbers must run 1..N")
        return cls(tuple(r[1] for r in rows), tuple(r[2] for r in rows), tuple(r[3] for r in rows))


@dataclass(frozen=True)
class EmFit:
    model: GmmModel
    log_likelihood: float
    history: tuple = field(repr=False)
    n_iter: int = 0
    converged: bool = False


def _check_data(data) -> np.ndarray:
    x = np.asarray(data, dtype=float).ravel()
    if x.size < 2:
        raise FitError(f"need at least 2 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise FitError("samples must be finite")
    return x


def _initial_means(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Quantile-spaced seeds refined by a few rounds of 1-D k-means."""
    means = np.quantile(x, (np.arange(n) + 0.5) / n)
    for _ in range(20):
        labels = np.argmin(np.abs(x[:, None] - means[None, :]), axis=1)
        new = means.copy()
        for k in range(n):
            members = x[labels == k]
            # an empty cluster is reseeded on a random sample
            new[k] = members.mean() if members.size else x[rng.integers(x.size)]
        if np.allclose(new, means, rtol=0, atol=1e-12):
            break
        means = new
    return np.sort(means)


def _log_joint(x, w, m, v):
    with np.errstate(divide="ignore"):
        const = np.log(w) - 0.5 * np.log(2 * np.pi * v)
    d = x[:, None] - m
    return const - (0.5 / v) * (d * d)


def em_fit(data, n_components: int, seed: int = 0, tol: float = EM_TOL,
           max_iter: int = EM_MAX_ITER, var_floor: float = VAR_FLOOR) -> EmFit:
    """Fit an ``n_components`` mixture to scalar samples by EM.

    Iteration stops when the log-likelihood improves by less than ``tol``
    or after ``max_iter`` iterations.
    """
    x = _check_data(data)
    if n_components < 1:
        raise FitError("n_components must be at least 1")
    if x.size < n_components:
        raise FitError(f"{x.size} samples cannot support {n_components} components")
    if n_components > 1 and np.ptp(x) == 0:
        raise DegenerateDataError("all samples are identical; only a single component can be fitted")
    rng = np.random.default_rng(seed)

    n = n_components
    m = _initial_means(x, n, rng)
    w = np.full(n, 1.0 / n)
    labels = np.argmin(np.abs(x[:, None] - m[None, :]), axis=1)
    pooled = np.mean((x - m[labels]) ** 2)
    v = np.full(n, max(pooled, var_floor))

    history = []
    converged = False
    it = 0
    xc = x[:, None]
    for it in range(1, max_iter + 1):
        lj = _log_joint(x, w, m, v)
        top = lj.max(axis=1, keepdims=True)
        resp = np.exp(lj - top)
        tot = resp.sum(axis=1, keepdims=True)
        loglik = float(np.sum(np.log(tot) + top))
        if history and abs(loglik - history[-1]) < tol:
            history.append(loglik)
            converged = True
            break
        history.append(loglik)
        resp /= tot
        nk = resp.sum(axis=0)
        # a starved component keeps its parameters but loses its weight
        alive = nk > 1e-300
        w = nk / x.size
        denom = np.where(alive, nk, 1.0)
        m = np.where(alive, (x @ resp) / denom, m)
        d = xc - m
        v = np.where(alive, np.einsum("ik,ik->k", resp, d * d) / denom, v)
        v = np.maximum(v, var_floor)
    else:
        lj = _log_joint(x, w, m, v)
        history.append(float(logsumexp(lj, axis=1).sum()))

    order = np.argsort(m, kind="stable")
    w = w[order] / w[order].sum()
    model = GmmModel(tuple(w), tuple(m[order]), tuple(v[order]))
    return EmFit(model, history[-1], tuple(history), it, converged)


def log_likelihood(model: GmmModel, data) -> float:
    x = np.asarray(data, dtype=float).ravel()
    v = np.maximum(np.asarray(model.variances), np.finfo(float).tiny)
    return float(logsumexp(_log_joint(x, np.asarray(model.weights), np.asarray(model.means), v), axis=1).sum())


def mdl_score(log_lik: float, n_components: int, n_samples: int) -> float:
    """Description length -logL + (3N - 1)/2 * ln q."""
    return -log_lik + 0.5 * (3 * n_components - 1) * math.log(n_samples)


@dataclass(frozen=True)
class MdlSelection:
    model: GmmModel
    n_components: int
    scores: tuple   # (N, mdl) for every candidate
    fits: tuple = field(repr=False)


def mdl_scan(data, n_max: int, seed: int = 0) -> MdlSelection:
    """Fit N = 1..n_max and keep the fit with the smallest description length."""
    x = _check_data(data)
    if n_max < 1:
        raise FitError("n_max must be at least 1")
    fits, scores = [], []
    for n in range(1, n_max + 1):
        if n > 1 and (x.size < n or np.ptp(x) == 0):
            break
        fit = em_fit(x, n, seed=seed)
        fits.append(fit)
        scores.append((n, mdl_score(fit.log_likelihood, n, x.size)))
    best = min(range(len(scores)), key=lambda k: (scores[k][1], k))
    return MdlSelection(fits[best].model, scores[best][0], tuple(scores), tuple(fits))


def mdl_select(data, n_max: int, seed: int = 0) -> GmmModel:
    return mdl_scan(data, n_max, seed).model


def mixture_cdf(model: GmmModel, t):
    """Mixture CDF, sum of weight * Phi((t - mean) / std); accepts scalars or arrays."""
    t_arr = np.asarray(t, dtype=float)
    w = np.asarray(model.weights)
    m = np.asarray(model.means)
    s = model.stds
    diff = t_arr[..., None] - m
    safe = np.where(s > 0, s, 1.0)
    phi = np.where(s > 0, ndtr(diff / safe), (diff >= 0).astype(float))
    out = np.sum(w * phi, axis=-1)
    return float(out) if np.ndim(t) == 0 else out


def mixture_quantile(model: GmmModel, p: float) -> float:
    """Smallest t with mixture_cdf(t) >= p, found by bisection."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    m = np.asarray(model.means)
    s = model.stds
    if np.all(s == 0):
        order = np.argsort(m, kind="stable")
        cum = np.cumsum(np.asarray(model.weights)[order])
        return float(m[order][np.searchsorted(cum, p - 1e-15)])
    spread = float(s.max())
    lo, hi = float(m.min()) - 10 * spread, float(m.max()) + 10 * spread
    while mixture_cdf(model, lo) > p:
        lo -= 10 * spread
    while mixture_cdf(model, hi) < p:
        hi += 10 * spread
    # bisect well past QUANTILE_TOL so steep components still meet it
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        c = mixture_cdf(model, mid)
        if abs(c - p) <= 1e-3 * QUANTILE_TOL:
            return mid
        if c < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# history files
# --------------------------------------------------------------------------

def errors_from_pairs(forecast: Iterable[float], actual: Iterable[float]) -> np.ndarray:
    f = np.asarray(list(forecast), dtype=float)
    a = np.asarray(list(actual), dtype=float)
    if np.any(f == 0):
        raise FitError("forecast values must be nonzero to form fractional errors")
    return (a - f) / f


def read_history(path: Union[str, Path]) -> np.ndarray:
    """Fractional errors (actual - forecast) / forecast from a history CSV."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"timestamp", "forecast", "actual"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise FitError(f"{path}: header must contain timestamp,forecast,actual")
        rows = [(float(r["forecast"]), float(r["actual"])) for r in reader]
    if not rows:
        raise FitError(f"{path}: no data rows")
    f, a = zip(*rows)
    return errors_from_pairs(f, a)
