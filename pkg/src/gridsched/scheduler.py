"""Hourly day-ahead purchase schedule under a probabilistic supply margin.

Demand realizations are modeled as ``g_dl * (1 + e)`` where ``e`` follows a
fitted :class:`~gridsched.errormodel.GmmModel`. The purchase for each hour is
sized so that supply covers demand with probability ``alpha``; the remaining
shortfall is bought in the real-time market and any surplus is resold.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from scipy.special import ndtr

from .errormodel import GmmModel, mixture_quantile

RESALE_SIGNS = ("added", "revenue")
MC_BLOCK = 10_000


def _vec(values, n=None, name="value") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 and n is not None:
        arr = np.full(n, float(arr))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D series")
    return arr


@dataclass(frozen=True)
class PriceSchedule:
    """Hourly prices in $/kWh: day-ahead, real-time, PV and resale."""

    c_da: np.ndarray
    c_rt: np.ndarray
    c_pv: np.ndarray
    c_s: np.ndarray

    def __post_init__(self):
        c_da = _vec(self.c_da, name="c_da")
        n = c_da.size
        arrays = {"c_da": c_da}
        for name in ("c_rt", "c_pv", "c_s"):
            arrays[name] = _vec(getattr(self, name), n, name)
            if arrays[name].size != n:
                raise ValueError(f"{name} has {arrays[name].size} hours, expected {n}")
        if not np.all((arrays["c_s"] < c_da) & (c_da < arrays["c_rt"])):
            bad = np.flatnonzero(~((arrays["c_s"] < c_da) & (c_da < arrays["c_rt"])))
            raise ValueError(f"prices must satisfy c_s < c_da < c_rt; violated at hours {bad.tolist()}")
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.c_da.size


@dataclass(frozen=True)
class DemandSeries:
    """Hourly demand and PV forecast in kWh."""

    g_dl: np.ndarray
    g_pv_forecast: np.ndarray

    def __post_init__(self):
        g_dl = _vec(self.g_dl, name="g_dl")
        g_pv = _vec(self.g_pv_forecast, g_dl.size, "g_pv_forecast")
        if g_dl.size < 1 or g_pv.size != g_dl.size:
            raise ValueError("demand and PV series must share a horizon of at least one hour")
        if np.any(g_dl < 0) or np.any(g_pv < 0):
            raise ValueError("demand and PV forecast must be nonnegative")
        for name, arr in (("g_dl", g_dl), ("g_pv_forecast", g_pv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.g_dl.size


@dataclass(frozen=True)
class PurchaseBounds:
    """Per-hour bounds in kWh; scalars apply to every hour."""

    g_da_min: float = 0.0
    g_da_max: float = np.inf
    g_rt_min: float = 0.0
    g_rt_max: float = np.inf
    g_pv_min: float = 0.0
    g_pv_max: float = np.inf

    def __post_init__(self):
        for lo, hi in (("g_da_min", "g_da_max"), ("g_rt_min", "g_rt_max"), ("g_pv_min", "g_pv_max")):
            a, b = np.asarray(getattr(self, lo), float), np.asarray(getattr(self, hi), float)
            if np.any(a < 0) or np.any(a > b):
                raise ValueError(f"need 0 <= {lo} <= {hi}")

    def hourly(self, name: str, n: int) -> np.ndarray:
        return _vec(getattr(self, name), n, name)


@dataclass(frozen=True)
class DayAheadSchedule:
    g_da: np.ndarray
    g_pv: np.ndarray
    lam: np.ndarray
    expected_rt: np.ndarray
    f1: float
    alpha: float
    g_dl: np.ndarray = field(default=None)
    clamped: np.ndarray = field(default=None)
    breakdown: np.ndarray = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return len(self.g_da)


class Purchase(NamedTuple):
    g_da: np.ndarray
    g_pv: np.ndarray
    clamped: np.ndarray


@dataclass(frozen=True)
class ForecastNext:
    """Next-period forecast: a point value plus the scaled error distribution."""

    last: float
    point: float
    model: GmmModel

    def quantile(self, p: float) -> float:
        return self.last * (1.0 + mixture_quantile(self.model, p))


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    std_error: float
    half_width: float
    n_samples: int


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def forecast_next(g_da_hist, err_model: GmmModel) -> ForecastNext:
    """Persistence forecast scaled by the expected fractional error."""
    hist = np.asarray(g_da_hist, dtype=float).ravel()
    if hist.size == 0:
        raise ValueError("history must be nonempty")
    last = float(hist[-1])
    return ForecastNext(last, last * (1.0 + err_model.mean()), err_model)


def dispatch_pv(demand: DemandSeries, bounds: PurchaseBounds) -> np.ndarray:
    n = demand.horizon
    return np.clip(demand.g_pv_forecast, bounds.hourly("g_pv_min", n), bounds.hourly("g_pv_max", n))


def deterministic_purchase(demand: DemandSeries, err_model: GmmModel, alpha: float,
                           bounds: PurchaseBounds = PurchaseBounds()) -> Purchase:
    """Day-ahead purchase covering demand with probability ``alpha``.

    ``g_da = clamp(g_dl * (1 + Q(alpha)) - g_pv)`` where ``Q`` is the error
    quantile. ``clamped`` marks hours where a bound was active.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = demand.horizon
    g_pv = dispatch_pv(demand, bounds)
    q = mixture_quantile(err_model, alpha)
    raw = demand.g_dl * (1.0 + q) - g_pv
    lo, hi = bounds.hourly("g_da_min", n), bounds.hourly("g_da_max", n)
    g_da = np.clip(raw, lo, hi)
    return Purchase(g_da, g_pv, (raw < lo) | (raw > hi))


def recourse_indicator(g_da, g_pv, g_dl):
    """1 where day-ahead plus PV supply falls short of demand, else 0."""
    out = (np.asarray(g_da) + np.asarray(g_pv) < np.asarray(g_dl)).astype(int)
    return int(out) if out.ndim == 0 else out


def _check_sign(resale_sign: str):
    if resale_sign not in RESALE_SIGNS:
        raise ValueError(f"resale_sign must be one of {RESALE_SIGNS}, got {resale_sign!r}")
    return 1.0 if resale_sign == "added" else -1.0


def hourly_cost(g_da, g_pv, g_dl, prices: PriceSchedule, resale_sign: str = "added") -> np.ndarray:
    """Per-hour cost terms; ``g_dl`` may carry extra leading sample axes.

    Returns an array with a trailing axis of four terms:
    day-ahead, PV, real-time and resale.
    """
    sign = _check_sign(resale_sign)
    g_dl = np.asarray(g_dl, dtype=float)
    supply = g_da + g_pv
    lam = supply < g_dl
    g_rt = np.maximum(g_dl - supply, 0.0)
    da = np.broadcast_to(prices.c_da * g_da, g_dl.shape)
    pv = np.broadcast_to(prices.c_pv * g_pv, g_dl.shape)
    rt = np.where(lam, prices.c_rt * g_rt, 0.0)
    resale = np.where(lam, 0.0, sign * prices.c_s * (supply - g_dl))
    return np.stack([da, pv, rt, resale], axis=-1)


def evaluate_f1(schedule: DayAheadSchedule, prices: PriceSchedule, realized_demand: DemandSeries,
                resale_sign: str = "added") -> tuple[float, np.ndarray]:
    """Substation cost for one realized demand path.

    Returns the total and the per-hour breakdown (hours x 4 terms).
    """
    n = schedule.horizon
    if prices.horizon != n or realized_demand.horizon != n:
        raise ValueError(f"horizon mismatch: schedule {n}, prices {prices.horizon}, "
                         f"demand {realized_demand.horizon}")
    terms = hourly_cost(schedule.g_da, schedule.g_pv, realized_demand.g_dl, prices, resale_sign)
    return float(terms.sum()), terms


def expected_shortfall(g_da, g_pv, g_dl, err_model: GmmModel) -> np.ndarray:
    """Closed-form E[max(g_dl * (1 + e) - g_da - g_pv, 0)] under the mixture."""
    g_dl = np.asarray(g_dl, dtype=float)[..., None]
    supply = (np.asarray(g_da) + np.asarray(g_pv))[..., None]
    mu = g_dl * (1.0 + np.asarray(err_model.means)) - supply
    sd = g_dl * err_model.stds
    safe = np.where(sd > 0, sd, 1.0)
    z = mu / safe
    gauss = mu * ndtr(z) + sd * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    part = np.where(sd > 0, gauss, np.maximum(mu, 0.0))
    return np.sum(np.asarray(err_model.weights) * part, axis=-1)


def build_schedule(demand: DemandSeries, prices: PriceSchedule, err_model: GmmModel, alpha: float,
                   bounds: PurchaseBounds = PurchaseBounds(), resale_sign: str = "added") -> DayAheadSchedule:
    """Size purchases for ``alpha`` and cost them at the point forecast."""
    if prices.horizon != demand.horizon:
        raise ValueError(f"horizon mismatch: prices {prices.horizon}, demand {demand.horizon}")
    buy = deterministic_purchase(demand, err_model, alpha, bounds)
    lam = recourse_indicator(buy.g_da, buy.g_pv, demand.g_dl)
    exp_rt = expected_shortfall(buy.g_da, buy.g_pv, demand.g_dl, err_model)
    terms = hourly_cost(buy.g_da, buy.g_pv, demand.g_dl, prices, resale_sign)
    return DayAheadSchedule(buy.g_da, buy.g_pv, np.asarray(lam), exp_rt, float(terms.sum()), float(alpha),
                            demand.g_dl, buy.clamped, terms)


def _block_sums(args):
    seed_seq, size, g_da, g_pv, g_dl, prices, model, resale_sign = args
    rng = np.random.default_rng(seed_seq)
    e = model.sample(size * g_dl.size, rng).reshape(size, g_dl.size)
    cost = hourly_cost(g_da, g_pv, g_dl * (1.0 + e), prices, resale_sign).sum(axis=(-1, -2))
    return float(cost.sum()), float(np.dot(cost, cost))


def expected_f1(schedule: DayAheadSchedule, prices: PriceSchedule, err_model: GmmModel, demand: DemandSeries,
                n_samples: int = 100_000, seed: int = 0, resale_sign: str = "added",
                workers: int = 1) -> MonteCarloEstimate:
    """Monte Carlo mean of the substation cost over demand realizations.

    Samples are drawn in fixed blocks of ``MC_BLOCK`` with per-block seeds
    spawned from ``seed`` and reduced in block order, so the estimate does
    not depend on ``workers``. The half-width is 1.96 standard errors.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    if prices.horizon != schedule.horizon or demand.horizon != schedule.horizon:
        raise ValueError("horizon mismatch between schedule, prices and demand")
    sizes = [MC_BLOCK] * (n_samples // MC_BLOCK)
    if n_samples % MC_BLOCK:
        sizes.append(n_samples % MC_BLOCK)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = [(s, k, schedule.g_da, schedule.g_pv, demand.g_dl, prices, err_model, resale_sign)
            for s, k in zip(seeds, sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_sums, jobs))
    else:
        parts = [_block_sums(j) for j in jobs]
    total = sq = 0.0
    for s1, s2 in parts:
        total += s1
        sq += s2
    mean = total / n_samples
    var = max(sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    se = float(np.sqrt(var / n_samples))
    return MonteCarloEstimate(mean, se, 1.96 * se, n_samples)


def shortfall_frequency(g_da, g_pv, g_dl, err_model: GmmModel, n_samples: int, seed: int = 0) -> np.ndarray:
    """Per-hour fraction of sampled demand paths that exceed day-ahead plus PV supply."""
    rng = np.random.default_rng(seed)
    g_dl = np.atleast_1d(np.asarray(g_dl, dtype=float))
    supply = np.atleast_1d(np.asarray(g_da) + np.asarray(g_pv))
    hits = np.zeros(g_dl.size)
    done = 0
    while done < n_samples:
        k = min(MC_BLOCK * 10, n_samples - done)
        e = err_model.sample(k * g_dl.size, rng).reshape(k, g_dl.size)
        hits += np.sum(g_dl * (1.0 + e) > supply, axis=0)
        done += k
    return hits / n_samples


# --------------------------------------------------------------------------
# CSV input / output
# --------------------------------------------------------------------------

PRICE_COLUMNS = ("hour", "c_da", "c_rt", "c_pv", "c_s", "g_dl", "g_pv_forecast")


def read_prices_demand(path: Union[str, Path]) -> tuple[PriceSchedule, DemandSeries]:
    """Read the ``hour,c_da,c_rt,c_pv,c_s,g_dl,g_pv_forecast`` table."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(PRICE_COLUMNS) <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {','.join(PRICE_COLUMNS)}")
        rows = sorted(({k: float(r[k]) for k in PRICE_COLUMNS} for r in reader), key=lambda r: r["hour"])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    col = {k: np.array([r[k] for r in rows]) for k in PRICE_COLUMNS}
    prices = PriceSchedule(col["c_da"], col["c_rt"], col["c_pv"], col["c_s"])
    return prices, DemandSeries(col["g_dl"], col["g_pv_forecast"])


SCHEDULE_COLUMNS = ("hour", "g_da", "g_pv", "lambda", "expected_rt",
                    "cost_da", "cost_pv", "cost_rt", "cost_resale", "cost_total")


def schedule_rows(schedule: DayAheadSchedule):
    for t in range(schedule.horizon):
        terms = schedule.breakdown[t]
        yield (t, schedule.g_da[t], schedule.g_pv[t], int(schedule.lam[t]), schedule.expected_rt[t],
               *terms, terms.sum())
