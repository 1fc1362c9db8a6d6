"""End-to-end run: error fit, day-ahead schedule, hourly OPF and reports.

Step one sizes purchases from the fitted error model; step two solves one
OPF per hour on the scheduled demand. The two steps are sequential, so the
loss weight ``beta`` never feeds back into the purchases.
"""
from __future__ import annotations

import configparser
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .admm import AdmmConfig, AdmmResult, solve
from .errormodel import GmmModel, MdlSelection, mdl_scan, read_history
from .grid import FeederNetwork, load_feeder, validate_radial
from .scheduler import (RESALE_SIGNS, SCHEDULE_COLUMNS, DayAheadSchedule, DemandSeries, MonteCarloEstimate,
                        PriceSchedule, build_schedule, expected_f1, read_prices_demand, schedule_rows)
from .socp import build_problem, solution_csv

DEFAULT_PV_BUSES = (7, 23, 29, 35, 47, 49, 65, 76, 83, 99)
SWEEP_COLUMNS = ("alpha", "f1", "f1_expected", "f1_half_width", "f2_kwh", "cost", "expected_cost")


class PipelineError(RuntimeError):
    """A failure inside one pipeline stage, optionally tied to an hour."""

    def __init__(self, stage: str, message: str, hour: Optional[int] = None):
        where = f"[{stage}]" if hour is None else f"[{stage}] hour {hour}"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.hour = hour


@dataclass(frozen=True)
class RunConfig:
    feeder: Path
    prices: Path
    history: Path
    alpha: float = 0.9
    beta: Union[float, str] = "auto"
    horizon: int = 24
    seed: int = 0
    admm: AdmmConfig = AdmmConfig()
    resale_sign: str = "added"
    pv_buses: tuple = DEFAULT_PV_BUSES
    pv_power_factor: float = 1.0
    v0: float = 1.0
    n_max: int = 4
    mc_samples: int = 100_000
    workers: int = 1

    def __post_init__(self):
        for name in ("feeder", "prices", "history"):
            path = Path(getattr(self, name))
            if not path.is_file():
                raise PipelineError("config", f"{name} file not found: {path}")
            object.__setattr__(self, name, path)
        if not 0.0 < self.alpha < 1.0:
            raise PipelineError("config", f"alpha must lie in (0, 1), got {self.alpha}")
        if self.horizon < 1:
            raise PipelineError("config", f"horizon must be at least 1, got {self.horizon}")
        if not (self.beta == "auto" or (isinstance(self.beta, (int, float)) and self.beta >= 0)):
            raise PipelineError("config", f"beta must be 'auto' or a nonnegative number, got {self.beta!r}")
        if self.resale_sign not in RESALE_SIGNS:
            raise PipelineError("config", f"resale_sign must be one of {RESALE_SIGNS}")
        if self.n_max < 1 or self.mc_samples < 100 or self.workers < 1:
            raise PipelineError("config", "n_max >= 1, mc_samples >= 100 and workers >= 1 are required")

    def beta_value(self, prices: PriceSchedule) -> float:
        return float(np.mean(prices.c_da)) if self.beta == "auto" else float(self.beta)


def default_config_path() -> Path:
    return Path(str(resources.files("gridsched") / "data" / "default.cfg"))


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key).strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise PipelineError("config", f"[{section}] {key} = {raw!r}: {exc}") from None


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _beta(text: str):
    return "auto" if text.lower() == "auto" else float(text)


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def load_config(path: Union[str, Path], **overrides) -> RunConfig:
    """Read a ``key = value`` config with ``[data]``, ``[schedule]``, ``[network]``,
    ``[admm]`` and ``[run]`` sections. Relative paths resolve against the
    config file's directory. Keyword ``overrides`` replace parsed fields.
    """
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with path.open(encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise PipelineError("config", f"{path}: {exc}") from None
    base = path.resolve().parent

    def data_path(key):
        if not cp.has_option("data", key):
            raise PipelineError("config", f"{path}: [data] {key} is required")
        p = Path(cp.get("data", key).strip())
        return p if p.is_absolute() else base / p

    d = AdmmConfig()
    try:
        admm = AdmmConfig(
            rho=_get(cp, "admm", "rho", float, d.rho),
            eps_primal=_get(cp, "admm", "eps_primal", float, d.eps_primal),
            eps_dual=_get(cp, "admm", "eps_dual", float, d.eps_dual),
            max_iter=_get(cp, "admm", "max_iter", int, d.max_iter),
            over_relaxation=_get(cp, "admm", "over_relaxation", float, d.over_relaxation),
            dual_start=_get(cp, "admm", "dual_start", str, d.dual_start),
            adaptive_rho=_get(cp, "admm", "adaptive_rho", _bool, d.adaptive_rho),
        )
    except ValueError as exc:
        raise PipelineError("config", f"[admm] {exc}") from None
    fields = dict(
        feeder=data_path("feeder"),
        prices=data_path("prices"),
        history=data_path("history"),
        alpha=_get(cp, "schedule", "alpha", float, 0.9),
        beta=_get(cp, "schedule", "beta", _beta, "auto"),
        horizon=_get(cp, "schedule", "horizon", int, 24),
        seed=_get(cp, "schedule", "seed", int, 0),
        resale_sign=_get(cp, "schedule", "resale_sign", str, "added"),
        n_max=_get(cp, "schedule", "n_max", int, 4),
        mc_samples=_get(cp, "schedule", "mc_samples", int, 100_000),
        pv_buses=_get(cp, "network", "pv_buses", _int_list, DEFAULT_PV_BUSES),
        pv_power_factor=_get(cp, "network", "pv_power_factor", float, 1.0),
        v0=_get(cp, "network", "v0", float, 1.0),
        workers=_get(cp, "run", "workers", int, 1),
        admm=admm,
    )
    fields.update(overrides)
    return RunConfig(**fields)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class SweepRow:
    alpha: float
    f1: float
    f1_expected: float
    f1_half_width: float
    f2_kwh: float
    cost: float
    expected_cost: float

    def values(self):
        return (self.alpha, self.f1, self.f1_expected, self.f1_half_width, self.f2_kwh, self.cost,
                self.expected_cost)


@dataclass
class RunReport:
    """Outcome of one run. ``cost = f1 + beta * f2_kwh`` by construction."""

    f1: float = 0.0
    f2_kwh: float = 0.0
    beta: float = 0.0
    f1_expected: Optional[MonteCarloEstimate] = None
    schedule: Optional[DayAheadSchedule] = None
    error_fit: Optional[MdlSelection] = None
    hours: list = field(default_factory=list)    # AdmmResult per hour
    base_kw: float = 1000.0
    sweep: Optional[list] = None

    @property
    def f2_cost(self) -> float:
        return self.beta * self.f2_kwh

    @property
    def cost(self) -> float:
        return self.f1 + self.f2_cost

    @property
    def expected_cost(self) -> float:
        f1 = self.f1_expected.mean if self.f1_expected is not None else self.f1
        return f1 + self.f2_cost

    def hour_losses_kw(self) -> np.ndarray:
        return np.array([float(np.sum(h.solution.loss * self.base_kw)) for h in self.hours])

    @property
    def flags(self) -> list:
        return [(t, f) for t, h in enumerate(self.hours) for f in h.flags]

    @property
    def sweep_direction(self) -> Optional[str]:
        if not self.sweep:
            return None
        return monotone_direction([row.expected_cost for row in self.sweep])


def monotone_direction(values: Sequence[float]) -> str:
    d = np.diff(np.asarray(values, dtype=float))
    if d.size == 0:
        return "constant"
    if np.all(d > 0):
        return "increasing"
    if np.all(d < 0):
        return "decreasing"
    return "not monotone"


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

@dataclass
class Inputs:
    network: FeederNetwork
    prices: PriceSchedule
    demand: DemandSeries
    errors: np.ndarray


def load_inputs(cfg: RunConfig) -> Inputs:
    try:
        net = load_feeder(cfg.feeder)
        report = validate_radial(net)
        if not report.ok:
            raise ValueError(report.describe())
    except (OSError, ValueError) as exc:
        raise PipelineError("ingest", f"feeder {cfg.feeder}: {exc}") from None
    try:
        prices, demand = read_prices_demand(cfg.prices)
    except (OSError, ValueError) as exc:
        raise PipelineError("ingest", f"prices {cfg.prices}: {exc}") from None
    if prices.horizon < cfg.horizon:
        raise PipelineError("ingest", f"{cfg.prices} has {prices.horizon} hours, horizon is {cfg.horizon}")
    n = cfg.horizon
    prices = PriceSchedule(prices.c_da[:n], prices.c_rt[:n], prices.c_pv[:n], prices.c_s[:n])
    demand = DemandSeries(demand.g_dl[:n], demand.g_pv_forecast[:n])
    try:
        errors = read_history(cfg.history)
    except (OSError, ValueError) as exc:
        raise PipelineError("ingest", f"history {cfg.history}: {exc}") from None
    return Inputs(net, prices, demand, errors)


def fit_errors(cfg: RunConfig, errors: np.ndarray) -> MdlSelection:
    try:
        return mdl_scan(errors, cfg.n_max, seed=cfg.seed)
    except ValueError as exc:
        raise PipelineError("error-model", str(exc)) from None


def schedule_step(cfg: RunConfig, inputs: Inputs, model: GmmModel, alpha: float):
    """Day-ahead schedule plus its Monte Carlo expected cost."""
    try:
        sched = build_schedule(inputs.demand, inputs.prices, model, alpha, resale_sign=cfg.resale_sign)
        est = expected_f1(sched, inputs.prices, model, inputs.demand, n_samples=cfg.mc_samples,
                          seed=cfg.seed, resale_sign=cfg.resale_sign, workers=cfg.workers)
    except ValueError as exc:
        raise PipelineError("schedule", str(exc)) from None
    return sched, est


def solve_hour(cfg: RunConfig, net: FeederNetwork, schedule: DayAheadSchedule, hour: int) -> AdmmResult:
    try:
        prob = build_problem(net, schedule, hour, cfg.pv_buses, cfg.pv_power_factor, cfg.v0)
        return solve(prob, cfg.admm)
    except (ValueError, IndexError, ArithmeticError) as exc:
        raise PipelineError("opf", str(exc), hour) from None


def opf_step(cfg: RunConfig, net: FeederNetwork, schedule: DayAheadSchedule) -> list:
    """Per-hour OPF; results are ordered by hour whatever the worker count."""
    hours = range(schedule.horizon)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(lambda t: solve_hour(cfg, net, schedule, t), hours))
    return [solve_hour(cfg, net, schedule, t) for t in hours]


def _report(cfg, inputs, fit, sched, est, results) -> RunReport:
    rep = RunReport(f1=sched.f1, beta=cfg.beta_value(inputs.prices), f1_expected=est, schedule=sched,
                    error_fit=fit, hours=results, base_kw=1000.0 * inputs.network.base_mva)
    rep.f2_kwh = float(sum(rep.hour_losses_kw()))
    return rep


def run_pipeline(cfg: RunConfig) -> RunReport:
    inputs = load_inputs(cfg)
    fit = fit_errors(cfg, inputs.errors)
    sched, est = schedule_step(cfg, inputs, fit.model, cfg.alpha)
    results = opf_step(cfg, inputs.network, sched)
    return _report(cfg, inputs, fit, sched, est, results)


def alpha_sweep(cfg: RunConfig, alphas: Sequence[float]) -> RunReport:
    """Rerun scheduling and OPF for each alpha with the same fit and seeds.

    Returns the report of the first alpha with ``sweep`` filled in.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise PipelineError("config", "at least one alpha is required")
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise PipelineError("config", f"alpha must lie in (0, 1), got {a}")
    inputs = load_inputs(cfg)
    fit = fit_errors(cfg, inputs.errors)
    first = None
    rows = []
    for a in alphas:
        sched, est = schedule_step(cfg, inputs, fit.model, a)
        results = opf_step(cfg, inputs.network, sched)
        rep = _report(replace(cfg, alpha=a), inputs, fit, sched, est, results)
        rows.append(SweepRow(a, rep.f1, est.mean, est.half_width, rep.f2_kwh, rep.cost, rep.expected_cost))
        if first is None:
            first = rep
    first.sweep = rows
    return first


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def summary_text(rep: RunReport) -> str:
    est = rep.f1_expected
    lines = [
        f"f1 = {_fmt(rep.f1)}",
        f"f2_kwh = {_fmt(rep.f2_kwh)}",
        f"beta = {_fmt(rep.beta)}",
        f"f2_cost = {_fmt(rep.f2_cost)}",
        f"C = {_fmt(rep.cost)}",
        f"f1_expected = {_fmt(est.mean if est else 0.0)}",
        f"f1_expected_half_width = {_fmt(est.half_width if est else 0.0)}",
        f"C_expected = {_fmt(rep.expected_cost)}",
        f"hours = {len(rep.hours)}",
        f"converged_hours = {sum(h.converged for h in rep.hours)}",
        f"tight_hours = {sum(h.tight for h in rep.hours)}",
        f"max_iterations = {max((h.iterations for h in rep.hours), default=0)}",
    ]
    if rep.schedule is not None:
        lines.append(f"alpha = {_fmt(rep.schedule.alpha)}")
    if rep.error_fit is not None:
        lines.append(f"error_components = {rep.error_fit.n_components}")
    flags = "; ".join(f"hour {t}: {f}" for t, f in rep.flags) or "none"
    lines.append(f"flags = {flags}")
    if rep.sweep:
        lines.append(f"sweep_direction = {rep.sweep_direction}")
    return "\n".join(lines) + "\n"


def report_files(rep: RunReport) -> dict:
    """File name to content for every report of ``rep``."""
    files = {"summary.txt": summary_text(rep)}
    if rep.schedule is not None:
        files["schedule.csv"] = _csv(SCHEDULE_COLUMNS, schedule_rows(rep.schedule))
    for t, res in enumerate(rep.hours):
        files[f"opf_hour_{t}.csv"] = solution_csv(res.solution)
        files[f"residuals_hour_{t}.csv"] = res.trace.to_csv()
    if rep.error_fit is not None:
        files["error_model.txt"] = rep.error_fit.model.to_text()
    if rep.sweep:
        files["alpha_sweep.csv"] = _csv(SWEEP_COLUMNS, (r.values() for r in rep.sweep))
        plot = ["# alpha expected_cost half_width", f"# direction: {rep.sweep_direction}"]
        plot += [f"{_fmt(r.alpha)} {_fmt(r.expected_cost)} {_fmt(r.f1_half_width)}" for r in rep.sweep]
        files["alpha_sweep.dat"] = "\n".join(plot) + "\n"
    return files


def emit_reports(rep: RunReport, out_dir: Union[str, Path]) -> list:
    """Write every report into ``out_dir``; rewriting the same report yields identical files."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineError("report", f"{out}: {exc}") from None
    for name, text in report_files(rep).items():
        path = out / name
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise PipelineError("report", f"{path}: {exc}") from None
        written.append(path)
    return written
