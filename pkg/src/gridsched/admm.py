"""Consensus ADMM for the relaxed branch-flow OPF.

Splitting
---------
Every non-root bus ``j`` is an agent. It owns the branch feeding it, holding
that branch's ``(P, Q, l)``, a copy ``w`` of its parent's squared voltage and
its own squared voltage ``v``. The root agent holds only ``v``. All local
constraints (the cone ``P^2 + Q^2 <= w l``, ``l <= l_max`` and voltage
boxes) and the loss ``r l`` sit in the agents' blocks ``x``.

The consensus vector ``z`` carries one value per shared quantity
(``P``, ``Q``, ``l`` per branch and ``v`` per bus). Its update averages the
agents' copies and then projects onto the linear branch-flow equations,
so ``z`` always satisfies power balance and voltage drop exactly. The
projection uses a sparse factorization computed once per problem.

Penalty metric
--------------
The augmented term weights ``P`` and ``Q`` by 2 and every other copy by 1.
With that metric the cone projection is the closed-form projection onto a
standard second-order cone.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .socp import OpfProblem, OpfSolution, is_tight

PQ_WEIGHT = 2.0
MU_ITER = 200


class InfeasibleAgentError(ValueError):
    """Raised when an agent's local boxes admit no point."""

    def __init__(self, bus_id, reason):
        super().__init__(f"agent at bus {bus_id}: {reason}")
        self.bus_id = bus_id


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 0.01
    eps_primal: float = 5e-4
    eps_dual: float = 5e-4
    max_iter: int = 200
    over_relaxation: float = 1.5
    dual_start: str = "sensitivity"
    adaptive_rho: bool = False

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_primal > 0 and self.eps_dual > 0):
            raise ValueError("residual thresholds must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 1.0 <= self.over_relaxation <= 1.8:
            raise ValueError("over_relaxation must lie in [1, 1.8]")
        if self.dual_start not in ("sensitivity", "zero"):
            raise ValueError("dual_start must be 'sensitivity' or 'zero'")


@dataclass
class LocalBlock:
    """Stacked agent variables: per-branch P, Q, l, w and per-bus v."""

    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    w: np.ndarray
    v: np.ndarray

    def __add__(self, other):
        return LocalBlock(*(a + b for a, b in zip(self.parts(), other.parts())))

    def __sub__(self, other):
        return LocalBlock(*(a - b for a, b in zip(self.parts(), other.parts())))

    def scale(self, c: float) -> "LocalBlock":
        return LocalBlock(*(c * a for a in self.parts()))

    def parts(self):
        return (self.P, self.Q, self.l, self.w, self.v)

    def copy(self) -> "LocalBlock":
        return LocalBlock(*(a.copy() for a in self.parts()))

    def max_abs(self) -> float:
        return float(max((np.abs(a).max() if a.size else 0.0) for a in self.parts()))

    @classmethod
    def zeros(cls, m: int, n: int) -> "LocalBlock":
        return cls(np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(n))


@dataclass
class ResidualTrace:
    primal: list = field(default_factory=list)
    dual: list = field(default_factory=list)
    objective: list = field(default_factory=list)

    def append(self, primal: float, dual: float, objective: float):
        self.primal.append(primal)
        self.dual.append(dual)
        self.objective.append(objective)

    def __len__(self):
        return len(self.primal)

    def first_below(self, eps_primal: float, eps_dual: float) -> Optional[int]:
        """1-based iteration at which both residuals first fall below the thresholds."""
        for k, (rp, rd) in enumerate(zip(self.primal, self.dual), start=1):
            if rp < eps_primal and rd < eps_dual:
                return k
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "primal_residual", "dual_residual", "objective"])
        for k, (rp, rd, obj) in enumerate(zip(self.primal, self.dual, self.objective), start=1):
            w.writerow([k, repr(float(rp)), repr(float(rd)), repr(float(obj))])
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


class ConsensusMap:
    """Index bookkeeping and the projection onto the branch-flow equations."""

    def __init__(self, prob: OpfProblem):
        m, n = prob.n_branch, prob.n_bus
        self.m, self.n = m, n
        self.iP = np.arange(m)
        self.iQ = m + self.iP
        self.il = 2 * m + self.iP
        self.iv = 3 * m + np.arange(n)
        self.size = 3 * m + n
        self.from_idx = prob.from_idx
        self.E, self.f = _equality_system(prob, self)
        copies = np.ones(n)
        np.add.at(copies, self.from_idx, 1.0)
        wt = np.ones(self.size)
        wt[self.iP] = PQ_WEIGHT
        wt[self.iQ] = PQ_WEIGHT
        wt[self.iv] = copies
        self.weights = wt
        self.copies = copies
        gram = (self.E @ sp.diags(1.0 / wt) @ self.E.T).tocsc()
        self._lu = spl.splu(gram)

    def split(self, z: np.ndarray):
        return z[self.iP], z[self.iQ], z[self.il], z[self.iv]

    def spread(self, z: np.ndarray) -> LocalBlock:
        """Consensus values seen by every copy (the map M z)."""
        P, Q, l, v = self.split(z)
        return LocalBlock(P.copy(), Q.copy(), l.copy(), v[self.from_idx].copy(), v.copy())

    def average(self, block: LocalBlock) -> np.ndarray:
        """Metric-weighted average of the copies of each shared quantity."""
        t = np.empty(self.size)
        t[self.iP] = block.P
        t[self.iQ] = block.Q
        t[self.il] = block.l
        vsum = block.v.copy()
        np.add.at(vsum, self.from_idx, block.w)
        t[self.iv] = vsum / self.copies
        return t

    def project(self, t: np.ndarray) -> np.ndarray:
        """Closest point to ``t`` (in the consensus metric) satisfying ``E z = f``."""
        lam = self._lu.solve(self.f - self.E @ t)
        return t + (self.E.T @ lam) / self.weights


def _equality_system(prob: OpfProblem, cmap: ConsensusMap):
    m = prob.n_branch
    r, x = prob.r, prob.x
    rows, cols, vals = [], [], []
    rhs = np.zeros(3 * m + 1)
    kids = [[] for _ in range(prob.n_bus)]
    for k in range(m):
        kids[prob.from_idx[k]].append(k)
    for k in range(m):
        j = k + 1
        e = 3 * k
        rows += [e, e]
        cols += [cmap.iP[k], cmap.il[k]]
        vals += [1.0, -r[k]]
        rows += [e + 1, e + 1]
        cols += [cmap.iQ[k], cmap.il[k]]
        vals += [1.0, -x[k]]
        for c in kids[j]:
            rows += [e, e + 1]
            cols += [cmap.iP[c], cmap.iQ[c]]
            vals += [-1.0, -1.0]
        rhs[e] = -prob.p_inj[j]
        rhs[e + 1] = -prob.q_inj[j]
        rows += [e + 2] * 5
        cols += [cmap.iv[j], cmap.iv[prob.from_idx[k]], cmap.iP[k], cmap.iQ[k], cmap.il[k]]
        vals += [1.0, -1.0, 2 * r[k], 2 * x[k], -(r[k] ** 2 + x[k] ** 2)]
    rows.append(3 * m)
    cols.append(cmap.iv[0])
    vals.append(1.0)
    rhs[3 * m] = prob.v0
    E = sp.csr_matrix((vals, (rows, cols)), shape=(3 * m + 1, cmap.size))
    return E, rhs


# --------------------------------------------------------------------------
# local step
# --------------------------------------------------------------------------

def project_cone(aP, aQ, aw, al):
    """Project onto {P^2 + Q^2 <= w l, w >= 0, l >= 0} in the metric diag(2, 2, 1, 1).

    Scaling P and Q by sqrt(2) and rotating (w, l) turns the set into the
    cone ||(y, b)|| <= a, whose Euclidean projection has a closed form.
    """
    s2 = np.sqrt(2.0)
    y1, y2 = s2 * aP, s2 * aQ
    a = (aw + al) / s2
    b = (aw - al) / s2
    norm = np.sqrt(y1 * y1 + y2 * y2 + b * b)
    inside = norm <= a
    polar = norm <= -a
    scale = np.where(inside | polar, 0.0, 0.5 * (1.0 + a / np.where(norm > 0, norm, 1.0)))
    new_a = np.where(inside, a, np.where(polar, 0.0, 0.5 * (a + norm)))
    y1 = np.where(inside, y1, scale * y1)
    y2 = np.where(inside, y2, scale * y2)
    b = np.where(inside, b, scale * b)
    P, Q = y1 / s2, y2 / s2
    w, l = (new_a + b) / s2, (new_a - b) / s2
    # exact copies inside the cone avoid rounding drift
    return (np.where(inside, aP, P), np.where(inside, aQ, Q),
            np.where(inside, aw, np.maximum(w, 0.0)), np.where(inside, al, np.maximum(l, 0.0)))


def project_cone_fixed_l(aP, aQ, aw, l_fix):
    """Project (P, Q, w) onto {P^2 + Q^2 <= w l_fix} in the metric diag(2, 2, 1).

    Stationarity gives P = 2 aP / (2 + mu), w = aw + mu l_fix / 2; the
    multiplier mu >= 0 is found by bisection on the active constraint.
    """
    s = aP * aP + aQ * aQ

    def excess(mu):
        return 4.0 * s / (2.0 + mu) ** 2 - (aw + 0.5 * mu * l_fix) * l_fix

    active = excess(np.zeros_like(s)) > 0
    lo = np.zeros_like(s)
    hi = np.maximum(1.0, -2.0 * aw / l_fix)
    for _ in range(200):
        grow = active & (excess(hi) > 0)
        if not grow.any():
            break
        hi = np.where(grow, 2.0 * hi, hi)
    for _ in range(MU_ITER):
        mid = 0.5 * (lo + hi)
        pos = excess(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all((hi - lo) <= 1e-15 * np.maximum(1.0, hi)):
            break
    mu = np.where(active, hi, 0.0)
    f = 2.0 / (2.0 + mu)
    return aP * f, aQ * f, aw + 0.5 * mu * l_fix


def check_agents(prob: OpfProblem) -> None:
    """Raise :class:`InfeasibleAgentError` for agents with empty local boxes."""
    for k in range(prob.n_bus):
        if not prob.v_min_sq[k] <= prob.v_max_sq[k]:
            raise InfeasibleAgentError(prob.bus_ids[k], "empty voltage range")
    for k in range(prob.n_branch):
        if not prob.l_max[k] > 0:
            raise InfeasibleAgentError(prob.bus_ids[k + 1], "current limit must be positive")
        if prob.r[k] < 0:
            raise InfeasibleAgentError(prob.bus_ids[k + 1], "negative resistance")


def local_update(prob: OpfProblem, target: LocalBlock, rho: float) -> LocalBlock:
    """All agents' proximal steps for ``target = M z - u``.

    Each branch agent minimizes ``r l + (rho/2) ||x - target||^2`` (metric
    weights 2 on P and Q) over the cone and ``l <= l_max``; bus voltages are
    clipped to their boxes and the root voltage is pinned.
    """
    al = target.l - prob.r / rho
    P, Q, w, l = project_cone(target.P, target.Q, target.w, al)
    over = l > prob.l_max
    if np.any(over):
        lm = prob.l_max[over]
        P[over], Q[over], w[over] = project_cone_fixed_l(target.P[over], target.Q[over], target.w[over], lm)
        l[over] = lm
    v = np.clip(target.v, prob.v_min_sq, prob.v_max_sq)
    if prob.n_bus:
        v[0] = prob.v0
    return LocalBlock(P, Q, l, w, v)


def consensus_update(cmap: ConsensusMap, h: LocalBlock, u: LocalBlock) -> np.ndarray:
    """Average copies plus scaled duals, then project onto the branch-flow equations."""
    return cmap.project(cmap.average(h + u))


def dual_update(u: LocalBlock, x: LocalBlock, mz: LocalBlock) -> LocalBlock:
    """Scaled dual ascent ``u + (x - M z)``."""
    return u + (x - mz)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def flat_start(prob: OpfProblem, cmap: ConsensusMap) -> np.ndarray:
    """v = 1 (root pinned), lossless accumulated flows, l = 0."""
    P = -prob.p_inj.copy()
    Q = -prob.q_inj.copy()
    for j in range(prob.n_bus - 1, 0, -1):
        P[prob.parent[j]] += P[j]
        Q[prob.parent[j]] += Q[j]
    z = np.zeros(cmap.size)
    z[cmap.iP] = P[1:]
    z[cmap.iQ] = Q[1:]
    z[cmap.iv] = 1.0
    if prob.n_bus:
        z[cmap.iv[0]] = prob.v0
    return z


def sensitivity_duals(prob: OpfProblem, cmap: ConsensusMap, z: np.ndarray, rho: float) -> LocalBlock:
    """Scaled duals that make ``z`` a fixed point if every cone were active.

    Solves ``M^T (c + mu grad g) + E^T lam = 0`` for the cone multipliers
    ``mu`` and equality multipliers ``lam`` at ``z``; ``c`` is the loss
    gradient and ``g = P^2 + Q^2 - w l``. Falls back to zero duals when the
    system is singular.
    """
    m, n = cmap.m, cmap.n
    zero = LocalBlock.zeros(m, n)
    if m == 0:
        return zero
    P, Q, l, v = cmap.split(z)
    w = v[cmap.from_idx]
    k = np.arange(m)
    rows = np.concatenate([cmap.iP, cmap.iQ, cmap.il, cmap.iv[cmap.from_idx]])
    cols = np.concatenate([k, k, k, k])
    vals = np.concatenate([2 * P, 2 * Q, -w, -l])
    G = sp.csc_matrix((vals, (rows, cols)), shape=(cmap.size, m))
    K = sp.hstack([G, cmap.E.T]).tocsc()
    c = np.zeros(cmap.size)
    c[cmap.il] = prob.r
    try:
        sol = spl.splu(K).solve(-c)
    except RuntimeError:
        return zero
    if not np.all(np.isfinite(sol)):
        return zero
    mu = sol[:m]
    return LocalBlock(
        P=-(2 * mu * P) / (rho * PQ_WEIGHT),
        Q=-(2 * mu * Q) / (rho * PQ_WEIGHT),
        l=-(prob.r - mu * w) / rho,
        w=(mu * l) / rho,
        v=np.zeros(n),
    )


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class AdmmState:
    x: LocalBlock
    z: np.ndarray
    u: LocalBlock
    rho: float
    iteration: int = 0
    trace: ResidualTrace = field(default_factory=ResidualTrace)


@dataclass
class AdmmResult:
    solution: OpfSolution
    trace: ResidualTrace
    converged: bool
    tight: bool
    iterations: int
    state: AdmmState = field(repr=False)
    flags: tuple = ()


def init_state(prob: OpfProblem, cfg: AdmmConfig, cmap: ConsensusMap) -> AdmmState:
    z = flat_start(prob, cmap)
    if cfg.dual_start == "sensitivity":
        u = sensitivity_duals(prob, cmap, z, cfg.rho)
    else:
        u = LocalBlock.zeros(cmap.m, cmap.n)
    return AdmmState(x=cmap.spread(z), z=z, u=u, rho=cfg.rho)


def step(prob: OpfProblem, cmap: ConsensusMap, state: AdmmState, cfg: AdmmConfig) -> tuple[float, float]:
    """One local / consensus / dual round; returns (primal, dual) residuals."""
    mz_old = cmap.spread(state.z)
    x = local_update(prob, mz_old - state.u, state.rho)
    a = cfg.over_relaxation
    h = x.scale(a) + mz_old.scale(1.0 - a) if a != 1.0 else x
    z = consensus_update(cmap, h, state.u)
    mz = cmap.spread(z)
    state.u = dual_update(state.u, h, mz)
    primal = (x - mz).max_abs()
    dual = state.rho * float(np.abs(z - state.z).max()) if z.size else 0.0
    state.x, state.z = x, z
    state.iteration += 1
    state.trace.append(primal, dual, float(np.dot(prob.r, x.l)))
    if cfg.adaptive_rho:
        if primal > 10 * dual:
            state.u = state.u.scale(0.5)
            state.rho *= 2.0
        elif dual > 10 * primal:
            state.u = state.u.scale(2.0)
            state.rho *= 0.5
    return primal, dual


def assemble(prob: OpfProblem, cmap: ConsensusMap, state: AdmmState) -> OpfSolution:
    """Consensus flows and voltages with the owning agents' squared currents.

    The loss term lives in the agents' blocks, so their ``l`` carries the
    objective; each agent's full block is kept for the cone check.
    """
    P, Q, _, v = cmap.split(state.z)
    return OpfSolution(prob, P.copy(), Q.copy(), state.x.l.copy(), v.copy(), v_send=state.x.w.copy(),
                       cone_P=state.x.P.copy(), cone_Q=state.x.Q.copy(), cone_l=state.x.l.copy())


def trend_flag(trace: ResidualTrace, window: int = 10) -> bool:
    """True when the larger residual failed to drop over some ``window``-iteration span."""
    worst = np.maximum(trace.primal, trace.dual)
    return bool(np.any(worst[window:] >= worst[:-window])) if worst.size > window else False


def solve(prob: OpfProblem, cfg: AdmmConfig = AdmmConfig()) -> AdmmResult:
    """Run ADMM until both residuals fall below their thresholds or ``max_iter``."""
    check_agents(prob)
    cmap = ConsensusMap(prob)
    state = init_state(prob, cfg, cmap)
    converged = False
    for _ in range(cfg.max_iter):
        primal, dual = step(prob, cmap, state, cfg)
        if primal < cfg.eps_primal and dual < cfg.eps_dual:
            converged = True
            break
    sol = assemble(prob, cmap, state)
    tight = is_tight(sol)
    flags = []
    if not converged:
        flags.append("not-converged")
    if not tight:
        flags.append("relaxation-not-tight")
    if trend_flag(state.trace):
        flags.append("residual-trend")
    return AdmmResult(sol, state.trace, converged, tight, state.iteration, state, tuple(flags))
