"""Loss-minimizing branch-flow OPF with the second-order cone relaxation.

Variables live on the energized tree in breadth-first order. Bus ``k`` (for
``k >= 1``) is fed by branch ``k - 1`` from bus ``parent[k]``; branch arrays
have ``n - 1`` entries and bus arrays ``n`` entries, everything per-unit.

For each branch ``i -> j`` with sending-end flow (P, Q), squared current ``l``
and squared voltages ``v``::

    P_ij - r l_ij - sum_k P_jk = -p_j        (net injection p_j at bus j)
    Q_ij - x l_ij - sum_k Q_jk = -q_j
    v_j = v_i - 2 (r P_ij + x Q_ij) + (r^2 + x^2) l_ij
    P_ij^2 + Q_ij^2 <= v_i l_ij               (relaxed from equality)

and the objective is the total loss ``sum r l``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .grid import FeederNetwork, aggregate_demand, tree_arrays

TIGHT_RTOL = 1e-4
GAP_FLOOR = 1e-10


class ConfigurationError(ValueError):
    """Raised for PV placements or injections that do not fit the network."""


@dataclass(frozen=True, eq=False)
class OpfProblem:
    network: Optional[FeederNetwork]
    bus_ids: tuple
    parent: np.ndarray     # length n, -1 at the root
    r: np.ndarray          # length n - 1
    x: np.ndarray
    l_max: np.ndarray
    p_load: np.ndarray     # length n, per-unit
    q_load: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    v_min_sq: np.ndarray
    v_max_sq: np.ndarray
    v0: float = 1.0
    branch_index: Optional[np.ndarray] = None   # position in network.branches
    hour: int = 0

    def __post_init__(self):
        n = len(self.bus_ids)
        if self.parent.shape != (n,) or (n and self.parent[0] != -1):
            raise ValueError("parent must have one entry per bus with -1 at the root")
        if np.any(self.parent[1:] >= np.arange(1, n)) or np.any(self.parent[1:] < 0):
            raise ValueError("buses must be in breadth-first order (parent before child)")
        for name in ("r", "x", "l_max"):
            if getattr(self, name).shape != (n - 1,):
                raise ValueError(f"{name} must have one entry per branch")
        for name in ("p_load", "q_load", "p_gen", "q_gen", "v_min_sq", "v_max_sq"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per bus")
        if n and not self.v_min_sq[0] <= self.v0 <= self.v_max_sq[0]:
            raise ValueError(f"root voltage {self.v0} outside the root bus limits")

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.bus_ids) - 1

    @property
    def p_inj(self) -> np.ndarray:
        return self.p_gen - self.p_load

    @property
    def q_inj(self) -> np.ndarray:
        return self.q_gen - self.q_load

    @property
    def from_idx(self) -> np.ndarray:
        """Sending-bus position of every branch."""
        return self.parent[1:]

    @property
    def base_kw(self) -> float:
        return 1000.0 * (self.network.base_mva if self.network is not None else 1.0)


@dataclass(frozen=True, eq=False)
class OpfSolution:
    """Branch flows and bus voltages for an :class:`OpfProblem`.

    ``v_send`` optionally holds, per branch, the sending-end voltage seen by
    the agent that owns the branch; when absent the bus voltage of the
    sending bus is used.
    """

    problem: OpfProblem
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    v: np.ndarray
    v_send: Optional[np.ndarray] = None
    cone_P: Optional[np.ndarray] = None
    cone_Q: Optional[np.ndarray] = None
    cone_l: Optional[np.ndarray] = None

    def __post_init__(self):
        m, n = self.problem.n_branch, self.problem.n_bus
        for name in ("P", "Q", "l"):
            if np.shape(getattr(self, name)) != (m,):
                raise ValueError(f"{name} must have {m} entries")
        if np.shape(self.v) != (n,):
            raise ValueError(f"v must have {n} entries")

    @property
    def objective(self) -> float:
        return float(np.dot(self.problem.r, self.l))

    @property
    def loss(self) -> np.ndarray:
        return self.problem.r * self.l

    @property
    def sending_voltage(self) -> np.ndarray:
        return self.v_send if self.v_send is not None else self.v[self.problem.from_idx]

    @property
    def root_import(self) -> tuple[float, float]:
        """(P, Q) drawn from the substation, per-unit."""
        prob = self.problem
        top = prob.from_idx == 0
        return (float(self.P[top].sum() - prob.p_inj[0]), float(self.Q[top].sum() - prob.q_inj[0]))

    def cone_block(self):
        """Per-branch (P, Q, l, v_send) on which the cone is checked."""
        P = self.cone_P if self.cone_P is not None else self.P
        Q = self.cone_Q if self.cone_Q is not None else self.Q
        l = self.cone_l if self.cone_l is not None else self.l
        return P, Q, l, self.sending_voltage


# --------------------------------------------------------------------------
# problem construction
# --------------------------------------------------------------------------

def problem_from_network(net: FeederNetwork, hour: int = 0, load_scale: float = 1.0,
                         pv_kw: Optional[Mapping[int, float]] = None, pv_power_factor: float = 1.0,
                         v0: float = 1.0) -> OpfProblem:
    """OPF instance for ``net`` at ``hour`` with loads scaled by ``load_scale``.

    Capacitors inject their rated kvar. ``pv_kw`` maps bus id to PV output;
    each such bus must have PV capacity.
    """
    order, parent, branch_idx = tree_arrays(net)
    pos = {b: k for k, b in enumerate(order)}
    n = len(order)
    buses = [net.bus_map[b] for b in order]
    branches = [net.branches[k] for k in branch_idx[1:]]

    p_load = np.zeros(n)
    q_load = np.zeros(n)
    for k, b in enumerate(buses):
        p, q = b.demand_at(hour)
        p_load[k], q_load[k] = p, q
    p_load *= load_scale
    q_load *= load_scale
    p_gen = np.zeros(n)
    q_gen = np.array([b.cap_kvar for b in buses], dtype=float)
    if pv_kw:
        if not 0 < pv_power_factor <= 1:
            raise ConfigurationError("PV power factor must lie in (0, 1]")
        tan_phi = np.sqrt(1.0 / pv_power_factor**2 - 1.0)
        for bus_id, kw in pv_kw.items():
            if bus_id not in pos:
                raise ConfigurationError(f"PV bus {bus_id} is not energized")
            if net.bus_map[bus_id].pv_capacity <= 0:
                raise ConfigurationError(f"PV assigned to bus {bus_id}, which has no PV capacity")
            if kw < 0:
                raise ConfigurationError(f"negative PV output at bus {bus_id}")
            p_gen[pos[bus_id]] += kw
            q_gen[pos[bus_id]] += kw * tan_phi

    to_pu = 1.0 / (1000.0 * net.base_mva)
    return OpfProblem(
        network=net,
        bus_ids=tuple(order),
        parent=parent,
        r=np.array([br.r for br in branches]),
        x=np.array([br.x for br in branches]),
        l_max=np.array([br.l_max for br in branches]),
        p_load=p_load * to_pu,
        q_load=q_load * to_pu,
        p_gen=p_gen * to_pu,
        q_gen=q_gen * to_pu,
        v_min_sq=np.array([b.v_min_sq for b in buses]),
        v_max_sq=np.array([b.v_max_sq for b in buses]),
        v0=v0,
        branch_index=branch_idx[1:],
        hour=hour,
    )


def allocate_pv(net: FeederNetwork, total_kw: float, pv_buses=None) -> dict:
    """Split ``total_kw`` over ``pv_buses`` in proportion to their PV capacity."""
    if pv_buses is None:
        pv_buses = [b.id for b in net.buses if b.pv_capacity > 0]
    pv_buses = list(pv_buses)
    for b in pv_buses:
        if b not in net.bus_map:
            raise ConfigurationError(f"PV bus {b} does not exist")
        if net.bus_map[b].pv_capacity <= 0:
            raise ConfigurationError(f"PV assigned to bus {b}, which has no PV capacity")
    if total_kw == 0 or not pv_buses:
        if total_kw > 0:
            raise ConfigurationError("PV output scheduled but no PV buses configured")
        return {b: 0.0 for b in pv_buses}
    caps = np.array([net.bus_map[b].pv_capacity for b in pv_buses])
    return {b: float(total_kw * c / caps.sum()) for b, c in zip(pv_buses, caps)}


def build_problem(net: FeederNetwork, schedule, hour: int, pv_buses=None, pv_power_factor: float = 1.0,
                  v0: float = 1.0) -> OpfProblem:
    """OPF instance for one scheduled hour.

    Bus loads are scaled so the feeder total matches the scheduled demand and
    the scheduled PV output is spread over the PV buses by capacity.
    """
    if not 0 <= hour < schedule.horizon:
        raise IndexError(f"hour {hour} outside the {schedule.horizon}-hour schedule")
    nominal = aggregate_demand(net, hour if net.horizon else 0)[0]
    demand = float(schedule.g_dl[hour]) if schedule.g_dl is not None else nominal
    scale = demand / nominal if nominal > 0 else 0.0
    pv = allocate_pv(net, float(schedule.g_pv[hour]), pv_buses)
    return problem_from_network(net, hour if net.horizon else 0, scale, pv, pv_power_factor, v0)


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DistFlowResiduals:
    p_balance: float
    q_balance: float
    voltage: float
    soc_violation: float
    soc_slack_min: float

    @property
    def max_equality(self) -> float:
        return max(self.p_balance, self.q_balance, self.voltage)

    @property
    def max_violation(self) -> float:
        return max(self.max_equality, self.soc_violation)


def _child_sums(prob: OpfProblem, values: np.ndarray) -> np.ndarray:
    out = np.zeros(prob.n_bus)
    np.add.at(out, prob.from_idx, values)
    return out


def distflow_residuals(prob: OpfProblem, sol: OpfSolution) -> DistFlowResiduals:
    """Max-norm violations of the branch-flow equations and the cone."""
    if sol.problem.n_bus != prob.n_bus or len(sol.P) != prob.n_branch:
        raise ValueError("solution dimensions do not match the problem")
    if prob.n_branch == 0:
        return DistFlowResiduals(0.0, 0.0, abs(float(sol.v[0]) - prob.v0), 0.0, 0.0)
    r, x = prob.r, prob.x
    rp = sol.P - r * sol.l - _child_sums(prob, sol.P)[1:] + prob.p_inj[1:]
    rq = sol.Q - x * sol.l - _child_sums(prob, sol.Q)[1:] + prob.q_inj[1:]
    vs = sol.v[prob.from_idx]
    rv = sol.v[1:] - (vs - 2 * (r * sol.P + x * sol.Q) + (r * r + x * x) * sol.l)
    slack = vs * sol.l - sol.P**2 - sol.Q**2
    return DistFlowResiduals(
        p_balance=float(np.abs(rp).max()),
        q_balance=float(np.abs(rq).max()),
        voltage=float(max(np.abs(rv).max(), abs(sol.v[0] - prob.v0))),
        soc_violation=float(max(0.0, -slack.min())),
        soc_slack_min=float(slack.min()),
    )


def branch_gaps(sol: OpfSolution) -> np.ndarray:
    P, Q, l, vs = sol.cone_block()
    return vs * l - P**2 - Q**2


def exactness_gap(sol: OpfSolution) -> float:
    """Largest cone slack ``v_i l_ij - P_ij^2 - Q_ij^2`` over branches."""
    if sol.problem.n_branch == 0:
        return 0.0
    return float(branch_gaps(sol).max())


def relative_gaps(sol: OpfSolution, floor: float = GAP_FLOOR) -> np.ndarray:
    """Per-branch |gap| / max(v_i l_ij, floor)."""
    P, Q, l, vs = sol.cone_block()
    return np.abs(vs * l - P**2 - Q**2) / np.maximum(vs * l, floor)


def is_tight(sol: OpfSolution, rtol: float = TIGHT_RTOL) -> bool:
    return sol.problem.n_branch == 0 or bool(relative_gaps(sol).max() <= rtol)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def _branch_label(prob: OpfProblem, k: int) -> int:
    return int(prob.branch_index[k]) if prob.branch_index is not None else k


def solution_csv(sol: OpfSolution) -> str:
    """Branch table then bus table, separated by a blank line.

    P, Q, l and v_sq are per-unit; loss is in kW.
    """
    prob = sol.problem
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["branch", "from", "to", "P", "Q", "l", "loss"])
    base = prob.base_kw
    for k in range(prob.n_branch):
        w.writerow([_branch_label(prob, k), prob.bus_ids[prob.parent[k + 1]], prob.bus_ids[k + 1],
                    repr(float(sol.P[k])), repr(float(sol.Q[k])), repr(float(sol.l[k])),
                    repr(float(sol.loss[k] * base))])
    buf.write("\n")
    w.writerow(["bus", "v_sq"])
    for k, b in enumerate(prob.bus_ids):
        w.writerow([b, repr(float(sol.v[k]))])
    return buf.getvalue()


def write_solution_csv(sol: OpfSolution, path: Union[str, Path]) -> None:
    Path(path).write_text(solution_csv(sol), encoding="utf-8")


def read_solution_losses(path: Union[str, Path]) -> np.ndarray:
    """Loss column (kW) of a solution CSV written by :func:`write_solution_csv`."""
    text = Path(path).read_text(encoding="utf-8")
    branch_part = text.split("\n\n", 1)[0]
    rows = list(csv.DictReader(io.StringIO(branch_part)))
    return np.array([float(r["loss"]) for r in rows])
