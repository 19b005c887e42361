"""Round timing and per-client dropout-rate allocation.

The server picks dropout rates ``D_n`` and a round deadline ``t`` solving

    min  t + delta * sum_n w_n D_n
    s.t. t >= a_n - k_n D_n                     (every client finishes)
         0 <= D_n <= D_max
         sum_n U_n (1 - D_n) = A_server * sum_n U_n

where ``k_n`` is client n's full-model download plus upload time and
``a_n = t_cmp_n + k_n``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import simplex
from .data import distribution_score
from .model import SubModelSpec


class InfeasibleAllocationError(ValueError):
    pass


def compute_latency(cycles_per_sample: float, samples: float, freq_hz: float) -> float:
    return cycles_per_sample * samples / freq_hz


def link_rate(bandwidth_hz: float, power_w: float, gain: float, noise_w: float) -> float:
    """Shannon rate in bit/s."""
    return bandwidth_hz * math.log2(1.0 + power_w * gain / noise_w)


def comm_time(size_bits: float, dropout: float, rate: float) -> float:
    if not 0.0 <= dropout <= 1.0:
        raise ValueError(f"dropout {dropout} outside [0, 1]")
    return size_bits * (1.0 - dropout) / rate


@dataclass
class ClientProfile:
    """Static system and data description of one client.

    Either give link rates directly (``uplink_rate``/``downlink_rate``) or the
    physical channel parameters from which Shannon rates are derived.
    """

    cpu_hz: float
    cycles_per_sample: float
    samples_per_round: float
    model_bits: float
    n_samples: int
    dis: np.ndarray
    spec: SubModelSpec | None = None
    n_params: int = 0
    uplink_rate: float | None = None
    downlink_rate: float | None = None
    uplink_bw: float | None = None
    downlink_bw: float | None = None
    uplink_power: float | None = None
    server_power: float | None = None
    channel_gain: float | None = None
    noise: float | None = None

    @property
    def rate_up(self) -> float:
        if self.uplink_rate is not None:
            return self.uplink_rate
        return link_rate(self.uplink_bw, self.uplink_power, self.channel_gain, self.noise)

    @property
    def rate_down(self) -> float:
        if self.downlink_rate is not None:
            return self.downlink_rate
        return link_rate(self.downlink_bw, self.server_power, self.channel_gain, self.noise)

    @property
    def t_cmp(self) -> float:
        return compute_latency(self.cycles_per_sample, self.samples_per_round, self.cpu_hz)

    @property
    def comm_coeff(self) -> float:
        """Seconds to download and upload the full local model once."""
        return self.model_bits * (1.0 / self.rate_up + 1.0 / self.rate_down)

    def round_time(self, dropout: float = 0.0) -> float:
        return (
            comm_time(self.model_bits, dropout, self.rate_down)
            + self.t_cmp
            + comm_time(self.model_bits, dropout, self.rate_up)
        )


def regularizer(
    profile: ClientProfile,
    loss: float,
    num_classes: int,
    total_samples: int,
    global_size: float,
) -> float:
    """Contribution weight: data share x distribution score x model-size ratio x loss."""
    if loss < 0:
        raise ValueError("loss must be non-negative")
    return (
        profile.n_samples / total_samples
        * distribution_score(profile.dis, num_classes)
        * profile.model_bits / global_size
        * loss
    )


@dataclass
class AllocInstance:
    a: np.ndarray
    k: np.ndarray
    sizes: np.ndarray
    weights: np.ndarray
    delta: float = 0.0
    a_server: float = 0.6
    d_max: float = 0.8

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.sizes = np.asarray(self.sizes, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.a.size
        if not (self.k.size == self.sizes.size == self.weights.size == n) or n == 0:
            raise ValueError("a, k, sizes and weights must have the same nonzero length")
        if np.any(self.k <= 0) or np.any(self.sizes <= 0):
            raise ValueError("k and sizes must be positive")

    @property
    def n(self) -> int:
        return self.a.size

    @property
    def budget(self) -> float:
        """Required value of sum_n U_n D_n."""
        return (1.0 - self.a_server) * self.sizes.sum()

    def objective(self, dropout: np.ndarray) -> float:
        dropout = np.asarray(dropout, dtype=np.float64)
        return float(np.max(self.a - self.k * dropout) + self.delta * self.weights @ dropout)

    def to_json(self) -> str:
        d = {key: (v.tolist() if isinstance(v, np.ndarray) else v) for key, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AllocInstance":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "AllocInstance":
        return cls.from_json(Path(path).read_text())


def build_instance(
    profiles: Sequence[ClientProfile],
    weights: Sequence[float],
    delta: float,
    a_server: float,
    d_max: float,
) -> AllocInstance:
    k = np.array([p.comm_coeff for p in profiles])
    a = np.array([p.t_cmp for p in profiles]) + k
    sizes = np.array([p.model_bits for p in profiles])
    return AllocInstance(a, k, sizes, np.asarray(weights, dtype=np.float64), delta, a_server, d_max)


@dataclass
class DropoutPlan:
    dropout: np.ndarray
    t_server: float
    objective: float
    meta: dict = field(default_factory=dict)


def check_feasible(inst: AllocInstance) -> None:
    if not 0.0 < inst.a_server <= 1.0:
        raise InfeasibleAllocationError(f"A_server={inst.a_server} outside (0, 1]")
    if not 0.0 <= inst.d_max <= 1.0:
        raise InfeasibleAllocationError(f"D_max={inst.d_max} outside [0, 1]")
    if inst.d_max < 1.0 - inst.a_server - 1e-12:
        raise InfeasibleAllocationError(
            f"D_max={inst.d_max} is below the required mean dropout 1 - A_server="
            f"{1.0 - inst.a_server:.6g}"
        )


def _lp_matrices(inst: AllocInstance):
    # Variables: s = t - t_lb >= 0, then D_1..D_N. t_lb is a valid lower bound on t.
    n = inst.n
    t_lb = float(np.max(inst.a - inst.k * inst.d_max))
    share = inst.sizes / inst.sizes.sum()
    c = np.concatenate([[1.0], inst.delta * inst.weights])
    A_ub = np.zeros((2 * n, n + 1))
    b_ub = np.zeros(2 * n)
    # a_n - k_n D_n <= t_lb + s
    A_ub[:n, 0] = -1.0
    A_ub[np.arange(n), 1 + np.arange(n)] = -inst.k
    b_ub[:n] = t_lb - inst.a
    A_ub[n + np.arange(n), 1 + np.arange(n)] = 1.0
    b_ub[n:] = inst.d_max
    A_eq = np.concatenate([[0.0], share])[None, :]
    b_eq = np.array([1.0 - inst.a_server])
    return c, A_ub, b_ub, A_eq, b_eq, t_lb


def solve_allocation(inst: AllocInstance, lexicographic: bool = True) -> DropoutPlan:
    """Exact optimum via the simplex method.

    When the optimum is not unique the lexicographically smallest dropout
    vector on the optimal face is returned.
    """
    check_feasible(inst)
    c, A_ub, b_ub, A_eq, b_eq, t_lb = _lp_matrices(inst)
    res = simplex.linprog(c, A_ub, b_ub, A_eq, b_eq)
    x = res.x
    refined = False
    if lexicographic and not res.unique():
        refined = True
        z_star = res.fun
        rows_ub = [A_ub, c[None, :]]
        rhs_ub = [b_ub, [z_star + 1e-11 * max(1.0, abs(z_star))]]
        for i in range(inst.n):
            obj = np.zeros(inst.n + 1)
            obj[1 + i] = 1.0
            step = simplex.linprog(obj, np.vstack(rows_ub), np.concatenate(rhs_ub), A_eq, b_eq)
            x = step.x
            fix = np.zeros(inst.n + 1)
            fix[1 + i] = 1.0
            rows_ub.append(fix[None, :])
            rhs_ub.append([x[1 + i] + 1e-12])
    dropout = np.clip(x[1:], 0.0, inst.d_max)
    t_server = float(np.max(inst.a - inst.k * dropout))
    objective = t_server + inst.delta * float(inst.weights @ dropout)
    return DropoutPlan(dropout, t_server, objective, {"iterations": res.iterations, "lexicographic": refined})


def vertex_oracle(inst: AllocInstance, tol: float = 1e-9) -> DropoutPlan:
    """Exact optimum by enumerating every basic feasible point.

    Any vertex of the feasible polytope in ``(t, D)`` has the budget equality
    and ``N`` of the ``3N`` inequalities active; the linear objective attains
    its minimum at one of them.
    """
    check_feasible(inst)
    n = inst.n
    rows, rhs = [], []
    for i in range(n):  # t + k_i D_i >= a_i
        r = np.zeros(n + 1)
        r[0], r[1 + i] = 1.0, inst.k[i]
        rows.append(r)
        rhs.append(inst.a[i])
    for i in range(n):  # D_i >= 0
        r = np.zeros(n + 1)
        r[1 + i] = 1.0
        rows.append(r)
        rhs.append(0.0)
    for i in range(n):  # D_i <= D_max
        r = np.zeros(n + 1)
        r[1 + i] = 1.0
        rows.append(r)
        rhs.append(inst.d_max)
    rows, rhs = np.array(rows), np.array(rhs)
    eq = np.concatenate([[0.0], inst.sizes])
    best: DropoutPlan | None = None
    for active in itertools.combinations(range(3 * n), n):
        M = np.vstack([rows[list(active)], eq])
        v = np.concatenate([rhs[list(active)], [inst.budget]])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        x = np.linalg.solve(M, v)
        t, d = x[0], x[1:]
        if np.any(d < -tol) or np.any(d > inst.d_max + tol):
            continue
        if np.any(t + inst.k * d < inst.a - tol * np.maximum(1.0, np.abs(inst.a))):
            continue
        d = np.clip(d, 0.0, inst.d_max)
        value = inst.objective(d)
        if best is None or value < best.objective - 1e-15:
            best = DropoutPlan(d, float(np.max(inst.a - inst.k * d)), value)
    if best is None:
        raise InfeasibleAllocationError("no vertex satisfies the constraints")
    return best


def grid_oracle(inst: AllocInstance, step: float = 1e-3, chunk: int = 2_000_000) -> DropoutPlan:
    """Brute-force search over a grid on the budget-constrained set.

    The first ``N - 1`` rates range over ``{0, step, ..., D_max}``; the last
    is solved from the budget equality and kept only if it lies in the box.
    """
    check_feasible(inst)
    n = inst.n
    levels = np.arange(0.0, inst.d_max + step / 2, step)
    levels = levels[levels <= inst.d_max + 1e-12]
    sizes = inst.sizes
    if n == 1:
        d = np.array([inst.budget / sizes[0]])
        if not -1e-12 <= d[0] <= inst.d_max + 1e-12:
            raise InfeasibleAllocationError("single client cannot meet the budget")
        return DropoutPlan(d, float(inst.a[0] - inst.k[0] * d[0]), inst.objective(d))
    free = n - 1
    best_val, best_d = math.inf, None
    total = len(levels) ** free
    # Enumerate the grid in mixed-radix chunks to bound memory.
    for start in range(0, total, chunk):
        flat = np.arange(start, min(total, start + chunk))
        cols = []
        for _ in range(free):
            cols.append(levels[flat % len(levels)])
            flat = flat // len(levels)
        D = np.stack(cols[::-1], axis=1)
        last = (inst.budget - D @ sizes[:free]) / sizes[free]
        ok = (last >= -1e-12) & (last <= inst.d_max + 1e-12)
        if not ok.any():
            continue
        D = np.column_stack([D[ok], np.clip(last[ok], 0.0, inst.d_max)])
        vals = np.max(inst.a - inst.k * D, axis=1) + inst.delta * (D @ inst.weights)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_d = float(vals[j]), D[j].copy()
    if best_d is None:
        raise InfeasibleAllocationError("no grid point satisfies the budget")
    return DropoutPlan(best_d, float(np.max(inst.a - inst.k * best_d)), best_val)


def constraint_violation(inst: AllocInstance, plan: DropoutPlan) -> dict[str, float]:
    """Residuals of every constraint (zero when satisfied)."""
    d = plan.dropout
    uploaded = float(inst.sizes @ (1.0 - d))
    required = inst.a_server * float(inst.sizes.sum())
    return {
        "budget_rel": abs(uploaded - required) / required,
        "lower": float(max(0.0, -d.min())),
        "upper": float(max(0.0, (d - inst.d_max).max())),
        "deadline": float(max(0.0, (inst.a - inst.k * d - plan.t_server).max())),
    }
