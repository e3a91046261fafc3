"""Brute-force oracles and factorization-condition checkers.

Works on explicit tables: per-agent value vectors plus a full joint-value
tensor (optionally an action-independent baseline). The central quantity is
the gap

    gap(u) = sum_i Q_i(u_i) - Q_jt(u) + V

which must vanish at the componentwise greedy action and never go negative
for the greedy action to maximise the joint table; the stricter variant
additionally requires the gap to hit zero along every single-agent fiber.
Learned assemblies on enumerable games are converted to tables and checked
with a loose tolerance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

MAX_ENUMERATION = 10_000_000


@dataclass
class TabularQ:
    """Per-agent value vectors and a joint tensor indexed by joint action."""
    q_i: list[np.ndarray]
    q_jt: np.ndarray
    v_jt: float | None = None

    def __post_init__(self):
        self.q_i = [np.asarray(q, dtype=np.float64) for q in self.q_i]
        self.q_jt = np.asarray(self.q_jt, dtype=np.float64)
        if self.q_jt.ndim != len(self.q_i):
            raise ValueError("joint tensor rank must equal the agent count")
        for i, q in enumerate(self.q_i):
            if q.shape != (self.q_jt.shape[i],):
                raise ValueError(f"agent {i} vector does not match the tensor")

    @property
    def n_agents(self) -> int:
        return len(self.q_i)

    def greedy(self) -> tuple[int, ...]:
        """Componentwise argmax; ties resolve to the lowest action index."""
        return tuple(int(np.argmax(q)) for q in self.q_i)

    def state_value(self) -> float:
        """Baseline absorbing the joint/summed gap at the optimum.

        When absent it is derived as max(Q_jt) minus the summed greedy
        individual values; pass v_jt=0 for fully observable settings.
        """
        if self.v_jt is not None:
            return float(self.v_jt)
        greedy_sum = sum(float(q[g]) for q, g in zip(self.q_i, self.greedy()))
        return float(self.q_jt.max()) - greedy_sum

    def summed(self) -> np.ndarray:
        """sum_i Q_i(u_i) over the whole joint-action grid."""
        total = np.zeros_like(self.q_jt)
        n = self.n_agents
        for i, q in enumerate(self.q_i):
            shape = [1] * n
            shape[i] = q.size
            total = total + q.reshape(shape)
        return total

    def residuals(self) -> np.ndarray:
        return self.summed() - self.q_jt + self.state_value()

    def with_scaled(self, a: float, b: float) -> "TabularQ":
        return TabularQ([a * q + b for q in self.q_i], self.q_jt, self.v_jt)


def oracle_optimal(q_jt: np.ndarray):
    """Exhaustive maximisation: (all maximising joint actions, max value)."""
    q_jt = np.asarray(q_jt)
    if q_jt.size > MAX_ENUMERATION:
        raise ValueError(f"joint space {q_jt.size} exceeds {MAX_ENUMERATION}")
    best = q_jt.max()
    winners = [tuple(int(v) for v in idx) for idx in np.argwhere(q_jt == best)]
    return winners, float(best)


def check_igm(tab: TabularQ) -> bool:
    """Does the componentwise greedy action maximise the joint table?"""
    winners, _ = oracle_optimal(tab.q_jt)
    return tab.greedy() in winners


@dataclass
class ConditionReport:
    kind: str
    tol: float
    greedy: tuple[int, ...]
    residuals: np.ndarray
    opt_residual: float
    min_violation: float
    fiber_minima: list[np.ndarray]
    oracle_optimal: list[tuple[int, ...]]
    oracle_value: float
    igm_holds: bool
    satisfied: bool


def _base_report(tab: TabularQ, tol: float, kind: str) -> ConditionReport:
    res = tab.residuals()
    greedy = tab.greedy()
    others = np.ones(res.shape, dtype=bool)
    others[greedy] = False
    min_violation = float(res[others].min()) if others.any() else 0.0
    fibers = [res.min(axis=i) for i in range(tab.n_agents)]
    winners, best = oracle_optimal(tab.q_jt)
    return ConditionReport(
        kind=kind, tol=tol, greedy=greedy, residuals=res,
        opt_residual=float(res[greedy]), min_violation=min_violation,
        fiber_minima=fibers, oracle_optimal=winners, oracle_value=best,
        igm_holds=greedy in winners, satisfied=False)


def check_factorization(tab: TabularQ, tol: float = 1e-9) -> ConditionReport:
    """Zero gap at the greedy action, non-negative gap everywhere else."""
    rep = _base_report(tab, tol, "factorization")
    rep.satisfied = (abs(rep.opt_residual) <= tol
                     and rep.min_violation >= -tol)
    return rep


def check_min_consistency(tab: TabularQ, tol: float = 1e-9) -> ConditionReport:
    """Additionally: the gap attains zero along every single-agent fiber."""
    rep = _base_report(tab, tol, "min-consistency")
    fibers_ok = all(np.all(np.abs(f) <= tol) for f in rep.fiber_minima)
    rep.satisfied = fibers_ok and abs(rep.opt_residual) <= tol
    return rep


@dataclass
class RebalanceResult:
    q: TabularQ
    betas: list[float] = field(default_factory=list)
    edits: list[tuple[int, int]] = field(default_factory=list)


def rebalance_factors(tab: TabularQ, tol: float = 1e-9) -> RebalanceResult:
    """Lower individual values until the gap has a zero on every fiber.

    Scan, per agent j and each of its non-greedy actions a, every fiber
    that pins u_j = a and varies one other agent (visiting each fiber via
    its lowest-indexed non-greedy pinned agent). A fiber whose smallest
    gap beta is still positive has slack: subtracting beta from Q_j(a)
    zeroes it without moving any greedy action. With two agents the edited
    slice is the fiber itself, so this is always safe and terminates. With
    more agents the slice is larger; corrections are capped by the slice
    minimum (keeping every gap non-negative) and other pinned agents are
    tried when the first is exhausted, but a fiber can get stuck with all
    candidate slices already at zero; that raises the convergence error.

    Requires a table that already satisfies the plain factorization
    conditions.
    """
    if not check_factorization(tab, tol).satisfied:
        raise ValueError("input violates the factorization conditions")
    n = tab.n_agents
    sizes = [q.size for q in tab.q_i]
    greedy = tab.greedy()
    q_i = [q.copy() for q in tab.q_i]
    res = TabularQ(q_i, tab.q_jt, tab.v_jt).residuals()
    out = RebalanceResult(TabularQ(q_i, tab.q_jt, tab.v_jt))

    if n < 2:
        return out

    def apply_edit(j: int, a: int, amount: float):
        q_i[j][a] -= amount
        cut: list = [slice(None)] * n
        cut[j] = a
        res[tuple(cut)] -= amount
        out.betas.append(amount)
        out.edits.append((j, a))

    def fix_fiber(m: int, assign: dict) -> tuple[bool, bool]:
        """Returns (fiber now satisfied, made progress)."""
        idx: list = [0] * n
        for k, v in assign.items():
            idx[k] = v
        idx[m] = slice(None)
        fiber = tuple(idx)
        progressed = False
        candidates = [k for k in sorted(assign) if assign[k] != greedy[k]]
        for j in candidates:
            beta = float(res[fiber].min())
            if beta <= tol:
                return True, progressed
            cut: list = [slice(None)] * n
            cut[j] = assign[j]
            amount = min(beta, float(res[tuple(cut)].min()))
            if amount > tol:
                apply_edit(j, assign[j], amount)
                progressed = True
        return float(res[fiber].min()) <= tol, progressed

    max_sweeps = max(sizes) ** 2
    for _ in range(max_sweeps):
        all_ok = True
        any_progress = False
        for j in range(n):
            for a in range(sizes[j]):
                if a == greedy[j]:
                    continue
                for m in range(n):
                    if m == j:
                        continue
                    rest = [k for k in range(n) if k not in (j, m)]
                    for combo in itertools.product(*[range(sizes[k]) for k in rest]):
                        assign = dict(zip([j] + rest, (a,) + combo))
                        # Visit each fiber once per sweep, through its
                        # lowest-indexed non-greedy pinned agent.
                        first = next(k for k in sorted(assign)
                                     if assign[k] != greedy[k])
                        if first != j:
                            continue
                        ok, progressed = fix_fiber(m, assign)
                        all_ok = all_ok and ok
                        any_progress = any_progress or progressed
        if all_ok:
            break
        if not any_progress:
            raise RuntimeError(
                "rebalancing stalled: a fiber is still positive but every "
                "candidate correction would push another gap negative")
    else:
        raise RuntimeError("rebalancing did not converge within the sweep limit")
    out.q = TabularQ(q_i, tab.q_jt, tab.v_jt)
    return out


def affine_argmax_invariant(tab: TabularQ, a: float, b: float) -> bool:
    """Greedy actions are unchanged under Q_i -> a*Q_i + b with a > 0."""
    if a <= 0:
        raise ValueError("scale must be positive")
    return tab.greedy() == tab.with_scaled(a, b).greedy()


def tabulate(assembly, env, v_zero: bool = False) -> TabularQ:
    """Evaluate an assembly over every joint action of a one-shot game."""
    if not getattr(env, "single_state", False):
        raise ValueError("tabulation needs a single-state environment")
    if env.n_actions ** env.n_agents > MAX_ENUMERATION:
        raise ValueError("joint action space too large to enumerate")
    obs = env.reset()
    q = assembly.bank.q_values(obs[None, :, :])[0]
    q_i = [q[i].copy() for i in range(env.n_agents)]
    joint = np.array(list(itertools.product(range(env.n_actions),
                                            repeat=env.n_agents)))
    q_jt = assembly.joint_q_values(obs, joint).reshape(
        (env.n_actions,) * env.n_agents)
    v = 0.0 if v_zero else assembly.state_value(obs)
    return TabularQ(q_i, q_jt, v)


def format_report(rep: ConditionReport) -> str:
    lines = [
        f"check          : {rep.kind}",
        f"tolerance      : {rep.tol:g}",
        f"greedy action  : {rep.greedy}",
        f"oracle optimal : {rep.oracle_optimal} (value {rep.oracle_value:.6g})",
        f"igm holds      : {rep.igm_holds}",
        f"opt residual   : {rep.opt_residual:+.6g}",
        f"min residual   : {rep.min_violation:+.6g} (over non-greedy actions)",
        f"satisfied      : {rep.satisfied}",
    ]
    if rep.residuals.ndim == 2:
        lines.append("residual grid  :")
        for row in rep.residuals:
            lines.append("    " + "  ".join(f"{v:8.4f}" for v in row))
    return "\n".join(lines)


def report_to_mapping(rep: ConditionReport) -> dict[str, str]:
    """Flat key-value view of a report, for the structured report file."""
    out = {
        "check": rep.kind,
        "tol": repr(rep.tol),
        "greedy": ",".join(map(str, rep.greedy)),
        "oracle_optimal": ";".join(",".join(map(str, w)) for w in rep.oracle_optimal),
        "oracle_value": repr(rep.oracle_value),
        "igm_holds": str(rep.igm_holds).lower(),
        "opt_residual": repr(rep.opt_residual),
        "min_violation": repr(rep.min_violation),
        "satisfied": str(rep.satisfied).lower(),
    }
    flat = rep.residuals.reshape(-1)
    out["residuals"] = ";".join(repr(v) for v in flat)
    return out
