"""Pareto-optimal equilibrium payoff characterization and operating-point design.

Pipeline: single-user best profiles -> benefit-from-deviation table -> lower
bounds on normalized payoffs -> minimum discount factor -> weighted-welfare
operating point. ``analyze`` runs the whole chain and never raises for
design-level failures; it records a status instead.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    Condition1Error,
    Condition2Error,
    DegenerateGridError,
    DegeneratePlayerError,
    DesignInfeasibleError,
    EmptySetError,
    MonitoringInfeasibleError,
)
from .scenario import MonitoringModel, ScenarioConfig, intermediate_it_limit, payoffs_batch, signal_distribution

IT_TOL = 1e-12
SIMPLEX_TOL = 1e-12


def it_feasible(interference: float, model: MonitoringModel) -> bool:
    return interference <= model.intermediate_it * (1.0 + IT_TOL)


@dataclass(frozen=True)
class BestProfiles:
    tilde_profiles: np.ndarray  # row i is the profile where only i transmits
    max_payoffs: np.ndarray
    rho0: np.ndarray  # distress probability at each tilde profile
    rho1: np.ndarray

    @property
    def n_players(self) -> int:
        return len(self.max_payoffs)


@dataclass(frozen=True)
class DeviationTable:
    b: np.ndarray  # b[i, j]: player j deviating against the profile of i; diagonal is nan
    argmax_deviation: np.ndarray


def best_profiles(config: ScenarioConfig, model: MonitoringModel, strict: bool = True) -> BestProfiles:
    """Payoff-maximizing IT-feasible power of each player when alone.

    With ``strict=False`` a player without any useful power gets a zero row and
    zero max payoff instead of raising.
    """
    n = config.n_players
    tilde = np.zeros((n, n))
    vbar = np.zeros(n)
    for i in range(n):
        best_u, best_p = 0.0, 0.0
        for p in config.power_grids[i]:
            if p <= 0 or not it_feasible(p * config.gain_to_lss[i], model):
                continue
            u = math.log2(1.0 + p * config.gain_matrix[i, i] / config.noise[i])
            if u > best_u:
                best_u, best_p = u, p
        if best_u <= 0:
            if strict:
                raise DegeneratePlayerError(
                    f"player {i + 1} has no nonzero IT-feasible power with positive payoff"
                )
            continue
        tilde[i, i] = best_p
        vbar[i] = best_u
    rho = np.array([signal_distribution(tilde[i], model) for i in range(n)])
    for arr in (tilde, vbar):
        arr.setflags(write=False)
    return BestProfiles(tilde, vbar, rho[:, 0].copy(), rho[:, 1].copy())


def max_payoffs(config: ScenarioConfig, model: MonitoringModel) -> np.ndarray:
    return best_profiles(config, model, strict=False).max_payoffs


def check_strong_interference(config: ScenarioConfig, model: MonitoringModel, best: BestProfiles):
    """Exhaustive test that every IT-feasible profile lies under the simplex face.

    Returns ``(holds, witness, worst_ratio_sum)``; ``witness`` is the profile
    with the largest normalized payoff sum when the test fails, else None.
    """
    profiles = np.array(list(itertools.product(*config.power_grids)), dtype=float)
    feasible = profiles @ config.gain_to_lss <= model.intermediate_it * (1.0 + IT_TOL)
    profiles = profiles[feasible]
    u = payoffs_batch(profiles, config)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(best.max_payoffs > 0, u / np.where(best.max_payoffs > 0, best.max_payoffs, 1.0), 0.0)
    totals = ratios.sum(axis=1)
    k = int(np.argmax(totals))
    worst = float(totals[k])
    if worst <= 1.0 + SIMPLEX_TOL:
        return True, None, worst
    return False, profiles[k].copy(), worst


def _deviation_terms(i: int, j: int, config: ScenarioConfig, model: MonitoringModel, best: BestProfiles):
    """Eligible deviations of j against profile i: (powers, normalized payoffs, distress probs)."""
    base = best.tilde_profiles[i]
    powers, gains, rho0 = [], [], []
    for p in config.power_grids[j]:
        if p <= 0 or p == base[j]:
            continue
        q = base.copy()
        q[j] = p
        u = payoffs_batch(q[None, :], config)[0, j]
        if u <= 0:
            continue
        powers.append(p)
        gains.append(u / best.max_payoffs[j])
        rho0.append(signal_distribution(q, model)[0])
    return np.array(powers), np.array(gains), np.array(rho0)


def benefit_from_deviation(i: int, j: int, config: ScenarioConfig, model: MonitoringModel, best: BestProfiles):
    """Signed normalized benefit of player j deviating from the profile where only i transmits."""
    if i == j:
        raise ValueError("benefit from deviation needs two distinct players")
    powers, gains, rho0 = _deviation_terms(i, j, config, model, best)
    if len(powers) == 0:
        raise DegenerateGridError(f"player {j + 1} has no eligible deviation against player {i + 1}")
    values = (best.rho0[i] - rho0) / gains
    k = int(np.argmax(values))
    return float(values[k]), float(powers[k])


def deviation_table(config: ScenarioConfig, model: MonitoringModel, best: BestProfiles) -> DeviationTable:
    n = config.n_players
    b = np.full((n, n), np.nan)
    arg = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(n):
            if i != j:
                b[i, j], arg[i, j] = benefit_from_deviation(i, j, config, model, best)
    return DeviationTable(b, arg)


def condition1_matrix(dev: DeviationTable) -> np.ndarray:
    """Pairwise Condition 1 flags; a benefit that is exactly zero counts as a violation."""
    ok = dev.b < 0
    np.fill_diagonal(ok, True)
    return ok


def mu_lower_bounds(best: BestProfiles, dev: DeviationTable) -> np.ndarray:
    n = best.n_players
    mu = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            if not dev.b[j, i] < 0:
                raise Condition1Error(
                    f"benefit of player {i + 1} deviating against player {j + 1} is "
                    f"{dev.b[j, i]:.6g} >= 0",
                    pair=(j, i),
                )
            # a benefit that is negative but subnormal gives an infinite bound, i.e. an empty set
            with np.errstate(over="ignore"):
                mu[i] = max(mu[i], best.rho1[j] / -dev.b[j, i])
    return mu


def punishment_slack(best: BestProfiles, dev: DeviationTable) -> np.ndarray:
    """s_i = sum over j != i of rho(y0 | profile i) / (-b_ij)."""
    n = best.n_players
    s = np.zeros(n)
    with np.errstate(over="ignore"):
        for i in range(n):
            s[i] = sum(best.rho0[i] / -dev.b[i, j] for j in range(n) if j != i)
    return s


def condition2_values(i: int, config: ScenarioConfig, model: MonitoringModel, best: BestProfiles, dev: DeviationTable):
    """Condition 2 expression for every power on player i's grid."""
    base = best.tilde_profiles[i]
    grid = np.array(config.power_grids[i])
    profiles = np.repeat(base[None, :], len(grid), axis=0)
    profiles[:, i] = grid
    u = payoffs_batch(profiles, config)[:, i]
    rho0 = np.array([signal_distribution(q, model)[0] for q in profiles])
    with np.errstate(over="ignore"):
        weight = sum(1.0 / -dev.b[i, j] for j in range(config.n_players) if j != i)
    diff = best.rho0[i] - rho0
    # an unchanged distress probability contributes nothing, even when the weight is infinite
    with np.errstate(invalid="ignore"):
        term = np.where(diff == 0, 0.0, diff * weight)
    return grid, 1.0 - u / best.max_payoffs[i] + term


def check_condition2(i: int, config: ScenarioConfig, model: MonitoringModel, best: BestProfiles, dev: DeviationTable):
    """Returns ``(holds, minimizing power, minimum value)``; ties go to the lowest power."""
    grid, vals = condition2_values(i, config, model, best, dev)
    k = int(np.argmin(vals))
    return bool(vals[k] >= -SIMPLEX_TOL), float(grid[k]), float(vals[k])


def min_discount_factor(best: BestProfiles, dev: DeviationTable, mu: np.ndarray) -> float:
    n = best.n_players
    total = float(np.sum(mu))
    if total > 1.0:
        raise EmptySetError(f"lower bounds sum to {total:.6g} > 1")
    denom = n - 1 + float(np.sum(punishment_slack(best, dev)))
    if denom <= 0:
        return 0.0
    z = (1.0 - total) / denom
    return 1.0 / (1.0 + z)


def solve_operating_point(vbar, mu, min_fraction, weights):
    """Weighted-welfare optimum on the feasible face.

    Returns ``(v_star, normalized, i_star)``. Everyone except the player with
    the largest weighted max payoff sits at their floor; that player takes the
    rest of the simplex.
    """
    vbar = np.asarray(vbar, dtype=float)
    floors = np.maximum(np.asarray(mu, dtype=float), np.asarray(min_fraction, dtype=float))
    total = float(floors.sum())
    if total > 1.0:
        raise DesignInfeasibleError(f"payoff floors sum to {total:.6g} > 1")
    i_star = int(np.argmax(np.asarray(weights, dtype=float) * vbar))
    x = floors.copy()
    x[i_star] = 1.0 - (total - floors[i_star])
    return x * vbar, x, i_star


@dataclass
class EquilibriumReport:
    n_players: int
    status: str = "ok"
    message: str = ""
    intermediate_it: float = math.nan
    tilde_profiles: np.ndarray | None = None
    max_payoffs: np.ndarray | None = None
    rho0: np.ndarray | None = None
    b: np.ndarray | None = None
    argmax_deviation: np.ndarray | None = None
    cond1: np.ndarray | None = None
    strong_interference: bool | None = None
    strong_interference_witness: np.ndarray | None = None
    mu_lower: np.ndarray | None = None
    slack: np.ndarray | None = None
    delta_min: float = math.nan
    cond2: np.ndarray | None = None
    cond2_witness: np.ndarray | None = None
    cond2_value: np.ndarray | None = None
    set_nonempty: bool = False
    design_feasible: bool = False
    operating_point: np.ndarray | None = None
    normalized_target: np.ndarray | None = None
    active_index: int | None = None
    discount: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def reason(self) -> str:
        return self.status

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def raise_for_status(self) -> None:
        errors = {
            "monitoring-infeasible": MonitoringInfeasibleError,
            "degenerate": DegeneratePlayerError,
            "condition1-violated": Condition1Error,
            "empty-set": EmptySetError,
            "condition2-violated": Condition2Error,
            "design-infeasible": DesignInfeasibleError,
        }
        if self.status in errors:
            raise errors[self.status](self.message or self.status)

    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, np.ndarray):
                return [conv(v) for v in x.tolist()] if x.ndim else conv(x.item())
            if isinstance(x, list):
                return [conv(v) for v in x]
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, (np.floating, np.integer, np.bool_)):
                return conv(x.item())
            return x

        out = {}
        for name in self.__dataclass_fields__:
            if name == "extra":
                continue
            val = getattr(self, name)
            if name == "active_index" and val is not None:
                val = val + 1
            out[name] = conv(val)
        return out

    def csv_row(self) -> dict:
        n = self.n_players
        row = {
            "status": self.status,
            "set_nonempty": int(self.set_nonempty),
            "design_feasible": int(self.design_feasible),
            "strong_interference": "" if self.strong_interference is None else int(self.strong_interference),
            "delta_min": _fmt(self.delta_min),
            "active": "" if self.active_index is None else self.active_index + 1,
        }
        for name, arr in (("vbar", self.max_payoffs), ("mu", self.mu_lower), ("vstar", self.operating_point)):
            for i in range(n):
                row[f"{name}_{i + 1}"] = "" if arr is None else _fmt(arr[i])
        return row


def _fmt(x) -> str:
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def analyze(config: ScenarioConfig) -> EquilibriumReport:
    """Run the full design chain, recording the first failure as the status."""
    n = config.n_players
    rep = EquilibriumReport(n_players=n, discount=config.discount)
    try:
        model = intermediate_it_limit(config)
    except MonitoringInfeasibleError as exc:
        rep.status, rep.message = "monitoring-infeasible", str(exc)
        return rep
    rep.intermediate_it = model.intermediate_it
    try:
        best = best_profiles(config, model)
    except DegeneratePlayerError as exc:
        rep.status, rep.message = "degenerate", str(exc)
        return rep
    rep.tilde_profiles, rep.max_payoffs, rep.rho0 = best.tilde_profiles, best.max_payoffs, best.rho0
    rep.strong_interference, rep.strong_interference_witness, _ = check_strong_interference(config, model, best)
    rep.extra["model"] = model
    rep.extra["best"] = best

    frac = config.min_payoff_fraction
    if n == 1:
        rep.mu_lower = np.zeros(1)
        rep.slack = np.zeros(1)
        rep.delta_min = 0.0
        rep.cond1 = np.ones((1, 1), dtype=bool)
        rep.cond2 = np.ones(1, dtype=bool)
        rep.b = np.full((1, 1), np.nan)
        rep.argmax_deviation = np.full((1, 1), np.nan)
        rep.set_nonempty = True
        rep.design_feasible = True
        rep.operating_point, rep.normalized_target, rep.active_index = solve_operating_point(
            best.max_payoffs, rep.mu_lower, frac, config.welfare_weights
        )
        return rep

    try:
        dev = deviation_table(config, model, best)
    except DegenerateGridError as exc:
        rep.status, rep.message = "degenerate", str(exc)
        return rep
    rep.b, rep.argmax_deviation = dev.b, dev.argmax_deviation
    rep.extra["dev"] = dev
    rep.cond1 = condition1_matrix(dev)
    try:
        mu = mu_lower_bounds(best, dev)
    except Condition1Error as exc:
        rep.status, rep.message = "condition1-violated", str(exc)
        return rep
    rep.mu_lower = mu
    rep.slack = punishment_slack(best, dev)
    rep.set_nonempty = bool(mu.sum() <= 1.0)

    flags, wit, vals = [], [], []
    for i in range(n):
        ok, p, v = check_condition2(i, config, model, best, dev)
        flags.append(ok)
        wit.append(p)
        vals.append(v)
    rep.cond2, rep.cond2_witness, rep.cond2_value = np.array(flags), np.array(wit), np.array(vals)

    if not rep.set_nonempty:
        rep.status, rep.message = "empty-set", f"lower bounds sum to {mu.sum():.6g} > 1"
        return rep
    rep.delta_min = min_discount_factor(best, dev, mu)
    if not rep.cond2.all():
        bad = int(np.argmin(rep.cond2))
        rep.status = "condition2-violated"
        rep.message = (
            f"player {bad + 1} gains by deviating to power {wit[bad]:.6g} "
            f"(condition value {vals[bad]:.6g})"
        )
        return rep
    floors = np.maximum(mu, frac)
    rep.design_feasible = bool(floors.sum() <= 1.0)
    if not rep.design_feasible:
        rep.status, rep.message = "design-infeasible", f"payoff floors sum to {floors.sum():.6g} > 1"
        return rep
    rep.operating_point, rep.normalized_target, rep.active_index = solve_operating_point(
        best.max_payoffs, mu, frac, config.welfare_weights
    )
    return rep
