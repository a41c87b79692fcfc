"""Distributed index policy over normalized continuation payoffs.

Two independent routes compute the next state. ``policy_step`` applies the
per-signal increment table that every player can run locally, while
``decompose_payoff`` solves for the continuation payoffs from the coefficient
form. The tests check that both agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equilibrium import EquilibriumReport
from .errors import DecompositionError, NumericDomainError, StateEscapeError
from .scenario import Y0, Y1, ScenarioConfig, payoffs_batch, signal_distribution

STATE_TOL = 1e-9
INCENTIVE_TOL = 1e-9


@dataclass(frozen=True)
class PolicyTables:
    """Precomputed per-scenario tables shared by all players."""

    rho0: np.ndarray  # distress probability at each single-user profile
    rho1: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    vbar: np.ndarray
    slack: np.ndarray
    r0: np.ndarray  # rho0[i] / -b[i, j], zero diagonal
    r1: np.ndarray
    increments: np.ndarray  # [active, signal, player]
    tilde_profiles: np.ndarray
    dev_u: np.ndarray  # [active, player, k] normalized payoff of player deviating to grid power k
    dev_rho0: np.ndarray  # [active, player, k] distress probability under that deviation
    dev_powers: np.ndarray  # [player, k], nan padded

    @property
    def n_players(self) -> int:
        return len(self.mu)

    @classmethod
    def from_report(cls, report: EquilibriumReport, config: ScenarioConfig) -> "PolicyTables":
        if report.mu_lower is None or report.b is None:
            raise ValueError(f"report has no equilibrium tables (status {report.status})")
        model = report.extra["model"]
        best = report.extra["best"]
        return build_tables(config, model, best.tilde_profiles, best.max_payoffs, best.rho0, best.rho1,
                            report.b, report.mu_lower)


def build_tables(config, model, tilde, vbar, rho0, rho1, b, mu) -> PolicyTables:
    n = len(vbar)
    rho0 = np.asarray(rho0, dtype=float)
    rho1 = np.asarray(rho1, dtype=float)
    b = np.asarray(b, dtype=float)
    off = ~np.eye(n, dtype=bool)
    neg_b = np.where(off, -b, 1.0)
    r0 = np.where(off, rho0[:, None] / neg_b, 0.0)
    r1 = np.where(off, rho1[:, None] / neg_b, 0.0)
    slack = r0.sum(axis=1)

    inc = np.zeros((n, 2, n))
    for i in range(n):
        inc[i, Y1] = r0[i]
        inc[i, Y1, i] = -(1.0 + slack[i])
        inc[i, Y0] = -r1[i]
        inc[i, Y0, i] = -(1.0 - r1[i].sum())

    kmax = max(len(g) for g in config.power_grids)
    powers = np.full((n, kmax), np.nan)
    for j, g in enumerate(config.power_grids):
        powers[j, : len(g)] = g
    dev_u = np.full((n, n, kmax), np.nan)
    dev_rho0 = np.full((n, n, kmax), np.nan)
    for i in range(n):
        for j in range(n):
            grid = config.power_grids[j]
            profiles = np.repeat(tilde[i][None, :], len(grid), axis=0)
            profiles[:, j] = grid
            dev_u[i, j, : len(grid)] = payoffs_batch(profiles, config)[:, j] / vbar[j]
            dev_rho0[i, j, : len(grid)] = [signal_distribution(q, model)[0] for q in profiles]

    arrays = dict(rho0=rho0, rho1=rho1, b=b, mu=np.asarray(mu, float), vbar=np.asarray(vbar, float),
                  slack=slack, r0=r0, r1=r1, increments=inc, tilde_profiles=np.asarray(tilde, float),
                  dev_u=dev_u, dev_rho0=dev_rho0, dev_powers=powers)
    for a in arrays.values():
        a.setflags(write=False)
    return PolicyTables(**arrays)


@dataclass(frozen=True)
class PolicyState:
    normalized_payoffs: np.ndarray
    slot: int = 0
    correction: float = 0.0  # size of the last guardrail adjustment

    def __post_init__(self):
        v = np.array(self.normalized_payoffs, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "normalized_payoffs", v)

    @property
    def v(self) -> np.ndarray:
        return self.normalized_payoffs


@dataclass(frozen=True)
class DecompositionResult:
    active: int
    continuation_y0: np.ndarray
    continuation_y1: np.ndarray
    coefficients: np.ndarray  # c_ij+ for inactive j, nan at the active player
    escape: float  # largest distance outside the admissible box, 0 when inside


def urgency_indices(v: np.ndarray, tables: PolicyTables) -> np.ndarray:
    denom = 1.0 - v + tables.slack
    if np.any(denom <= 0):
        j = int(np.argmin(denom))
        raise NumericDomainError(f"urgency denominator for player {j + 1} is {denom[j]:.3g}; state left the set")
    return (v - tables.mu) / denom


def urgency_index(j: int, state: PolicyState, tables: PolicyTables) -> float:
    return float(urgency_indices(state.v, tables)[j])


def select_active(state: PolicyState, tables: PolicyTables) -> int:
    # np.argmax returns the first maximum, so ties go to the lowest index
    return int(np.argmax(urgency_indices(state.v, tables)))


def c_ij_plus(i: int, j: int, vj: float, tables: PolicyTables) -> float:
    if i == j:
        raise ValueError("coefficient is defined for inactive players only")
    return float(tables.rho1[i] + vj * tables.b[i, j])


def continuation_payoffs(V: np.ndarray, active: np.ndarray, delta: float, tables: PolicyTables):
    """Vectorized continuation payoffs for states ``V`` (M, N) with given active players.

    Returns ``(g0, g1, c)`` each of shape (M, N).
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    active = np.atleast_1d(np.asarray(active, dtype=int))
    m, n = V.shape
    rows = np.arange(m)
    is_active = np.zeros((m, n), dtype=bool)
    is_active[rows, active] = True
    r1 = tables.rho1[active][:, None]
    r0 = tables.rho0[active][:, None]
    b = np.where(is_active, -1.0, tables.b[active])
    c = r1 + V * b
    # rho1 - c = -v b; when v = 0 the ratio v / (rho1 - c) is taken as its limit -1/b
    denom = r1 - c
    safe = denom != 0
    ratio = np.where(safe, V / np.where(safe, denom, 1.0), 1.0 / -b)
    g1 = ((1.0 / delta) * (1.0 - c) - r0) * ratio
    g0 = (r1 - c / delta) * ratio
    g1[is_active] = 0.0
    g0[is_active] = 0.0
    g1[rows, active] = 1.0 - g1.sum(axis=1)
    g0[rows, active] = 1.0 - g0.sum(axis=1)
    c[is_active] = np.nan
    return g0, g1, c


def _escape(g: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.maximum(np.max(mu - g, axis=-1), np.max(g - 1.0, axis=-1)).clip(min=0.0)


def decompose_payoff(state: PolicyState, delta: float, tables: PolicyTables, active: int | None = None,
                     strict: bool = True) -> DecompositionResult:
    """Split the state into a current single-user slot plus signal-contingent continuations.

    ``active`` forces the transmitting player; by default it is the index-policy choice.
    """
    if active is None:
        active = select_active(state, tables)
    g0, g1, c = continuation_payoffs(state.v[None, :], np.array([active]), delta, tables)
    esc = float(max(_escape(g0, tables.mu)[0], _escape(g1, tables.mu)[0]))
    if strict and esc > STATE_TOL:
        raise DecompositionError(
            f"continuation payoffs leave the admissible set by {esc:.3g} at discount {delta}"
        )
    return DecompositionResult(active, g0[0], g1[0], c[0], esc)


def _guard(w: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, float]:
    low = mu - w
    high = w - 1.0
    worst = max(float(low.max()), float(high.max()))
    if worst > STATE_TOL:
        j = int(np.argmax(np.maximum(low, high)))
        raise StateEscapeError(f"player {j + 1} normalized payoff {w[j]:.12g} outside [{mu[j]:.12g}, 1]")
    out = np.clip(w, mu, 1.0)
    resid = 1.0 - out.sum()
    if resid > 0:
        k = int(np.argmax(1.0 - out))
    else:
        k = int(np.argmax(out - mu))
    out[k] += resid
    return out, float(np.abs(out - w).max())


def policy_step(state: PolicyState, signal: int, delta: float, tables: PolicyTables,
                active: int | None = None) -> PolicyState:
    """One update of the index policy after observing ``signal``."""
    if active is None:
        active = select_active(state, tables)
    k = 1.0 / delta
    w = k * state.v + (k - 1.0) * tables.increments[active, signal]
    w, corr = _guard(w, tables.mu)
    return PolicyState(w, state.slot + 1, corr)


@dataclass(frozen=True)
class IncentiveVerdict:
    ok: bool
    max_violation: float
    worst: tuple  # per player: (violation, deviation power)


def incentive_gaps(V: np.ndarray, active: np.ndarray, delta: float, tables: PolicyTables) -> np.ndarray:
    """Deviation value minus promised value for every state, player and grid power: shape (M, N, K).

    Deviation value is the current normalized payoff weighted by (1 - delta) plus
    the discounted expected continuation under the deviation's signal law.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    active = np.atleast_1d(np.asarray(active, dtype=int))
    g0, g1, _ = continuation_payoffs(V, active, delta, tables)
    u = tables.dev_u[active]
    q = tables.dev_rho0[active]
    value = (1.0 - delta) * u + delta * (g1[:, :, None] + (g0 - g1)[:, :, None] * q)
    return value - V[:, :, None]


def verify_one_shot_incentives(state: PolicyState, delta: float, tables: PolicyTables,
                               active: int | None = None) -> IncentiveVerdict:
    if active is None:
        active = select_active(state, tables)
    gaps = incentive_gaps(state.v[None, :], np.array([active]), delta, tables)[0]
    gaps = np.where(np.isnan(gaps), -np.inf, gaps)
    k = np.argmax(gaps, axis=1)
    per = tuple((float(gaps[j, k[j]]), float(tables.dev_powers[j, k[j]])) for j in range(tables.n_players))
    worst = max(v for v, _ in per)
    return IncentiveVerdict(worst <= INCENTIVE_TOL, worst, per)


def max_incentive_violation(V: np.ndarray, active: np.ndarray, delta: float, tables: PolicyTables,
                            chunk: int = 20000) -> float:
    """Largest deviation gain over a whole trajectory of states."""
    worst = -np.inf
    for s in range(0, len(V), chunk):
        g = incentive_gaps(V[s:s + chunk], active[s:s + chunk], delta, tables)
        worst = max(worst, float(np.nanmax(g)))
    return worst


def run_policy(tables: PolicyTables, delta: float, v0, noise: np.ndarray, interference: np.ndarray,
               it_limit_pu: float):
    """Iterate the index policy with compliant players.

    ``noise`` holds one measurement-error draw per slot; ``interference[i]`` is
    the aggregate interference when player i transmits alone. Returns the visited
    states (T+1, N), active players (T,), signals (T,) and guardrail corrections (T,).
    """
    steps = len(noise)
    n = tables.n_players
    states = np.empty((steps + 1, n))
    actives = np.empty(steps, dtype=int)
    signals = np.empty(steps, dtype=int)
    corrections = np.empty(steps)
    state = PolicyState(v0)
    states[0] = state.v
    for t in range(steps):
        i = select_active(state, tables)
        y = Y0 if interference[i] + noise[t] > it_limit_pu else Y1
        state = policy_step(state, y, delta, tables, active=i)
        actives[t], signals[t], corrections[t] = i, y, state.correction
        states[t + 1] = state.v
    return states, actives, signals, corrections


def snapshot_row(state: PolicyState, active: int, signal: int) -> dict:
    row = {"t": state.slot, "active": active + 1}
    for j, x in enumerate(state.v):
        row[f"v_{j + 1}"] = repr(float(x))
    row["signal"] = "y0" if signal == Y0 else "y1"
    return row
