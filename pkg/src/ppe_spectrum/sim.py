"""Monte-Carlo episodes, baselines and parameter sweeps."""
from __future__ import annotations

import csv
import io
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .equilibrium import EquilibriumReport, analyze, best_profiles
from .errors import ConfigError
from .policy import PolicyState, PolicyTables, policy_step, select_active
from .scenario import (
    Y0,
    Y1,
    MonitoringModel,
    ScenarioConfig,
    intermediate_it_limit,
    payoffs_batch,
    sample_scenario,
    signal_distribution,
)

TRUNCATION_TOL = 1e-6
PUNISH_LENGTHS = (1, 2, 5, 10, 20, 50, math.inf)


def horizon_for(delta: float, tol: float = TRUNCATION_TOL) -> int:
    if delta <= 0:
        return 1
    return int(math.ceil(math.log(tol) / math.log(delta)))


# -- proposed policy episodes ----------------------------------------------------

@dataclass(frozen=True)
class Deviant:
    """A single player that ignores its prescribed power.

    ``rule`` is ``max_power`` (always transmit at the top of the grid), ``zero``
    or ``fixed`` (always ``power``).
    """

    player: int
    rule: str = "max_power"
    power: float | None = None

    def choose(self, config: ScenarioConfig) -> float:
        if self.rule == "max_power":
            return config.max_powers[self.player]
        if self.rule == "zero":
            return 0.0
        if self.rule == "fixed":
            if self.power is None or self.power not in config.power_grids[self.player]:
                raise ConfigError(f"deviant power {self.power} is not on player {self.player + 1}'s grid")
            return float(self.power)
        raise ConfigError(f"unknown deviation rule '{self.rule}'")

    @classmethod
    def parse(cls, text: str) -> "Deviant":
        """Parse ``"2:max_power"`` or ``"1:fixed=5.0"`` (players are 1-based)."""
        try:
            who, rule = text.split(":", 1)
            power = None
            if "=" in rule:
                rule, val = rule.split("=", 1)
                power = float(val)
            return cls(int(who) - 1, rule, power)
        except ValueError as exc:
            raise ConfigError(f"bad deviant spec '{text}': expected PLAYER:RULE") from exc


@dataclass
class EpisodeTrace:
    seed: int
    delta: float
    horizon: int
    active: np.ndarray  # (T+1,)
    profiles: np.ndarray  # (T+1, N)
    signals: np.ndarray  # (T+1,)
    payoffs: np.ndarray  # (T+1, N)
    discounted_avg: np.ndarray  # (N,)

    def weights(self) -> np.ndarray:
        return (1.0 - self.delta) * self.delta ** np.arange(self.horizon + 1)

    def recompute_discounted(self) -> np.ndarray:
        return self.weights() @ self.payoffs

    def rows(self):
        n = self.profiles.shape[1]
        for t in range(self.horizon + 1):
            row = {"seed": self.seed, "t": t, "active": int(self.active[t]) + 1}
            for j in range(n):
                row[f"p_{j + 1}"] = repr(float(self.profiles[t, j]))
            row["signal"] = "y0" if self.signals[t] == Y0 else "y1"
            for j in range(n):
                row[f"u_{j + 1}"] = repr(float(self.payoffs[t, j]))
            yield row


def simulate_episode(config: ScenarioConfig, model: MonitoringModel, tables: PolicyTables, target,
                     delta: float, seed: int, horizon: int | None = None,
                     deviant: Deviant | None = None) -> EpisodeTrace:
    """Run the index policy from the normalized ``target`` for slots 0..horizon."""
    T = horizon_for(delta) if horizon is None else int(horizon)
    n = config.n_players
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, model.error_std, T + 1)
    g0 = config.gain_to_lss

    active = np.empty(T + 1, dtype=int)
    profiles = np.empty((T + 1, n))
    signals = np.empty(T + 1, dtype=int)
    payoffs = np.empty((T + 1, n))
    dev_power = deviant.choose(config) if deviant is not None else None
    cache: dict[int, tuple[np.ndarray, np.ndarray, float]] = {}

    state = PolicyState(target)
    acc = np.zeros(n)
    w = 1.0 - delta
    for t in range(T + 1):
        i = select_active(state, tables)
        if i not in cache:
            p = tables.tilde_profiles[i].copy()
            if deviant is not None:
                p[deviant.player] = dev_power
            cache[i] = (p, payoffs_batch(p[None, :], config)[0], float(g0 @ p))
        p, u, s = cache[i]
        y = Y0 if s + noise[t] > model.it_limit_pu else Y1
        active[t], profiles[t], signals[t], payoffs[t] = i, p, y, u
        acc += w * u
        w *= delta
        state = policy_step(state, y, delta, tables, active=i)
    return EpisodeTrace(seed, delta, T, active, profiles, signals, payoffs, acc)


def episode_payoffs(config, model, tables, target, delta, seeds, horizon=None, deviant=None) -> np.ndarray:
    """Discounted averages for each seed, shape (len(seeds), N)."""
    return np.array([
        simulate_episode(config, model, tables, target, delta, s, horizon, deviant).discounted_avg
        for s in seeds
    ])


def mean_ci(x, level: float = 0.95):
    """Mean and two-sided t confidence half-width along axis 0."""
    x = np.asarray(x, dtype=float)
    m = x.mean(axis=0)
    if len(x) < 2:
        return m, np.full_like(m, np.nan)
    se = x.std(axis=0, ddof=1) / math.sqrt(len(x))
    return m, stats.t.ppf(0.5 + level / 2, len(x) - 1) * se


# -- stationary baseline ---------------------------------------------------------

@dataclass(frozen=True)
class StationaryResult:
    feasible: bool
    profile: np.ndarray | None
    welfare: float
    payoffs: np.ndarray


def stationary_optimal(config: ScenarioConfig, model: MonitoringModel | None = None) -> StationaryResult:
    """Best constant profile under the interference, false-alarm and minimum-payoff constraints."""
    model = model or intermediate_it_limit(config)
    vbar = best_profiles(config, model, strict=False).max_payoffs
    floors = config.min_payoff_fraction * vbar
    profiles = np.array(list(itertools.product(*config.power_grids)), dtype=float)
    interference = profiles @ config.gain_to_lss
    ok = interference <= model.intermediate_it * (1.0 + 1e-12)
    profiles = profiles[ok]
    if len(profiles):
        rho0 = np.array([signal_distribution(p, model)[0] for p in profiles])
        u = payoffs_batch(profiles, config)
        ok = (rho0 <= config.max_false_alarm + 1e-12) & np.all(u >= floors - 1e-12, axis=1)
        profiles, u = profiles[ok], u[ok]
    if not len(profiles):
        return StationaryResult(False, None, 0.0, np.zeros(config.n_players))
    welfare = u @ config.welfare_weights
    k = int(np.argmax(welfare))
    return StationaryResult(True, profiles[k], float(welfare[k]), u[k])


# -- punish-forgive baseline -----------------------------------------------------

@dataclass(frozen=True)
class PunishForgiveParams:
    punishment_length: float = math.inf
    mode: str = "stationary"  # cooperation phase: "stationary" or "tdma"
    restart: bool = False  # distress during punishment restarts the timer

    def __post_init__(self):
        L = self.punishment_length
        if not (L == math.inf or (float(L).is_integer() and L >= 1)):
            raise ConfigError(f"punishment length must be a positive integer or inf, got {L}")
        if self.mode not in ("stationary", "tdma"):
            raise ConfigError(f"unknown cooperation mode '{self.mode}'")


@dataclass(frozen=True)
class PunishForgiveResult:
    params: PunishForgiveParams
    payoffs: np.ndarray
    welfare: float
    incentive_gain: float  # best one-shot deviation gain over all chain states
    meets_floor: bool
    available: bool = True  # False when the cooperation phase itself is infeasible

    @property
    def incentive_ok(self) -> bool:
        return self.incentive_gain <= 1e-9 * max(1.0, float(np.max(np.abs(self.payoffs))))

    @property
    def feasible(self) -> bool:
        return self.available and self.incentive_ok and self.meets_floor


def _chain(coop: list[np.ndarray], punish: np.ndarray, params: PunishForgiveParams):
    """States as (profile, next on y1, next on y0); cooperation states come first."""
    m = len(coop)
    states = []
    for k, p in enumerate(coop):
        states.append((p, (k + 1) % m, m))
    L = params.punishment_length
    if L == math.inf:
        states.append((punish, m, m))
        return states
    L = int(L)
    for l in range(L):
        nxt = m + l + 1 if l + 1 < L else 0
        states.append((punish, nxt, m if params.restart else nxt))
    return states


def punish_forgive_payoffs(config: ScenarioConfig, model: MonitoringModel, params: PunishForgiveParams,
                           delta: float, coop_profiles=None) -> PunishForgiveResult:
    """Exact discounted payoffs of the punish-forgive policy from the first cooperation state.

    Solves V = (1 - delta) (I - delta P)^-1 r over the cooperation and punishment
    states, then checks every one-shot deviation at every state.
    """
    n = config.n_players
    if coop_profiles is None:
        if params.mode == "stationary":
            st = stationary_optimal(config, model)
            if not st.feasible:
                return PunishForgiveResult(params, np.zeros(n), 0.0, math.inf, False, available=False)
            coop_profiles = [st.profile]
        else:
            best = best_profiles(config, model, strict=False)
            coop_profiles = [best.tilde_profiles[i] for i in range(n)]
    coop = [np.asarray(p, dtype=float) for p in coop_profiles]
    punish = np.array(config.max_powers, dtype=float)
    states = _chain(coop, punish, params)

    cache: dict[tuple, tuple[np.ndarray, float]] = {}

    def stage(p):
        key = tuple(p)
        if key not in cache:
            cache[key] = (payoffs_batch(p[None, :], config)[0], signal_distribution(p, model)[0])
        return cache[key]

    S = len(states)
    P = np.zeros((S, S))
    R = np.zeros((S, n))
    for s, (p, up, down) in enumerate(states):
        u, q = stage(p)
        R[s] = u
        P[s, up] += 1.0 - q
        P[s, down] += q
    V = (1.0 - delta) * np.linalg.solve(np.eye(S) - delta * P, R)

    gain = -math.inf
    for s, (p, up, down) in enumerate(states):
        for i in range(n):
            for x in config.power_grids[i]:
                d = p.copy()
                d[i] = x
                u, q = stage(d)
                val = (1.0 - delta) * u[i] + delta * ((1.0 - q) * V[up, i] + q * V[down, i])
                gain = max(gain, val - V[s, i])

    vbar = best_profiles(config, model, strict=False).max_payoffs
    payoffs = V[0]
    meets = bool(np.all(payoffs >= config.min_payoff_fraction * vbar - 1e-12))
    return PunishForgiveResult(params, payoffs, float(payoffs @ config.welfare_weights), gain, meets)


def best_punish_forgive(config: ScenarioConfig, model: MonitoringModel, delta: float,
                        lengths=PUNISH_LENGTHS, mode: str = "stationary", restart: bool = False,
                        require_incentive: bool = True):
    """Evaluate every punishment length; return ``(best or None, all results)``.

    Only lengths that pass the floors (and, by default, the incentive check) compete.
    """
    results = [
        punish_forgive_payoffs(config, model, PunishForgiveParams(L, mode, restart), delta)
        for L in lengths
    ]
    eligible = [
        r for r in results
        if r.available and r.meets_floor and (r.incentive_ok or not require_incentive)
    ]
    best = max(eligible, key=lambda r: r.welfare) if eligible else None
    return best, results


# -- sweeps ----------------------------------------------------------------------

SWEEP_PARAMS = ("beta", "error_var", "max_false_alarm", "n_players")


@dataclass
class SweepSpec:
    param: str
    values: list
    seeds: list
    n_players: list = field(default_factory=lambda: [2])
    beta: float = 2.0
    error_var: float = 0.1
    max_false_alarm: float = 0.1
    discount: float = 0.95
    levels: int = 5
    punish_lengths: list = field(default_factory=lambda: list(PUNISH_LENGTHS))
    mc_episodes: int = 0

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got '{self.param}'")
        if not self.values or not self.seeds:
            raise ConfigError("sweep needs at least one value and one seed")
        self.punish_lengths = [math.inf if str(L).lower() in ("inf", "infinity") else float(L)
                               for L in self.punish_lengths]

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        d = dict(d)
        if "preset" in d:
            base = PRESETS[d.pop("preset")]()
            for k, v in d.items():
                if not hasattr(base, k):
                    raise ConfigError(f"unknown sweep field '{k}'")
                setattr(base, k, v)
            base.__post_init__()
            return base
        if "seeds" in d and isinstance(d["seeds"], int):
            d["seeds"] = list(range(d["seeds"]))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid sweep spec: {exc}") from exc

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["punish_lengths"] = ["inf" if L == math.inf else int(L) for L in self.punish_lengths]
        return out


def _preset_fig4():
    return SweepSpec("beta", [0.125, 0.5, 1, 2, 4, 8], list(range(100)), n_players=[2, 3, 5])


def _preset_fig5():
    return SweepSpec("error_var", [0.02, 0.05, 0.1, 0.2, 0.5], list(range(100)), n_players=[2])


def _preset_fig6():
    return SweepSpec("error_var", [0.02, 0.05, 0.1, 0.2, 0.5], list(range(100)), n_players=[2])


def _preset_fig7():
    return SweepSpec("max_false_alarm", [0.02, 0.05, 0.1, 0.2], list(range(100)), n_players=[2])


PRESETS = {"fig4": _preset_fig4, "fig5": _preset_fig5, "fig6": _preset_fig6, "fig7": _preset_fig7}

POLICIES = ("proposed", "stationary", "punish_forgive", "punish_forgive_tdma")


def _scenario_for(spec: SweepSpec, value, n: int, seed: int) -> ScenarioConfig:
    kw = dict(beta=spec.beta, error_var=spec.error_var, max_false_alarm=spec.max_false_alarm)
    if spec.param == "n_players":
        n = int(value)
    else:
        kw[spec.param] = float(value)
    return sample_scenario(n, kw.pop("beta"), seed, levels=spec.levels, discount=spec.discount, **kw)


def proposed_welfare(report: EquilibriumReport, config: ScenarioConfig) -> tuple[bool, str, float, np.ndarray]:
    """Analytic welfare of the operating point; zero when the design is infeasible."""
    n = config.n_players
    if report.status != "ok":
        return False, report.status, 0.0, np.zeros(n)
    if report.delta_min > config.discount:
        return False, "insufficient-patience", 0.0, np.zeros(n)
    v = report.operating_point
    return True, "ok", float(v @ config.welfare_weights), v


def effective_delta_min(report: EquilibriumReport) -> float:
    """Minimum discount factor, or 1 when no discount factor below 1 works."""
    return 1.0 if math.isnan(report.delta_min) else report.delta_min


def _max_players(spec: SweepSpec) -> int:
    if spec.param == "n_players":
        return int(max(spec.values))
    return int(max(spec.n_players))


def run_cell(spec: SweepSpec, value, n: int, seed: int) -> list[dict]:
    config = _scenario_for(spec, value, n, seed)
    n = config.n_players
    width = _max_players(spec)
    base = {"param_name": spec.param, "param_value": value, "n_players": n, "seed": seed}
    report = analyze(config)
    mu = report.mu_lower if report.mu_lower is not None else np.full(n, np.nan)
    common = {"delta_min": _num(report.delta_min), "delta_eff": _num(effective_delta_min(report))}
    common.update({f"mu_{j + 1}": _num(mu[j]) if j < n else "" for j in range(width)})
    rows = []

    def add(policy, feasible, status, welfare, payoffs, extra=None):
        row = dict(base, policy=policy, feasible=int(feasible), status=status, welfare=_num(welfare))
        row.update({f"u_{j + 1}": _num(payoffs[j]) if j < n else "" for j in range(width)})
        row.update(common)
        row["punish_length"] = ""
        row["mc_welfare"] = ""
        if extra:
            row.update(extra)
        rows.append(row)

    feasible, status, welfare, v = proposed_welfare(report, config)
    extra = None
    if feasible and spec.mc_episodes > 0:
        tables = PolicyTables.from_report(report, config)
        seeds = [seed * 100003 + k for k in range(spec.mc_episodes)]
        avg = episode_payoffs(config, report.extra["model"], tables, report.normalized_target,
                              config.discount, seeds).mean(axis=0)
        extra = {"mc_welfare": _num(avg @ config.welfare_weights)}
    add("proposed", feasible, status, welfare, v, extra)

    model = report.extra.get("model")
    if model is None:
        for policy in POLICIES[1:]:
            add(policy, False, report.status, 0.0, np.zeros(n))
        return rows
    st = stationary_optimal(config, model)
    add("stationary", st.feasible, "ok" if st.feasible else "infeasible", st.welfare, st.payoffs)
    for policy, mode in (("punish_forgive", "stationary"), ("punish_forgive_tdma", "tdma")):
        best, _ = best_punish_forgive(config, model, config.discount, spec.punish_lengths, mode)
        if best is None:
            add(policy, False, "infeasible", 0.0, np.zeros(n))
        else:
            L = best.params.punishment_length
            add(policy, True, "ok", best.welfare, best.payoffs,
                {"punish_length": "inf" if L == math.inf else int(L)})
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def sweep(spec: SweepSpec, workers: int | None = None) -> list[dict]:
    """Every (value, players, seed) cell in a fixed order; output is independent of ``workers``."""
    if workers is None:
        workers = int(os.environ.get("PPE_SPECTRUM_WORKERS", "1") or 1)
    cells = [(spec, v, n, s) for v in spec.values for n in spec.n_players for s in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_run_cell_args, cells, chunksize=max(1, len(cells) // (4 * workers))))
    else:
        chunks = [run_cell(*c) for c in cells]
    return [row for chunk in chunks for row in chunk]


def summarize(rows: list[dict], level: float = 0.95) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["param_value"], r["n_players"], r["policy"]), []).append(r)
    out = []
    for (value, n, policy), rs in groups.items():
        w = np.array([float(r["welfare"]) for r in rs])
        m, h = mean_ci(w, level)
        d = np.array([float(r["delta_eff"]) for r in rs])
        out.append({
            "param_name": rs[0]["param_name"], "param_value": value, "n_players": n, "policy": policy,
            "cells": len(rs), "feasible_frac": _num(np.mean([int(r["feasible"]) for r in rs])),
            "welfare_mean": _num(m), "welfare_ci": _num(h), "delta_eff_mean": _num(d.mean()),
        })
    return out


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", restval="")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
