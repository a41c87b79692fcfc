"""Stage game, channel environment and the binary imperfect-monitoring channel.

All quantities are linear scale. Configuration files may give dB values under
keys suffixed ``_db``; they are converted once at load time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ConstraintViolatedError,
    InvalidProfileError,
    MonitoringInfeasibleError,
)

# Signal labels. Y0 is the distress signal, Y1 its absence.
Y0 = 0
Y1 = 1

DEFAULT_LEVELS = 5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def normal_sf(x: float) -> float:
    """Upper tail Q(x) = 1 - Phi(x), accurate deep into the tail."""
    return 0.5 * math.erfc(x / _SQRT2)


def normal_isf(p: float, tol: float = 1e-14) -> float:
    """Inverse of the upper tail: the x with Q(x) = p.

    Safeguarded Newton iteration inside a shrinking bisection bracket.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -normal_isf(1.0 - p, tol)
    lo, hi = 0.0, 40.0
    x = math.sqrt(-2.0 * math.log(p))
    x = min(max(x, lo), hi)
    for _ in range(200):
        f = normal_sf(x) - p
        if f > 0:
            lo = x
        else:
            hi = x
        dens = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
        step = f / dens if dens > 0 else math.inf
        nxt = x + step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * max(1.0, abs(x)) or hi - lo <= tol:
            return nxt
        x = nxt
    return x


def uniform_grid(max_power: float, levels: int = DEFAULT_LEVELS) -> tuple[float, ...]:
    if levels < 2:
        raise ConfigError("a power grid needs at least 2 levels (0 and the maximum)")
    return tuple(float(x) for x in np.linspace(0.0, max_power, levels))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScenarioConfig:
    power_grids: tuple[tuple[float, ...], ...]
    gain_matrix: np.ndarray
    gain_to_lss: np.ndarray
    noise: np.ndarray
    it_limit_pu: float
    error_std: float
    max_false_alarm: float = 0.1
    discount: float = 0.95
    welfare_weights: np.ndarray | None = None
    min_payoff_fraction: np.ndarray | float = 0.1

    def __post_init__(self):
        grids = tuple(tuple(float(p) for p in g) for g in self.power_grids)
        object.__setattr__(self, "power_grids", grids)
        n = len(grids)
        if n < 1:
            raise ConfigError("power_grids: at least one player is required")
        for i, g in enumerate(grids):
            if 0.0 not in g:
                raise ConfigError(f"power_grids[{i}]: must contain 0")
            if any(b <= a for a, b in zip(g, g[1:])):
                raise ConfigError(f"power_grids[{i}]: must be strictly ascending")
            if g[0] < 0:
                raise ConfigError(f"power_grids[{i}]: powers must be nonnegative")
        gm = _frozen(self.gain_matrix)
        if gm.shape != (n, n):
            raise ConfigError(f"gain_matrix: expected shape ({n}, {n}), got {gm.shape}")
        if np.any(gm < 0) or not np.all(np.isfinite(gm)):
            raise ConfigError("gain_matrix: gains must be finite and nonnegative")
        g0 = _frozen(self.gain_to_lss)
        if g0.shape != (n,) or np.any(g0 < 0):
            raise ConfigError(f"gain_to_lss: expected {n} nonnegative gains")
        noise = _frozen(np.broadcast_to(np.asarray(self.noise, dtype=float), (n,)))
        if np.any(noise <= 0):
            raise ConfigError("noise: must be strictly positive")
        if not self.it_limit_pu > 0:
            raise ConfigError("it_limit_pu: must be strictly positive")
        if not self.error_std > 0:
            raise ConfigError("error_std: must be strictly positive")
        if not 0.0 < self.max_false_alarm < 1.0:
            raise ConfigError("max_false_alarm: must lie in (0, 1)")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount: must lie in [0, 1)")
        w = np.full(n, 1.0 / n) if self.welfare_weights is None else np.asarray(self.welfare_weights, float)
        if w.shape != (n,) or np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("welfare_weights: need n weights in [0, 1] summing to 1")
        frac = _frozen(np.broadcast_to(np.asarray(self.min_payoff_fraction, dtype=float), (n,)))
        if np.any(frac < 0) or np.any(frac > 1):
            raise ConfigError("min_payoff_fraction: must lie in [0, 1]")
        object.__setattr__(self, "gain_matrix", gm)
        object.__setattr__(self, "gain_to_lss", g0)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "welfare_weights", _frozen(w))
        object.__setattr__(self, "min_payoff_fraction", frac)
        object.__setattr__(self, "it_limit_pu", float(self.it_limit_pu))
        object.__setattr__(self, "error_std", float(self.error_std))

    @property
    def n_players(self) -> int:
        return len(self.power_grids)

    @property
    def max_powers(self) -> tuple[float, ...]:
        return tuple(g[-1] for g in self.power_grids)

    def replace(self, **changes) -> "ScenarioConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ScenarioConfig(**kw)


@dataclass(frozen=True)
class MonitoringModel:
    intermediate_it: float
    it_limit_pu: float
    error_std: float
    gain_to_lss: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0.0 < self.intermediate_it <= self.it_limit_pu:
            raise MonitoringInfeasibleError(
                f"intermediate limit {self.intermediate_it} outside (0, {self.it_limit_pu}]"
            )
        object.__setattr__(self, "gain_to_lss", _frozen(self.gain_to_lss))

    def interference(self, profile) -> float:
        return float(np.dot(self.gain_to_lss, np.asarray(profile, dtype=float)))


def validate_profile(profile, config: ScenarioConfig) -> np.ndarray:
    p = np.asarray(profile, dtype=float)
    if p.shape != (config.n_players,):
        raise InvalidProfileError(f"profile must have {config.n_players} entries, got {p.shape}")
    for i, (x, grid) in enumerate(zip(p, config.power_grids)):
        if not any(abs(x - g) <= 1e-12 * max(1.0, abs(g)) for g in grid):
            raise InvalidProfileError(f"player {i}: power {x} is not on its grid {grid}")
    return p


def payoffs_batch(profiles: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """Throughput for many profiles at once; ``profiles`` has shape (M, N)."""
    P = np.atleast_2d(np.asarray(profiles, dtype=float))
    G = config.gain_matrix
    direct = np.diag(G)
    # received[m, i] = sum_j P[m, j] * G[j, i]
    interference = P @ G - P * direct
    sinr = P * direct / (interference + config.noise)
    return np.log2(1.0 + sinr)


def payoff(profile, config: ScenarioConfig) -> np.ndarray:
    p = validate_profile(profile, config)
    return payoffs_batch(p[None, :], config)[0]


def intermediate_it_limit(config: ScenarioConfig) -> MonitoringModel:
    """Largest intermediate limit whose worst-case false alarm equals the budget."""
    limit = config.it_limit_pu - config.error_std * normal_isf(config.max_false_alarm)
    if limit <= 0:
        raise MonitoringInfeasibleError(
            f"error std {config.error_std} too large for false-alarm budget "
            f"{config.max_false_alarm}: intermediate limit would be {limit:.4g}"
        )
    return MonitoringModel(
        intermediate_it=min(limit, config.it_limit_pu),
        it_limit_pu=config.it_limit_pu,
        error_std=config.error_std,
        gain_to_lss=config.gain_to_lss,
    )


def distress_probability(interference: float, model: MonitoringModel) -> float:
    return normal_sf((model.it_limit_pu - interference) / model.error_std)


def signal_distribution(profile, model: MonitoringModel) -> tuple[float, float]:
    """Return (rho(y0|p), rho(y1|p)).

    The smaller of the two tails is evaluated directly and the other one is its
    complement, so both stay accurate and the pair sums to 1.
    """
    x = (model.it_limit_pu - model.interference(profile)) / model.error_std
    if x >= 0:
        r0 = normal_sf(x)
        return r0, 1.0 - r0
    r1 = normal_sf(-x)
    return 1.0 - r1, r1


def false_alarm_probability(profile, model: MonitoringModel, config: ScenarioConfig | None = None) -> float:
    if config is not None:
        validate_profile(profile, config)
    s = model.interference(profile)
    if s > model.intermediate_it * (1 + 1e-12):
        raise ConstraintViolatedError(
            f"aggregate interference {s:.6g} exceeds intermediate limit {model.intermediate_it:.6g}"
        )
    return distress_probability(s, model)


def signal_from_noise(interference: float, noise: float, model: MonitoringModel) -> int:
    return Y0 if interference + noise > model.it_limit_pu else Y1


def sample_signal(profile, model: MonitoringModel, rng: np.random.Generator) -> int:
    eps = rng.normal(0.0, model.error_std)
    return signal_from_noise(model.interference(profile), eps, model)


def sample_scenario(
    n_players: int,
    beta: float,
    seed: int,
    *,
    levels: int = DEFAULT_LEVELS,
    max_power_db: float = 10.0,
    noise_db: float = 0.0,
    it_limit_db: float = 10.0,
    error_var: float = 0.1,
    max_false_alarm: float = 0.1,
    min_payoff_fraction: float = 0.1,
    discount: float = 0.95,
) -> ScenarioConfig:
    """Random scenario with Rayleigh-faded links.

    Power gains are unit exponentials; the cross gains are the same draws scaled
    by ``beta``, so one seed gives matched channels across cross-interference levels.
    """
    if beta <= 0:
        raise ConfigError("beta: must be strictly positive")
    if n_players < 2:
        raise ConfigError("n_players: need at least 2")
    rng = np.random.default_rng(seed)
    unit = rng.exponential(1.0, size=(n_players, n_players))
    g0 = rng.exponential(1.0, size=n_players)
    gains = unit * beta
    np.fill_diagonal(gains, np.diag(unit))
    pmax = db_to_linear(max_power_db)
    return ScenarioConfig(
        power_grids=tuple(uniform_grid(pmax, levels) for _ in range(n_players)),
        gain_matrix=gains,
        gain_to_lss=g0,
        noise=np.full(n_players, db_to_linear(noise_db)),
        it_limit_pu=db_to_linear(it_limit_db),
        error_std=math.sqrt(error_var),
        max_false_alarm=max_false_alarm,
        discount=discount,
        welfare_weights=np.full(n_players, 1.0 / n_players),
        min_payoff_fraction=min_payoff_fraction,
    )


# -- config files ---------------------------------------------------------------

_SAMPLE_KEYS = {
    "n_players", "beta", "seed", "levels", "max_power_db", "noise_db", "it_limit_db",
    "error_var", "max_false_alarm", "min_payoff_fraction", "discount",
}


def _require(d: dict, key: str, where: str = ""):
    if key not in d:
        raise ConfigError(f"missing required field '{where}{key}'")
    return d[key]


def _number(d: dict, key: str, lin_key: str | None = None):
    """Read ``key`` (linear) or ``key_db`` (dB). Returns None if both absent."""
    lin_key = lin_key or key
    if f"{key}_db" in d:
        v = d[f"{key}_db"]
        if isinstance(v, list):
            return [db_to_linear(float(x)) for x in v]
        return db_to_linear(float(v))
    if lin_key in d:
        return d[lin_key]
    return None


def config_from_dict(d: dict) -> ScenarioConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    try:
        if "sample" in d:
            spec = dict(d["sample"])
            unknown = set(spec) - _SAMPLE_KEYS
            if unknown:
                raise ConfigError(f"sample: unknown field(s) {sorted(unknown)}")
            for key in ("n_players", "beta", "seed"):
                _require(spec, key, "sample.")
            cfg = sample_scenario(spec.pop("n_players"), spec.pop("beta"), spec.pop("seed"), **spec)
            overrides = {k: v for k, v in d.items() if k != "sample"}
            if "discount" in overrides:
                cfg = cfg.replace(discount=float(overrides["discount"]))
            return cfg

        if "power_grids" in d:
            grids = d["power_grids"]
        else:
            n = int(_require(d, "n_players"))
            pmax = _number(d, "max_power")
            if pmax is None:
                raise ConfigError("missing required field 'power_grids' (or 'max_power'/'max_power_db')")
            levels = int(d.get("levels", DEFAULT_LEVELS))
            pm = pmax if isinstance(pmax, list) else [pmax] * n
            grids = [uniform_grid(float(x), levels) for x in pm]
        n = len(grids)
        if "n_players" in d and int(d["n_players"]) != n:
            raise ConfigError(f"n_players={d['n_players']} disagrees with {n} power grids")
        gain = _require(d, "gain_matrix")
        g0 = _require(d, "gain_to_lss")
        noise = _number(d, "noise")
        if noise is None:
            raise ConfigError("missing required field 'noise' (or 'noise_db')")
        ibar = _number(d, "it_limit_pu")
        if ibar is None:
            raise ConfigError("missing required field 'it_limit_pu' (or 'it_limit_pu_db')")
        if "error_std" in d:
            std = float(d["error_std"])
        elif "error_var" in d:
            std = math.sqrt(float(d["error_var"]))
        else:
            raise ConfigError("missing required field 'error_std' (or 'error_var')")
        return ScenarioConfig(
            power_grids=grids,
            gain_matrix=np.asarray(gain, dtype=float),
            gain_to_lss=np.asarray(g0, dtype=float),
            noise=np.asarray(noise, dtype=float),
            it_limit_pu=float(ibar),
            error_std=std,
            max_false_alarm=float(d.get("max_false_alarm", 0.1)),
            discount=float(d.get("discount", 0.95)),
            welfare_weights=d.get("welfare_weights"),
            min_payoff_fraction=d.get("min_payoff_fraction", 0.1),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def config_to_dict(config: ScenarioConfig) -> dict:
    return {
        "n_players": config.n_players,
        "power_grids": [list(g) for g in config.power_grids],
        "gain_matrix": config.gain_matrix.tolist(),
        "gain_to_lss": config.gain_to_lss.tolist(),
        "noise": config.noise.tolist(),
        "it_limit_pu": config.it_limit_pu,
        "error_std": config.error_std,
        "max_false_alarm": config.max_false_alarm,
        "discount": config.discount,
        "welfare_weights": config.welfare_weights.tolist(),
        "min_payoff_fraction": config.min_payoff_fraction.tolist(),
    }


def load_config(path) -> ScenarioConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(config: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")
