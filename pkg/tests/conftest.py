import contextlib
import functools

import numpy as np
import pytest

from ppe_spectrum.equilibrium import analyze
from ppe_spectrum.scenario import intermediate_it_limit, sample_scenario

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def desk_scenario(n, seed, beta=8.0, lo=0.8, hi=1.0, **kw):
    """Scenario whose LSS gains put every single-user profile just under the intermediate limit.

    Each player can use full power alone, and any extra transmitter pushes the
    aggregate well past the limit, so deviations are detectable.
    """
    cfg = sample_scenario(n, beta, seed, **kw)
    limit = intermediate_it_limit(cfg).intermediate_it
    rng = np.random.default_rng([seed, 7])
    g0 = limit / cfg.max_powers[0] * rng.uniform(lo, hi, n)
    return cfg.replace(gain_to_lss=g0)


@functools.lru_cache(maxsize=None)
def feasible_desk(n, count, max_delta=1.0, start=0):
    """First ``count`` desk seeds (from ``start``) with an ok design and minimum discount <= max_delta."""
    out = []
    seed = start
    while len(out) < count:
        cfg = desk_scenario(n, seed)
        rep = analyze(cfg)
        if rep.ok and rep.delta_min <= max_delta:
            out.append((seed, cfg, rep))
        seed += 1
        if seed > start + 2000:
            raise RuntimeError(f"not enough feasible desk scenarios for n={n}")
    return tuple(out)


@pytest.fixture
def acceptance():
    """Context manager recording a PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException as exc:
            _ACCEPTANCE[number] = ("FAIL", title, detail["text"] or f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        _ACCEPTANCE[number] = ("PASS", title, detail["text"])

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        status, title, text = _ACCEPTANCE[k]
        line = f"[{status}] criterion {k:2d}: {title}"
        if text:
            line += f" -- {text}"
        terminalreporter.write_line(line)
