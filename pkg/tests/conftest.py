import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from warpfit.prep import SampledCurve

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def template(t):
    return np.sin(2 * np.pi * t) + 0.8 * np.cos(np.pi * t)


def smooth_warp(t, a, b):
    """Monotone warp ``expm1(a t) / expm1(a) + b sin(2 pi t)`` (``|b|`` small)."""
    base = t if abs(a) < 1e-12 else np.expm1(a * t) / np.expm1(a)
    return base + b * np.sin(2 * np.pi * t)


def random_smooth_warp(rng, t):
    while True:
        a = rng.uniform(-1.5, 1.5)
        b = rng.uniform(-0.05, 0.05)
        g = smooth_warp(t, a, b)
        if np.all(np.diff(g) > 0):
            g[0], g[-1] = 0.0, 1.0
            return g


def make_curve(cid, values, cls="K1", duration=25.0, **extra):
    values = np.asarray(values, dtype=float)
    grid = np.linspace(0.0, 1.0, values.size)
    cov = {"speaker": "S1", "sentence": "T1", "class": cls}
    cov.update(extra)
    return SampledCurve(cid, grid, values, duration, cov)


def warped_copy(cid, g, cls="K1", level=0.0):
    """Curve whose values are ``template(g(t))`` on the grid of ``g``."""
    return make_curve(cid, template(np.asarray(g)) + level, cls)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    entry = _ACCEPTANCE.setdefault(name, {"ok": True, "detail": ""})
    entry["ok"] = entry["ok"] and not failed
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[name]
        number, label = name[len("test_criterion_"):].split("_", 1)
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {int(number):2d} ({label.replace('_', ' ')}): {status}"
        if entry["detail"]:
            line += f" - {entry['detail']}"
        terminalreporter.write_line(line)
