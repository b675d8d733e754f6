import numpy as np
import pytest

from deeprep import tensor as T


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


def central_diff(f, arrays, eps=1e-5):
    """Independent finite-difference oracle: d f() / d arrays[i], perturbing in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + eps
            up = f()
            a[i] = orig - eps
            down = f()
            a[i] = orig
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


# --- acceptance reporting -------------------------------------------------------

CRITERIA = {
    1: "gradient check, six strategies, lambda in {0, 1}",
    2: "learnability on copy and reverse",
    3: "parameter counts",
    4: "diversity effect",
    5: "structural DAG checks",
    6: "reduction identities",
    7: "causality and padding",
    8: "exploitation CSV",
    9: "determinism and persistence",
}
_OUTCOMES: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check of acceptance criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _OUTCOMES.setdefault(n, []).append((bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        checks = _OUTCOMES[n]
        ok = all(c for c, _ in checks)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {CRITERIA[n]}")
        for c, detail in checks:
            terminalreporter.write_line(f"    {'ok  ' if c else 'FAIL'} {detail}")
