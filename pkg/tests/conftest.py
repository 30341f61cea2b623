import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def softmax_matrix(rng, n, diag_boost=None):
    """Row-stochastic softmax matrix; ``diag_boost`` adds a dominant diagonal."""
    logits = rng.normal(size=(n, n))
    if diag_boost is not None:
        logits += diag_boost * np.eye(n)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def well_conditioned_softmax(rng, n):
    # diagonal logit boost of ln(n) + 3 keeps the diagonal mass >~ 0.95 at every size
    return softmax_matrix(rng, n, diag_boost=np.log(n) + 3.0)


# acceptance criteria append (number, title, passed, detail) here; the summary
# hook prints one line per criterion at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")
