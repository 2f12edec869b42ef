import numpy as np
import pytest


def gaussian_pair(rho, n, seed):
    """Bivariate standard normal sample with correlation rho."""
    rng = np.random.default_rng(seed)
    z = rng.multivariate_normal([0.0, 0.0], [[1.0, rho], [rho, 1.0]], size=n)
    return z[:, 0], z[:, 1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


RECOVERY_GENERATOR = "sin(3*x1)+2*x3*x5"


def recovery_data(n_rows=2000, seed=11, noise_sigma=0.05):
    """Six-feature universe whose target depends only on x1, x3, x5."""
    from relvar.data import SynthSpec, synth_generate

    return synth_generate(
        SynthSpec(6, {1, 3, 5}, RECOVERY_GENERATOR, noise_sigma=noise_sigma, n_rows=n_rows, seed=seed)
    )


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance(capsys):
    """Record one pass/fail line for an acceptance criterion.

    Lines are printed immediately and repeated in the terminal summary.
    """

    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
