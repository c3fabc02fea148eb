import numpy as np
import pytest

from rbssm.cli import tune_allocator
from rbssm.core import GaussianBelief
from rbssm.kalman import LinearGaussianSSM

tune_allocator()


def random_model(rng, k=None, ell=None, time_varying=False):
    """A random stable-ish linear-Gaussian model with a proper initial belief."""
    k = k or int(rng.integers(1, 5))
    ell = ell or int(rng.integers(1, k + 1))

    def draw(n=None):
        F = rng.normal(size=(k, k))
        F *= 0.9 / max(1.0, np.abs(np.linalg.eigvals(F)).max())
        return F

    A = rng.normal(size=(ell, ell))
    Q = A @ A.T + 0.1 * np.eye(ell)
    G = rng.normal(size=(k, ell))
    H = rng.normal(size=k)
    R = float(rng.uniform(0.2, 2.0))
    B = rng.normal(size=(k, k))
    x0 = GaussianBelief(rng.normal(size=k), B @ B.T + np.eye(k))
    if time_varying:
        Fs = [draw() for _ in range(40)]
        return LinearGaussianSSM(lambda n: Fs[(n - 1) % 40], G, H, Q, lambda n: R * (1 + 0.5 * np.sin(n)), x0)
    return LinearGaussianSSM(draw(), G, H, Q, R, x0)


def joint_gaussian_loglik(model, ys):
    """log N(y; mu, S) with the mean and covariance of (y_1..y_N) assembled directly."""
    ys = np.asarray(ys, dtype=float)
    N, k = ys.size, model.dim_x
    ell = model.dim_v
    # x_n = M_n [x0; v_1; ...; v_N] with every block written out
    dim = k + N * ell
    M = np.zeros((k, dim))
    M[:, :k] = np.eye(k)
    cov_src = np.zeros((dim, dim))
    cov_src[:k, :k] = model.x0.cov
    mean_src = np.zeros(dim)
    mean_src[:k] = model.x0.mean
    rows, Rs = [], []
    for n in range(1, N + 1):
        F, G, H, Q, R = model.matrices(n)
        s = k + (n - 1) * ell
        cov_src[s:s + ell, s:s + ell] = Q
        M = F @ M
        M[:, s:s + ell] += G
        rows.append(H @ M)
        Rs.append(R)
    L = np.array(rows)
    mu = L @ mean_src
    S = L @ cov_src @ L.T + np.diag(Rs)
    sign, logdet = np.linalg.slogdet(S)
    r = ys - mu
    return float(-0.5 * (N * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(S, r)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
