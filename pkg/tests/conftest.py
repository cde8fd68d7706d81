import numpy as np
import pytest

# Moment matrix of the orthogonal D2Q9 basis at rest, typed in by hand;
# rows 1 and 2 carry a factor lambda.
M0_ROWS = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1],
    [0, 1, 0, -1, 0, 1, -1, -1, 1],
    [0, 0, 1, 0, -1, 1, 1, -1, -1],
    [-4, -1, -1, -1, -1, 2, 2, 2, 2],
    [0, 1, -1, 1, -1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 1, -1, 1, -1],
    [0, -2, 0, 2, 0, 1, -1, -1, 1],
    [0, 0, -2, 0, 2, 1, 1, -1, -1],
    [4, -2, -2, -2, -2, 1, 1, 1, 1],
]


def m0_literal(lam=1):
    rows = [list(r) for r in M0_ROWS]
    for k in (1, 2):
        rows[k] = [lam * x for x in rows[k]]
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance reporting: one line per criterion, repeated in the terminal summary

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    log = request.config.stash[ACCEPTANCE]

    def record(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
        log.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, [])
    if log:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(log):
            terminalreporter.write_line(line)


# -- independent reference MRT step (fixed frame) ---------------------------------

C = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1], [1, 1], [-1, 1], [-1, -1], [1, -1]])
W = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)


def reference_equilibrium(rho, u, lam=1.0):
    cu = np.einsum("ja,a...->j...", C * lam, u)
    uu = (u ** 2).sum(axis=0)
    return W.reshape((9,) + (1,) * rho.ndim) * rho * (
        1 + 3 * cu / lam ** 2 + 4.5 * cu ** 2 / lam ** 4 - 1.5 * uu / lam ** 2)


def reference_mrt_step(f, s_nonconserved, lam=1.0):
    """Collide in the fixed orthogonal basis, then stream periodically."""
    m = np.array(m0_literal(lam), dtype=float)
    s = np.concatenate([np.zeros(3), np.asarray(s_nonconserved, dtype=float)])
    rho = f.sum(axis=0)
    q = np.einsum("ja,j...->a...", C * lam, f)
    feq = reference_equilibrium(rho, q / rho, lam)
    mom = np.einsum("kj,j...->k...", m, f)
    meq = np.einsum("kj,j...->k...", m, feq)
    mstar = mom + s.reshape((9,) + (1,) * rho.ndim) * (meq - mom)
    fstar = np.linalg.solve(m, mstar.reshape(9, -1)).reshape(f.shape)
    return np.stack([np.roll(fstar[j], shift=tuple(C[j]), axis=(0, 1)) for j in range(9)])
