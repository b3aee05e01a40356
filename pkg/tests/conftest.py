import numpy as np
import pytest

from gia.core import Matrix


def finite_difference(f, arr, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def M(a):
    return Matrix(np.asarray(a, dtype=float))


def gia_params(rng, in_dim, d_n, **modes):
    from gia.attention import GiaParams, init_gia_arrays
    arrays = init_gia_arrays(rng, in_dim, d_n)
    # non-zero biases so they are exercised too
    for k in ("gia.b_embed", "gia.b_pos", "gia.b_res"):
        arrays[k] = rng.standard_normal((1, d_n)) * 0.1
    return GiaParams.from_arrays(arrays, **modes), arrays


def separable_graph(seed=0, n_nodes=300, positive_share=0.3):
    """Two spatial clusters, one per class, with linearly separable features.

    Edges join nodes closer than 0.1; the clusters sit 0.5 apart, so no edge
    crosses between classes.
    """
    from scipy.spatial import cKDTree
    from gia.graph import make_graph
    rng = np.random.default_rng(seed)
    labels = (rng.random(n_nodes) < positive_share).astype(np.int64)
    centres = np.array([[0.25, 0.5], [0.75, 0.5]])
    pos = centres[labels] + rng.normal(0, 0.05, size=(n_nodes, 2))
    signal = np.where(labels[:, None] == 1, 1.0, -1.0)
    feats = np.hstack([signal + rng.uniform(-0.5, 0.5, size=(n_nodes, 1)),
                       rng.standard_normal((n_nodes, 3))])
    edges = cKDTree(pos).query_pairs(0.1, output_type="ndarray")
    return make_graph(edges, feats, pos, labels)


# --- acceptance report ------------------------------------------------------
# test_acceptance.py records one verdict per criterion here; the lines are
# printed in the terminal summary so they survive output capturing.
ACCEPTANCE = {}


def record(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
