"""Selective scan and the four-direction 2D scan against naive oracles."""
import numpy as np
import pytest

from useg.autograd import ParameterStore, constant, scan
from useg.backbone import ModelConfig, init_ssm_params, selective_scan, ss2d
from useg.errors import ShapeMismatch


def naive_scan(u, delta, A, B, C, D):
    """Step-by-step scalar loop over h_t = exp(dt*A) h_{t-1} + dt*B_t*u_t, y_t = C_t.h_t + D*u_t."""
    bsz, L, ch = u.shape
    n = A.shape[1]
    y = np.zeros_like(u)
    for b in range(bsz):
        for c in range(ch):
            h = [0.0] * n
            for t in range(L):
                out = D[c] * u[b, t, c]
                for k in range(n):
                    h[k] = np.exp(delta[b, t, c] * A[c, k]) * h[k] + delta[b, t, c] * B[b, t, k] * u[b, t, c]
                    out += C[b, t, k] * h[k]
                y[b, t, c] = out
    return y


def _draw(rng, bsz, L, ch, n):
    return (rng.normal(size=(bsz, L, ch)), rng.uniform(1e-3, 1.0, size=(bsz, L, ch)),
            -rng.uniform(0.1, 3.0, size=(ch, n)), rng.normal(size=(bsz, L, n)),
            rng.normal(size=(bsz, L, n)), rng.normal(size=ch))


def test_scan_matches_naive_recurrence_length_64():
    rng = np.random.default_rng(0)
    args = _draw(rng, 2, 64, 3, 4)
    y = scan(*[constant(a) for a in args]).data
    np.testing.assert_allclose(y, naive_scan(*args), rtol=0, atol=1e-6)


def test_zero_input_matrix_leaves_skip_term_only():
    rng = np.random.default_rng(1)
    u, delta, A, B, C, D = _draw(rng, 1, 10, 3, 4)
    y = scan(*[constant(a) for a in (u, delta, A, np.zeros_like(B), C, D)]).data
    np.testing.assert_array_equal(y, D * u)


def test_single_step_closed_form():
    rng = np.random.default_rng(2)
    u, delta, A, B, C, D = _draw(rng, 1, 1, 2, 3)
    y = scan(*[constant(a) for a in (u, delta, A, B, C, D)]).data
    for c in range(2):
        ref = np.dot(C[0, 0], delta[0, 0, c] * B[0, 0] * u[0, 0, c]) + D[c] * u[0, 0, c]
        assert abs(y[0, 0, c] - ref) < 1e-12


def test_scan_shape_errors():
    rng = np.random.default_rng(3)
    u, delta, A, B, C, D = _draw(rng, 1, 4, 2, 3)
    with pytest.raises(ShapeMismatch):
        scan(*[constant(a) for a in (u, delta[:, :3], A, B, C, D)])
    with pytest.raises(ShapeMismatch):
        scan(*[constant(a) for a in (u, delta, A, B, C[..., :2], D)])


# --------------------------------------------------------------------------
# 2D scan


def _ssm_params(rng, c, n, n_dirs=4):
    store = ParameterStore(np.float64)
    for d in range(n_dirs):
        init_ssm_params(store, f"ssm{d}", rng, c, n)
        for key in ("w_delta", "b_delta", "A_log", "D"):
            p = store[f"ssm{d}.{key}"]
            p.data = p.data + 0.5 * rng.normal(size=p.shape)
    return store, [store.scope(f"ssm{d}") for d in range(n_dirs)]


def _softplus(x):
    return np.log1p(np.exp(-abs(x))) + max(x, 0.0)


def _visit_orders(h, w):
    row_major = [(i, j) for i in range(h) for j in range(w)]
    col_major = [(i, j) for j in range(w) for i in range(h)]
    return [row_major, row_major[::-1], col_major, col_major[::-1]]


def brute_force_ss2d(fmap, store, n_dirs=4):
    """Enumerate every pixel visit order explicitly and run the recurrence token by token."""
    bsz, ch, h, w = fmap.shape
    out = np.zeros_like(fmap)
    for d, order in enumerate(_visit_orders(h, w)[:n_dirs]):
        p = {k: store[f"ssm{d}.{k}"].data for k in ("w_delta", "b_delta", "w_B", "w_C", "A_log", "D")}
        A = -np.exp(p["A_log"])
        n = A.shape[1]
        for b in range(bsz):
            state = np.zeros((ch, n))
            for (i, j) in order:
                x = fmap[b, :, i, j]
                dt = np.array([_softplus(v) for v in x @ p["w_delta"] + p["b_delta"]])
                Bt, Ct = x @ p["w_B"], x @ p["w_C"]
                for c in range(ch):
                    for k in range(n):
                        state[c, k] = np.exp(dt[c] * A[c, k]) * state[c, k] + dt[c] * Bt[k] * x[c]
                    out[b, c, i, j] += state[c] @ Ct + p["D"][c] * x[c]
    return out


@pytest.mark.parametrize("size", [2, 4])
def test_ss2d_matches_four_ordering_oracle(size):
    rng = np.random.default_rng(size)
    store, params = _ssm_params(rng, 3, 2)
    fmap = rng.normal(size=(2, 3, size, size))
    y = ss2d(constant(fmap), params).data
    np.testing.assert_allclose(y, brute_force_ss2d(fmap, store), rtol=0, atol=1e-6)


def test_ss2d_non_square_map():
    rng = np.random.default_rng(7)
    store, params = _ssm_params(rng, 2, 3)
    fmap = rng.normal(size=(1, 2, 3, 5))
    np.testing.assert_allclose(ss2d(constant(fmap), params).data, brute_force_ss2d(fmap, store), atol=1e-9)


def test_ss2d_degenerate_scan_is_four_times_skip():
    rng = np.random.default_rng(8)
    store, params = _ssm_params(rng, 3, 2)
    D = rng.normal(size=3)
    for d in range(4):
        store[f"ssm{d}.w_B"].data[:] = 0.0
        store[f"ssm{d}.D"].data = D.copy()
    fmap = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(ss2d(constant(fmap), params).data, 4 * D[None, :, None, None] * fmap, atol=1e-12)


def test_ss2d_preserves_shape():
    rng = np.random.default_rng(9)
    _, params = _ssm_params(rng, 5, 2)
    for h, w in [(1, 1), (2, 7), (6, 3)]:
        assert ss2d(constant(rng.normal(size=(2, 5, h, w))), params).shape == (2, 5, h, w)
