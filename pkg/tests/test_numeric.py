import zlib

import numpy as np
import pytest
from scipy.linalg import block_diag

from flowcast.numeric import (
    AdamState,
    NotPositiveDefiniteError,
    Tape,
    adam_step,
    finite_diff_grad,
    log_det_pd,
    reverse_grad,
    solve_pd,
)
from flowcast.numeric import autodiff as ad


def random_spd(rng, n, shift=0.5):
    A = rng.normal(size=(n, n))
    return A @ A.T + shift * np.eye(n)


# --- log_det_pd / solve_pd -------------------------------------------------------

def test_log_det_identity_and_diag():
    assert log_det_pd(np.eye(3)) == 0.0
    assert log_det_pd(np.diag([2.0, 3.0])) == pytest.approx(np.log(6.0), abs=1e-12)


def test_log_det_matches_eigenvalue_oracle():
    M = random_spd(np.random.default_rng(0), 4)
    oracle = np.sum(np.log(np.linalg.eigvalsh(M)))
    assert abs(log_det_pd(M) - oracle) <= 1e-10


def test_log_det_non_pd_names_minor():
    M = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 3.0], [0.0, 3.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as err:
        log_det_pd(M)
    assert err.value.minor == 3
    assert "order 3" in str(err.value)


def test_log_det_block_additivity():
    rng = np.random.default_rng(1)
    A, B = random_spd(rng, 3), random_spd(rng, 2)
    assert abs(log_det_pd(A) + log_det_pd(B) - log_det_pd(block_diag(A, B))) <= 1e-10


def test_solve_pd_trivial_cases():
    B = np.array([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_array_equal(solve_pd(np.eye(2), B), B)
    np.testing.assert_allclose(solve_pd(np.diag([2.0, 4.0]), np.array([2.0, 4.0])), [1.0, 1.0])


def test_solve_pd_matches_explicit_inverse():
    rng = np.random.default_rng(2)
    M = random_spd(rng, 5)
    B = rng.normal(size=(5, 3))
    X = solve_pd(M, B)
    np.testing.assert_allclose(X, np.linalg.inv(M) @ B, atol=1e-9, rtol=0)
    assert np.max(np.abs(M @ X - B)) <= 1e-8 * np.max(np.abs(B))


def test_solve_pd_rejects_indefinite():
    with pytest.raises(NotPositiveDefiniteError):
        solve_pd(np.array([[1.0, 2.0], [2.0, 1.0]]), np.ones(2))


# --- reverse_grad -----------------------------------------------------------------

def test_grad_of_square():
    tape = Tape()
    w = tape.param(3.0, "w")
    assert reverse_grad(tape, w * w)["w"] == 6.0


def test_grad_of_constant_is_zero():
    tape = Tape()
    tape.param(np.ones(3), "w")
    c = tape.constant(2.0)
    g = reverse_grad(tape, c * c)
    np.testing.assert_array_equal(g["w"], np.zeros(3))


def test_non_scalar_output_rejected():
    tape = Tape()
    w = tape.param(np.ones(3), "w")
    with pytest.raises(ValueError, match="scalar"):
        reverse_grad(tape, w * 2.0)


def _composite(W, X, S):
    H = ad.tanh(X @ W)
    M = H.T @ H + S
    return ad.log_det_pd(M) + ad.sum_(ad.solve_pd(M, H.T) ** 2)


def test_composite_expression_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 4))
    W0 = rng.normal(size=(4, 3)) * 0.5
    S = np.eye(3)
    tape = Tape()
    out = _composite(tape.param(W0, "W"), X, S)
    g = reverse_grad(tape, out)["W"]
    fd = finite_diff_grad(lambda W: _composite(W, X, S), W0, eps=1e-6)
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_tape_replay_reproduces_outputs():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 4))
    tape = Tape()
    out = _composite(tape.param(rng.normal(size=(4, 3)), "W"), X, np.eye(3))
    replayed = tape.replay()
    assert replayed[out.index].tobytes() == out.value.tobytes()
    assert all(n.inputs == () or all(
        not isinstance(a, ad.Var) or a.index < n.index for a in n.inputs) for n in tape.nodes)


# one entry per differentiable primitive: (function of a single array, input shape, sampler)
UNARY_CASES = {
    "add": (lambda a: ad.sum_(a + np.arange(3.0)), (2, 3), "normal"),
    "sub": (lambda a: ad.sum_(np.arange(3.0) - a * a), (2, 3), "normal"),
    "mul": (lambda a: ad.sum_(a * a[:, :1]), (2, 3), "normal"),
    "div": (lambda a: ad.sum_(1.0 / a + a / 3.0), (2, 3), "positive"),
    "neg": (lambda a: ad.sum_(-(a * a)), (2, 3), "normal"),
    "power": (lambda a: ad.sum_(a ** 3.0), (2, 3), "normal"),
    "exp": (lambda a: ad.sum_(ad.exp(a)), (2, 3), "normal"),
    "log": (lambda a: ad.sum_(ad.log(a)), (2, 3), "positive"),
    "tanh": (lambda a: ad.sum_(ad.tanh(a) * a), (2, 3), "normal"),
    "relu": (lambda a: ad.sum_(ad.relu(a) * a), (2, 3), "normal"),
    "sqrt": (lambda a: ad.sum_(ad.sqrt(a)), (2, 3), "positive"),
    "square": (lambda a: ad.sum_(ad.square(a) * np.arange(3.0)), (2, 3), "normal"),
    "matmul": (lambda a: ad.sum_(ad.tanh(a @ a.T)), (2, 3), "normal"),
    "transpose": (lambda a: ad.sum_(a.T * np.arange(2.0)), (2, 3), "normal"),
    "reshape": (lambda a: ad.sum_(a.reshape(3, 2) * np.arange(2.0)), (2, 3), "normal"),
    "getitem": (lambda a: ad.sum_(a[:, [0, 2, 0]] * a[1]), (2, 3), "normal"),
    "concat": (lambda a: ad.sum_(ad.square(ad.concat([a, a * 2.0], axis=0))), (2, 3), "normal"),
    "sum": (lambda a: ad.sum_(ad.square(ad.sum_(a, axis=0))), (2, 3), "normal"),
    "mean": (lambda a: ad.sum_(ad.square(ad.mean(a, axis=1, keepdims=True) - a)), (2, 3), "normal"),
    "logsumexp": (lambda a: ad.sum_(ad.logsumexp(a, axis=1)), (2, 3), "normal"),
    "log_det_pd": (lambda a: ad.log_det_pd(a @ a.T + np.eye(2)), (2, 3), "normal"),
    "solve_pd": (lambda a: ad.sum_(ad.solve_pd(a @ a.T + np.eye(2), a)), (2, 3), "normal"),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_every_primitive_matches_finite_differences(name):
    fn, shape, kind = UNARY_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        x0 = rng.normal(size=shape)
        if kind == "positive":
            x0 = np.abs(x0) + 0.5
        tape = Tape()
        g = reverse_grad(tape, fn(tape.param(x0, "x")))["x"]
        fd = finite_diff_grad(fn, x0, eps=1e-6)
        scale = max(np.max(np.abs(fd)), 1e-8)
        assert np.max(np.abs(g - fd)) <= 1e-4 * scale, name


def test_finite_diff_grad_basics():
    np.testing.assert_allclose(
        finite_diff_grad(lambda x: np.sum(x ** 2), np.array([1.0, 2.0]), eps=1e-5),
        [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 5.0, np.ones(3)), np.zeros(3))


def test_finite_diff_of_log_det_is_inverse_transpose():
    M0 = random_spd(np.random.default_rng(5), 3)
    # symmetrize so single-entry probes stay inside the PD domain; the gradient
    # at a symmetric point is unchanged
    fd = finite_diff_grad(lambda M: log_det_pd(0.5 * (M + M.T)), M0, eps=1e-6)
    np.testing.assert_allclose(fd, np.linalg.inv(M0).T, atol=1e-5)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(ValueError), np.errstate(invalid="ignore"):
        finite_diff_grad(lambda x: np.log(x[0]), np.array([0.0]), eps=1e-3)


# --- adam -----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_is_signed_learning_rate():
    g = np.array([0.3, -4.0, 1e-3])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(lr=0.01))
    # bias-corrected ratio is g/(|g| + eps) at t = 1
    np.testing.assert_allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_quadratic_bowl_monotone():
    center = np.array([1.0, -2.0, 0.5])
    p = {"w": np.zeros(3)}
    state = AdamState(lr=0.01, beta1=0.99, beta2=0.99)
    losses = []
    for _ in range(10):
        losses.append(float(np.sum((p["w"] - center) ** 2)))
        p, state = adam_step(p, {"w": 2 * (p["w"] - center)}, state)
    losses.append(float(np.sum((p["w"] - center) ** 2)))
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert state.step == 10


def test_adam_deterministic_and_shape_checked():
    rng = np.random.default_rng(6)
    p = {"a": rng.normal(size=(2, 2))}
    g = {"a": rng.normal(size=(2, 2))}
    s = AdamState()
    a1, s1 = adam_step(p, g, s)
    a2, s2 = adam_step(p, g, s)
    assert a1["a"].tobytes() == a2["a"].tobytes()
    assert s1.v["a"].tobytes() == s2.v["a"].tobytes()
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, {"a": np.ones(3)}, s)
