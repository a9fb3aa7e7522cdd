import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protofed.diffcore import (
    ContractError,
    DimensionError,
    GradientTape,
    NonFiniteError,
    OptimizerState,
    Tensor,
    add,
    backward,
    concat,
    cosine_similarity,
    div,
    exp,
    grad,
    group_norm,
    log,
    log_softmax,
    matmul,
    mul,
    radam_step,
    rectification,
    relu,
    sgd_step,
    sqrt,
    square,
    step,
    sub,
    tanh,
    tensor,
    tmean,
    tsum,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m).numpy(), m)


def test_matmul_projector():
    out = matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.numpy(), [[5.0, 6.0], [0.0, 0.0]])


@pytest.mark.parametrize("seed", range(3))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b).numpy(), naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    _, (ga, gb) = grad(lambda x, y: tsum(square(matmul(x, y))), [a, b])
    np.testing.assert_allclose(ga, numeric_grad(lambda x: np.sum((x @ b) ** 2), a), rtol=1e-6)
    np.testing.assert_allclose(gb, numeric_grad(lambda y: np.sum((a @ y) ** 2), b), rtol=1e-6)


# -- backward ---------------------------------------------------------------

def test_backward_sum_of_squares():
    _, (g,) = grad(lambda x: tsum(square(x)), [np.array([1.0, 2.0, 3.0])])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_constant_gives_zero_gradient():
    with GradientTape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        c = tsum(tensor([3.0, 4.0]))
    g = backward(tape, c)
    np.testing.assert_array_equal(g[x], [0.0, 0.0])


def test_unused_leaf_gets_zero_gradient():
    with GradientTape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        y = tape.watch(Tensor([5.0]))
        out = tsum(mul(x, x))
    g = backward(tape, out)
    np.testing.assert_array_equal(g[y], [0.0])
    np.testing.assert_array_equal(g[x], [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with GradientTape() as tape:
        x = tape.watch(Tensor([1.0, 2.0]))
        y = mul(x, 2.0)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_visits_ops_in_reverse():
    # A value reused along two paths must collect both contributions.
    with GradientTape() as tape:
        x = tape.watch(Tensor([3.0]))
        y = mul(x, x)
        z = add(y, mul(y, x))
        out = tsum(z)
    g = backward(tape, out)
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(g[x], [2 * 3.0 + 3 * 9.0])


@pytest.mark.parametrize("seed", range(3))
def test_chain_rule_matches_hand_composition(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    # f(g(x)) with g = tanh(w * x), f = sum(exp(g))
    _, (gx,) = grad(lambda t: tsum(exp(tanh(mul(t, w)))), [x])
    inner = np.tanh(w * x)
    hand = np.exp(inner) * (1 - inner**2) * w
    np.testing.assert_allclose(gx, hand, rtol=1e-12)


UNARY = {
    "exp": (exp, lambda x: x),
    "log": (log, lambda x: np.abs(x) + 0.5),
    "tanh": (tanh, lambda x: x),
    "sqrt": (sqrt, lambda x: np.abs(x) + 0.5),
    "square": (square, lambda x: x),
    "relu": (relu, lambda x: x + 0.05 * np.sign(x)),
    "log_softmax": (lambda t: log_softmax(t, axis=-1), lambda x: x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(3))
def test_unary_ops_match_finite_differences(name, seed):
    op, domain = UNARY[name]
    rng = np.random.default_rng(seed)
    x = domain(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    _, (g) = grad(lambda t: tsum(mul(op(t), w)), [x])

    def f(arr):
        return float(np.sum(op(tensor(arr)).numpy() * w))

    num = numeric_grad(f, x, 1e-6)
    np.testing.assert_allclose(g[0], num, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_binary_ops_with_broadcast(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(4) + 3.0
    for op in (add, sub, mul, div):
        _, (ga, gb) = grad(lambda x, y: tsum(square(op(x, y))), [a, b])
        fa = lambda x: float(np.sum(op(tensor(x), tensor(b)).numpy() ** 2))
        fb = lambda y: float(np.sum(op(tensor(a), tensor(y)).numpy() ** 2))
        np.testing.assert_allclose(ga, numeric_grad(fa, a), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(gb, numeric_grad(fb, b), rtol=1e-5, atol=1e-8)


def test_getitem_concat_mean_gradients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6))

    def f(t):
        return tmean(square(concat([t[:, :3], mul(t[:, 3:], 2.0)], axis=-1)))

    _, (g,) = grad(f, [x])
    num = numeric_grad(lambda a: float(np.mean(np.concatenate([a[:, :3], 2 * a[:, 3:]], -1) ** 2)), x)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        log(tensor([0.0]))
    with pytest.raises(NonFiniteError):
        exp(tensor([1e6]))


def test_tensor_values_cannot_be_mutated_through_numpy():
    t = tensor([1.0, 2.0])
    view = t.numpy()
    try:
        view[0] = 5.0
    except ValueError:
        pass
    assert t.data[0] == 1.0


def test_determinism_bit_identical():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    v1, g1 = grad(lambda x, y: tsum(tanh(matmul(x, y))), [a, b])
    v2, g2 = grad(lambda x, y: tsum(tanh(matmul(x, y))), [a, b])
    assert v1 == v2
    for x, y in zip(g1, g2):
        assert x.tobytes() == y.tobytes()


# -- group norm / cosine ----------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-50, 50)), st.sampled_from([1, 2, 4]))
def test_group_norm_standardises_each_group(x, groups):
    n, c = x.shape
    xg = x.reshape(n, groups, c // groups)
    # Groups whose spread is tiny compared with eps cannot reach unit variance.
    spread = xg.var(axis=-1)
    out = group_norm(x, groups).numpy().reshape(n, groups, c // groups)
    mean = out.mean(axis=-1)
    var = out.var(axis=-1)
    ok = spread > 1e-3
    assert np.all(np.abs(mean) < 1e-6)
    assert np.all(np.abs(var[ok] - 1.0) < 1e-4)


def test_group_norm_gradient():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 8))
    gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
    w = rng.standard_normal((3, 8))
    _, (gx, gg, gb) = grad(lambda a, g, b: tsum(mul(group_norm(a, 2, g, b), w)), [x, gamma, beta])
    f = lambda a: float(np.sum(group_norm(a, 2, gamma, beta).numpy() * w))
    np.testing.assert_allclose(gx, numeric_grad(f, x), rtol=1e-5, atol=1e-8)
    fg = lambda g: float(np.sum(group_norm(x, 2, g, beta).numpy() * w))
    np.testing.assert_allclose(gg, numeric_grad(fg, gamma), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gb, w.sum(axis=0), rtol=1e-12)


def test_group_norm_rejects_bad_groups():
    with pytest.raises(DimensionError):
        group_norm(np.ones((2, 6)), 4)


def test_cosine_zero_vector_is_guarded(caplog):
    with caplog.at_level("WARNING"):
        out = cosine_similarity(np.zeros((1, 3)), np.ones((1, 3))).numpy()
    assert np.isfinite(out).all() and out[0] == 0.0
    assert "zero-norm" in caplog.text


# -- optimizers -------------------------------------------------------------

def test_sgd_single_step():
    st_ = OptimizerState("sgd", lr=0.1)
    out = sgd_step(st_, {"p": np.array(1.0)}, {"p": np.array(2.0)})
    assert out["p"] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_is_fixed_point():
    st_ = OptimizerState("sgd", lr=0.5)
    p = {"p": np.array([1.5, -2.0])}
    np.testing.assert_array_equal(sgd_step(st_, p, {"p": np.zeros(2)})["p"], p["p"])


def test_sgd_converges_on_quadratic():
    st_ = OptimizerState("sgd", lr=0.1)
    p = {"p": np.array(0.0)}
    for _ in range(50):
        p = sgd_step(st_, p, {"p": 2 * (p["p"] - 3.0)})
    assert abs(p["p"] - 3.0) < 1e-3


def test_sgd_weight_decay_and_momentum():
    st_ = OptimizerState("sgd", lr=0.1, momentum=0.9, weight_decay=0.5)
    p = {"p": np.array(2.0)}
    p1 = sgd_step(st_, p, {"p": np.array(1.0)})
    assert p1["p"] == pytest.approx(2.0 - 0.1 * (1.0 + 1.0))
    p2 = sgd_step(st_, p1, {"p": np.array(1.0)})
    d2 = 0.9 * 2.0 + (1.0 + 0.5 * p1["p"])
    assert p2["p"] == pytest.approx(p1["p"] - 0.1 * d2)


def test_sgd_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step(OptimizerState("sgd"), {"p": np.zeros(2)}, {"p": np.zeros(3)})


def test_radam_zero_gradient_fixed_point_and_counter():
    st_ = OptimizerState("radam", lr=0.1)
    p = {"p": np.array([1.0, 2.0])}
    for k in range(1, 11):
        p = radam_step(st_, p, {"p": np.zeros(2)})
        assert st_.step == k
    np.testing.assert_array_equal(p["p"], [1.0, 2.0])


def test_radam_converges_on_quadratic():
    # Adam-family steps move about lr per update, so 200 steps of 0.01 must
    # cover both the approach and the damping of the momentum overshoot:
    # start half a unit from the minimum.
    st_ = OptimizerState("radam", lr=0.01)
    p = {"p": np.array(2.5)}
    for _ in range(200):
        p = radam_step(st_, p, {"p": 2 * (p["p"] - 3.0)})
    assert abs(p["p"] - 3.0) < 1e-2


def test_radam_early_steps_fall_back_to_momentum():
    beta2 = 0.98
    # rho_t <= 4 for the first few steps with these betas.
    assert rectification(1, beta2) is None
    st_ = OptimizerState("radam", lr=0.1, betas=(0.94, beta2))
    out = radam_step(st_, {"p": np.array(1.0)}, {"p": np.array(2.0)})
    # Bias-corrected first moment after one step equals the gradient.
    assert out["p"] == pytest.approx(1.0 - 0.1 * 2.0)


def test_radam_matches_reference_rule():
    """Independent transcription of the published rectified-Adam update."""
    b1, b2, lr, eps = 0.9, 0.999, 1e-2, 1e-8
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((30, 3))
    st_ = OptimizerState("radam", lr=lr, betas=(b1, b2), eps=eps)
    p = {"p": np.zeros(3)}
    ref = np.zeros(3)
    m = np.zeros(3)
    v = np.zeros(3)
    rho_inf = 2 / (1 - b2) - 1
    for t, g in enumerate(grads, start=1):
        p = radam_step(st_, p, {"p": g})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g**2
        mh = m / (1 - b1**t)
        rho = rho_inf - 2 * t * b2**t / (1 - b2**t)
        if rho > 4:
            r = np.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            ref = ref - lr * r * mh / (np.sqrt(v / (1 - b2**t)) + eps)
        else:
            ref = ref - lr * mh
        np.testing.assert_allclose(p["p"], ref, rtol=1e-12, atol=1e-15)


def test_step_dispatch_and_invalid_state():
    st_ = OptimizerState("sgd", lr=1.0)
    assert step(st_, {"p": np.array(1.0)}, {"p": np.array(1.0)})["p"] == 0.0
    with pytest.raises(ValueError):
        OptimizerState("adamw")
    with pytest.raises(ValueError):
        OptimizerState("sgd", lr=-1.0)
    with pytest.raises(ValueError):
        radam_step(st_, {"p": np.array(1.0)}, {"p": np.array(1.0)})
