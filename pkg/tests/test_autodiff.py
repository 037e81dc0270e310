"""Primitive-by-primitive gradient checks plus tape semantics."""

import numpy as np
import pytest
import scipy.sparse as sp

from sacn import autodiff as ad

TRIALS = 100
PRIMITIVE_TOL = 1e-6


def scalarize(tensor, mixer):
    """Contract any output to a scalar with a fixed mixing matrix."""
    return ad.sum_all(ad.elementwise_multiply(tensor, tensor.tape.constant(mixer)))


def check(build, arrays, eps=1e-5):
    # eps balances central-difference truncation against cancellation noise
    return ad.gradient_check(build, arrays, eps=eps)


def mixer(rng, shape):
    # magnitudes bounded away from zero: a freak near-zero coefficient would
    # make the true gradient smaller than finite-difference roundoff noise
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.3, 1.7, size=shape)


def random_sparse(rng, rows, cols):
    mask = rng.random((rows, cols)) < 0.5
    return sp.csr_matrix(np.where(mask, rng.normal(size=(rows, cols)), 0.0))


# one (closure-builder, input-maker) pair per primitive; inputs keep log and
# divide away from their clamp regions
def _primitive_cases():
    def case(name, make_inputs, build_with):
        return pytest.param((make_inputs, build_with), id=name)

    return [
        case("matmul",
             lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
                          mixer(rng, (3, 2))),
             lambda ps, mix: scalarize(ad.matmul(ps[0], ps[1]), mix)),
        case("sparse_dense_matmul",
             lambda rng: ([rng.normal(size=(4, 3))], (random_sparse(rng, 5, 4), mixer(rng, (5, 3)))),
             lambda ps, mix: scalarize(ad.sparse_dense_matmul(mix[0], ps[0]), mix[1])),
        case("add",
             lambda rng: ([rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
                          mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.add(ps[0], ps[1]), mix)),
        case("subtract",
             lambda rng: ([rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
                          mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.subtract(ps[0], ps[1]), mix)),
        case("elementwise_multiply",
             lambda rng: ([mixer(rng, (3, 4)), mixer(rng, (3, 4))],
                          mixer(rng, (3, 4))),
             lambda ps, mix: scalarize(ad.elementwise_multiply(ps[0], ps[1]), mix)),
        case("elementwise_multiply_colvec",
             lambda rng: ([mixer(rng, (4, 1)), mixer(rng, (4, 3))],
                          mixer(rng, (4, 3))),
             lambda ps, mix: scalarize(ad.elementwise_multiply(ps[0], ps[1]), mix)),
        case("divide",
             lambda rng: ([mixer(rng, (3, 3)), rng.uniform(0.5, 2.0, size=(3, 3))],
                          mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.divide(ps[0], ps[1]), mix)),
        case("scalar_multiply",
             lambda rng: ([rng.normal(size=(3, 3))], mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.scalar_multiply(-1.7, ps[0]), mix)),
        case("exp",
             lambda rng: ([rng.normal(size=(3, 3))], mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.exp(ps[0]), mix)),
        case("log",
             lambda rng: ([rng.uniform(0.1, 2.0, size=(3, 3))], mixer(rng, (3, 3))),
             lambda ps, mix: scalarize(ad.log(ps[0]), mix)),
        case("leaky_relu",
             lambda rng: ([rng.normal(size=(4, 3))], mixer(rng, (4, 3))),
             lambda ps, mix: scalarize(ad.leaky_relu(ps[0], 0.2), mix)),
        case("elu",
             lambda rng: ([rng.normal(size=(4, 3))], mixer(rng, (4, 3))),
             lambda ps, mix: scalarize(ad.elu(ps[0]), mix)),
        case("row_softmax",
             lambda rng: ([rng.normal(size=(3, 4))], mixer(rng, (3, 4))),
             lambda ps, mix: scalarize(ad.row_softmax(ps[0]), mix)),
        case("concat_columns",
             lambda rng: ([rng.normal(size=(3, 2)), rng.normal(size=(3, 3))],
                          mixer(rng, (3, 5))),
             lambda ps, mix: scalarize(ad.concat_columns(ps), mix)),
        case("slice_columns",
             lambda rng: ([rng.normal(size=(3, 5))], mixer(rng, (3, 2))),
             lambda ps, mix: scalarize(ad.slice_columns(ps[0], 1, 3), mix)),
        case("transpose",
             lambda rng: ([rng.normal(size=(3, 4))], mixer(rng, (4, 3))),
             lambda ps, mix: scalarize(ad.transpose(ps[0]), mix)),
        case("sum",
             lambda rng: ([rng.normal(size=(3, 4))], None),
             lambda ps, mix: ad.sum_all(ps[0])),
        case("trace_product",
             lambda rng: ([rng.normal(size=(3, 4)), rng.normal(size=(4, 3))], None),
             lambda ps, mix: ad.trace_product(ps[0], ps[1])),
        case("dropout",
             lambda rng: ([rng.normal(size=(4, 4))],
                          (int(rng.integers(1 << 16)), mixer(rng, (4, 4)))),
             lambda ps, mix: scalarize(ad.dropout(ps[0], 0.4, np.random.default_rng(mix[0])), mix[1])),
        case("zscore_columns",
             lambda rng: ([rng.normal(size=(5, 3))], mixer(rng, (5, 3))),
             lambda ps, mix: scalarize(ad.zscore_columns(ps[0]), mix)),
        case("frobenius_sq",
             lambda rng: ([rng.normal(size=(3, 4))], None),
             lambda ps, mix: ad.frobenius_sq(ps[0])),
        case("gather_rows",
             lambda rng: ([rng.normal(size=(5, 3))],
                          (rng.integers(0, 5, size=7), mixer(rng, (7, 3)))),
             lambda ps, mix: scalarize(ad.gather_rows(ps[0], mix[0]), mix[1])),
        case("segment_sum",
             lambda rng: ([rng.normal(size=(7, 3))],
                          (np.sort(rng.integers(0, 4, size=7)), mixer(rng, (4, 3)))),
             lambda ps, mix: scalarize(ad.segment_sum(ps[0], mix[0], 4), mix[1])),
    ]


@pytest.mark.parametrize("spec", _primitive_cases())
def test_primitive_gradients_100_trials(spec):
    make_inputs, build_with = spec
    worst = 0.0
    for trial in range(TRIALS):
        rng = np.random.default_rng(1000 + trial)
        arrays, mix = make_inputs(rng)
        err = check(lambda ps: build_with(ps, mix), arrays)
        worst = max(worst, err)
    assert worst < PRIMITIVE_TOL


def test_fanout_diamond_matches_finite_differences():
    # x feeds two branches whose results merge; grads must add
    def diamond(ps):
        x = ps[0]
        left = ad.exp(x)
        right = ad.elementwise_multiply(x, x)
        return ad.sum_all(ad.add(left, right))

    x0 = np.random.default_rng(3).normal(size=(3, 3))
    assert check(diamond, [x0]) < PRIMITIVE_TOL
    # analytic cross-check: d/dx (e^x + x^2) = e^x + 2x
    tape = ad.Tape()
    leaf = tape.parameter(x0)
    tape.backward(diamond([leaf]))
    np.testing.assert_allclose(leaf.grad, np.exp(x0) + 2 * x0, rtol=1e-12)


def test_row_softmax_uniform_row():
    tape = ad.Tape()
    out = ad.row_softmax(tape.constant(np.array([[0.0, 0.0]])))
    np.testing.assert_allclose(out.value, [[0.5, 0.5]])


def test_trace_product_identity():
    tape = ad.Tape()
    z = np.eye(2)
    out = ad.trace_product(tape.constant(z.T), tape.constant(z))
    assert out.item() == pytest.approx(2.0)


def test_frobenius_gradient_zero_at_identity():
    tape = ad.Tape()
    m = tape.parameter(np.eye(3))
    loss = ad.frobenius_sq(ad.subtract(m, tape.constant(np.eye(3))))
    tape.backward(loss)
    np.testing.assert_array_equal(m.grad, np.zeros((3, 3)))


def test_quadratic_gradcheck_is_tight():
    w = np.random.default_rng(5).normal(size=(4, 4))
    err = ad.gradient_check(lambda ps: ad.frobenius_sq(ps[0]), [w], eps=1e-5)
    assert err < 1e-9


def test_gradient_check_detects_unseeded_dropout():
    rng = np.random.default_rng()  # deliberately unseeded across calls

    def noisy(ps):
        return ad.sum_all(ad.dropout(ps[0], 0.5, rng))

    with pytest.raises(ad.NondeterministicLossError):
        ad.gradient_check(noisy, [np.ones((8, 8))])


def test_dropout_statistics():
    rng = np.random.default_rng(11)
    rate = 0.3
    tape = ad.Tape()
    x = tape.constant(np.ones((1000, 1)))
    out = ad.dropout(x, rate, rng).value
    zeros = float((out == 0).mean())
    sigma = np.sqrt(rate * (1 - rate) / 1000)
    assert abs(zeros - rate) < 3 * sigma
    # inverted scaling keeps the expectation: surviving entries are 1/(1-rate)
    assert abs(out.mean() - 1.0) < 3 * sigma / (1 - rate)


def test_dropout_rate_zero_is_identity():
    tape = ad.Tape()
    x = tape.parameter(np.arange(6.0).reshape(2, 3))
    assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x


def test_zscore_constant_column_maps_to_zeros():
    tape = ad.Tape()
    x = tape.constant(np.column_stack([np.full(4, 3.0), np.arange(4.0)]))
    out = ad.zscore_columns(x).value
    np.testing.assert_allclose(out[:, 0], 0.0)


def test_log_clamps_instead_of_inf():
    tape = ad.Tape()
    out = ad.log(tape.constant(np.array([[0.0, 1.0]])))
    assert np.isfinite(out.value).all()


def test_shape_mismatch_raises():
    tape = ad.Tape()
    a = tape.constant(np.ones((2, 3)))
    b = tape.constant(np.ones((2, 2)))
    with pytest.raises(ad.ShapeMismatchError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeMismatchError):
        ad.matmul(a, a)


def test_debug_mode_traps_non_finite():
    tape = ad.Tape(debug=True)
    x = tape.constant(np.array([[1e308, 1e308]]))
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ad.elementwise_multiply(x, x)


def test_tensors_must_share_a_tape():
    a = ad.Tape().constant(np.ones((2, 2)))
    b = ad.Tape().constant(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.parameter(np.ones((2, 2)))
    y = ad.exp(x)
    with pytest.raises(ad.ShapeMismatchError):
        tape.backward(y)
