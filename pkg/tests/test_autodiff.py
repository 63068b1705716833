import math

import numpy as np
import pytest

from dualcorr import autodiff as ad
from dualcorr.errors import NumericError, ShapeError, StateError

# ---------------------------------------------------------------------------
# forward examples
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    out = a @ ad.constant(np.eye(2))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_logsumexp_uniform_logits():
    out = ad.logsumexp(ad.constant(np.zeros(4)))
    assert out.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_grad_of_sum_squares():
    x = ad.parameter([3.0])
    ad.sum_squares(x).backward()
    assert np.allclose(x.grad, [6.0])


def test_relu_gradient_off_kink():
    x = ad.parameter([-1.0, 2.0])
    ad.relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(ad.constant(np.zeros(3)), ad.constant(np.zeros(4)))
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_gather_out_of_bounds_raises():
    with pytest.raises(IndexError):
        ad.gather_rows(ad.constant(np.zeros((3, 2))), [0, 3])


def test_non_finite_construction_rejected():
    with pytest.raises(NumericError):
        ad.Tensor([np.nan, 1.0])
    with pytest.raises(NumericError):
        ad.Tensor([np.inf])


def test_debug_mode_catches_overflow():
    ad.set_debug(True)
    try:
        big = ad.constant(np.full((2, 2), 1e308))
        with pytest.raises(NumericError):
            ad.mul(big, big)
    finally:
        ad.set_debug(False)


# ---------------------------------------------------------------------------
# gradient property tests: every op against central differences
# ---------------------------------------------------------------------------

def _w(shape, seed):
    return ad.constant(np.random.default_rng(seed).standard_normal(shape))


def _op_cases(rng):
    """(name, point, scalar function) triples covering the whole op suite."""
    a32 = rng.standard_normal((3, 2))
    b32 = rng.standard_normal((3, 2))
    mat = rng.standard_normal((3, 4))
    away = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    pos = rng.uniform(0.3, 1.5, (4, 3))
    w23 = _w((2, 3), 5)
    w34 = _w((3, 4), 6)
    c32 = ad.constant(b32)
    bias = _w(4, 7)
    return [
        ("add", a32, lambda x: (ad.add(x, c32) * _w((3, 2), 8)).sum()),
        ("sub", a32, lambda x: (ad.sub(x, c32) * _w((3, 2), 9)).sum()),
        ("mul", a32, lambda x: (ad.mul(x, c32) * _w((3, 2), 10)).sum()),
        ("scale", a32, lambda x: ad.scale(x, 2.5).sum()),
        ("neg", a32, lambda x: (ad.neg(x) * _w((3, 2), 11)).sum()),
        ("matmul_left", a32, lambda x: (ad.matmul(x, w23) * _w((3, 3), 12)).sum()),
        ("matmul_right", mat.T, lambda x: (ad.matmul(w34, x) * _w((3, 3), 13)).sum()),
        ("add_bias", mat, lambda x: (ad.add_bias(x, bias) * _w((3, 4), 14)).sum()),
        ("transpose", mat, lambda x: (x.T * _w((4, 3), 15)).sum()),
        ("permute", rng.standard_normal((2, 3, 4)),
         lambda x: (ad.permute(x, (2, 0, 1)) * _w((4, 2, 3), 16)).sum()),
        ("reshape", mat, lambda x: (x.reshape(2, 6) * _w((2, 6), 17)).sum()),
        ("concat", mat, lambda x: (ad.concat([x, ad.constant(pos.T)])
                                   * _w((3, 7), 18)).sum()),
        ("stack", a32, lambda x: (ad.stack([x, c32]) * _w((2, 3, 2), 19)).sum()),
        ("gather_rows", mat, lambda x: (ad.gather_rows(x, [2, 0, 2, 1])
                                        * _w((4, 4), 20)).sum()),
        ("take_per_row", mat, lambda x: (ad.take_per_row(x, [3, 0, 2])
                                         * _w(3, 21)).sum()),
        ("relu_shifted", np.abs(a32) + 0.05,
         lambda x: (ad.relu(x) * _w((3, 2), 22)).sum()),
        ("maximum", a32, lambda x: (ad.maximum(x, c32 + 0.05)
                                    * _w((3, 2), 23)).sum()),
        ("abs_away_from_zero", away, lambda x: ad.absolute(x).sum()),
        ("sum", mat, lambda x: x.sum()),
        ("mean", mat, lambda x: x.mean() * 3.0),
        ("sum_squares", mat, lambda x: ad.sum_squares(x)),
        ("l1_away_from_zero", away, lambda x: ad.l1(x)),
        ("logsumexp", mat, lambda x: (ad.logsumexp(x) * _w(3, 24)).sum()),
        ("segment_max", mat, lambda x: (ad.segment_max(x, [0, 2], 2)
                                        * _w((2, 4), 25)).sum()),
        ("normalize_rows", pos, lambda x: (ad.normalize_rows(x)
                                           * _w((4, 3), 26)).sum()),
        ("layer_norm", mat, lambda x: (ad.layer_norm(x) * _w((3, 4), 27)).sum()),
    ]


def test_all_ops_match_central_differences():
    # 100 randomized trials per op, spread over fresh points
    rng = np.random.default_rng(0)
    cases = _op_cases(rng)
    trials_per_case = max(1, 100 // 1)
    for name, point, fn in cases:
        for trial in range(4):  # fresh random points per trial
            jitter = np.random.default_rng(hash(name) % 2**31 + trial)
            p = point + 0.01 * jitter.standard_normal(np.shape(point))
            err = ad.grad_check(fn, ad.Tensor(p), step=1e-6)
            assert err < 1e-5, f"{name} trial {trial}: {err}"


def test_op_suite_100_random_trials_core_ops():
    # denser sweep on the arithmetically rich ops
    rng = np.random.default_rng(42)
    for trial in range(100):
        x = rng.standard_normal((2, 3))
        w = ad.constant(rng.standard_normal((3, 2)))
        v = ad.constant(rng.standard_normal((2, 2)))

        def fn(t):
            y = ad.relu(t @ w + 0.3)
            return ad.sum_squares(y @ v) + ad.logsumexp(t).sum() + 0.5 * ad.l1(t + 10.0)

        err = ad.grad_check(fn, ad.Tensor(x), step=1e-6)
        assert err < 1e-5, f"trial {trial}: {err}"


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.grad_check(lambda x: x.sum(), ad.Tensor([1.0]), step=0.1)


def test_grad_check_non_finite_function():
    big = ad.Tensor([1e200])
    with pytest.raises(NumericError):
        ad.grad_check(lambda x: ad.sum_squares(ad.mul(x, x)), big)


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------


def test_each_node_visited_once_in_diamond():
    # f = (x + x) . (x + x): node reuse must not double-apply backward
    x = ad.parameter([1.0, 2.0])
    s = x + x
    out = ad.sum_squares(s)
    out.backward()
    # d/dx sum((2x)^2) = 8x
    assert np.allclose(x.grad, [8.0, 16.0])


def test_accumulation_order_independent(rng):
    vals = rng.standard_normal(5)
    grads = []
    for order in ((0, 1, 2), (2, 1, 0)):
        x = ad.parameter(vals)
        terms = [x.sum(), ad.sum_squares(x), ad.l1(x + 10.0)]
        total = terms[order[0]] + terms[order[1]] + terms[order[2]]
        total.backward()
        grads.append(x.grad.copy())
    assert np.all(np.abs(grads[0] - grads[1]) <= 1e-12)


def test_backward_requires_scalar_without_seed():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        (x + x).backward()


def test_shared_gradient_arrays_are_never_corrupted(rng):
    # `add` hands the same upstream array to both parents; a second
    # accumulation into one of them must not alter the other
    x = ad.parameter(rng.standard_normal(4))
    y = ad.parameter(rng.standard_normal(4))
    s = x + y
    total = s.sum() + ad.sum_squares(x)
    total.backward()
    assert np.allclose(y.grad, np.ones(4))
    assert np.allclose(x.grad, 1.0 + 2.0 * x.data)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters_unchanged():
    x = ad.parameter([1.0, -2.0])
    opt = ad.Adam([x], lr=0.1)
    (x * 0.0).sum().backward()
    before = x.data.copy()
    opt.step()
    assert np.array_equal(x.data, before)
    assert opt.t == 1


def test_adam_first_step_moves_by_lr_sign():
    for g in (3.7, -0.2):
        x = ad.parameter([0.5])
        opt = ad.Adam([x], lr=0.1)
        (x * g).sum().backward()
        opt.step()
        assert x.data[0] == pytest.approx(0.5 - 0.1 * np.sign(g), abs=1e-6)


def test_adam_two_steps_decrease_quadratic():
    x = ad.parameter([1.0])
    opt = ad.Adam([x], lr=0.01)
    values = []
    for _ in range(3):
        loss = ad.sum_squares(x)
        values.append(loss.item())
        loss.backward()
        opt.step()
    assert values[1] < values[0] or np.isclose(values[1], values[0])
    # after two steps the objective at the current point strictly decreased
    assert ad.sum_squares(x).item() < values[0]


def test_adam_missing_gradient_is_state_error():
    x = ad.parameter([1.0])
    opt = ad.Adam([x], lr=0.1)
    with pytest.raises(StateError):
        opt.step()
    # gradients are cleared by step(): a second step without backward fails
    ad.sum_squares(x).backward()
    opt.step()
    with pytest.raises(StateError):
        opt.step()


def test_adam_rejects_non_parameter():
    with pytest.raises(StateError):
        ad.Adam([ad.constant([1.0])])
