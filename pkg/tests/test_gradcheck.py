import numpy as np
import pytest

from mia import MiaConfig, MiaParams, mia_refine
from mia import tensor as tc
from mia.gradcheck import (
    GRAPH_TOL,
    check_gradients,
    grad_check_suite,
    relative_error,
    run_suite_report,
)
from mia.tensor import Tensor, custom_op, make_rng


def projected(out, w):
    return tc.tensor_sum(tc.elementwise_mul(out, Tensor(w)))


def test_relative_error_normalization():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(np.array([1e-12]), np.zeros(1)) == pytest.approx(1e-4)


def test_linear_op_is_essentially_exact():
    rng = make_rng(0)
    a, b = tc.parameter(rng.normal(size=(3, 4))), tc.parameter(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    errs = check_gradients(lambda: projected(tc.matmul(a, b), w), {"a": a, "b": b})
    assert max(e for e, _ in errs.values()) <= 1e-9


def test_full_mia_forward():
    rng = make_rng(1)
    cfg = MiaConfig(d_h=8, k=2, n_iter=2, d_ff=16)
    params = MiaParams.init(cfg, rng)
    i0, t0 = tc.parameter(rng.normal(size=(3, 8))), tc.parameter(rng.normal(size=(3, 8)))
    w = rng.normal(size=(3, 8))
    wrt = {"I0": i0, "T0": t0, **params.named_parameters()}
    errs = check_gradients(lambda: projected(mia_refine(i0, t0, params, cfg).fused, w), wrt, max_entries=6, rng=rng)
    worst = max(errs.items(), key=lambda kv: kv[1][0])
    assert worst[1][0] <= GRAPH_TOL, worst


def test_corrupted_backward_rule_is_caught():
    def bad_square(x):
        # forward x^2, backward deliberately 3x instead of 2x
        return custom_op(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "bad_square")

    x = tc.parameter(make_rng(2).normal(size=(2, 3)))
    errs = check_gradients(lambda: tc.tensor_sum(bad_square(x)), {"x": x})
    assert errs["x"][0] > 1e-2


def test_check_does_not_disturb_inputs():
    rng = make_rng(3)
    x = tc.parameter(rng.normal(size=(3, 3)))
    before = x.data.copy()
    check_gradients(lambda: tc.tensor_sum(tc.tanh(x)), {"x": x})
    np.testing.assert_array_equal(x.data, before)
    assert x.grad is None or not np.any(x.grad)


def test_suite_passes_on_primitives():
    results = grad_check_suite(seed=0, include_graphs=False)
    failing = [r for r in results if not r.passed]
    assert not failing, failing
    names = {r.name.split(":")[0] for r in results}
    for op in ("matmul", "softmax_rows", "layer_norm_rows", "cross_entropy", "multi_head", "lstm_step", "additive_attend"):
        assert op in names


@pytest.mark.slow
def test_full_suite_report():
    report = run_suite_report(seed=0)
    assert report["passed"], report["worst"]
    assert any(r["name"].startswith("graph[") for r in report["results"])
    assert any(r["name"].startswith("mia_refine") for r in report["results"])
