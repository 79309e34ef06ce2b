"""Central finite-difference checks of every backward rule.

The error reported for one input is

    max_i |analytic_i - numeric_i| / max(max|analytic|, max|numeric|, 1e-8)

i.e. the worst absolute discrepancy scaled by the gradient's own magnitude.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .attention import (
    FcnParams,
    HeadParams,
    MultiHeadParams,
    SublayerConfig,
    attend_head,
    fcn,
    multi_head,
    sublayer_post,
)
from .data import SceneConfig, generate_scene
from .decoders import (
    AttentionParams,
    FeatureSource,
    LstmParams,
    LstmState,
    Variant,
    additive_attend,
    lstm_step,
)
from .mia import MiaConfig, MiaParams, mia_refine
from .tensor import Tape, Tensor
from .vocab import Vocabulary

SMOOTH_TOL = 1e-6
GRAPH_TOL = 1e-5
FD_EPS = 1e-6


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    entries_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "entries_checked": self.entries_checked,
            "passed": self.passed,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(
    loss_fn: Callable[[], Tensor], x: Tensor, eps: float = FD_EPS, entries: np.ndarray | None = None
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. selected flat entries of ``x``."""
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.zeros(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        out[j] = (up - down) / (2 * eps)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    wrt: dict[str, Tensor],
    eps: float = FD_EPS,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, tuple[float, int]]:
    """Compare taped gradients with finite differences for each named input.

    ``loss_fn`` must rebuild the computation from the current values of the
    inputs on every call. When ``max_entries`` is set, larger inputs are
    probed at a random subset of entries.
    """
    for t in wrt.values():
        t.zero_grad()
        t.requires_grad = True
        t._tracked = True
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = rng or tc.make_rng(0)
    out = {}
    for name, t in wrt.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numeric_grad(loss_fn, t, eps, entries)
        a = analytic if entries is None else analytic[entries]
        out[name] = (relative_error(a, numeric), int(numeric.size))
        t.zero_grad()
    return out


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Generic scalar loss ``sum(out * weights)``."""
    return tc.tensor_sum(tc.elementwise_mul(out, Tensor(weights)))


def _op_cases(rng: np.random.Generator, d_h: int, n: int):
    """Yield (name, loss_fn, inputs, tolerance) for each primitive and sublayer."""

    def r(*shape):
        return tc.parameter(rng.normal(size=shape))

    def proj(shape):
        return rng.normal(size=shape)

    a, b = r(3, 4), r(4, 2)
    pa = proj((3, 2))
    yield "matmul", lambda: _projected(tc.matmul(a, b), pa), {"a": a, "b": b}, SMOOTH_TOL

    x = r(3, 4)
    px = proj((4, 3))
    yield "transpose", lambda: _projected(tc.transpose(x), px), {"x": x}, SMOOTH_TOL

    y, z = r(3, 4), r(3, 4)
    p34 = proj((3, 4))
    yield "add", lambda: _projected(tc.add(y, z), p34), {"a": y, "b": z}, SMOOTH_TOL
    yield "sub", lambda: _projected(tc.sub(y, z), p34), {"a": y, "b": z}, SMOOTH_TOL
    yield "elementwise_mul", lambda: _projected(tc.elementwise_mul(y, z), p34), {"a": y, "b": z}, SMOOTH_TOL
    yield "scale", lambda: _projected(tc.scale(y, -1.7), p34), {"x": y}, SMOOTH_TOL

    row = r(4)
    yield "add_broadcast_row", lambda: _projected(tc.add_broadcast_row(y, row), p34), {"x": y, "row": row}, SMOOTH_TOL

    # keep relu inputs at least 1e-3 away from the kink
    rl = tc.parameter(np.where(rng.random((3, 4)) < 0.5, -1.0, 1.0) * rng.uniform(0.1, 2.0, (3, 4)))
    yield "relu", lambda: _projected(tc.relu(rl), p34), {"x": rl}, SMOOTH_TOL
    yield "tanh", lambda: _projected(tc.tanh(y), p34), {"x": y}, SMOOTH_TOL
    yield "sigmoid", lambda: _projected(tc.sigmoid(y), p34), {"x": y}, SMOOTH_TOL
    yield "softmax_rows", lambda: _projected(tc.softmax_rows(y), p34), {"x": y}, SMOOTH_TOL

    gain, bias = r(4), r(4)
    yield (
        "layer_norm_rows",
        lambda: _projected(tc.layer_norm_rows(y, gain, bias), p34),
        {"x": y, "gain": gain, "bias": bias},
        SMOOTH_TOL,
    )
    yield (
        "dropout",
        lambda: _projected(tc.dropout(y, 0.3, True, tc.make_rng(7)), p34),
        {"x": y},
        SMOOTH_TOL,
    )
    w = r(3, 2)
    yield "concat_cols", lambda: _projected(tc.concat_cols([y, w]), proj_cc), {"a": y, "b": w}, SMOOTH_TOL
    proj_cc = proj((3, 6))
    v = r(2, 4)
    proj_cr = proj((5, 4))
    yield "concat_rows", lambda: _projected(tc.concat_rows([y, v]), proj_cr), {"a": y, "b": v}, SMOOTH_TOL
    proj_sl = proj((3, 2))
    yield "slice_cols", lambda: _projected(tc.slice_cols(y, 1, 3), proj_sl), {"x": y}, SMOOTH_TOL
    proj_mr = proj((1, 4))
    yield "mean_rows", lambda: _projected(tc.mean_rows(y), proj_mr), {"x": y}, SMOOTH_TOL
    yield "sum", lambda: tc.tensor_sum(y), {"x": y}, SMOOTH_TOL
    table = r(5, 4)
    proj_el = proj((3, 4))
    yield "embedding_lookup", lambda: _projected(tc.embedding_lookup(table, [1, 3, 1]), proj_el), {"table": table}, SMOOTH_TOL
    logits = r(3, 5)
    yield "cross_entropy", lambda: tc.cross_entropy(logits, [0, 4, 2]), {"logits": logits}, SMOOTH_TOL

    # sublayers on a d_h x n instance
    q, s = r(n, d_h), r(n, d_h)
    k = 2
    d_k = d_h // k
    head = HeadParams(r(d_h, d_k), r(d_h, d_k), r(d_h, d_k))
    p_head = proj((n, d_k))
    yield (
        "attend_head",
        lambda: _projected(attend_head(q, s, head)[0], p_head),
        {"Q": q, "S": s, "wq": head.wq, "wk": head.wk, "wv": head.wv},
        SMOOTH_TOL,
    )
    mh = MultiHeadParams([HeadParams(r(d_h, d_k), r(d_h, d_k), r(d_h, d_k)) for _ in range(k)], r(d_h, d_h))
    p_nd = proj((n, d_h))
    yield (
        "multi_head",
        lambda: _projected(multi_head(q, s, mh)[0], p_nd),
        {"Q": q, "S": s, **mh.named_parameters()},
        SMOOTH_TOL,
    )
    fp = FcnParams(r(d_h, 2 * d_h), r(2 * d_h), r(2 * d_h, d_h), r(d_h))
    yield "fcn", lambda: _projected(fcn(q, fp), p_nd), {"X": q, **fp.named_parameters()}, SMOOTH_TOL
    sub_cfg = SublayerConfig(r(d_h), r(d_h), dropout_p=0.2)
    yield (
        "sublayer_post",
        lambda: _projected(sublayer_post(q, s, sub_cfg, tc.make_rng(3), train=True), p_nd),
        {"sub_out": q, "source": s, **sub_cfg.named_parameters()},
        SMOOTH_TOL,
    )

    lp = LstmParams(r(d_h, 4 * d_h), r(d_h, 4 * d_h), r(4 * d_h))
    x_in, h0, c0 = r(1, d_h), r(1, d_h), r(1, d_h)
    p_h, p_c = proj((1, d_h)), proj((1, d_h))

    def lstm_loss():
        st = lstm_step(lp, x_in, LstmState(h0, c0))
        return tc.add(_projected(st.h, p_h), _projected(st.c, p_c))

    yield "lstm_step", lstm_loss, {"x": x_in, "h": h0, "c": c0, **lp.named_parameters("")}, SMOOTH_TOL

    ap = AttentionParams(r(d_h, d_h), r(d_h, d_h), r(d_h, 1))
    feats = r(n, d_h)
    p_ctx = proj((1, d_h))
    yield (
        "additive_attend",
        lambda: _projected(additive_attend(h0, feats, ap)[0], p_ctx),
        {"h": h0, "F": feats, **ap.named_parameters("")},
        SMOOTH_TOL,
    )


def _graph_cases(rng: np.random.Generator, d_h: int, n: int):
    """Full MIA and MIA-plus-decoder graphs reduced to a scalar loss."""
    from .train import CaptionModel, TrainConfig

    scene = generate_scene(
        SceneConfig(n_features=n, n_objects=2, d_h=d_h, seed=5), rng, image_id=0
    )
    mcfg = MiaConfig(d_h=d_h, k=2, n_iter=2, d_ff=2 * d_h, dropout_p=0.1)
    mia = MiaParams.init(mcfg, rng)
    i0, t0 = tc.parameter(scene.visual), tc.parameter(scene.concepts)
    p = rng.normal(size=(n, d_h))

    def mia_loss():
        return _projected(mia_refine(i0, t0, mia, mcfg, None, train=False).fused, p)

    yield "mia_refine", mia_loss, {"I0": i0, "T0": t0, **mia.named_parameters()}, GRAPH_TOL

    vocab = Vocabulary.from_words({w for c in scene.captions for w in c} | set(scene.concept_tokens))
    for variant in Variant:
        cfg = TrainConfig(variant=variant, feature_source=FeatureSource.MIA_FUSED, mia=mcfg, seed=1)
        model = CaptionModel(cfg, vocab, tc.make_rng(11))
        caption = scene.captions[0]

        def graph_loss(model=model):
            return model.caption_loss(scene, caption, train=False)[0]

        yield f"graph[{variant.value}]", graph_loss, model.named_parameters(), GRAPH_TOL


def grad_check_suite(
    seed: int = 0,
    d_h: int = 8,
    n: int = 3,
    max_entries: int | None = 12,
    include_graphs: bool = True,
) -> list[GradCheckResult]:
    """Run every registered check; one result per (case, input)."""
    rng = tc.make_rng(seed)
    cases = list(_op_cases(rng, d_h, n))
    if include_graphs:
        cases += list(_graph_cases(rng, d_h, n))
    results = []
    for name, loss_fn, inputs, tol in cases:
        errs = check_gradients(loss_fn, inputs, FD_EPS, max_entries, rng)
        for inp, (err, count) in errs.items():
            results.append(GradCheckResult(f"{name}:{inp}", err, tol, count))
    return results


def run_suite_report(seed: int = 0, **kwargs) -> dict:
    start = time.perf_counter()
    results = grad_check_suite(seed, **kwargs)
    return {
        "seed": seed,
        "seconds": time.perf_counter() - start,
        "passed": all(r.passed for r in results),
        "worst": max(results, key=lambda r: r.max_rel_error / r.tolerance).to_dict(),
        "results": [r.to_dict() for r in results],
    }
