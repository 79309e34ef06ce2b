import numpy as np
import pytest

from mia import MiaConfig, MiaParams, mia_refine
from mia.decoders import (
    AttentionParams,
    CaptionDecoder,
    FeatureSource,
    LstmParams,
    LstmState,
    MissingMiaOutput,
    Variant,
    VariantError,
    additive_attend,
    greedy_decode,
    integrate_mia,
    lstm_step,
    step_visual_attention,
    step_visual_condition,
)
from mia.tensor import AdamState, ShapeError, Tape, Tensor, adam_step, cross_entropy, make_rng
from mia.vocab import BOS_ID, EOS_ID

import oracles
from conftest import rand

D, V = 6, 9
ALL_VARIANTS = list(Variant)


def features(seed=0, n=4, d=D):
    rng = make_rng(seed)
    return Tensor(rand(rng, n, d)), Tensor(rand(rng, n, d))


def decoder(variant, seed=0, d=D, v=V):
    return CaptionDecoder(variant, v, d, make_rng(seed))


class TestLstm:
    def test_zero_weights(self):
        d = 3
        p = LstmParams(Tensor(np.zeros((2, 4 * d))), Tensor(np.zeros((d, 4 * d))), Tensor(np.zeros(4 * d)))
        s = lstm_step(p, Tensor([[1.0, 2.0]]), LstmState(Tensor(np.zeros((1, d))), Tensor(np.full((1, d), 2.0))))
        # every gate is sigmoid(0) = 0.5 and g = tanh(0) = 0
        np.testing.assert_allclose(s.c.data, np.full((1, d), 1.0), atol=1e-15)
        np.testing.assert_allclose(s.h.data, np.full((1, d), 0.5 * np.tanh(1.0)), atol=1e-15)

    def test_forget_bias_initialised_to_one(self):
        p = LstmParams.init(4, 3, make_rng(0))
        np.testing.assert_array_equal(p.b.data, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])

    def test_matches_loop_oracle(self, rng):
        p = LstmParams.init(5, 4, rng)
        x, h, c = rand(rng, 1, 5), rand(rng, 1, 4), rand(rng, 1, 4)
        s = lstm_step(p, Tensor(x), LstmState(Tensor(h), Tensor(c)))
        rh, rc = oracles.lstm(x[0].tolist(), h[0].tolist(), c[0].tolist(), p.w_x.data.tolist(), p.w_h.data.tolist(), p.b.data.tolist())
        np.testing.assert_allclose(s.h.data[0], rh, rtol=0, atol=1e-12)
        np.testing.assert_allclose(s.c.data[0], rc, rtol=0, atol=1e-12)

    def test_input_width_checked(self):
        with pytest.raises(ShapeError):
            lstm_step(LstmParams.init(5, 4, make_rng(0)), Tensor(np.zeros((1, 4))), LstmState.zeros(4))


class TestAdditiveAttention:
    def test_single_feature(self, rng):
        p = AttentionParams.init(4, 3, rng)
        f = Tensor(rand(rng, 1, 4))
        ctx, alpha = additive_attend(Tensor(rand(rng, 1, 4)), f, p)
        np.testing.assert_array_equal(alpha.data, [[1.0]])
        np.testing.assert_allclose(ctx.data, f.data, atol=1e-15)

    def test_zero_score_vector_is_uniform(self, rng):
        p = AttentionParams.init(4, 3, rng)
        p.w_alpha = Tensor(np.zeros((3, 1)))
        f = Tensor(rand(rng, 5, 4))
        ctx, alpha = additive_attend(Tensor(rand(rng, 1, 4)), f, p)
        np.testing.assert_allclose(alpha.data, np.full((1, 5), 0.2), atol=1e-15)
        np.testing.assert_allclose(ctx.data[0], f.data.mean(axis=0), atol=1e-15)

    def test_matches_column_wise_oracle(self, rng):
        p = AttentionParams.init(4, 6, rng)
        h, f = rand(rng, 1, 4), rand(rng, 5, 4)
        ctx, alpha = additive_attend(Tensor(h), Tensor(f), p)
        rctx, ralpha = oracles.additive_attention(
            h[0].tolist(), f.tolist(), p.w_feat.data.tolist(), p.w_hid.data.tolist(), p.w_alpha.data.tolist()
        )
        np.testing.assert_allclose(alpha.data[0], ralpha, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ctx.data[0], rctx, rtol=0, atol=1e-12)

    def test_cached_projection_is_equivalent(self, rng):
        p = AttentionParams.init(4, 3, rng)
        h, f = Tensor(rand(rng, 1, 4)), Tensor(rand(rng, 5, 4))
        a = additive_attend(h, f, p)[1]
        b = additive_attend(h, f, p, Tensor(f.data @ p.w_feat.data))[1]
        np.testing.assert_array_equal(a.data, b.data)


class TestSteps:
    @pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
    def test_three_steps_match_loop_oracle(self, variant):
        model = decoder(variant, seed=3)
        vis, con = features(4)
        inputs = model.prepare(vis, con)
        params = oracles.decoder_params(model)
        state, ref_state = model.init_state(), oracles.zero_state(D)
        for tok in (BOS_ID, 5, 7):
            state, logits = model.step(state, tok, inputs)
            ref_state, ref_logits = oracles.decoder_step(
                variant.value, params, ref_state, tok, vis.data.tolist(), con.data.tolist()
            )
            np.testing.assert_allclose(logits.data[0], ref_logits, rtol=0, atol=1e-10)
            np.testing.assert_allclose(state.lstm.h.data[0], ref_state["h"], rtol=0, atol=1e-12)

    @pytest.mark.parametrize(
        "variant", [Variant.CONCEPT_ATTENTION, Variant.VISUAL_CONDITION, Variant.CONCEPT_CONDITION]
    )
    def test_first_step_ignores_token(self, variant):
        model = decoder(variant)
        inputs = model.prepare(*features())
        a = model.step(model.init_state(), BOS_ID, inputs)[1]
        b = model.step(model.init_state(), 6, inputs)[1]
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("variant", [Variant.VISUAL_ATTENTION, Variant.VISUAL_REGIONAL])
    def test_first_step_uses_token(self, variant):
        model = decoder(variant)
        inputs = model.prepare(*features())
        a = model.step(model.init_state(), BOS_ID, inputs)[1]
        b = model.step(model.init_state(), 6, inputs)[1]
        assert not np.allclose(a.data, b.data)

    def test_visual_condition_first_step_sees_only_concept_mean(self):
        model = decoder(Variant.VISUAL_CONDITION)
        vis, con = features(1)
        other_vis = Tensor(vis.data[::-1] * 3.0)
        a = model.step(model.init_state(), BOS_ID, model.prepare(vis, con))[1]
        b = model.step(model.init_state(), BOS_ID, model.prepare(other_vis, con))[1]
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
    def test_logits_shape_and_finite(self, variant):
        model = decoder(variant)
        inputs = model.prepare(*features(n=49))
        state, logits = model.step(model.init_state(), BOS_ID, inputs)
        assert logits.shape == (1, V) and np.all(np.isfinite(logits.data))
        assert state.t == 1

    def test_attention_weights_exposed(self):
        model = decoder(Variant.CONCEPT_ATTENTION)
        state, _ = model.step(model.init_state(), BOS_ID, model.prepare(*features(n=5)))
        assert state.alpha.shape == (1, 5)
        assert abs(state.alpha.data.sum() - 1) <= 1e-12

    def test_wrong_variant_step(self):
        model = decoder(Variant.VISUAL_CONDITION)
        inputs = model.prepare(*features())
        with pytest.raises(VariantError):
            step_visual_attention(model, model.init_state(), BOS_ID, inputs)
        step_visual_condition(model, model.init_state(), BOS_ID, inputs)

    def test_regional_has_two_stacked_lstms(self):
        names = decoder(Variant.VISUAL_REGIONAL).named_parameters()
        assert names["dec.lstm1.w_x"].shape == (2 * D, 4 * D)
        assert names["dec.lstm2.w_x"].shape == (2 * D, 4 * D)

    def test_condition_variants_have_no_attention(self):
        assert not any("att." in n for n in decoder(Variant.CONCEPT_CONDITION).named_parameters())


class TestSequence:
    def test_teacher_forcing_alignment(self):
        model = decoder(Variant.VISUAL_ATTENTION)
        logits, targets = model.sequence_logits(model.prepare(*features()), [4, 5, 6])
        assert logits.shape == (4, V)
        assert targets == [4, 5, 6, EOS_ID]

    def test_greedy_stops_immediately_on_eos(self):
        model = decoder(Variant.VISUAL_CONDITION)
        # saturate input, candidate and output gates so h is close to tanh(1) > 0
        model.lstm.b.data[:] = 50.0
        model.w_p.data[:] = 0.0
        model.w_p.data[:, EOS_ID] = 1.0
        assert greedy_decode(model, model.prepare(*features())) == []

    def test_greedy_max_len_one(self):
        model = decoder(Variant.VISUAL_ATTENTION)
        model.w_p.data[:] = 0.0  # all logits tie, argmax picks id 0, never EOS
        out = greedy_decode(model, model.prepare(*features()), max_len=1)
        assert out == [0]

    def test_greedy_rejects_zero_length(self):
        model = decoder(Variant.VISUAL_ATTENTION)
        with pytest.raises(ValueError):
            greedy_decode(model, model.prepare(*features()), max_len=0)

    @pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.value)
    def test_loss_decreases_for_first_fifty_adam_steps(self, variant, small_scenes):
        scenes, vocab = small_scenes
        b = scenes[0]
        model = CaptionDecoder(variant, len(vocab), b.d_h, make_rng(0))
        params = model.named_parameters()
        ids = vocab.encode(b.captions[0])
        state = AdamState()
        losses = []
        for _ in range(50):
            for t in params.values():
                t.zero_grad()
            with Tape() as tape:
                logits, targets = model.sequence_logits(model.prepare(Tensor(b.visual), Tensor(b.concepts)), ids)
                loss = cross_entropy(logits, targets)
            tape.backward(loss)
            losses.append(float(loss.data))
            adam_step(params, {k: t.grad for k, t in params.items()}, state, lr=1e-3)
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestIntegrateMia:
    @pytest.fixture
    def mia_out(self):
        cfg = MiaConfig(d_h=D, k=2, n_iter=1, d_ff=12)
        vis, con = features(5)
        return vis, con, mia_refine(vis, con, MiaParams.init(cfg, make_rng(0)), cfg)

    def test_original_passes_through(self, mia_out):
        vis, con, out = mia_out
        assert integrate_mia(FeatureSource.ORIGINAL, vis, con, out) == (vis, con)
        assert integrate_mia("original", vis, con) == (vis, con)

    def test_fused_replaces_both(self, mia_out):
        vis, con, out = mia_out
        assert integrate_mia(FeatureSource.MIA_FUSED, vis, con, out) == (out.fused, out.fused)

    def test_single_branch_sources(self, mia_out):
        vis, con, out = mia_out
        assert integrate_mia("mia_visual", vis, con, out) == (out.visual, con)
        assert integrate_mia("mia_textual", vis, con, out) == (vis, out.textual)

    def test_missing_outputs(self, mia_out):
        vis, con, _ = mia_out
        with pytest.raises(MissingMiaOutput):
            integrate_mia(FeatureSource.MIA_FUSED, vis, con, None)

    def test_fused_condition_variants_coincide(self, mia_out):
        vis, con, out = mia_out
        a, b = decoder(Variant.VISUAL_CONDITION), decoder(Variant.CONCEPT_CONDITION)
        for (_, pa), (_, pb) in zip(sorted(a.named_parameters().items()), sorted(b.named_parameters().items())):
            pb.data = pa.data.copy()
        ia = a.prepare(*integrate_mia("mia_fused", vis, con, out))
        ib = b.prepare(*integrate_mia("mia_fused", vis, con, out))
        la, _ = a.sequence_logits(ia, [4, 5])
        lb, _ = b.sequence_logits(ib, [4, 5])
        np.testing.assert_array_equal(la.data, lb.data)
