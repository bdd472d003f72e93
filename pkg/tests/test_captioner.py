import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecap3d import diffcore as dc
from densecap3d.captioner import (CaptionerDims, DecodeOptions, DecoderState, attention_step,
                                  build_attention_context, decode_step, generate, init_captioner_params,
                                  teacher_forced, teacher_forced_loss)
from densecap3d.diffcore import Tensor
from densecap3d.errors import ArgumentError, DimensionError
from densecap3d.scenedata import EOS, SOS

DIMS = CaptionerDims(feature=8, embed=6, fusion_hidden=10, language_hidden=10, attention=5)
VOCAB = 9


def setup(seed=0, m=4, jitter=0.0):
    rng = np.random.default_rng(seed)
    params = init_captioner_params(rng, VOCAB, DIMS)
    for p in params.values():
        if jitter:
            p.data = (p.data + rng.normal(0, jitter, p.data.shape)).astype(np.float32)
        p.requires_grad = True
    emb = Tensor(rng.normal(size=(VOCAB, DIMS.embed)))
    v = Tensor(rng.normal(size=(m, DIMS.feature)))
    ctx = build_attention_context(v, None, np.zeros((0, 2), int), [1])
    return params, emb, v, ctx


def zero_params():
    return {k: Tensor(np.zeros_like(p.data)) for k, p in init_captioner_params(np.random.default_rng(0), VOCAB,
                                                                                DIMS).items()}


# -- attention context ------------------------------------------------------------

def test_context_without_relations_is_identity():
    v = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    ctx = build_attention_context(v, None, np.zeros((0, 2), int), [0, 2])
    np.testing.assert_array_equal(ctx.values.data, np.stack([v.data, v.data]))
    assert ctx.targets.tolist() == [0, 2]


def test_context_adds_relation_only_to_neighbors_of_target():
    v = Tensor(np.zeros((3, 4)))
    edges = np.array([[0, 1], [1, 2], [2, 0]])
    rel = Tensor(np.stack([np.ones(4), 2 * np.ones(4), 5 * np.ones(4)]))
    ctx = build_attention_context(v, rel, edges, [0])
    np.testing.assert_array_equal(ctx.values.data[0], [[0] * 4, [1] * 4, [0] * 4])


def test_context_zero_relations_equal_features():
    v = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    edges = np.array([[0, 1], [0, 2]])
    ctx = build_attention_context(v, Tensor(np.zeros((2, 4))), edges, [0])
    np.testing.assert_array_equal(ctx.values.data[0], v.data)


def test_context_target_out_of_range():
    with pytest.raises(ArgumentError):
        build_attention_context(Tensor(np.zeros((3, 4))), None, np.zeros((0, 2), int), [3])


# -- attention ----------------------------------------------------------------------

def test_single_row_attention():
    params, _, _, _ = setup(jitter=0.5)
    row = Tensor(np.random.default_rng(2).normal(size=(1, DIMS.feature)))
    ctx = build_attention_context(row, None, np.zeros((0, 2), int), [0])
    alpha, v_hat = attention_step(ctx, Tensor(np.ones((1, DIMS.fusion_hidden))), params)
    np.testing.assert_array_equal(alpha.data, [[1.0]])
    np.testing.assert_allclose(v_hat.data, row.data, rtol=1e-6)


def test_identical_rows_give_uniform_attention():
    params, _, _, _ = setup(jitter=0.5)
    rows = Tensor(np.tile(np.arange(DIMS.feature, dtype=float), (5, 1)))
    ctx = build_attention_context(rows, None, np.zeros((0, 2), int), [2])
    alpha, _ = attention_step(ctx, Tensor(np.ones((1, DIMS.fusion_hidden))), params)
    np.testing.assert_allclose(alpha.data, np.full((1, 5), 0.2), atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_attention_is_a_distribution(m, seed, spread):
    params, _, _, _ = setup(seed % 5, jitter=spread)
    rng = np.random.default_rng(seed)
    ctx = build_attention_context(Tensor(rng.normal(0, spread, size=(m, DIMS.feature))), None,
                                  np.zeros((0, 2), int), [0])
    alpha, _ = attention_step(ctx, Tensor(rng.normal(size=(1, DIMS.fusion_hidden))), params)
    assert (alpha.data >= 0).all()
    assert abs(float(alpha.data.sum()) - 1.0) <= 1e-6


def test_attention_hidden_shape_mismatch():
    params, _, _, ctx = setup()
    with pytest.raises(DimensionError):
        attention_step(ctx, Tensor(np.ones((2, DIMS.fusion_hidden))), params)


# -- decoding -----------------------------------------------------------------------

def test_decode_step_is_deterministic():
    params, emb, v, ctx = setup(jitter=0.2)
    state = DecoderState.initial(1, DIMS)
    a, _ = decode_step(state, ctx, dc.take_rows(v, [1]), params, emb)
    b, _ = decode_step(state, ctx, dc.take_rows(v, [1]), params, emb)
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_params_uniform_logits_and_ln_v_loss():
    _, emb, v, ctx = setup()
    params = zero_params()
    logits, _ = decode_step(DecoderState.initial(1, DIMS), ctx, dc.take_rows(v, [1]), params, emb)
    np.testing.assert_array_equal(logits.data, 0)
    loss = teacher_forced_loss(ctx, dc.take_rows(v, [1]), params, emb, [[SOS, 5, 6, 7, EOS]], dims=DIMS)
    assert loss.item() == pytest.approx(math.log(VOCAB), abs=1e-6)


def test_short_sequence_is_a_single_eos_step():
    params, emb, v, ctx = setup(jitter=0.3)
    v_k = dc.take_rows(v, [1])
    out = teacher_forced(ctx, v_k, params, emb, [[SOS, EOS]], dims=DIMS)
    logits, _ = decode_step(DecoderState.initial(1, DIMS), ctx, v_k, params, emb)
    assert out.total == 1
    expected = dc.cross_entropy(logits, np.array([EOS])).item()
    assert out.loss.item() == pytest.approx(expected, rel=1e-6)


def test_padding_does_not_change_per_sequence_loss():
    params, emb, v, _ = setup(jitter=0.3)
    ctx = build_attention_context(v, None, np.zeros((0, 2), int), [1, 1])
    v_k = dc.take_rows(v, [1, 1])
    both = teacher_forced(ctx, v_k, params, emb, [[SOS, 5, EOS], [SOS, 5, EOS]], dims=DIMS)
    ctx1 = build_attention_context(v, None, np.zeros((0, 2), int), [1])
    one = teacher_forced(ctx1, dc.take_rows(v, [1]), params, emb, [[SOS, 5, EOS]], dims=DIMS)
    assert both.loss.item() == pytest.approx(one.loss.item(), rel=1e-6)


def test_generate_with_eos_bias_stops_immediately():
    params, emb, v, ctx = setup(jitter=0.1)
    params["cap.out.b"].data[EOS] = 1e4
    assert generate(ctx, dc.take_rows(v, [1]), params, emb, dims=DIMS) == [[SOS, EOS]]


@pytest.mark.parametrize("seed", range(4))
def test_generate_length_bound_and_determinism(seed):
    params, emb, v, ctx = setup(seed, jitter=0.3)
    params["cap.out.b"].data[EOS] = -1e4
    out = generate(ctx, dc.take_rows(v, [1]), params, emb, dims=DIMS)
    assert len(out[0]) == 32 and out[0][0] == SOS and out[0][-1] == EOS
    assert generate(ctx, dc.take_rows(v, [1]), params, emb, dims=DIMS) == out


def _train(params, emb, ctx, v_k, seq, steps, lr):
    state = dc.AdamState()
    losses = []
    for _ in range(steps):
        with dc.GradientTape() as tape:
            loss = teacher_forced_loss(ctx, v_k, params, emb, [seq], dims=DIMS)
        grads = tape.backward(loss, list(params.values()))
        losses.append(loss.item())
        params, state = dc.adam_step(params, {n: grads[p] for n, p in params.items()}, state, lr=lr,
                                     weight_decay=0.0)
    return params, losses


def test_loss_strictly_decreases_over_fifty_steps():
    params, emb, v, ctx = setup(3)
    _, losses = _train(params, emb, ctx, dc.take_rows(v, [1]), [SOS, 4, 7, 5, EOS], 51, 1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_overfit_single_caption():
    params, emb, v, ctx = setup(4)
    v_k = dc.take_rows(v, [1])
    params, losses = _train(params, emb, ctx, v_k, [SOS, 4, 7, 5, 4, EOS], 300, 1e-2)
    assert losses[-1] < 0.01
    assert generate(ctx, v_k, params, emb, dims=DIMS) == [[SOS, 4, 7, 5, 4, EOS]]


@pytest.mark.parametrize("opts", [DecodeOptions(), DecodeOptions(attention_tanh=True),
                                  DecodeOptions(attend_current_h1=True), DecodeOptions(use_attention=False)])
def test_decoder_gradients(opts):
    params, emb, v, _ = setup(5, jitter=0.3)
    edges = np.array([[1, 0], [1, 2], [0, 1]])
    rel = Tensor(np.random.default_rng(6).normal(size=(3, DIMS.feature)), requires_grad=True)
    vv = Tensor(v.data, requires_grad=True)

    def f():
        ctx = build_attention_context(vv, rel, edges, [1])
        return teacher_forced_loss(ctx, dc.take_rows(vv, [1]), params, emb, [[SOS, 3, 8, EOS]], opts, DIMS)

    # Without tanh the query term shifts every score equally, so W_h has a zero
    # gradient and relative error there would only measure float32 noise.
    probe = [p for n, p in params.items() if opts.attention_tanh or n != "cap.att.w_h"]
    assert dc.gradient_check(f, [vv, rel] + probe, eps=1e-6, max_coords=6) < 1e-3


def test_query_weights_get_no_gradient_without_tanh():
    params, emb, v, ctx = setup(5, jitter=0.3)
    with dc.GradientTape() as tape:
        loss = teacher_forced_loss(ctx, dc.take_rows(v, [1]), params, emb, [[SOS, 3, 8, EOS]], dims=DIMS)
    grads = tape.backward(loss, list(params.values()))
    assert np.abs(grads[params["cap.att.w_h"]]).max() < 1e-6
    assert np.abs(grads[params["cap.att.w_v"]]).max() > 1e-4
