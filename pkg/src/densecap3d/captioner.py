"""Attention captioning decoder with a fusion cell and a language cell.

All functions operate on a batch of B target objects from one scene; the
attention context holds one (M, D) feature set per target, because relation
features are added only to that target's neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from densecap3d import diffcore as dc
from densecap3d.diffcore import Tensor
from densecap3d.errors import ArgumentError, DimensionError
from densecap3d.scenedata import EOS, MAX_CAPTION_TOKENS, PAD, SOS


@dataclass(frozen=True)
class CaptionerDims:
    feature: int = 128
    embed: int = 300
    fusion_hidden: int = 512
    language_hidden: int = 512
    attention: int = 128


def _gru_params(rng, prefix: str, n_in: int, hidden: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w_x": dc.glorot(rng, n_in, 3 * hidden, name=f"{prefix}.w_x"),
        f"{prefix}.w_h": dc.glorot(rng, hidden, 3 * hidden, name=f"{prefix}.w_h"),
        f"{prefix}.b_x": dc.zeros(3 * hidden, name=f"{prefix}.b_x"),
        f"{prefix}.b_h": dc.zeros(3 * hidden, name=f"{prefix}.b_h"),
    }


def init_captioner_params(rng: np.random.Generator, vocab_size: int,
                          dims: CaptionerDims = CaptionerDims()) -> dict[str, Tensor]:
    d = dims
    params = {}
    params.update(_gru_params(rng, "cap.fusion", d.language_hidden + d.feature + d.embed, d.fusion_hidden))
    params["cap.att.w_v"] = dc.glorot(rng, d.feature, d.attention, name="cap.att.w_v")
    params["cap.att.w_h"] = dc.glorot(rng, d.fusion_hidden, d.attention, name="cap.att.w_h")
    # zero scorer: attention starts uniform instead of saturating on large sums
    params["cap.att.w_a"] = dc.zeros(d.attention, 1, name="cap.att.w_a")
    params["cap.fuse.w"] = dc.glorot(rng, d.fusion_hidden + d.feature, d.language_hidden, name="cap.fuse.w")
    params["cap.fuse.b"] = dc.zeros(d.language_hidden, name="cap.fuse.b")
    params.update(_gru_params(rng, "cap.lang", d.language_hidden, d.language_hidden))
    params["cap.out.w"] = dc.glorot(rng, d.language_hidden, vocab_size, name="cap.out.w")
    params["cap.out.b"] = dc.zeros(vocab_size, name="cap.out.b")
    return params


def _cell(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in ("w_x", "w_h", "b_x", "b_h")}


@dataclass(frozen=True, eq=False)
class AttentionContext:
    """Per-target context features: ``values[b, i]`` is row i for target b."""

    values: Tensor          # (B, M, D)
    targets: np.ndarray     # (B,) target row within the M attended rows

    @property
    def batch(self) -> int:
        return self.values.shape[0]


def build_attention_context(v_tau: Tensor, relations: Tensor | None, edges: np.ndarray,
                            targets: Sequence[int], rows: Sequence[int] | None = None) -> AttentionContext:
    """Context rows ``v_j + e_{k,j}`` for each neighbor j of target k.

    ``rows`` selects which nodes are attended (default: all); every target
    must be among them.  The target's own row and non-neighbor rows keep
    their enhanced features unchanged.
    """
    n_nodes = v_tau.shape[0]
    rows = np.arange(n_nodes) if rows is None else np.asarray(rows, dtype=np.int64)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if len(rows) == 0:
        raise ArgumentError("attention context needs at least one row")
    position = np.full(n_nodes, -1, dtype=np.int64)
    position[rows] = np.arange(len(rows))
    if targets.min() < 0 or targets.max() >= n_nodes or (position[targets] < 0).any():
        raise ArgumentError(f"target index out of range: {targets.tolist()}")
    m, d = len(rows), v_tau.shape[1]
    b = len(targets)
    flat = dc.take_rows(v_tau, np.tile(rows, b))
    if relations is not None and len(edges):
        edge_ids, slots = [], []
        for bi, k in enumerate(targets):
            for e in np.flatnonzero(edges[:, 0] == k):
                j = position[edges[e, 1]]
                if j >= 0:
                    edge_ids.append(e)
                    slots.append(bi * m + j)
        if edge_ids:
            extra = dc.index_add(dc.take_rows(relations, edge_ids), slots, b * m)
            flat = dc.add(flat, extra)
    return AttentionContext(dc.reshape(flat, (b, m, d)), position[targets])


def attention_step(ctx: AttentionContext, h1: Tensor, params: dict[str, Tensor],
                   use_tanh: bool = False) -> tuple[Tensor, Tensor]:
    """Scores ``(v_i W_v + h1 W_h) W_a`` -> softmax over rows -> weighted sum.

    Returns ``alpha`` (B, M) and the aggregated context ``v_hat`` (B, D).
    ``use_tanh`` inserts a tanh before ``W_a`` (additive attention form).
    """
    b, m, d = ctx.values.shape
    w_v, w_h, w_a = params["cap.att.w_v"], params["cap.att.w_h"], params["cap.att.w_a"]
    if h1.shape != (b, w_h.shape[0]):
        raise DimensionError(f"attention: hidden state {h1.shape} does not match batch {b}")
    proj_v = dc.matmul(dc.reshape(ctx.values, (b * m, d)), w_v)
    proj_h = dc.take_rows(dc.matmul(h1, w_h), np.repeat(np.arange(b), m))
    pre = dc.add(proj_v, proj_h)
    if use_tanh:
        pre = dc.tanh(pre)
    scores = dc.reshape(dc.matmul(pre, w_a), (b, m))
    alpha = dc.softmax(scores, axis=1)
    return alpha, dc.weighted_sum(alpha, ctx.values)


@dataclass(frozen=True, eq=False)
class DecoderState:
    h1: Tensor
    h2: Tensor
    prev_token: np.ndarray  # (B,) int

    @classmethod
    def initial(cls, batch: int, dims: CaptionerDims = CaptionerDims()) -> "DecoderState":
        return cls(Tensor(np.zeros((batch, dims.fusion_hidden))),
                   Tensor(np.zeros((batch, dims.language_hidden))),
                   np.full(batch, SOS, dtype=np.int64))


@dataclass(frozen=True)
class DecodeOptions:
    use_attention: bool = True
    attention_tanh: bool = False
    attend_current_h1: bool = False


def decode_step(state: DecoderState, ctx: AttentionContext, v_k: Tensor, params: dict[str, Tensor],
                embeddings: Tensor, options: DecodeOptions = DecodeOptions()) -> tuple[Tensor, DecoderState]:
    """One token step; returns next-token logits (B, V) and the new state.

    The fusion cell sees ``[h2_prev, v_k, embed(prev_token)]``; attention
    is driven by the previous fusion state unless ``attend_current_h1``.
    The language cell sees ``relu(W [h1_prev, v_hat] + b)``.
    """
    b = len(state.prev_token)
    if v_k.shape[0] != b or state.h1.shape[0] != b:
        raise DimensionError("decode_step: batch sizes of state and target features differ")
    x = dc.take_rows(embeddings, state.prev_token)
    u1 = dc.concat([state.h2, v_k, x], axis=1)
    h1 = dc.gru_cell(u1, state.h1, _cell(params, "cap.fusion"))
    if options.use_attention:
        query = h1 if options.attend_current_h1 else state.h1
        _, v_hat = attention_step(ctx, query, params, options.attention_tanh)
    else:
        v_hat = Tensor(np.zeros((b, v_k.shape[1])))
    u2 = dc.relu(dc.linear(dc.concat([state.h1, v_hat], axis=1),
                           params["cap.fuse.w"], params["cap.fuse.b"]))
    h2 = dc.gru_cell(u2, state.h2, _cell(params, "cap.lang"))
    logits = dc.linear(h2, params["cap.out.w"], params["cap.out.b"])
    return logits, DecoderState(h1, h2, state.prev_token)


def pad_sequences(sequences: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out


@dataclass(frozen=True, eq=False)
class TeacherForced:
    loss: Tensor
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 1.0


def teacher_forced(ctx: AttentionContext, v_k: Tensor, params, embeddings: Tensor,
                   sequences: Sequence[Sequence[int]], options: DecodeOptions = DecodeOptions(),
                   dims: CaptionerDims = CaptionerDims()) -> TeacherForced:
    """Per-token mean cross entropy with ground-truth tokens fed back in."""
    gt = pad_sequences(sequences)
    b, width = gt.shape
    state = DecoderState.initial(b, dims)
    all_logits = []
    for t in range(width - 1):
        state = DecoderState(state.h1, state.h2, gt[:, t])
        logits, state = decode_step(state, ctx, v_k, params, embeddings, options)
        all_logits.append(logits)
    targets = gt[:, 1:].T.reshape(-1)
    mask = targets != PAD
    stacked = dc.concat(all_logits, axis=0)
    loss = dc.cross_entropy(stacked, targets, mask)
    pred = stacked.data.argmax(axis=1)
    return TeacherForced(loss, int(((pred == targets) & mask).sum()), int(mask.sum()))


def teacher_forced_loss(ctx, v_k, params, embeddings, gt, options: DecodeOptions = DecodeOptions(),
                        dims: CaptionerDims = CaptionerDims()) -> Tensor:
    return teacher_forced(ctx, v_k, params, embeddings, gt, options, dims).loss


def generate(ctx: AttentionContext, v_k: Tensor, params, embeddings: Tensor,
             max_tokens: int = MAX_CAPTION_TOKENS, options: DecodeOptions = DecodeOptions(),
             dims: CaptionerDims = CaptionerDims()) -> list[list[int]]:
    """Greedy decoding; each result is ``[SOS, ..., EOS]`` with at most ``max_tokens`` words."""
    b = ctx.batch
    state = DecoderState.initial(b, dims)
    seqs = [[SOS] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for step in range(max_tokens + 1):
        logits, state = decode_step(state, ctx, v_k, params, embeddings, options)
        nxt = logits.data.argmax(axis=1)
        if step == max_tokens:
            nxt[:] = EOS
        for i in range(b):
            if not done[i]:
                seqs[i].append(int(nxt[i]))
                done[i] = nxt[i] == EOS
        if done.all():
            break
        state = DecoderState(state.h1, state.h2, nxt)
    return seqs
