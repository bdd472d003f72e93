"""Loss assembly and the deterministic per-scene training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from densecap3d import captioner as cap
from densecap3d import diffcore as dc
from densecap3d.diffcore import AdamState, GradientTape, Tensor
from densecap3d.errors import ArgumentError, SelectionError, ValidationError
from densecap3d.geometry import Box3, NUM_ORIENTATION_BINS, orientation_bin, pairwise_iou
from densecap3d.model import Model, ModelConfig
from densecap3d.relgraph import SceneGraph, orientation_head
from densecap3d.scenedata import MAX_PROPOSALS, ProposalSet, Scene, augment_scene, encode_caption, scene_proposals

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0   # detection
    beta: float = 1.0     # relative orientation
    gamma: float = 0.1    # description

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError("loss weights must be non-negative", name)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    max_iterations: int = 5000
    seed: int = 0
    max_proposals: int = MAX_PROPOSALS
    augment: bool = True
    shuffle: bool = True
    weights: LossWeights = LossWeights()
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive", "lr")
        if self.weight_decay < 0:
            raise ValidationError("must be non-negative", "weight_decay")
        if self.max_iterations < 0:
            raise ValidationError("must be non-negative", "max_iterations")
        if not 1 <= self.max_proposals <= MAX_PROPOSALS:
            raise ValidationError(f"must lie in [1, {MAX_PROPOSALS}]", "max_proposals")


def orientation_loss(logits: Tensor, labels: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean cross entropy over unmasked edges; exactly 0 when all are masked.

    Labels of masked edges are never inspected.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if len(labels) != len(mask) or (logits.ndim == 2 and logits.shape[0] != len(labels)):
        raise ArgumentError("logits, labels and mask must align")
    if not mask.any():
        return Tensor(0.0)
    bad = mask & ((labels < 0) | (labels >= NUM_ORIENTATION_BINS))
    if bad.any():
        raise ArgumentError(f"orientation labels must lie in 0..{NUM_ORIENTATION_BINS - 1}")
    return dc.cross_entropy(logits, np.where(mask, labels, 0), mask)


def combined_loss(l_det, l_ad, l_des, w: LossWeights = LossWeights()):
    """``alpha * l_det + beta * l_ad + gamma * l_des``; accepts floats or tensors."""
    if not any(isinstance(x, Tensor) for x in (l_det, l_ad, l_des)):
        return w.alpha * l_det + w.beta * l_ad + w.gamma * l_des
    total = dc.scale(dc.as_tensor(l_det), w.alpha)
    total = dc.add(total, dc.scale(dc.as_tensor(l_ad), w.beta))
    return dc.add(total, dc.scale(dc.as_tensor(l_des), w.gamma))


def select_training_proposal(proposals: ProposalSet, gt: Box3) -> int:
    """Valid proposal with the largest IoU to ``gt`` (lowest index on ties)."""
    valid = np.flatnonzero(proposals.valid)
    if len(valid) == 0:
        raise SelectionError("no valid proposals to select from")
    ious = pairwise_iou(gt.center, gt.lengths, proposals.centers[valid], proposals.lengths[valid])[0]
    return int(valid[int(np.argmax(ious))])


@dataclass(frozen=True, eq=False)
class SceneBatch:
    """Everything one optimizer step needs from a scene."""

    graph: SceneGraph
    targets: np.ndarray            # proposal index per caption sequence
    sequences: list[list[int]]
    edge_labels: np.ndarray        # (E,) orientation class, -1 where masked
    edge_mask: np.ndarray          # (E,) bool
    detection_loss: float


def edge_orientation_labels(scene: Scene, proposals: ProposalSet, edges: np.ndarray):
    """Orientation class per edge via each endpoint's best-IoU GT object.

    An edge is supervised only when both endpoints map to distinct GT objects,
    neither object is masked, and a label exists for the pair; masked
    objects' label tables are never read.
    """
    labels = np.full(len(edges), -1, dtype=np.int64)
    mask = np.zeros(len(edges), dtype=bool)
    objs = scene.objects
    if not objs or not len(edges):
        return labels, mask
    if scene.detections is None:
        owner = np.arange(len(objs))
    else:
        ious = pairwise_iou(proposals.centers, proposals.lengths,
                            [o.center for o in objs], [o.lengths for o in objs])
        owner = np.where(ious.max(axis=1) > 0, ious.argmax(axis=1), -1)
    for e, (i, j) in enumerate(edges):
        a, b = owner[i], owner[j]
        if a < 0 or b < 0 or a == b:
            continue
        src, dst = objs[a], objs[b]
        if src.orientation_masked or dst.orientation_masked:
            continue
        angle = src.orientation_labels.get(dst.id)
        if angle is None:
            continue
        labels[e] = orientation_bin(angle)
        mask[e] = True
    return labels, mask


def prepare_batch(scene: Scene, model: Model, max_proposals: int = MAX_PROPOSALS) -> SceneBatch:
    proposals = scene_proposals(scene)
    if len(proposals) > max_proposals:
        raise ValidationError(f"scene has {len(proposals)} proposals, cap is {max_proposals}",
                              scene.scene_id)
    graph = model.build_graph(proposals)
    targets, sequences = [], []
    if proposals.valid.any():
        max_tokens = model.config.max_caption_tokens
        for obj in scene.objects:
            if not obj.captions:
                continue
            k = select_training_proposal(proposals, obj.box)
            for text in obj.captions:
                targets.append(k)
                sequences.append(encode_caption(text, model.vocab, max_tokens))
    labels, mask = edge_orientation_labels(scene, proposals, graph.edges)
    return SceneBatch(graph, np.asarray(targets, dtype=np.int64), sequences, labels, mask,
                      scene.detection_loss or 0.0)


@dataclass(frozen=True)
class StepStats:
    total: float
    detection: float
    orientation: float
    description: float
    token_accuracy: float
    tokens: int


def scene_losses(model: Model, batch: SceneBatch, weights: LossWeights = LossWeights()):
    """Forward pass; returns (total loss tensor, StepStats).  Call under a tape."""
    cfg = model.config
    v_tau, relations = model.encode(batch.graph)
    l_ad: Tensor | float = 0.0
    if cfg.use_graph and relations is not None and weights.beta > 0 and batch.edge_mask.any():
        l_ad = orientation_loss(orientation_head(relations, model.params), batch.edge_labels,
                                batch.edge_mask)
    l_des: Tensor | float = 0.0
    correct = count = 0
    if len(batch.targets) and weights.gamma > 0:
        ctx = model.context(batch.graph, v_tau, relations, batch.targets)
        tf = cap.teacher_forced(ctx, dc.take_rows(v_tau, batch.targets), model.params,
                                model.embedding_tensor, batch.sequences, cfg.decode_options, cfg.dims)
        l_des, correct, count = tf.loss, tf.correct, tf.total
    total = combined_loss(batch.detection_loss, l_ad, l_des, weights)
    stats = StepStats(float(np.asarray(total.data if isinstance(total, Tensor) else total)),
                      batch.detection_loss, _value(l_ad), _value(l_des),
                      correct / count if count else float("nan"), count)
    return total, stats


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def train_step(model: Model, batch: SceneBatch, state: AdamState, cfg: TrainingConfig) -> StepStats:
    """Forward, backward and one Adam update of ``model.params`` in place."""
    names = list(model.params)
    with GradientTape() as tape:
        total, stats = scene_losses(model, batch, cfg.weights)
    if isinstance(total, Tensor) and total.requires_grad:
        by_tensor = tape.backward(total, [model.params[n] for n in names])
        grads = {n: by_tensor[model.params[n]] for n in names}
    else:
        grads = {n: np.zeros_like(model.params[n].data) for n in names}
    model.params, _ = dc.adam_step(model.params, grads, state, cfg.lr, cfg.weight_decay)
    return stats


@dataclass
class TrainingRun:
    model: Model
    optimizer: AdamState
    history: list[StepStats] = field(default_factory=list)
    iteration: int = 0


def train_epoch(scenes: Sequence[Scene], run: TrainingRun, cfg: TrainingConfig, rng: np.random.Generator,
                budget: int | None = None, cache: dict | None = None,
                callback: Callable[[int, StepStats], None] | None = None) -> dict[str, float]:
    """One pass over ``scenes`` (or ``budget`` steps of it); returns mean losses."""
    if not scenes:
        raise ArgumentError("training needs at least one scene")
    order = rng.permutation(len(scenes)) if cfg.shuffle else np.arange(len(scenes))
    if budget is not None:
        order = order[:budget]
    stats = []
    for idx in order:
        scene = scenes[idx]
        if cfg.augment:
            scene = augment_scene(scene, int(rng.integers(2 ** 63 - 1)))
            batch = prepare_batch(scene, run.model, cfg.max_proposals)
        else:
            if cache is None or idx not in cache:
                batch = prepare_batch(scene, run.model, cfg.max_proposals)
                if cache is not None:
                    cache[idx] = batch
            else:
                batch = cache[idx]
        s = train_step(run.model, batch, run.optimizer, cfg)
        run.iteration += 1
        run.history.append(s)
        stats.append(s)
        if callback is not None:
            callback(run.iteration, s)
    return {
        "total": float(np.mean([s.total for s in stats])),
        "orientation": float(np.mean([s.orientation for s in stats])),
        "description": float(np.mean([s.description for s in stats])),
    }


def train(scenes: Sequence[Scene], model: Model, cfg: TrainingConfig,
          callback: Callable[[int, StepStats], None] | None = None) -> TrainingRun:
    """Run ``cfg.max_iterations`` scene steps; each scene step is one Adam update."""
    rng = np.random.default_rng(cfg.seed)
    run = TrainingRun(model, AdamState())
    cache: dict = {}
    while run.iteration < cfg.max_iterations:
        remaining = cfg.max_iterations - run.iteration
        means = train_epoch(scenes, run, cfg, rng, budget=remaining, cache=cache, callback=callback)
        log.debug("iteration %d: %s", run.iteration, means)
    return run


def token_accuracy(model: Model, scenes: Sequence[Scene]) -> float:
    """Teacher-forced next-token accuracy over every caption in ``scenes``."""
    correct = total = 0
    for scene in scenes:
        batch = prepare_batch(scene, model)
        if not len(batch.targets):
            continue
        v_tau, relations = model.encode(batch.graph)
        ctx = model.context(batch.graph, v_tau, relations, batch.targets)
        tf = cap.teacher_forced(ctx, dc.take_rows(v_tau, batch.targets), model.params,
                                model.embedding_tensor, batch.sequences, model.config.decode_options,
                                model.config.dims)
        correct += tf.correct
        total += tf.total
    return correct / total if total else float("nan")
