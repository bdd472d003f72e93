"""Full captioning model: relational graph feeding the attention decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from densecap3d import captioner as cap
from densecap3d import diffcore as dc
from densecap3d.capmetrics import Prediction
from densecap3d.diffcore import Tensor
from densecap3d.errors import ValidationError
from densecap3d.geometry import nms
from densecap3d.relgraph import SceneGraph, build_scene_graph, init_graph_params, propagate
from densecap3d.scenedata import (EMBED_DIM, FEATURE_DIM, MAX_CAPTION_TOKENS, EmbeddingTable, ProposalSet,
                                  Scene, Vocabulary, decode_tokens, detection_proposals,
                                  oracle_proposals)


@dataclass(frozen=True)
class ModelConfig:
    k_neighbors: int = 10
    graph_steps: int = 2
    feature_dim: int = FEATURE_DIM
    embed_dim: int = EMBED_DIM
    fusion_hidden: int = 512
    language_hidden: int = 512
    attention_dim: int = 128
    message_hidden: int = 128
    orientation_hidden: int = 128
    use_graph: bool = True
    use_attention: bool = True
    attention_tanh: bool = False
    attend_current_h1: bool = False
    residual_graph: bool = False
    max_caption_tokens: int = MAX_CAPTION_TOKENS

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValidationError("must be at least 1", "k_neighbors")
        if self.graph_steps < 0:
            raise ValidationError("must be non-negative", "graph_steps")
        for name in ("fusion_hidden", "language_hidden", "attention_dim", "message_hidden",
                     "orientation_hidden", "max_caption_tokens"):
            if getattr(self, name) < 1:
                raise ValidationError("must be positive", name)
        if self.feature_dim != FEATURE_DIM or self.embed_dim != EMBED_DIM:
            raise ValidationError(f"feature/embedding widths are fixed at {FEATURE_DIM}/{EMBED_DIM}")

    @property
    def dims(self) -> cap.CaptionerDims:
        return cap.CaptionerDims(self.feature_dim, self.embed_dim, self.fusion_hidden,
                                 self.language_hidden, self.attention_dim)

    @property
    def decode_options(self) -> cap.DecodeOptions:
        return cap.DecodeOptions(self.use_attention, self.attention_tanh, self.attend_current_h1)

    @property
    def effective_steps(self) -> int:
        return self.graph_steps if self.use_graph else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown model fields {sorted(unknown)}", "model")
        return cls(**raw)


def init_params(config: ModelConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = init_graph_params(rng, config.graph_steps, config.feature_dim, config.message_hidden,
                               config.orientation_hidden)
    params.update(cap.init_captioner_params(rng, vocab_size, config.dims))
    return params


@dataclass(eq=False)
class Model:
    config: ModelConfig
    vocab: Vocabulary
    embeddings: np.ndarray
    params: dict[str, Tensor]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self._embedding_tensor = Tensor(self.embeddings)

    @property
    def embedding_tensor(self) -> Tensor:
        return self._embedding_tensor

    @classmethod
    def create(cls, config: ModelConfig, vocab: Vocabulary, embeddings: EmbeddingTable | np.ndarray,
               seed: int = 0) -> "Model":
        table = embeddings.vectors if isinstance(embeddings, EmbeddingTable) else embeddings
        if table.shape != (len(vocab), config.embed_dim):
            raise ValidationError(f"embedding table shape {table.shape} does not match vocabulary "
                                  f"size {len(vocab)}")
        return cls(config, vocab, table, init_params(config, len(vocab), seed))

    # -- forward pieces -------------------------------------------------------

    def build_graph(self, proposals: ProposalSet, valid=None) -> SceneGraph:
        mask = proposals.valid if valid is None else valid
        return build_scene_graph(proposals.features, proposals.centers, mask, self.config.k_neighbors)

    def encode(self, graph: SceneGraph) -> tuple[Tensor, Tensor | None]:
        cfg = self.config
        if not cfg.use_graph:
            # graph disabled: raw features and no relation terms in the context
            return Tensor(graph.node_features), None
        return propagate(graph, self.params, cfg.graph_steps, cfg.residual_graph)

    def context(self, graph: SceneGraph, v_tau: Tensor, relations: Tensor | None,
                targets: Sequence[int]) -> cap.AttentionContext:
        rows = np.flatnonzero(graph.objectness_mask)
        return cap.build_attention_context(v_tau, relations, graph.edges, targets, rows)

    def caption_proposals(self, graph: SceneGraph, targets: Sequence[int]) -> list[list[str]]:
        """Greedy captions (as word lists) for the given proposal indices."""
        if len(targets) == 0:
            return []
        v_tau, relations = self.encode(graph)
        ctx = self.context(graph, v_tau, relations, targets)
        seqs = cap.generate(ctx, dc.take_rows(v_tau, targets), self.params, self.embedding_tensor,
                            self.config.max_caption_tokens, self.config.decode_options, self.config.dims)
        return [decode_tokens(s, self.vocab) for s in seqs]


def predict_scene(model: Model, scene: Scene, nms_threshold: float = 0.25) -> list[Prediction]:
    """Boxes and captions for one scene.

    Scenes with detections go through the objectness mask and NMS; scenes
    without them are captioned on their ground-truth boxes.
    """
    if scene.detections is None:
        proposals = oracle_proposals(scene)
        keep = np.arange(len(proposals))
    else:
        proposals = detection_proposals(scene)
        valid = np.flatnonzero(proposals.valid)
        kept = nms([proposals.box(i) for i in valid], [float(proposals.objectness[i]) for i in valid],
                   nms_threshold)
        keep = valid[kept] if len(kept) else np.zeros(0, dtype=np.int64)
    if len(keep) == 0:
        return []
    mask = np.zeros(len(proposals), dtype=bool)
    mask[keep] = True
    graph = model.build_graph(proposals, mask)
    captions = model.caption_proposals(graph, keep)
    preds = []
    for idx, words in zip(keep, captions):
        cls = int(proposals.classes[idx])
        preds.append(Prediction(scene.scene_id, proposals.box(int(idx)), None if cls < 0 else cls,
                                float(proposals.objectness[idx]), " ".join(words)))
    return preds
