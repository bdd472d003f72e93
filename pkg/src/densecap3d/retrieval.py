"""Nearest-feature caption retrieval baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from densecap3d.errors import ArgumentError, FormatError, ValidationError
from densecap3d.scenedata import FEATURE_DIM, Scene


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    features: np.ndarray        # (N, 128)
    captions: tuple[str, ...]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64).reshape(-1, FEATURE_DIM) \
            if np.size(self.features) else np.zeros((0, FEATURE_DIM))
        if len(feats) != len(self.captions):
            raise ValidationError(f"{len(feats)} features but {len(self.captions)} captions")
        if not np.isfinite(feats).all():
            raise ValidationError("index features must be finite", "features")
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return len(self.captions)

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene]) -> "RetrievalIndex":
        """One entry per (object, caption) pair, in scene then object order."""
        feats, caps = [], []
        for scene in scenes:
            for obj in scene.objects:
                for text in obj.captions:
                    feats.append(obj.feature)
                    caps.append(text)
        return cls(np.array(feats).reshape(-1, FEATURE_DIM), tuple(caps))

    def save(self, path) -> None:
        rows = [{"feature": [float(x) for x in f], "caption": c} for f, c in zip(self.features, self.captions)]
        Path(path).write_text(json.dumps({"entries": rows}), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            rows = raw["entries"]
            feats = [r["feature"] for r in rows]
            caps = tuple(str(r["caption"]) for r in rows)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a retrieval index ({exc})") from None
        if any(len(f) != FEATURE_DIM for f in feats):
            raise ValidationError(f"every feature must have {FEATURE_DIM} values", "entries")
        return cls(np.array(feats, dtype=np.float64).reshape(-1, FEATURE_DIM), caps)


def cosine_similarities(query, features: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``query`` to each row; zero-norm vectors score 0."""
    q = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(features, axis=1)
    if qn == 0:
        return np.zeros(len(features))
    denom = norms * qn
    dots = features @ q
    return np.divide(dots, denom, out=np.zeros(len(features)), where=denom > 0)


def retrieve_caption(query, index: RetrievalIndex) -> str:
    """Caption of the most cosine-similar entry; ties go to the lower index."""
    if len(index) == 0:
        raise ArgumentError("retrieval index is empty")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (FEATURE_DIM,):
        raise ArgumentError(f"query must have {FEATURE_DIM} values, got shape {q.shape}")
    return index.captions[int(np.argmax(cosine_similarities(q, index.features)))]
