"""Scene data model, JSON/text ingestion, vocabulary and augmentation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from densecap3d.errors import FormatError, ValidationError
from densecap3d.geometry import Box3

FEATURE_DIM = 128
EMBED_DIM = 300
POINT_WIDTH = 135
NUM_CLASSES = 18
MAX_PROPOSALS = 256
MAX_CAPTION_TOKENS = 30

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
_STRIP = ".,;:!?\"'()"


@dataclass(frozen=True)
class ObjectRecord:
    id: int
    center: tuple[float, float, float]
    lengths: tuple[float, float, float]
    semantic_class: int
    feature: tuple[float, ...]
    captions: tuple[str, ...] = ()
    orientation_labels: dict[int, float] = field(default_factory=dict)
    orientation_masked: bool = False

    @property
    def box(self) -> Box3:
        return Box3(self.center, self.lengths)


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float, float]
    lengths: tuple[float, float, float]
    feature: tuple[float, ...]
    objectness: float
    semantic_class: int | None = None

    @property
    def box(self) -> Box3:
        return Box3(self.center, self.lengths)


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    objects: tuple[ObjectRecord, ...]
    detections: tuple[Detection, ...] | None = None
    points: np.ndarray | None = None
    detection_loss: float | None = None

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.scene_id, self.objects, self.detections, self.detection_loss) != (
                other.scene_id, other.objects, other.detections, other.detection_loss):
            return False
        if self.points is None or other.points is None:
            return self.points is None and other.points is None
        return self.points.shape == other.points.shape and bool(np.array_equal(self.points, other.points))

    __hash__ = None

    def object_by_id(self, object_id: int) -> ObjectRecord:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)


@dataclass(frozen=True)
class ProposalSet:
    """Candidate boxes fed to the model, capped at :data:`MAX_PROPOSALS`."""

    centers: np.ndarray      # (M, 3)
    lengths: np.ndarray      # (M, 3)
    features: np.ndarray     # (M, 128)
    objectness: np.ndarray   # (M,) scores in [0, 1]
    classes: np.ndarray      # (M,) int, -1 when unknown
    valid: np.ndarray        # (M,) bool objectness mask

    def __len__(self):
        return len(self.centers)

    def box(self, i: int) -> Box3:
        return Box3(tuple(self.centers[i]), tuple(self.lengths[i]))

    def subset(self, index: Sequence[int]) -> "ProposalSet":
        idx = np.asarray(index, dtype=np.int64)
        return ProposalSet(self.centers[idx], self.lengths[idx], self.features[idx],
                           self.objectness[idx], self.classes[idx], self.valid[idx])


def oracle_proposals(scene: Scene) -> ProposalSet:
    """Ground-truth objects as proposals, all valid with objectness 1."""
    objs = scene.objects
    return ProposalSet(
        centers=np.array([o.center for o in objs], dtype=np.float64).reshape(-1, 3),
        lengths=np.array([o.lengths for o in objs], dtype=np.float64).reshape(-1, 3),
        features=np.array([o.feature for o in objs], dtype=np.float64).reshape(-1, FEATURE_DIM),
        objectness=np.ones(len(objs)),
        classes=np.array([o.semantic_class for o in objs], dtype=np.int64),
        valid=np.ones(len(objs), dtype=bool),
    )


def detection_proposals(scene: Scene, objectness_threshold: float = 0.5) -> ProposalSet:
    dets = scene.detections or ()
    return ProposalSet(
        centers=np.array([d.center for d in dets], dtype=np.float64).reshape(-1, 3),
        lengths=np.array([d.lengths for d in dets], dtype=np.float64).reshape(-1, 3),
        features=np.array([d.feature for d in dets], dtype=np.float64).reshape(-1, FEATURE_DIM),
        objectness=np.array([d.objectness for d in dets], dtype=np.float64),
        classes=np.array([-1 if d.semantic_class is None else d.semantic_class for d in dets],
                         dtype=np.int64),
        valid=np.array([d.objectness >= objectness_threshold for d in dets], dtype=bool),
    )


def scene_proposals(scene: Scene) -> ProposalSet:
    """Detections when the scene carries them, otherwise oracle boxes."""
    return oracle_proposals(scene) if scene.detections is None else detection_proposals(scene)


# ---------------------------------------------------------------------------
# validation and (de)serialization


def _real(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"expected a real number, got {type(value).__name__}", path)
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError("value must be finite", path)
    return value


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"expected an integer, got {type(value).__name__}", path)
    return value


def _vector(value, n: int, path: str) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise ValidationError("expected an array", path)
    if len(value) != n:
        raise ValidationError(f"expected {n} values, got {len(value)}", path)
    return tuple(_real(v, f"{path}[{i}]") for i, v in enumerate(value))


def _lengths(value, path: str) -> tuple[float, ...]:
    out = _vector(value, 3, path)
    if any(v <= 0 for v in out):
        raise ValidationError("box lengths must be positive", path)
    return out


def _class(value, path: str) -> int:
    cls = _int(value, path)
    if not 0 <= cls < NUM_CLASSES:
        raise ValidationError(f"class must lie in [0, {NUM_CLASSES})", path)
    return cls


def _angle(value, path: str) -> float:
    angle = _real(value, path)
    if not 0.0 <= angle < 180.0:
        raise ValidationError("angle must lie in [0, 180)", path)
    return angle


def _object_from_dict(raw, path: str) -> ObjectRecord:
    if not isinstance(raw, dict):
        raise ValidationError("expected an object", path)
    for key in ("id", "center", "lengths", "semantic_class", "feature"):
        if key not in raw:
            raise ValidationError("missing field", f"{path}.{key}")
    captions = raw.get("captions", [])
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise ValidationError("expected a list of strings", f"{path}.captions")
    labels_raw = raw.get("orientation_labels", {}) or {}
    if not isinstance(labels_raw, dict):
        raise ValidationError("expected a mapping", f"{path}.orientation_labels")
    labels = {}
    for key, angle in labels_raw.items():
        try:
            nid = int(key)
        except (TypeError, ValueError):
            raise ValidationError(f"neighbor id {key!r} is not an integer",
                                  f"{path}.orientation_labels") from None
        labels[nid] = _angle(angle, f"{path}.orientation_labels.{key}")
    masked = raw.get("orientation_masked", False)
    if not isinstance(masked, bool):
        raise ValidationError("expected a boolean", f"{path}.orientation_masked")
    return ObjectRecord(
        id=_int(raw["id"], f"{path}.id"),
        center=_vector(raw["center"], 3, f"{path}.center"),
        lengths=_lengths(raw["lengths"], f"{path}.lengths"),
        semantic_class=_class(raw["semantic_class"], f"{path}.semantic_class"),
        feature=_vector(raw["feature"], FEATURE_DIM, f"{path}.feature"),
        captions=tuple(captions),
        orientation_labels=labels,
        orientation_masked=masked,
    )


def _detection_from_dict(raw, path: str) -> Detection:
    if not isinstance(raw, dict):
        raise ValidationError("expected an object", path)
    for key in ("center", "lengths", "feature", "objectness"):
        if key not in raw:
            raise ValidationError("missing field", f"{path}.{key}")
    objectness = _real(raw["objectness"], f"{path}.objectness")
    if not 0.0 <= objectness <= 1.0:
        raise ValidationError("objectness must lie in [0, 1]", f"{path}.objectness")
    cls = raw.get("semantic_class")
    return Detection(
        center=_vector(raw["center"], 3, f"{path}.center"),
        lengths=_lengths(raw["lengths"], f"{path}.lengths"),
        feature=_vector(raw["feature"], FEATURE_DIM, f"{path}.feature"),
        objectness=objectness,
        semantic_class=None if cls is None else _class(cls, f"{path}.semantic_class"),
    )


def scene_from_dict(raw) -> Scene:
    if not isinstance(raw, dict):
        raise ValidationError("scene must be a JSON object", "$")
    scene_id = raw.get("scene_id")
    if not isinstance(scene_id, str):
        raise ValidationError("expected a string", "scene_id")
    objects_raw = raw.get("objects")
    if not isinstance(objects_raw, list):
        raise ValidationError("expected an array", "objects")
    objects = tuple(_object_from_dict(o, f"objects[{i}]") for i, o in enumerate(objects_raw))
    seen = set()
    for i, obj in enumerate(objects):
        if obj.id in seen:
            raise ValidationError(f"duplicate object id {obj.id}", f"objects[{i}].id")
        seen.add(obj.id)
    for i, obj in enumerate(objects):
        for nid in obj.orientation_labels:
            if nid not in seen:
                raise ValidationError(f"unknown neighbor id {nid}", f"objects[{i}].orientation_labels")

    detections = None
    if raw.get("detections") is not None:
        dets_raw = raw["detections"]
        if not isinstance(dets_raw, list):
            raise ValidationError("expected an array", "detections")
        if len(dets_raw) > MAX_PROPOSALS:
            raise ValidationError(f"at most {MAX_PROPOSALS} proposals allowed, got {len(dets_raw)}",
                                  "detections")
        detections = tuple(_detection_from_dict(d, f"detections[{i}]") for i, d in enumerate(dets_raw))

    points = None
    if raw.get("points") is not None:
        rows = raw["points"]
        if not isinstance(rows, list):
            raise ValidationError("expected an array", "points")
        for i, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != POINT_WIDTH:
                raise ValidationError(f"each point needs {POINT_WIDTH} values", f"points[{i}]")
        try:
            points = np.array(rows, dtype=np.float64).reshape(len(rows), POINT_WIDTH)
        except (TypeError, ValueError):
            raise ValidationError("points must be numeric", "points") from None
        if not np.isfinite(points).all():
            raise ValidationError("points must be finite", "points")

    det_loss = raw.get("detection_loss")
    if det_loss is not None:
        det_loss = _real(det_loss, "detection_loss")
    return Scene(scene_id, objects, detections, points, det_loss)


def scene_to_dict(scene: Scene) -> dict:
    out = {
        "scene_id": scene.scene_id,
        "objects": [
            {
                "id": o.id,
                "center": list(o.center),
                "lengths": list(o.lengths),
                "semantic_class": o.semantic_class,
                "feature": list(o.feature),
                "captions": list(o.captions),
                "orientation_labels": {str(k): v for k, v in o.orientation_labels.items()},
                "orientation_masked": o.orientation_masked,
            }
            for o in scene.objects
        ],
    }
    if scene.detections is not None:
        dets = []
        for d in scene.detections:
            entry = {"center": list(d.center), "lengths": list(d.lengths),
                     "feature": list(d.feature), "objectness": d.objectness}
            if d.semantic_class is not None:
                entry["semantic_class"] = d.semantic_class
            dets.append(entry)
        out["detections"] = dets
    if scene.points is not None:
        out["points"] = scene.points.tolist()
    if scene.detection_loss is not None:
        out["detection_loss"] = scene.detection_loss
    return out


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    return scene_from_dict(raw)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)), encoding="utf-8")


def load_dataset(directory) -> list[Scene]:
    """Every ``*.json`` scene file in ``directory``, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    return [load_scene(p) for p in sorted(directory.glob("*.json"))]


# ---------------------------------------------------------------------------
# vocabulary and captions


def tokenize(text: str) -> list[str]:
    tokens = (t.strip(_STRIP) for t in text.lower().split())
    return [t for t in tokens if t]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise ValidationError("vocabulary must start with the reserved tokens", "tokens")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique", "tokens")
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def __contains__(self, token):
        return token in self._index

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[4:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(RESERVED + tuple(line for line in lines if line))


def build_vocabulary(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    counts = Counter(tok for text in corpus for tok in tokenize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(RESERVED + tuple(kept))


def encode_caption(text: str, vocab: Vocabulary, max_tokens: int = MAX_CAPTION_TOKENS) -> list[int]:
    body = [vocab.index(t) for t in tokenize(text)[:max_tokens]]
    return [SOS, *body, EOS]


def decode_tokens(sequence: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Content tokens of an encoded sequence (stops at EOS, skips SOS/PAD)."""
    words = []
    for idx in sequence:
        if idx == EOS:
            break
        if idx in (SOS, PAD):
            continue
        words.append(vocab.tokens[idx])
    return words


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vectors: np.ndarray  # (len(vocab), 300)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != EMBED_DIM:
            raise ValidationError(f"embedding width must be {EMBED_DIM}", "vectors")


def load_embeddings(path, vocab: Vocabulary) -> EmbeddingTable:
    """Rows from a ``token v1 .. v300`` text file aligned to ``vocab``.

    Reserved tokens and tokens absent from the file get zero rows.
    """
    table = np.zeros((len(vocab), EMBED_DIM), dtype=np.float32)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            if len(parts) != EMBED_DIM + 1:
                raise FormatError(f"{path}:{lineno}: expected token + {EMBED_DIM} values, "
                                  f"got {len(parts) - 1} values")
            token = parts[0]
            if token not in vocab or vocab.index(token) < len(RESERVED):
                continue
            try:
                table[vocab.index(token)] = np.array(parts[1:], dtype=np.float32)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric embedding value") from None
    return EmbeddingTable(table)


def save_embeddings(words: Sequence[str], vectors: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in zip(words, vectors):
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


# ---------------------------------------------------------------------------
# augmentation


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    ax, ay, az = np.radians(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment_scene(scene: Scene, seed: int, max_rotation_deg: float = 5.0,
                  max_translation: float = 0.5) -> Scene:
    """Jitter box centers with a small rotation about the centroid plus a shift.

    Angles are drawn independently per axis from ``[-max_rotation_deg,
    max_rotation_deg]`` and the offset per component from
    ``[-max_translation, max_translation]``.  Boxes stay axis-aligned.
    """
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)
    offset = rng.uniform(-max_translation, max_translation, size=3)
    rot = rotation_matrix(angles)
    anchors = [o.center for o in scene.objects] or [d.center for d in scene.detections or ()]
    centroid = np.mean(anchors, axis=0) if anchors else np.zeros(3)

    def move(c):
        return tuple(float(v) for v in rot @ (np.asarray(c) - centroid) + centroid + offset)

    objects = tuple(replace(o, center=move(o.center)) for o in scene.objects)
    detections = None
    if scene.detections is not None:
        detections = tuple(replace(d, center=move(d.center)) for d in scene.detections)
    points = None
    if scene.points is not None:
        points = scene.points.copy()
        points[:, :3] = (points[:, :3] - centroid) @ rot.T + centroid + offset
    return replace(scene, objects=objects, detections=detections, points=points)
