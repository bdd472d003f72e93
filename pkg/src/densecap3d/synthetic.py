"""Synthetic relation-caption scenes for desk-scale training and testing.

Every object gets the caption ``"the <class> is next to the <class>"`` naming
its nearest neighbor.  Object features encode a per-class code, the box
center and size and the heading, so both the class and the spatial relation
are recoverable from features, but the neighbor's identity only through
pairwise comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import zlib

import numpy as np

from densecap3d.scenedata import (EMBED_DIM, FEATURE_DIM, NUM_CLASSES, ObjectRecord, Scene, Vocabulary,
                                  build_vocabulary, save_embeddings, save_scene)

CLASS_NAMES = ("cabinet", "bed", "chair", "sofa", "table", "door", "window", "bookshelf", "picture",
               "counter", "desk", "curtain", "refrigerator", "showercurtain", "toilet", "sink",
               "bathtub", "trashcan")
TEMPLATE = "the {} is next to the {}"

CODE_DIMS = 64
_CENTER, _SIZE, _HEADING = 64, 67, 70
CENTER_SCALE = 1.0


@dataclass(frozen=True)
class World:
    """Fixed per-class feature codes and word vectors shared by every split."""

    class_codes: np.ndarray   # (NUM_CLASSES, CODE_DIMS)
    seed: int

    @classmethod
    def create(cls, seed: int = 0) -> "World":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 0.5, size=(NUM_CLASSES, CODE_DIMS)), seed)

    def word_vectors(self, words) -> np.ndarray:
        rng = np.random.default_rng(self.seed + 7919)
        table = rng.normal(0.0, 0.4, size=(len(CLASS_NAMES) + 8, EMBED_DIM))
        lookup = {w: i for i, w in enumerate(CLASS_NAMES + ("the", "is", "next", "to"))}
        out = []
        for w in words:
            if w in lookup:
                out.append(table[lookup[w]])
            else:
                # stable per-word vector for anything outside the template
                out.append(np.random.default_rng(zlib.crc32(w.encode())).normal(0.0, 0.4, EMBED_DIM))
        return np.array(out)

    def embedding_table(self, vocab: Vocabulary) -> np.ndarray:
        """Vectors aligned with ``vocab``; reserved rows stay zero."""
        table = np.zeros((len(vocab), EMBED_DIM), dtype=np.float32)
        table[4:] = self.word_vectors(vocab.tokens[4:])
        return table


def _feature(world: World, cls: int, center, lengths, heading_deg, rng) -> tuple[float, ...]:
    f = rng.normal(0.0, 0.02, size=FEATURE_DIM)
    f[:CODE_DIMS] += world.class_codes[cls]
    f[_CENTER:_CENTER + 3] = CENTER_SCALE * np.asarray(center)
    f[_SIZE:_SIZE + 3] = lengths
    t = np.radians(2 * heading_deg)
    f[_HEADING:_HEADING + 2] = (np.cos(t), np.sin(t))
    return tuple(float(v) for v in f)


def _place(rng, n, room, margin, min_gap, tries=20000):
    for _ in range(tries):
        xy = rng.uniform(0.5, room - 0.5, size=(n, 2))
        d = np.linalg.norm(xy[:, None] - xy[None], axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() < min_gap:
            continue
        if n > 2:
            two = np.sort(d, axis=1)[:, :2]
            if (two[:, 1] < margin * two[:, 0]).any():
                continue
        return xy
    raise RuntimeError("could not place objects with the requested nearest-neighbor margin")


def _place_pairs(rng, n, room, tries=20000):
    """Objects in close pairs (0.6-0.9 apart) whose midpoints are at least 3 apart."""
    if n % 2:
        raise ValueError("pair layout needs an even number of objects")
    for _ in range(tries):
        mid = rng.uniform(1.0, room - 1.0, size=(n // 2, 2))
        d = np.linalg.norm(mid[:, None] - mid[None], axis=2)
        np.fill_diagonal(d, np.inf)
        if n > 2 and d.min() < 3.0:
            continue
        theta = rng.uniform(0.0, 2 * np.pi, size=n // 2)
        half = rng.uniform(0.3, 0.45, size=n // 2)[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
        return np.concatenate([mid - half, mid + half])[rng.permutation(n)]
    raise RuntimeError("could not place object pairs")


def make_scene(world: World, rng: np.random.Generator, scene_id: str, num_objects: int = 5,
               num_classes: int = NUM_CLASSES, room: float = 6.0, margin: float = 1.3,
               layout: str = "scatter") -> Scene:
    """``layout="scatter"`` places objects freely; ``"pairs"`` in well-separated close pairs."""
    classes = rng.choice(num_classes, size=num_objects, replace=num_objects > num_classes)
    if layout == "pairs":
        xy = _place_pairs(rng, num_objects, room)
    elif layout == "scatter":
        xy = _place(rng, num_objects, room, margin, min_gap=0.8)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    lengths = rng.uniform(0.3, 0.7, size=(num_objects, 3))
    headings = rng.uniform(0.0, 180.0, size=num_objects)
    centers = np.column_stack([xy, lengths[:, 2] / 2])
    dist = np.linalg.norm(xy[:, None] - xy[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    objects = []
    for i in range(num_objects):
        nn = int(np.argmin(dist[i]))
        labels = {j: float(abs(headings[i] - headings[j]) % 180.0) for j in range(num_objects) if j != i}
        objects.append(ObjectRecord(
            id=i,
            center=tuple(float(v) for v in centers[i]),
            lengths=tuple(float(v) for v in lengths[i]),
            semantic_class=int(classes[i]),
            feature=_feature(world, int(classes[i]), centers[i], lengths[i], headings[i], rng),
            captions=(TEMPLATE.format(CLASS_NAMES[classes[i]], CLASS_NAMES[classes[nn]]),),
            orientation_labels=labels,
        ))
    return Scene(scene_id, tuple(objects))


def make_dataset(num_scenes: int, num_objects: int = 5, seed: int = 0, world: World | None = None,
                 num_classes: int = NUM_CLASSES, prefix: str = "synth", layout: str = "scatter") -> list[Scene]:
    world = world or World.create()
    rng = np.random.default_rng(seed)
    return [make_scene(world, rng, f"{prefix}{seed:03d}_{i:04d}", num_objects, num_classes, layout=layout)
            for i in range(num_scenes)]


def template_vocabulary() -> Vocabulary:
    return build_vocabulary([TEMPLATE.format(c, c) for c in CLASS_NAMES])


def write_dataset(out_dir, scenes, world: World | None = None, vocab: Vocabulary | None = None) -> dict[str, Path]:
    """Scene files plus ``vocab.txt`` and ``embeddings.txt`` into ``out_dir``."""
    world = world or World.create()
    vocab = vocab or template_vocabulary()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        save_scene(scene, out / f"{scene.scene_id}.json")
    vocab.save(out / "vocab.txt")
    words = vocab.tokens[4:]
    save_embeddings(words, world.word_vectors(words), out / "embeddings.txt")
    return {"data": out, "vocab": out / "vocab.txt", "embeddings": out / "embeddings.txt"}
