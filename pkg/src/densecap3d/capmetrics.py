"""Caption metrics, IoU-gated dense-captioning scores and detection mAP.

Sentences are token lists.  BLEU-4, ROUGE-L and METEOR are sentence-level
and take the best (or clipped-max) agreement over a set of references;
CIDEr-D needs the whole evaluation corpus for its document frequencies.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from densecap3d.errors import ArgumentError, FormatError, ValidationError
from densecap3d.geometry import Box3, pairwise_iou
from densecap3d.scenedata import NUM_CLASSES, Scene, tokenize

Tokens = Sequence[str]
METRIC_NAMES = ("CIDEr", "BLEU-4", "METEOR", "ROUGE-L")
COLUMN_PREFIX = {"CIDEr": "C", "BLEU-4": "B-4", "METEOR": "M", "ROUGE-L": "R"}


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Tokens, refs: Sequence[Tokens]) -> float:
    """Sentence BLEU-4 without smoothing, closest-reference brevity penalty."""
    if not refs:
        raise ArgumentError("bleu4 needs at least one reference")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand = ngram_counts(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, c in ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c = len(candidate)
    r = min((len(ref) for ref in refs), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum / 4)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    if not refs:
        raise ArgumentError("rouge_l needs at least one reference")
    best = 0.0
    for ref in refs:
        lcs = lcs_length(candidate, ref) if candidate and ref else 0
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def exact_alignment(candidate: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Each candidate word, left to right, takes the earliest unused equal ref word."""
    used = [False] * len(ref)
    pairs = []
    for i, word in enumerate(candidate):
        for j, other in enumerate(ref):
            if not used[j] and other == word:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate: Tokens, refs: Sequence[Tokens], alpha: float = 0.9, gamma: float = 0.5,
           beta: float = 3.0) -> float:
    """Exact-match METEOR: no stemming, synonyms or paraphrase tables."""
    if not refs:
        raise ArgumentError("meteor needs at least one reference")
    best = 0.0
    for ref in refs:
        pairs = exact_alignment(candidate, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(candidate), m / len(ref)
        f_mean = p * r / (alpha * p + (1 - alpha) * r)
        penalty = gamma * (count_chunks(pairs) / m) ** beta
        best = max(best, f_mean * (1 - penalty))
    return best


def cider(candidates: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], n: int = 4,
          sigma: float = 6.0) -> list[float]:
    """Per-item CIDEr-D scores in [0, 10] with idf taken from ``refs``.

    For each n-gram order the candidate and each reference become tf-idf
    vectors; similarity is the clipped dot product over the norms, damped by
    ``exp(-(len_c - len_r)^2 / (2 sigma^2))``.  Orders and references are
    averaged and the result scaled by 10.
    """
    if len(candidates) != len(refs):
        raise ArgumentError("candidates and reference sets differ in length")
    if not candidates:
        return []
    df: Counter = Counter()
    for ref_set in refs:
        seen = set()
        for ref in ref_set:
            for k in range(1, n + 1):
                seen.update(ngram_counts(ref, k))
        df.update(seen)
    log_n = math.log(len(refs))

    def vectors(tokens):
        vecs, norms = [], []
        for k in range(1, n + 1):
            vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngram_counts(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, ref_set in zip(candidates, refs):
        if not ref_set:
            raise ArgumentError("every item needs at least one reference")
        c_vecs, c_norms = vectors(cand)
        total = 0.0
        for ref in ref_set:
            r_vecs, r_norms = vectors(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
            for k in range(n):
                if c_norms[k] == 0 or r_norms[k] == 0:
                    continue
                dot = sum(min(w, r_vecs[k].get(g, 0.0)) * r_vecs[k].get(g, 0.0)
                          for g, w in c_vecs[k].items())
                total += penalty * dot / (c_norms[k] * r_norms[k])
        scores.append(10.0 * total / (n * len(ref_set)))
    return scores


# ---------------------------------------------------------------------------
# box-gated evaluation


@dataclass(frozen=True)
class Prediction:
    scene_id: str
    box: Box3
    semantic_class: int | None
    objectness: float
    caption: str


@dataclass(frozen=True)
class Assignment:
    prediction: int | None
    iou: float
    caption: str


def assign_predictions(preds: Sequence[tuple[Box3, str]], gts: Sequence[tuple[Box3, object]]) -> list[Assignment]:
    """For every GT box, the prediction with the highest IoU (lower index on ties)."""
    if not gts:
        raise ArgumentError("assign_predictions needs at least one ground-truth object")
    if not preds:
        return [Assignment(None, 0.0, "") for _ in gts]
    ious = pairwise_iou([g[0].center for g in gts], [g[0].lengths for g in gts],
                        [p[0].center for p in preds], [p[0].lengths for p in preds])
    out = []
    for row in ious:
        j = int(np.argmax(row))
        out.append(Assignment(j, float(row[j]), preds[j][1]))
    return out


def m_at_kiou(scores: Sequence[float], ious: Sequence[float], k: float) -> float:
    if len(scores) != len(ious):
        raise ArgumentError("scores and IoUs differ in length")
    if len(scores) == 0:
        raise ArgumentError("m@kIoU is undefined for zero objects")
    return sum(s for s, iou in zip(scores, ious) if iou > k) / len(scores)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the interpolated precision envelope at every recall point."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / num_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_iou(preds: Sequence[tuple], gts: Sequence[tuple], threshold: float = 0.5) -> float:
    """Mean AP over classes present in ``gts``.

    ``preds`` items are ``(box, class, score)`` and ``gts`` items
    ``(box, class)``; either may carry a trailing group key (e.g. scene id)
    so that matches never cross groups.  Predictions are matched greedily in
    score order to the unmatched same-class GT of highest IoU, counting a
    true positive only when that IoU exceeds ``threshold``.
    """
    gt_classes = sorted({g[1] for g in gts})
    if not gt_classes:
        return 0.0
    for g in gts:
        if not 0 <= g[1] < NUM_CLASSES:
            raise ArgumentError(f"class {g[1]} outside [0, {NUM_CLASSES})")
    aps = []
    for cls in gt_classes:
        cls_gts = [(i, g) for i, g in enumerate(gts) if g[1] == cls]
        cls_preds = [(i, p) for i, p in enumerate(preds) if p[1] == cls]
        cls_preds.sort(key=lambda item: (-item[1][2], item[0]))
        matched = set()
        tp = np.zeros(len(cls_preds))
        for rank, (_, p) in enumerate(cls_preds):
            group = p[3] if len(p) > 3 else None
            best, best_iou = None, -1.0
            for gi, g in cls_gts:
                if (g[2] if len(g) > 2 else None) != group:
                    continue
                iou = float(pairwise_iou(p[0].center, p[0].lengths, g[0].center, g[0].lengths)[0, 0])
                if iou > best_iou:
                    best, best_iou = gi, iou
            if best is not None and best_iou > threshold and best not in matched:
                matched.add(best)
                tp[rank] = 1
        aps.append(average_precision(tp, len(cls_gts)))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# report


def _key(k: float) -> str:
    return f"{k:g}"


@dataclass
class EvalReport:
    objects: list[dict]
    metrics: dict[str, dict[str, float]]
    map_iou: float
    map_threshold: float
    thresholds: tuple[float, ...]

    def columns(self) -> dict[str, float]:
        """Flat ``C@0.25IoU``-style columns plus ``mAP@0.5IoU``."""
        out = {}
        for k in self.thresholds:
            for name in METRIC_NAMES:
                out[f"{COLUMN_PREFIX[name]}@{_key(k)}IoU"] = self.metrics[name][_key(k)]
        out[f"mAP@{_key(self.map_threshold)}IoU"] = self.map_iou
        return out

    def to_dict(self) -> dict:
        return {
            "num_objects": len(self.objects),
            "thresholds": list(self.thresholds),
            "columns": self.columns(),
            "metrics": self.metrics,
            "objects": self.objects,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def evaluate(predictions: Sequence[Prediction], scenes: Sequence[Scene],
             thresholds: Sequence[float] = (0.25, 0.5), map_threshold: float = 0.5) -> EvalReport:
    """Score predictions against every captioned GT object of ``scenes``."""
    by_scene: dict[str, list[Prediction]] = {}
    for p in predictions:
        by_scene.setdefault(p.scene_id, []).append(p)
    records, candidates, references = [], [], []
    for scene in scenes:
        gts = [o for o in scene.objects if o.captions]
        if not gts:
            continue
        preds = by_scene.get(scene.scene_id, [])
        assigned = assign_predictions([(p.box, p.caption) for p in preds],
                                      [(o.box, o.captions) for o in gts])
        for obj, a in zip(gts, assigned):
            cand = tokenize(a.caption)
            refs = [tokenize(c) for c in obj.captions]
            candidates.append(cand)
            references.append(refs)
            records.append({
                "scene_id": scene.scene_id,
                "object_id": obj.id,
                "prediction": a.prediction,
                "iou": a.iou,
                "caption": a.caption,
                "scores": {"BLEU-4": bleu4(cand, refs), "METEOR": meteor(cand, refs),
                           "ROUGE-L": rouge_l(cand, refs)},
                "gates": {_key(k): int(a.iou > k) for k in thresholds},
            })
    if not records:
        raise ArgumentError("no captioned ground-truth objects to evaluate")
    for rec, c in zip(records, cider(candidates, references)):
        rec["scores"] = {"CIDEr": c, **rec["scores"]}

    ious = [r["iou"] for r in records]
    metrics = {name: {_key(k): m_at_kiou([r["scores"][name] for r in records], ious, k)
                      for k in thresholds} for name in METRIC_NAMES}
    det_preds = [(p.box, p.semantic_class, p.objectness, p.scene_id) for p in predictions
                 if p.semantic_class is not None]
    det_gts = [(o.box, o.semantic_class, s.scene_id) for s in scenes for o in s.objects]
    return EvalReport(records, metrics, map_at_iou(det_preds, det_gts, map_threshold), map_threshold,
                      tuple(thresholds))


# ---------------------------------------------------------------------------
# prediction files


def predictions_to_json(preds: Sequence[Prediction]) -> list[dict]:
    return [{"scene_id": p.scene_id,
             "box": {"center": list(p.box.center), "lengths": list(p.box.lengths)},
             "class": p.semantic_class, "objectness": p.objectness, "caption": p.caption}
            for p in preds]


def save_predictions(preds: Sequence[Prediction], path) -> None:
    Path(path).write_text(json.dumps(predictions_to_json(preds), indent=1) + "\n", encoding="utf-8")


def load_predictions(path) -> list[Prediction]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, list):
        raise ValidationError("prediction file must hold an array", "$")
    out = []
    for i, item in enumerate(raw):
        where = f"[{i}]"
        try:
            box = Box3(tuple(item["box"]["center"]), tuple(item["box"]["lengths"]))
            cls = item.get("class")
            if cls is not None and not (isinstance(cls, int) and 0 <= cls < NUM_CLASSES):
                raise ValidationError("class must be null or an integer in [0, 18)", f"{where}.class")
            score = float(item["objectness"])
            if not 0.0 <= score <= 1.0:
                raise ValidationError("objectness must lie in [0, 1]", f"{where}.objectness")
            out.append(Prediction(str(item["scene_id"]), box, cls, score, str(item["caption"])))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"malformed prediction ({e})", where) from None
    return out
