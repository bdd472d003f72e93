"""Command-line entry point: ``densecap3d <command> ...``.

Commands: train, eval, caption, retrieve, build-index, synth.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from densecap3d import synthetic
from densecap3d.capmetrics import evaluate, save_predictions
from densecap3d.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from densecap3d.errors import ArgumentError, CompatibilityError, DensecapError, ValidationError
from densecap3d.model import Model, ModelConfig, predict_scene
from densecap3d.retrieval import RetrievalIndex, retrieve_caption
from densecap3d.scenedata import Vocabulary, load_dataset, load_embeddings, load_scene, oracle_proposals
from densecap3d.training import LossWeights, TrainingConfig, train

log = logging.getLogger("densecap3d")

PATH_KEYS = ("data", "vocab", "embeddings", "checkpoint", "log")
LOG_COLUMNS = ("iteration", "total", "detection", "orientation", "description", "token_accuracy")


# ---------------------------------------------------------------------------
# configuration


def _typed(section: type, raw: dict, path: str) -> dict:
    known = {f.name for f in fields(section)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown fields {unknown}", path)
    return raw


def parse_config(raw: dict, base_dir: Path = Path(".")) -> tuple[TrainingConfig, dict[str, Path]]:
    """Split a config document into a TrainingConfig and resolved file paths.

    Relative paths are taken relative to ``base_dir`` (the config's folder).
    """
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    raw = dict(raw)
    paths = {}
    for key in PATH_KEYS:
        value = raw.pop(key, None)
        if not isinstance(value, str) or not value:
            raise ValidationError("required path is missing", key)
        paths[key] = base_dir / value
    model_raw = raw.pop("model", {})
    weights_raw = raw.pop("weights", {})
    if not isinstance(model_raw, dict) or not isinstance(weights_raw, dict):
        raise ValidationError("must be a JSON object", "model" if not isinstance(model_raw, dict) else "weights")
    _typed(TrainingConfig, raw, "config")
    try:
        model = ModelConfig.from_dict(model_raw)
        weights = LossWeights(**_typed(LossWeights, weights_raw, "weights"))
        cfg = TrainingConfig(**raw, weights=weights, model=model)
    except TypeError as exc:
        raise ValidationError(str(exc), "config") from None
    return cfg, paths


def load_config(path) -> tuple[TrainingConfig, dict[str, Path]]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent)


def _require(path: Path, kind: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(2, f"{kind} not found", str(path))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(config_path) -> Path:
    cfg, paths = load_config(_require(Path(config_path), "config file"))
    for key in ("data", "vocab", "embeddings"):
        _require(paths[key], key)
    scenes = load_dataset(paths["data"])
    vocab = Vocabulary.load(paths["vocab"])
    table = load_embeddings(paths["embeddings"], vocab)
    model = Model.create(cfg.model, vocab, table, seed=cfg.seed)
    rows = []
    run = train(scenes, model, cfg, lambda it, s: rows.append(
        (it, s.total, s.detection, s.orientation, s.description, s.token_accuracy)))
    save_checkpoint(Checkpoint.from_model(model, run.optimizer), paths["checkpoint"])
    lines = ["\t".join(LOG_COLUMNS)] + ["\t".join([str(r[0])] + [repr(float(x)) for x in r[1:]]) for r in rows]
    paths["log"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("trained %d iterations; checkpoint %s", run.iteration, paths["checkpoint"])
    return paths["checkpoint"]


def _check_vocab(ckpt: Checkpoint, data_dir: Path) -> None:
    vocab_file = data_dir / "vocab.txt"
    if vocab_file.exists() and Vocabulary.load(vocab_file).tokens != ckpt.vocab.tokens:
        raise CompatibilityError(f"{vocab_file} differs from the checkpoint vocabulary")


def parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ArgumentError(f"bad IoU list {text!r}") from None
    if not values or any(not 0 <= v < 1 for v in values):
        raise ArgumentError(f"IoU thresholds must lie in [0, 1): {text!r}")
    return values


def cmd_eval(checkpoint, data_dir, thresholds=(0.25, 0.5), out=None, nms_threshold=0.25,
             predictions_out=None):
    ckpt = load_checkpoint(_require(Path(checkpoint), "checkpoint"))
    data_dir = _require(Path(data_dir), "data directory")
    _check_vocab(ckpt, data_dir)
    scenes = load_dataset(data_dir)
    model = ckpt.to_model()
    preds = [p for s in scenes for p in predict_scene(model, s, nms_threshold)]
    report = evaluate(preds, scenes, thresholds)
    if out is not None:
        report.save(out)
    if predictions_out is not None:
        save_predictions(preds, predictions_out)
    return report


def _box_text(box) -> str:
    c = ",".join(f"{v:.3f}" for v in box.center)
    s = ",".join(f"{v:.3f}" for v in box.lengths)
    return f"center=({c}) size=({s})"


def _object_ids(scene, which: str) -> list[int]:
    if which == "all":
        return [o.id for o in scene.objects]
    try:
        oid = int(which)
    except ValueError:
        raise ArgumentError(f"object must be an integer id or 'all', got {which!r}") from None
    if oid not in {o.id for o in scene.objects}:
        raise ArgumentError(f"scene {scene.scene_id} has no object {oid}")
    return [oid]


def cmd_caption(checkpoint, scene_path, which: str = "all") -> list[str]:
    """One line per object: id, box and the greedy caption on its GT box."""
    model = load_checkpoint(_require(Path(checkpoint), "checkpoint")).to_model()
    scene = load_scene(_require(Path(scene_path), "scene file"))
    ids = _object_ids(scene, which)
    proposals = oracle_proposals(scene)
    rows = [i for i, o in enumerate(scene.objects) if o.id in ids]
    words = model.caption_proposals(model.build_graph(proposals), rows) if rows else []
    return [f"{scene.objects[r].id}\t{_box_text(scene.objects[r].box)}\t{' '.join(w)}"
            for r, w in zip(rows, words)]


def load_index(path) -> RetrievalIndex:
    path = _require(Path(path), "retrieval index")
    if path.is_dir():
        return RetrievalIndex.from_scenes(load_dataset(path))
    return RetrievalIndex.load(path)


def cmd_retrieve(index_path, scene_path, which: str) -> list[str]:
    index = load_index(index_path)
    scene = load_scene(_require(Path(scene_path), "scene file"))
    return [f"{oid}\t{retrieve_caption(scene.object_by_id(oid).feature, index)}"
            for oid in _object_ids(scene, which)]


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densecap3d", description="Relational 3D dense captioning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="caption a dataset and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", default="0.25,0.5")
    p.add_argument("--out", required=True)
    p.add_argument("--nms-threshold", type=float, default=0.25)
    p.add_argument("--predictions", help="also write the predictions to this JSON file")

    p = sub.add_parser("caption", help="print captions for objects of one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--object", default="all")

    p = sub.add_parser("retrieve", help="nearest-feature caption retrieval")
    p.add_argument("--index", required=True, help="index JSON file or a dataset directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--object", required=True)

    p = sub.add_parser("build-index", help="write a retrieval index from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic relation-caption dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--classes", type=int, default=18)
    p.add_argument("--layout", choices=("scatter", "pairs"), default="scatter")
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        print(cmd_train(args.config))
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.data, parse_thresholds(args.iou), args.out,
                          args.nms_threshold, args.predictions)
        for name, value in report.columns().items():
            print(f"{name}\t{value:.4f}")
    elif args.command == "caption":
        print("\n".join(cmd_caption(args.checkpoint, args.scene, args.object)))
    elif args.command == "retrieve":
        print("\n".join(cmd_retrieve(args.index, args.scene, args.object)))
    elif args.command == "build-index":
        RetrievalIndex.from_scenes(load_dataset(_require(Path(args.data), "data directory"))).save(args.out)
    elif args.command == "synth":
        world = synthetic.World.create(args.seed)
        scenes = synthetic.make_dataset(args.scenes, args.objects, args.seed, world, args.classes,
                                        layout=args.layout)
        written = synthetic.write_dataset(args.out, scenes, world)
        print(json.dumps({k: str(v) for k, v in written.items()}))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except OSError as exc:
        name = exc.filename or ""
        print(f"error: {exc.strerror or exc}: {name}", file=sys.stderr)
        return 1
    except DensecapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
