import json

import pytest

from densecap3d.cli import cmd_caption, cmd_eval, cmd_train, load_config, main, parse_config, parse_thresholds
from densecap3d.errors import ArgumentError, CompatibilityError, ValidationError
from densecap3d.scenedata import load_dataset, load_scene, save_scene, scene_to_dict, scene_from_dict

SMALL_MODEL = {"k_neighbors": 2, "fusion_hidden": 24, "language_hidden": 24, "attention_dim": 12,
               "message_hidden": 12, "orientation_hidden": 12}


def write_config(folder, name="cfg.json", **overrides):
    raw = {"data": "data", "vocab": "data/vocab.txt", "embeddings": "data/embeddings.txt",
           "checkpoint": "model.ckpt", "log": "train.tsv", "max_iterations": 200, "seed": 1,
           "augment": False, "model": SMALL_MODEL}
    raw.update(overrides)
    path = folder / name
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--scenes", "3", "--objects", "3", "--classes", "6",
                 "--seed", "4"]) == 0
    cmd_train(write_config(root))
    return root


def test_train_writes_checkpoint_and_log(workspace):
    assert (workspace / "model.ckpt").stat().st_size > 0
    lines = (workspace / "train.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["iteration", "total", "detection", "orientation", "description",
                                    "token_accuracy"]
    assert len(lines) == 201
    desc = [float(line.split("\t")[4]) for line in lines[1:]]
    assert desc[-1] < desc[0]


def test_training_twice_gives_identical_bytes(workspace):
    cmd_train(write_config(workspace, "again.json", checkpoint="again.ckpt", log="again.tsv"))
    assert (workspace / "again.ckpt").read_bytes() == (workspace / "model.ckpt").read_bytes()


@pytest.mark.parametrize("lr", [0, -1e-3])
def test_non_positive_lr_rejected(tmp_path, lr):
    with pytest.raises(ValidationError):
        load_config(write_config(tmp_path, lr=lr))


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError, match="vocab"):
        parse_config({"data": "d", "embeddings": "e", "checkpoint": "c", "log": "l"})
    with pytest.raises(ValidationError):
        load_config(write_config(tmp_path, colour="blue"))
    with pytest.raises(ValidationError):
        load_config(write_config(tmp_path, model={"hidden": 3}))
    cfg, paths = load_config(write_config(tmp_path))
    assert paths["vocab"] == tmp_path / "data" / "vocab.txt"
    assert cfg.model.fusion_hidden == 24


def test_missing_files_exit_with_io_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err
    write_config(tmp_path)
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 1


def test_caption_all_and_single(workspace):
    scene = sorted((workspace / "data").glob("*.json"))[0]
    lines = cmd_caption(workspace / "model.ckpt", scene, "all")
    assert len(lines) == 3
    ids = [line.split("\t")[0] for line in lines]
    one = cmd_caption(workspace / "model.ckpt", scene, ids[1])
    assert one == [lines[1]]
    assert cmd_caption(workspace / "model.ckpt", scene, "all") == lines


def test_caption_unknown_object(workspace, capsys):
    scene = sorted((workspace / "data").glob("*.json"))[0]
    with pytest.raises(ArgumentError):
        cmd_caption(workspace / "model.ckpt", scene, "99")
    assert main(["caption", "--checkpoint", str(workspace / "model.ckpt"), "--scene", str(scene),
                 "--object", "99"]) == 2
    assert "ArgumentError" in capsys.readouterr().err


def test_eval_report_columns(workspace, capsys):
    out = workspace / "report.json"
    assert main(["eval", "--checkpoint", str(workspace / "model.ckpt"), "--data", str(workspace / "data"),
                 "--iou", "0.25,0.5", "--out", str(out)]) == 0
    cols = json.loads(out.read_text())["columns"]
    for metric in ("C", "B-4", "M", "R"):
        assert f"{metric}@0.25IoU" in cols and f"{metric}@0.5IoU" in cols
    assert "mAP@0.5IoU" in cols
    assert "C@0.5IoU" in capsys.readouterr().out


def test_eval_rejects_other_vocabulary(workspace, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for scene in load_dataset(workspace / "data"):
        save_scene(scene, data / f"{scene.scene_id}.json")
    (data / "vocab.txt").write_text("zebra\n", encoding="utf-8")
    with pytest.raises(CompatibilityError):
        cmd_eval(workspace / "model.ckpt", data)


def test_eval_with_no_detections_scores_zero(workspace, tmp_path):
    data = tmp_path / "empty"
    data.mkdir()
    for scene in load_dataset(workspace / "data"):
        raw = scene_to_dict(scene)
        raw["detections"] = []
        save_scene(scene_from_dict(raw), data / f"{scene.scene_id}.json")
    report = cmd_eval(workspace / "model.ckpt", data)
    assert all(v == 0.0 for v in report.columns().values())


def test_threshold_parsing():
    assert parse_thresholds("0.25,0.5") == (0.25, 0.5)
    for bad in ("", "x", "1.5"):
        with pytest.raises(ArgumentError):
            parse_thresholds(bad)


def test_retrieve_and_build_index(workspace, capsys):
    scene_path = sorted((workspace / "data").glob("*.json"))[1]
    scene = load_scene(scene_path)
    index = workspace / "index.json"
    assert main(["build-index", "--data", str(workspace / "data"), "--out", str(index)]) == 0
    obj = scene.objects[2]
    for source in (index, workspace / "data"):
        capsys.readouterr()
        assert main(["retrieve", "--index", str(source), "--scene", str(scene_path),
                     "--object", str(obj.id)]) == 0
        assert capsys.readouterr().out.strip() == f"{obj.id}\t{obj.captions[0]}"
