import json

import numpy as np
import pytest

from tumorscope import cli, data, evaluation as ev, models
from tumorscope.tensorcore import RngState


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(d), "--per-class", "20", "--size", "32", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--data", str(synth / "manifest.csv"), "--model", "tlhead", "--size", "32",
            "--epochs", "4", "--out", str(out)]
    assert cli.main(argv) == 0
    return out


# ---------------------------------------------------------------- synth

def test_synth_outputs_and_rerun_identical(tmp_path, capsys):
    argv = ["synth", "--out", str(tmp_path / "a"), "--per-class", "100", "--size", "64", "--seed", "7"]
    assert cli.main(argv) == 0
    assert capsys.readouterr().out.strip().endswith("manifest.csv")
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 300
    assert (tmp_path / "a" / "boxes.csv").is_file()
    argv[2] = str(tmp_path / "b")
    assert cli.main(argv) == 0
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_usage_errors(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--per-class", "0"]) == 2
    assert cli.main(["synth"]) == 2
    assert cli.main(["bogus"]) == 2


# ---------------------------------------------------------------- train

def test_train_outputs(trained):
    for name in ("model.tbck", "stats.csv", "run.cfg", "test_manifest.csv", "report/report.json",
                 "report/confusion_matrix.csv", "report/roc.csv"):
        assert (trained / name).is_file(), name
    lines = (trained / "stats.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,acc,val_loss,val_acc,lr" and len(lines) == 5
    cfg = cli.read_config(trained / "run.cfg")
    assert cfg["model"][0] == "tlhead" and cfg["epochs"][0] == "4" and cfg["batch_size"][0] == "32"
    test = data.load_manifest(trained / "test_manifest.csv")
    assert len(test) == 12 and np.bincount(test.labels).tolist() == [4, 4, 4]


def test_train_tlhead_backbone_frozen(trained):
    model = models.load_checkpoint(trained / "model.tbck")
    cfg = cli.RunConfig(model="tlhead", data="x", out="y", size=32).validate()
    init = cli.build_model(cfg, 3)
    frozen = [i for i, layer in enumerate(init.layers) if not layer.trainable]
    assert frozen
    for i in frozen:
        for name, arr in init.layers[i].params.items():
            assert model.layers[i].params[name].tobytes() == arr.tobytes()
    head = init.layers[-1].params["weight"]
    assert model.layers[-1].params["weight"].tobytes() != head.tobytes()


def test_report_rederivable_from_confusion_csv(trained):
    report = json.loads((trained / "report" / "report.json").read_text())
    again = ev.summarize(ev.read_confusion_csv(trained / "report" / "confusion_matrix.csv"))
    assert report["accuracy"] == again.accuracy and report["macro_f1"] == again.macro_f1
    assert report["precision"] == again.precision and report["recall"] == again.recall


def test_train_deterministic_with_config_file(synth, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# desk run\nmodel = tlhead\ndata = {synth / 'manifest.csv'}\nsize = 32\nepochs = 9\n"
                   "batch-size = 16\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg), "--epochs", "3", "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--epochs", "3", "--out", str(b)]) == 0
    assert (a / "stats.csv").read_bytes() == (b / "stats.csv").read_bytes()
    assert (a / "model.tbck").read_bytes() == (b / "model.tbck").read_bytes()
    resolved = cli.read_config(a / "run.cfg")
    assert resolved["epochs"][0] == "3" and resolved["batch_size"][0] == "16"


def test_train_config_errors(synth, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model = tlhead\nwarp = 9\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(synth / "manifest.csv"), "--out", str(tmp_path)]) == 2
    cfg.write_text("epochs = many\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(synth / "manifest.csv"), "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--data", str(synth / "manifest.csv")]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o")]) == 3
    assert cli.main(["train", "--data", str(synth / "manifest.csv"), "--size", "8", "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_loss_exits_4(synth, tmp_path, capsys):
    argv = ["train", "--data", str(synth / "manifest.csv"), "--model", "cnn3", "--size", "32", "--epochs", "3",
            "--lr", "1e30", "--out", str(tmp_path)]
    assert cli.main(argv) == 4
    assert "epoch" in capsys.readouterr().err


# ---------------------------------------------------------------- crossval

def test_crossval_five_folds(synth, tmp_path):
    argv = ["crossval", "--data", str(synth / "manifest.csv"), "--model", "tlhead", "--size", "32",
            "--epochs", "2", "--k", "5", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    for i in range(5):
        assert (tmp_path / f"fold_{i}" / "report" / "report.json").is_file()
    rows = (tmp_path / "folds.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["fold", "0", "1", "2", "3", "4", "mean", "sd"]
    counts = np.array([[int(v) for v in r.split(",")[1:]] for r in
                       (tmp_path / "fold_counts.csv").read_text().splitlines()[1:]])
    assert (counts.max(axis=0) - counts.min(axis=0) <= 1).all()
    # recheck against the fold plan over the same training pool
    man = data.load_manifest(synth / "manifest.csv")
    pool, _ = ev.stratified_split(man.labels, 0.2, RngState(0).split(cli.STREAM_SPLIT))
    plan = ev.stratified_kfold(man.labels[pool], 5, RngState(0).split(cli.STREAM_FOLDS))
    assert counts.tolist() == [np.bincount(man.labels[pool][f], minlength=3).tolist() for f in plan.folds]


def test_crossval_k1_usage(synth, tmp_path):
    assert cli.main(["crossval", "--data", str(synth / "manifest.csv"), "--k", "1", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- eval

def test_eval_reproduces_train_report(trained, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(trained / "model.tbck"), "--data",
                     str(trained / "test_manifest.csv"), "--report", str(tmp_path)]) == 0
    a = json.loads((trained / "report" / "report.json").read_text())
    b = json.loads((tmp_path / "report.json").read_text())
    for k in ("model", "dataset", "seed", "fold"):
        a.pop(k), b.pop(k)
    assert a == b
    assert (tmp_path / "roc.csv").read_bytes() == (trained / "report" / "roc.csv").read_bytes()


def external_set(synth, root):
    """4-class external set: the synthetic images relabelled plus blank 'normal' scans."""
    man = data.load_manifest(synth / "manifest.csv")
    classes = ["glioma", "meningioma", "normal", "pituitary"]
    relabel = {0: 1, 1: 0, 2: 3}
    records = [(str(man.resolve(p)), relabel[lab]) for p, lab in man.records[::4]]
    g = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(3):
        data.write_pgm(root / f"normal_{i}.pgm", np.clip(0.1 + g.normal(0, 0.02, (32, 32)), 0, 1))
        records.append((f"normal_{i}.pgm", 2))
    data.write_manifest(data.DatasetManifest(records, classes, root), root / "manifest.csv")
    return root / "manifest.csv", len(records) - 3


def test_eval_external_excludes_normal(trained, synth, tmp_path):
    manifest, n = external_set(synth, tmp_path / "ext")
    ckpt = str(trained / "model.tbck")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(manifest), "--report", str(tmp_path / "r")]) == 5
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(manifest), "--exclude", "normal",
                     "--report", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["external"] is True and rep["n"] == n and len(rep["confusion_matrix"]) == 3
    cmap = tmp_path / "map.txt"
    cmap.write_text("glioma = glioma\nmeningioma = meningioma\npituitary = pituitary\nnormal = nothing\n")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", str(manifest), "--class-map", str(cmap),
                     "--report", str(tmp_path / "r2")]) == 5


def test_eval_io_and_corruption(trained, tmp_path, capsys):
    test = str(trained / "test_manifest.csv")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.tbck"), "--data", test,
                     "--report", str(tmp_path)]) == 3
    blob = (trained / "model.tbck").read_bytes()
    for name, payload, code in (("magic", b"XXXX" + blob[4:], "bad_magic"),
                                ("short", blob[: len(blob) // 2], "truncated"),
                                ("version", blob[:4] + (99).to_bytes(4, "little") + blob[8:], "version_mismatch")):
        (tmp_path / name).write_bytes(payload)
        capsys.readouterr()
        assert cli.main(["eval", "--checkpoint", str(tmp_path / name), "--data", test,
                         "--report", str(tmp_path / "r")]) == 3
        assert code in capsys.readouterr().err


def test_eval_class_count_mismatch(trained, tmp_path):
    root = tmp_path / "two"
    root.mkdir()
    data.write_pgm(root / "a.pgm", np.zeros((32, 32)))
    data.write_manifest(data.DatasetManifest([("a.pgm", 0), ("a.pgm", 1)], ["x", "y"], root), root / "manifest.csv")
    assert cli.main(["eval", "--checkpoint", str(trained / "model.tbck"), "--data", str(root / "manifest.csv"),
                     "--report", str(tmp_path / "r")]) == 5


# ---------------------------------------------------------------- regions

def test_regions_proposals_only_and_recheck(synth, tmp_path):
    image = synth / "images" / "pituitary_00002.pgm"
    assert cli.main(["regions", "--image", str(image), "--boxes", str(synth / "boxes.csv"),
                     "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["kept_count"] > 0 and not summary["classified"]
    assert (tmp_path / "proposals.csv").read_text().splitlines()[0] == "x0,y0,x1,y1,score"
    kept = (tmp_path / "kept.csv").read_text().splitlines()
    assert kept[0] == "x0,y0,x1,y1,score,gt_index,iou"
    from tumorscope.regions import Box, iou
    gt = Box(*summary["ground_truth"][0]["box"])
    for row in kept[1:]:
        x0, y0, x1, y1 = (int(v) for v in row.split(",")[:4])
        assert iou(Box(x0, y0, x1, y1), gt) > 0.7


def test_regions_with_checkpoint(synth, trained, tmp_path):
    image = synth / "images" / "glioma_00001.pgm"
    assert cli.main(["regions", "--image", str(image), "--boxes", str(synth / "boxes.csv"),
                     "--checkpoint", str(trained / "model.tbck"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["classified"]
    assert (tmp_path / "kept.csv").read_text().splitlines()[0].endswith(",class,prob")


def test_regions_usage_errors(synth, tmp_path, capsys):
    image = str(synth / "images" / "glioma_00001.pgm")
    assert cli.main(["regions", "--image", image, "--boxes", str(synth / "boxes.csv"), "--iou", "1.01",
                     "--out", str(tmp_path)]) == 2
    bad = tmp_path / "boxes.csv"
    bad.write_text("image_path,x0,y0,x1,y1,label\na.pgm,0,0,4,4,0\na.pgm,0,0,four,4,0\n")
    capsys.readouterr()
    assert cli.main(["regions", "--image", image, "--boxes", str(bad), "--out", str(tmp_path)]) == 2
    assert ":3:" in capsys.readouterr().err
    assert cli.main(["regions", "--image", image, "--boxes", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 3
