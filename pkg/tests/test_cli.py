import csv
import io
import json

import numpy as np
import pytest

from sproad import cli, cnn, imaging, pipeline, synthetic
from sproad.config import parse

SMALL_CFG = "slic.rows = 4\nslic.cols = 12\ncnn.epochs = 30\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synthetic.write_dataset(root / "ds", 10, 48, 144, seed=2)
    (root / "small.cfg").write_text(SMALL_CFG)
    assert cli.main(["train", "--dataset", str(root / "ds"), "--config", str(root / "small.cfg"),
                     "--out-model", str(root / "m.bin")]) == 0
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_superpixel_command(workspace, capsys):
    img = workspace / "ds" / "image_2" / "um_000000.png"
    assert run("superpixel", "--input", img, "--config", workspace / "small.cfg",
               "--out-seg", workspace / "s.pgm", "--out-meta", workspace / "s.json") == 0
    assert (workspace / "s.pgm").exists() and (workspace / "s.json").exists()
    assert "48 superpixels" in capsys.readouterr().out


def test_missing_input_is_io_error(workspace):
    assert run("superpixel", "--input", workspace / "nope.png", "--out-seg", workspace / "x.pgm",
               "--out-meta", workspace / "x.json") == 2


def test_unknown_config_key(workspace, capsys):
    bad = workspace / "bad.cfg"
    bad.write_text("slic.colz = 3\n")
    img = workspace / "ds" / "image_2" / "um_000000.png"
    assert run("superpixel", "--input", img, "--config", bad, "--out-seg", workspace / "x.pgm",
               "--out-meta", workspace / "x.json") == 1
    assert "slic.colz" in capsys.readouterr().err


def test_usage_errors(capsys):
    # argparse errors leave through SystemExit with the usage code
    with pytest.raises(SystemExit) as exc:
        cli.main(["infer"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0


def test_bad_thread_setting(workspace, monkeypatch):
    monkeypatch.setenv("SPROAD_THREADS", "lots")
    assert run("eval", "--pred-dir", workspace, "--gt-dir", workspace) == 1


def test_train_outputs(workspace):
    assert (workspace / "m.bin").read_bytes().startswith(cnn.MAGIC)
    rows = list(csv.reader(open(f"{workspace / 'm.bin'}.csv")))
    assert rows[0] == ["epoch", "mean_loss", "sp_accuracy"] and len(rows) == 31


def test_train_without_ground_truth(tmp_path):
    synthetic.write_dataset(tmp_path / "ds", 3, 48, 144, with_gt=False)
    assert run("train", "--dataset", tmp_path / "ds", "--out-model", tmp_path / "m.bin") == 3


def test_train_seed_determinism(workspace, tmp_path):
    logs = []
    for i in range(2):
        out = tmp_path / f"m{i}.bin"
        assert run("train", "--dataset", workspace / "ds", "--config", workspace / "small.cfg",
                   "--out-model", out, "--seed", 5, "--log", tmp_path / f"l{i}.csv") == 0
        logs.append([r[1] for r in csv.reader(open(tmp_path / f"l{i}.csv"))])
    assert logs[0] == logs[1]


def test_infer_unrefined_matches_pipeline(workspace):
    img_path = workspace / "ds" / "image_2" / "umm_000001.png"
    out = workspace / "inf"
    out.mkdir(exist_ok=True)
    assert run("infer", "--input", img_path, "--model", workspace / "m.bin", "--config", workspace / "small.cfg",
               "--out-mask", out / "mask.png", "--out-prob", out / "prob.pgm", "--report", out / "r.json") == 0
    image = imaging.load_image(img_path)
    res = pipeline.infer(image, cnn.load_model(workspace / "m.bin"), parse(SMALL_CFG), "none")
    expected = np.where(res.sp_labels == imaging.ROAD, imaging.ROAD, imaging.NON_ROAD)[res.seg.sp_ids]
    assert np.array_equal(imaging.load_mask(out / "mask.png").labels, expected)
    report = json.loads((out / "r.json").read_text())
    assert report["refine"] == "none" and set(report["timings_s"]) >= {"superpixel", "features", "cnn", "total"}


def test_infer_meanfield_without_coupling(workspace, tmp_path):
    cfg = tmp_path / "mf.cfg"
    cfg.write_text(SMALL_CFG + "crf.w1 = 0\ncrf.w2 = 0\n")
    img_path = workspace / "ds" / "image_2" / "uu_000002.png"
    common = ["--input", img_path, "--model", workspace / "m.bin", "--config", cfg]
    assert run("infer", *common, "--out-mask", tmp_path / "a.png", "--out-prob", tmp_path / "a.pgm") == 0
    assert run("infer", *common, "--refine", "meanfield", "--out-mask", tmp_path / "b.png",
               "--out-prob", tmp_path / "b.pgm") == 0
    assert np.array_equal(imaging.load_mask(tmp_path / "a.png").labels, imaging.load_mask(tmp_path / "b.png").labels)


@pytest.mark.parametrize("method", ["icm", "bp", "meanfield"])
def test_infer_refined_with_metrics(workspace, tmp_path, method):
    stem = "um_000003"
    gt = workspace / "ds" / "gt_image_2" / f"{stem}.png"
    assert run("infer", "--input", workspace / "ds" / "image_2" / f"{stem}.png", "--model", workspace / "m.bin",
               "--config", workspace / "small.cfg", "--refine", method, "--gt", gt, "--overlay", tmp_path / "o.png",
               "--out-mask", tmp_path / "m.png", "--out-prob", tmp_path / "p.pgm", "--report", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["refinement"]["engine"] == method
    assert 0.99 < report["metrics"]["ACC"] <= 1.0
    assert imaging.load_image(tmp_path / "o.png").shape == (48, 144, 3)


def test_overlay_needs_ground_truth(workspace, tmp_path):
    assert run("infer", "--input", workspace / "ds" / "image_2" / "um_000000.png", "--model", workspace / "m.bin",
               "--out-mask", tmp_path / "m.png", "--out-prob", tmp_path / "p.pgm", "--overlay", tmp_path / "o.png") == 1


def test_infer_bad_model(workspace, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("infer", "--input", workspace / "ds" / "image_2" / "um_000000.png", "--model", bad,
               "--out-mask", tmp_path / "m.png", "--out-prob", tmp_path / "p.pgm") == 3


def test_eval_identity(workspace, tmp_path, capsys):
    gt_dir = workspace / "ds" / "gt_image_2"
    assert run("eval", "--pred-dir", gt_dir, "--gt-dir", gt_dir, "--out-csv", tmp_path / "r.csv",
               "--out-json", tmp_path / "r.json") == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 11 and rows[-1]["image"] == "mean" and float(rows[-1]["ACC"]) == 1.0
    assert json.loads((tmp_path / "r.json").read_text())["mean"]["ACC"] == 1.0


def test_eval_three_images_with_probabilities(workspace, tmp_path, capsys):
    pred, gt, prob = (tmp_path / d for d in ("pred", "gt", "prob"))
    for d in (pred, gt, prob):
        d.mkdir()
    for i, (_, label_map) in enumerate(synthetic.scenes(3, 20, 30, seed=4)):
        imaging.save_mask(label_map, gt / f"um_road_{i:06d}.png")
        imaging.save_mask(label_map, pred / f"um_{i:06d}.png")
        imaging.save_probability((label_map.labels == 1) * 0.9, prob / f"um_{i:06d}.pgm")
    assert run("eval", "--pred-dir", pred, "--gt-dir", gt, "--prob-dir", prob) == 0
    table = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert len(table) == 5 and [r[0] for r in table[1:]] == ["um_000000", "um_000001", "um_000002", "mean"]
    assert all(float(r[7]) == 1.0 for r in table[1:])


def test_eval_orphans(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    pred.mkdir()
    imaging.save_mask(imaging.LabelMap.from_labels(np.zeros((4, 4), dtype=np.uint8)), pred / "zz_000009.png")
    assert run("eval", "--pred-dir", pred, "--gt-dir", workspace / "ds" / "gt_image_2") == 3
    err = capsys.readouterr().err
    assert "zz_000009" in err and "um_000000" in err


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--seed", 0, 1, 2) == 0
    out = capsys.readouterr().out
    assert out.count("max relative error") == 3 and "FAILED" not in out
    assert run("gradcheck", "--seed", 0, "--rows", 2, "--cols", 3, "--corrupt-backward") == 3
