import numpy as np
import pytest

from sgts.checkpoint import load_checkpoint, save_checkpoint
from sgts.cli import (CSV_HEADER, PALETTE, main, read_metrics_csv,
                      rows_to_csv)
from sgts.config import RunConfig, parse_config, serialize_config
from sgts.data import read_pgm, read_ppm, write_ppm

SMALL_CONFIG = """\
seed = 42
image_size = 32
epochs = 4
batch_size = 4
patience = 10
train_size = 6
val_size = 3
test_size = 3
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "data"
    rc = main(["gen-data", "--out", str(root), "--seed", "42",
               "--train", "6", "--val", "3", "--test", "3", "--size", "32"])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    cfg_path = out / "run.cfg"
    cfg_path.write_text(SMALL_CONFIG)
    rc = main(["train", "--config", str(cfg_path), "--data", str(dataset),
               "--out", str(out)])
    assert rc == 0
    return out


def test_gen_data_layout_and_determinism(dataset, tmp_path):
    manifest = (dataset / "manifest.txt").read_text().strip().splitlines()
    assert len(manifest) == 12
    other = tmp_path / "again"
    main(["gen-data", "--out", str(other), "--seed", "42", "--train", "6",
          "--val", "3", "--test", "3", "--size", "32"])
    assert (dataset / "manifest.txt").read_bytes() == \
        (other / "manifest.txt").read_bytes()
    assert (dataset / "train" / "0002.img.ppm").read_bytes() == \
        (other / "train" / "0002.img.ppm").read_bytes()


def test_gen_data_rejects_bad_fraction(tmp_path):
    rc = main(["gen-data", "--out", str(tmp_path / "x"),
               "--annot-fraction", "0"])
    assert rc == 1


def test_config_roundtrip_fixed_point():
    cfg = parse_config(SMALL_CONFIG)
    text = serialize_config(cfg)
    assert serialize_config(parse_config(text)) == text
    assert cfg.epochs == 4
    assert cfg.co_training is True  # default survives partial config


def test_train_outputs(trained):
    for name in ["metrics.csv", "last.ckpt", "best.ckpt", "curves.svg"]:
        assert (trained / name).exists()
    rows = read_metrics_csv(trained / "metrics.csv")
    assert len(rows) == 4
    assert [r["epoch"] for r in rows] == [0, 1, 2, 3]
    assert rows[0]["phase"] == "warmup"
    assert rows[0]["alpha"] == 1.0
    assert rows[-1]["phase"] == "cotrain"
    header = (trained / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_HEADER)


def test_metrics_csv_roundtrip(trained):
    rows = read_metrics_csv(trained / "metrics.csv")
    assert rows_to_csv(rows) == (trained / "metrics.csv").read_text()


def test_checkpoint_roundtrip(trained, tmp_path):
    config, state = load_checkpoint(trained / "best.ckpt")
    copy = tmp_path / "copy.ckpt"
    save_checkpoint(copy, config, state)
    assert copy.read_bytes() == (trained / "best.ckpt").read_bytes()
    assert config.epochs == 4
    for tensor in state.student.tensors.values():
        assert tensor.data.dtype == np.float64


def test_eval_report(trained, dataset, tmp_path):
    out = tmp_path / "eval.csv"
    rc = main(["eval", "--checkpoint", str(trained / "best.ckpt"),
               "--data", str(dataset), "--split", "test",
               "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "class,iou_pct,dice_pct"
    assert len(lines) == 6  # 4 classes + mean
    assert lines[-1].startswith("mean,")
    mean_iou = float(lines[-1].split(",")[1])
    assert 0.0 <= mean_iou <= 100.0


def test_infer_writes_mask_and_overlay(trained, dataset, tmp_path):
    prefix = tmp_path / "pred"
    image_path = dataset / "test" / "0000.img.ppm"
    rc = main(["infer", "--checkpoint", str(trained / "best.ckpt"),
               "--image", str(image_path), "--out", str(prefix)])
    assert rc == 0
    mask = read_pgm(f"{prefix}.mask.pgm")
    assert mask.shape == (32, 32)
    assert mask.max() <= 3

    overlay = np.rint(read_ppm(f"{prefix}.overlay.ppm") * 255.0)
    img8 = np.clip(np.rint(read_ppm(image_path) * 255.0), 0, 255)
    stroma = mask == 0
    assert np.array_equal(overlay[:, stroma], img8[:, stroma])
    for cls, color in PALETTE.items():
        sel = mask == cls
        if not sel.any():
            continue
        for ch in range(3):
            expected = np.floor(0.5 * img8[ch][sel] + 0.5 * color[ch] + 0.5)
            assert np.array_equal(overlay[ch][sel], expected)


def test_report_svg(trained, tmp_path):
    out = tmp_path / "curves.svg"
    rc = main(["report", "--metrics", str(trained / "metrics.csv"),
               "--out", str(out)])
    assert rc == 0
    svg = out.read_text()
    assert svg.startswith("<svg")
    rows = read_metrics_csv(trained / "metrics.csv")
    # every polyline carries one point per epoch row
    import re
    for points in re.findall(r'points="([^"]*)"', svg):
        assert len(points.split()) == len(rows)
    final = rows[-1]["val_mdice"]
    assert repr(final) in svg  # embedded series values match the csv


def test_exit_codes(tmp_path, dataset):
    # usage error
    assert main(["definitely-not-a-command"]) == 1
    # config error
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("epochs = -3\n")
    assert main(["train", "--config", str(bad_cfg), "--data", str(dataset),
                 "--out", str(tmp_path / "o")]) == 1
    unknown = tmp_path / "unk.cfg"
    unknown.write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(unknown), "--data", str(dataset),
                 "--out", str(tmp_path / "o2")]) == 1
    # data errors
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--data", str(dataset), "--out",
                 str(tmp_path / "e.csv")]) == 2
    assert main(["report", "--metrics", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "r.svg")]) == 2
    garbled = tmp_path / "garbled.csv"
    garbled.write_text("epoch,phase\n0,warmup\n")
    assert main(["report", "--metrics", str(garbled),
                 "--out", str(tmp_path / "r2.svg")]) == 2


def test_resume_matches_uninterrupted(tmp_path, dataset):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(SMALL_CONFIG)
    full = tmp_path / "full"
    assert main(["train", "--config", str(cfg_path), "--data", str(dataset),
                 "--out", str(full)]) == 0

    part = tmp_path / "part"
    assert main(["train", "--config", str(cfg_path), "--data", str(dataset),
                 "--out", str(part), "--stop-after-epoch", "1"]) == 0
    assert len(read_metrics_csv(part / "metrics.csv")) == 2
    assert main(["train", "--data", str(dataset), "--out", str(part),
                 "--resume", str(part / "last.ckpt")]) == 0

    assert (part / "metrics.csv").read_bytes() == \
        (full / "metrics.csv").read_bytes()
