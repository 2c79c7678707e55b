import csv
import io
import json

import numpy as np
import pytest

from stsun.cli import main
from stsun.data import read_split

DESK_MODEL = {"H": 16, "W": 16, "T": 2, "C_e": 4, "C_a": 4, "heads": 2, "hyper_heads": 2, "hyper_depth": 1,
              "encoder_depth": 1, "decoder_depth": 1}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def stderr_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"name": "scd", "seed": 3, "task": "SCD", "T1": 2, "H1": 16, "W1": 16,
            "categories": ["background", "building", "forest"], "n_train": 8, "n_val": 4, "n_test": 4}
    assert main(["synth", "--spec", write_json(root / "spec.json", spec), "--out", str(root / "data")]) == 0
    run = {"seed": 0, "output_dir": str(root / "run"), "model": DESK_MODEL,
           "train": {"lr": 2e-3, "max_steps": 4, "batch_size": 4},
           "datasets": [{"path": str(root / "data"), "task": "SCD"}]}
    cfg = write_json(root / "run.json", run)
    assert main(["train", "--config", cfg]) == 0
    return root, cfg


def test_train_writes_artifacts(trained):
    root, _ = trained
    out = root / "run"
    assert sorted(p.name for p in out.iterdir()) == ["metrics.csv", "model.stsn", "run.json"]
    table = rows((out / "metrics.csv").read_text())
    assert table and set(table[0]) == {"epoch", "dataset", "task", "loss", "P", "R", "F1", "IoU", "OA", "lr"}
    assert all(np.isfinite(float(r["loss"])) for r in table)


def test_eval_reports_per_class_and_change_scores(trained, capsys):
    root, _ = trained
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(root / "run" / "model.stsn"), "--dataset", str(root / "data"),
                 "--out", str(root / "ev")]) == 0
    table = rows(capsys.readouterr().out)
    assert [r["category"] for r in table] == ["background", "building", "forest", "mean"]
    assert table[-1]["SCS"] != "" and table[0]["SCS"] == ""
    assert (root / "ev" / "metrics.csv").read_text() == "".join(
        ",".join(r.values()) + "\n" for r in [dict(zip(table[0], table[0]))] + table)


def test_permuted_categories_permute_rows(trained, capsys):
    root, _ = trained
    ckpt, data = str(root / "run" / "model.stsn"), str(root / "data")
    capsys.readouterr()
    assert main(["eval", "--ckpt", ckpt, "--dataset", data]) == 0
    base = {r["category"]: r for r in rows(capsys.readouterr().out)}
    assert main(["eval", "--ckpt", ckpt, "--dataset", data, "--categories", "forest,background,building"]) == 0
    perm = rows(capsys.readouterr().out)
    assert [r["category"] for r in perm] == ["forest", "background", "building", "mean"]
    for r in perm[:-1]:
        assert {k: r[k] for k in ("P", "R", "F1", "IoU", "OA")} == \
               {k: base[r["category"]][k] for k in ("P", "R", "F1", "IoU", "OA")}


def test_predict_writes_maps_and_pgm(trained):
    root, _ = trained
    out = root / "pred"
    assert main(["predict", "--ckpt", str(root / "run" / "model.stsn"), "--dataset", str(root / "data"),
                 "--out", str(out), "--pgm"]) == 0
    info = json.loads((out / "predictions.json").read_text())
    assert info["shape"] == [4, 2, 16, 16]
    maps = np.frombuffer((out / "labels.u8").read_bytes(), np.uint8).reshape(info["shape"])
    assert maps.max() < 3
    pgm = (out / "pgm" / "sample0003_t1.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n") and len(pgm) == len(b"P5\n16 16\n255\n") + 256
    assert len(list((out / "pgm").iterdir())) == 8


def test_exit_codes(trained, tmp_path, capsys):
    root, cfg = trained
    bad = json.loads((root / "run.json").read_text())
    bad["bogus"] = 1
    assert main(["train", "--config", write_json(tmp_path / "bad.json", bad)]) == 1
    assert stderr_error(capsys)["error"] == "validation"

    junk = tmp_path / "junk.stsn"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--ckpt", str(junk), "--dataset", str(root / "data")]) == 3
    assert stderr_error(capsys)["exit_code"] == 3

    ckpt = str(root / "run" / "model.stsn")
    assert main(["eval", "--ckpt", ckpt, "--dataset", str(tmp_path / "nowhere")]) == 3
    assert main(["eval", "--ckpt", ckpt, "--dataset", str(root / "data"), "--categories", "no-such-name"]) == 1
    assert main(["eval", "--ckpt", ckpt, "--dataset", str(root / "data"), "--categories", "water,building,forest"]) == 1


def test_non_finite_input_and_divergence(trained, tmp_path, capsys):
    root, _ = trained
    data = tmp_path / "data"
    main(["synth", "--spec", write_json(tmp_path / "s.json", {"name": "b", "task": "BCD", "T1": 2, "H1": 16,
          "W1": 16, "categories": ["change"], "n_train": 8, "n_val": 0, "n_test": 0}), "--out", str(data)])
    run = {"output_dir": str(tmp_path / "o"), "model": DESK_MODEL,
           "train": {"lr": 1e250, "max_steps": 5, "augment": False}, "datasets": [{"path": str(data)}]}
    capsys.readouterr()
    assert main(["train", "--config", write_json(tmp_path / "r.json", run)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and json.loads(err[0])["error"] == "numeric"
    assert "step" in json.loads(err[0])["message"]

    img = data / "train" / "images.f32"
    raw = np.frombuffer(img.read_bytes(), np.float32).copy()
    raw[0] = np.inf
    img.write_bytes(raw.tobytes())
    run["train"]["lr"] = 1e-3
    assert main(["train", "--config", write_json(tmp_path / "r.json", run)]) == 1
    assert "non-finite" in stderr_error(capsys)["message"]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "training"]) == 0
    out = capsys.readouterr().out
    assert "loss_binary" in out and "FAIL" not in out


def test_synth_output_is_readable(trained):
    root, _ = trained
    ds = read_split(root / "data" / "test")
    assert ds.images.shape == (4, 2, 3, 16, 16) and ds.manifest.categories == ["background", "building", "forest"]
