import json

import pytest

from cosingan.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_STATE, main
from cosingan.experiment import TRAINING_SETS

_STAGE = {"epochs": 2, "batch_size": 2, "lr_init": 1e-3, "lr_decay_start_epoch": 1, "lr_decay_per_epoch_frac": 0.5}
_PROBE = {"epochs": 2, "batch_size": 4, "lr_init": 1e-3, "lr_decay_start_epoch": 1, "lr_decay_per_epoch_frac": 0.5}
TINY = {
    "schedule": {"max_size": 32, "n_scales": 2},
    "super_cfg": _STAGE, "restore_cfg": _STAGE,
    "gen_base_width": 4, "disc_base_width": 4,
    "loss_weights": {"wppl": 10.0, "ms_ssim": 1.0, "ms_fvl": 0.0, "ms_ful": 0.0},
    "oracle": _PROBE, "segmenter": _PROBE, "classifier": _PROBE,
    "experiment": {"n_train": 12, "n_test": 6},
    "phantom": {"slices_per_scan": 3},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_phantom_and_dump_augment(tmp_path, tiny):
    assert main(["phantom", "--config", tiny, "--n", "6", "--out", str(tmp_path / "ph")]) == EXIT_OK
    assert len(list((tmp_path / "ph").glob("*_image.png"))) == 6
    out = tmp_path / "aug"
    assert main(["--config", tiny, "dump-augment", "--data", str(tmp_path / "ph"), "--n", "3",
                 "--out", str(out)]) == EXIT_OK
    assert {p.name for p in out.glob("*.png")} == {f"augment_scale{i}_{k}.png" for i in (0, 1) for k in ("SA", "WA")}
    draws = json.loads((out / "augment_draws.json").read_text())
    assert len(draws) == 2 * 2 * 3
    assert not any(d["elastic"] for d in draws if d["kind"] == "WA")


def test_train_synthesize_evaluate(tmp_path, tiny, capsys):
    data = str(tmp_path / "data")
    assert main(["phantom", "--config", tiny, "--n", "12", "--out", data]) == EXIT_OK
    test = str(tmp_path / "test")
    assert main(["phantom", "--config", tiny, "--n", "6", "--split", "test", "--first-scan", "50",
                 "--out", test]) == EXIT_OK
    for k, idx in (("m0", "0"), ("m1", "3")):
        assert main(["train", "--config", tiny, "--data", data, "--index", idx,
                     "--out", str(tmp_path / k)]) == EXIT_OK
    assert len(list((tmp_path / "m0" / "ckpt").glob("scale*.bin"))) == 4
    assert (tmp_path / "m0" / "logs" / "losses.csv").exists()
    syn = tmp_path / "syn"
    assert main(["synthesize", "--config", tiny, "--model", str(tmp_path / "m0"), "--model2",
                 str(tmp_path / "m1"), "--masks", data, "--mode", "if-st", "--out", str(syn)]) == EXIT_OK
    man = json.loads((syn / "manifest.json").read_text())
    assert man["mode"] == "IF_ST" and len(man["samples"]) == 12
    ev = tmp_path / "ev"
    assert main(["evaluate", "--config", tiny, "--train", str(syn), "--test", test, "--probe", "segmenter",
                 "--quality", str(syn), "--out", str(ev)]) == EXIT_OK
    rep = json.loads((ev / "eval_report.json").read_text())
    assert "segmenter" in rep["probes"] and "syn" in rep["image_quality"]
    assert "infection DSC" in capsys.readouterr().out


def test_retrain_is_bitwise_identical(tmp_path, tiny):
    data = str(tmp_path / "data")
    main(["phantom", "--config", tiny, "--n", "6", "--out", data])
    for k in ("a", "b"):
        assert main(["train", "--config", tiny, "--data", data, "--out", str(tmp_path / k), "--seed", "3"]) == 0
        assert main(["synthesize", "--config", tiny, "--model", str(tmp_path / k), "--masks", data, "--mode",
                     "rc-st", "--out", str(tmp_path / k / "syn")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 10
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_exit_codes(tmp_path, tiny, monkeypatch):
    assert main(["phantom", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", tiny, "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["synthesize", "--config", tiny, "--model", str(tmp_path / "none"), "--masks", str(tmp_path),
                 "--out", str(tmp_path / "s")]) == EXIT_STATE
    data = str(tmp_path / "data")
    main(["phantom", "--config", tiny, "--n", "6", "--out", data])
    assert main(["train", "--config", tiny, "--data", data, "--index", "99", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", tiny, "--data", data, "--out", str(tmp_path / "m"),
                 "--resume-from", str(tmp_path / "m" / "ckpt" / "scale0_super.bin")]) == EXIT_STATE

    from cosingan import trainer as tr

    real = tr.adv_d_objective
    monkeypatch.setattr(tr, "adv_d_objective", lambda *a: real(*a) * float("nan"))
    assert main(["train", "--config", tiny, "--data", data, "--out", str(tmp_path / "div")]) == EXIT_DIVERGED


def test_partial_model_rejected(tmp_path, tiny):
    data = str(tmp_path / "data")
    main(["phantom", "--config", tiny, "--n", "6", "--out", data])
    assert main(["train", "--config", tiny, "--data", data, "--out", str(tmp_path / "m")]) == 0
    (tmp_path / "m" / "ckpt" / "scale1_restore.bin").unlink()
    assert main(["synthesize", "--config", tiny, "--model", str(tmp_path / "m"), "--masks", data,
                 "--out", str(tmp_path / "s")]) == EXIT_STATE
    # resume completes the missing stage
    assert main(["train", "--config", tiny, "--data", data, "--out", str(tmp_path / "m"), "--resume"]) == 0
    assert (tmp_path / "m" / "ckpt" / "scale1_restore.bin").exists()


def test_experiment_report_shape(tmp_path, tiny, capsys):
    assert main(["experiment", "--config", tiny, "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    seg = rep["probes"]["segmenter"]
    assert set(seg) == set(TRAINING_SETS)
    assert all({"lung_dsc", "infection_dsc"} <= set(v) for v in seg.values())
    cls = rep["probes"]["classifier"]
    assert all({"sensitivity", "specificity", "accuracy"} <= set(v) for v in cls.values())
    assert set(rep["corpus_sizes"].values()) == {12}
    assert len(list((tmp_path / "results").glob("*.json"))) == 12
    text = capsys.readouterr().out
    assert all(name in text for name in TRAINING_SETS)
