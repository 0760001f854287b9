import json

from biofuse.cli import main


def _write_config(tmp_path, n_subjects=4, epochs=2, folds=2, extra_eval=None, seed=0):
    paths = {
        "corpus": str(tmp_path / "c.corpus"),
        "dataset": str(tmp_path / "d.ds"),
        "model": str(tmp_path / "m.model"),
        "templates": str(tmp_path / "t.tpl"),
        "report": str(tmp_path / "report.json"),
    }
    cfg = {
        "paths": paths,
        "synth": {
            "n_subjects": n_subjects,
            "n_rounds": 2,
            "dots_per_round": 8,
            "subject_separability": 0.8,
            "noise_sigma": 0.5,
            "seed": seed,
        },
        "nan_policy": {"max_nan_fraction": 0.25},
        "train": {"epochs": epochs, "batch_size": 16, "learning_rate": 0.001, "seed": seed},
        "eval": {"scenario": "s2", "modality": "brain", "fusion": "none",
                 "folds": folds, "seed": seed, **(extra_eval or {})},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path, paths


def test_gen_preprocess_evaluate_smoke(tmp_path, capsys):
    config, paths = _write_config(tmp_path, n_subjects=8)
    assert main(["gen", "--config", str(config)]) == 0
    assert main(["preprocess", "--config", str(config), "--modality", "brain"]) == 0
    assert main(["evaluate", "--config", str(config)]) == 0
    out = capsys.readouterr().out
    assert "evaluate: wrote" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert "pooled" in report and "folds" in report
    assert (tmp_path / "report.csv").exists()


def test_verify_accept_and_reject(tmp_path, capsys):
    config, paths = _write_config(tmp_path)
    assert main(["gen", "--config", str(config)]) == 0
    assert main(["preprocess", "--config", str(config), "--modality", "brain"]) == 0
    assert main(["train", "--config", str(config)]) == 0
    assert main(["enroll", "--config", str(config)]) == 0

    rc = main([
        "verify", "--config", str(config), "--claim", "s00",
        "--sample", paths["dataset"], "--threshold", "-0.5",
    ])
    out = capsys.readouterr().out
    assert rc == 0
    assert "ACCEPT" in out  # the sample is enrolled, so its best match scores 0

    rc = main([
        "verify", "--config", str(config), "--claim", "s00",
        "--sample", paths["dataset"], "--threshold", "0.5",
    ])
    out = capsys.readouterr().out
    assert rc == 0
    assert "REJECT" in out  # similarity scores never exceed 0


def test_missing_config_exits_1(tmp_path, capsys):
    rc = main(["gen", "--config", str(tmp_path / "missing.json")])
    err = capsys.readouterr().err
    assert rc == 1
    assert "missing.json" in err


def test_unknown_flag_exits_1(capsys):
    rc = main(["gen", "--config", "x.json", "--frobnicate"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "usage" in err.lower()


def test_unknown_command_exits_1(capsys):
    rc = main(["explode"])
    assert rc == 1


def test_bad_config_schema_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"paths": {}, "mystery": {}}))
    rc = main(["gen", "--config", str(path)])
    err = capsys.readouterr().err
    assert rc == 1
    assert "mystery" in err


def test_duplicate_paths_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({
        "paths": {"corpus": "same", "dataset": "same"},
        "synth": {"n_subjects": 2, "n_rounds": 1},
    }))
    rc = main(["gen", "--config", str(path)])
    assert rc == 1
    assert "distinct" in capsys.readouterr().err


def test_stage_reruns_are_idempotent(tmp_path):
    config, paths = _write_config(tmp_path, n_subjects=4)
    assert main(["gen", "--config", str(config)]) == 0
    corpus = (tmp_path / "c.corpus").read_bytes()
    assert main(["gen", "--config", str(config)]) == 0
    assert (tmp_path / "c.corpus").read_bytes() == corpus

    assert main(["preprocess", "--config", str(config), "--modality", "brain"]) == 0
    dataset = (tmp_path / "d.ds").read_bytes()
    assert main(["train", "--config", str(config)]) == 0
    model = (tmp_path / "m.model").read_bytes()
    assert main(["preprocess", "--config", str(config), "--modality", "brain"]) == 0
    assert main(["train", "--config", str(config)]) == 0
    assert (tmp_path / "d.ds").read_bytes() == dataset
    assert (tmp_path / "m.model").read_bytes() == model


def test_seed_flag_changes_artifacts(tmp_path):
    config, paths = _write_config(tmp_path, n_subjects=2)
    assert main(["gen", "--config", str(config)]) == 0
    base = (tmp_path / "c.corpus").read_bytes()
    assert main(["gen", "--config", str(config), "--seed", "99"]) == 0
    assert (tmp_path / "c.corpus").read_bytes() != base
    assert main(["gen", "--config", str(config), "--deterministic"]) == 0
    assert (tmp_path / "c.corpus").read_bytes() == base


def test_preprocess_modality_flag_ignores_fusion_config(tmp_path):
    config, paths = _write_config(
        tmp_path, n_subjects=4,
        extra_eval={"modality": "eye-pupil", "fusion": "mean"},
    )
    assert main(["gen", "--config", str(config)]) == 0
    # brain dataset extraction must not collide with the score-fusion eval config
    assert main(["preprocess", "--config", str(config), "--modality", "brain"]) == 0


def test_feature_fusion_train_enroll_verify(tmp_path, capsys):
    config, paths = _write_config(tmp_path, extra_eval={"modality": "fusion-a"})
    brain_ds = str(tmp_path / "brain.ds")
    eye_ds = str(tmp_path / "eye.ds")
    assert main(["gen", "--config", str(config)]) == 0
    assert main(["preprocess", "--config", str(config), "--modality", "brain",
                 "--out", brain_ds]) == 0
    assert main(["preprocess", "--config", str(config), "--modality", "eye-pupil",
                 "--out", eye_ds]) == 0
    assert main(["train", "--config", str(config),
                 "--dataset", brain_ds, "--dataset", eye_ds]) == 0
    assert main(["enroll", "--config", str(config),
                 "--dataset", brain_ds, "--dataset", eye_ds]) == 0
    capsys.readouterr()

    # sample 0 belongs to s00: genuine claim accepts, impostor claim rejects
    argv = ["verify", "--config", str(config), "--sample", brain_ds,
            "--sample", eye_ds, "--threshold", "-0.5"]
    assert main(argv + ["--claim", "s00"]) == 0
    assert "ACCEPT" in capsys.readouterr().out
    assert main(argv + ["--claim", "s01"]) == 0
    assert "REJECT" in capsys.readouterr().out


def test_evaluate_score_fusion(tmp_path):
    config, paths = _write_config(
        tmp_path, n_subjects=6,
        extra_eval={"modality": "eye-pupil", "fusion": "mean", "scenario": "s3"},
    )
    assert main(["gen", "--config", str(config)]) == 0
    assert main(["evaluate", "--config", str(config)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["provenance"]["models_per_fold"] == 2
    assert report["provenance"]["fusion"] == "mean"
