"""Config parsing, experiment orchestration, report emission, CLI."""

import json

import numpy as np
import pytest

from bbadapt import harness
from bbadapt.cli import main
from bbadapt.data import SyntheticShiftSpec, make_synthetic_shift
from bbadapt.harness import (
    CONFIG_SCHEMA,
    PRESETS,
    ConfigError,
    build_datasets,
    default_config,
    emit_report,
    evaluate,
    evaluate_predictions,
    parse_config_text,
    report_fingerprint,
    run_experiment,
)
from bbadapt.networks import train_source

TINY = """
# desk-scale smoke configuration
dataset.num_classes = 3
dataset.samples_per_class = 25
dataset.rotation_deg = 25.0
dataset.noise_scale = 0.4
model.hidden = 16
model.bottleneck = 8
source.epochs = 6
hp.t_m = 3
seeds = 2024
output_dir = {out}
"""


def tiny_config(tmp_path, **overrides):
    return parse_config_text(TINY.format(out=tmp_path / "run"), overrides=overrides or None)


def test_parse_defaults_cover_schema():
    config = default_config()
    for key in CONFIG_SCHEMA:
        config.get(key)  # every key resolves
    assert config.get("hp.gamma") == 0.7
    assert config.get("optim.batch_size") == 64


def test_parse_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("hp.warp = 3")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("hp.tau = 0.1\nhp.tau = 0.2")
    with pytest.raises(ConfigError):
        parse_config_text("hp.tau: 0.1")  # not key = value
    with pytest.raises(ConfigError):
        parse_config_text("hp.tau = abc")


def test_parse_comments_and_blank_lines():
    config = parse_config_text("# header\n\nhp.tau = 0.2  # inline\n")
    assert config.get("hp.tau") == 0.2


def test_parse_validates_ranges():
    with pytest.raises(ConfigError):
        parse_config_text("hp.eta = 0.0")
    with pytest.raises(ConfigError):
        parse_config_text("hp.eta = 1.5")
    with pytest.raises(ConfigError):
        parse_config_text("oracle.mode = full")
    with pytest.raises(ConfigError):
        parse_config_text("dataset.kind = movies")
    with pytest.raises(ConfigError):
        parse_config_text("seeds =")
    # r must stay below the class count
    with pytest.raises(ConfigError, match="r"):
        parse_config_text("dataset.num_classes = 3\noracle.r = 3")


def test_parse_image_list_requires_paths():
    with pytest.raises(ConfigError, match="list"):
        parse_config_text("dataset.kind = image_list")


def test_fingerprint_excludes_output_dir():
    a = parse_config_text("output_dir = /tmp/a")
    b = parse_config_text("output_dir = /tmp/b")
    assert a.fingerprint() == b.fingerprint()
    c = parse_config_text("hp.tau = 0.2")
    assert a.fingerprint() != c.fingerprint()


def test_overrides_win():
    config = parse_config_text("hp.tau = 0.2", overrides={"hp.tau": 0.3})
    assert config.get("hp.tau") == 0.3


def test_config_accessors(tmp_path):
    config = tiny_config(tmp_path)
    assert config.seeds == [2024]
    hp = config.hyperparams()
    assert hp.t_m == 3
    assert hp.pca_dim is None  # 0 in the schema means auto
    assert config.oracle_mode().key == "soft_top_r:1"
    spec = config.synthetic_spec()
    assert spec.num_classes == 3 and spec.samples_per_class == 25


def test_preset_table_shape():
    assert set(PRESETS) == {
        "no_adapt", "skd", "skd_mix", "skd_mi", "prod_no_proto", "prod",
        "prod_fm", "prod_afm", "prod_mi", "prod_fm_mi", "prodding",
    }
    d, f = PRESETS["no_adapt"]
    assert d is None and f is None
    d, f = PRESETS["prodding"]
    assert d.proto and f.afm and f.mi
    d, f = PRESETS["skd"]
    assert d.skd and not (d.mix or d.mi or d.proto) and f is None


def test_evaluate_predictions_per_class():
    preds = np.array([0, 0, 1, 2])
    labels = np.array([0, 1, 1, 2])
    out = evaluate_predictions(preds, labels, num_classes=4)
    assert out["accuracy"] == pytest.approx(0.75)
    assert out["per_class"] == {0: 1.0, 1: 0.5, 2: 1.0}
    assert out["per_class_mean"] == pytest.approx((1.0 + 0.5 + 1.0) / 3)
    assert out["n"] == 4
    with pytest.raises(ValueError):
        evaluate_predictions(preds[:2], labels, 4)


def test_build_datasets_label_shift(tmp_path):
    config = tiny_config(tmp_path, **{
        "dataset.num_classes": 4,
        "labelshift.mode": "rsut",
        "labelshift.ratio": 0.5,
        "dataset.samples_per_class": 16,
    })
    src, tgt = build_datasets(config)
    src_counts = np.bincount(src.eval_labels, minlength=4)
    tgt_counts = np.bincount(tgt.eval_labels, minlength=4)
    assert src_counts.tolist() == [16, 8, 4, 2]
    assert tgt_counts.tolist() == [2, 4, 8, 16]

    partial = tiny_config(tmp_path, **{"labelshift.mode": "partial"})
    src, tgt = build_datasets(partial)
    assert len(set(src.eval_labels)) == 3  # source keeps all classes
    assert set(tgt.eval_labels.tolist()) == {0, 1}


@pytest.fixture(scope="module")
def tiny_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    config = parse_config_text(TINY.format(out=out / "run"))
    report = run_experiment(config, presets=["no_adapt", "skd", "prodding"])
    return config, report


def test_run_experiment_report_shape(tiny_report):
    config, report = tiny_report
    assert report["config_fingerprint"] == config.fingerprint()
    assert report["num_classes"] == 3
    assert report["n_target"] == 75
    assert set(report["presets"]) == {"no_adapt", "skd", "prodding"}
    row = report["presets"]["prodding"]["per_seed"]["2024"]
    assert {"accuracy", "per_class", "checksum", "distill_accuracy"} <= set(row)
    assert report["queries_issued"] == 75  # one per target example
    assert 0.0 <= report["presets"]["no_adapt"]["mean_accuracy"] <= 1.0


def test_run_experiment_writes_artifacts(tiny_report):
    config, _ = tiny_report
    out = config.output_dir
    assert (out / "report.json").exists()
    assert (out / "source.pt").exists()
    assert (out / "oracle_cache_soft_top_r_1.jsonl").exists()
    assert (out / "prodding" / "seed2024" / "distilled.pt").exists()
    assert (out / "prodding" / "seed2024" / "final.pt").exists()
    assert (out / "prodding" / "seed2024" / "teacher_bank.json").exists()


def test_report_fingerprint_ignores_query_count(tiny_report):
    _, report = tiny_report
    fp = report_fingerprint(report)
    warmed = json.loads(json.dumps(report))
    warmed["queries_issued"] = 0
    assert report_fingerprint(warmed) == fp
    changed = json.loads(json.dumps(report))
    changed["presets"]["skd"]["mean_accuracy"] += 0.01
    assert report_fingerprint(changed) != fp


def test_emit_report_csv(tiny_report, tmp_path):
    _, report = tiny_report
    written = emit_report(report, tmp_path, formats=("json", "csv"))
    names = {p.name for p in written}
    assert {"report.json", "accuracy.csv"} <= names
    rows = (tmp_path / "accuracy.csv").read_text().splitlines()
    header = rows[0].split(",")
    assert header[:2] == ["preset", "seed2024"]
    assert header[-1] == "mean"
    assert {r.split(",")[0] for r in rows[1:]} == {"no_adapt", "skd", "prodding"}


def test_emit_report_plots(tiny_report, tmp_path):
    _, report = tiny_report
    written = emit_report(report, tmp_path, formats=("plots",))
    assert any(p.suffix == ".png" for p in written)


def test_run_experiment_rejects_unknown_preset(tmp_path):
    config = tiny_config(tmp_path)
    with pytest.raises(ConfigError, match="preset"):
        run_experiment(config, presets=["warp_drive"])


# ---------------------------------------------------------------------------
# CLI


def write_config(tmp_path, **overrides):
    text = TINY.format(out=tmp_path / "run")
    for k, v in overrides.items():
        text += f"\n{k} = {v}"
    path = tmp_path / "config.txt"
    path.write_text(text)
    return path


def test_cli_run_and_eval(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["run", "--config", str(cfg), "--presets", "no_adapt,prod"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "fingerprint" in out
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert set(report["presets"]) == {"no_adapt", "prod"}

    rc = main(["eval", "--config", str(cfg),
               "--checkpoint", str(tmp_path / "run" / "prod" / "seed2024" / "distilled.pt")])
    assert rc == 0
    scores = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= scores["accuracy"] <= 1.0


def test_cli_train_source_and_query(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["train-source", "--config", str(cfg)])
    assert rc == 0
    ck = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["checkpoint"]

    rc = main(["query", "--checkpoint", ck, "--input", "0.5,-0.5", "--mode", "soft_top_r", "--r", "2"])
    assert rc == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(res["labels"]) == 2
    assert len(res["confidences"]) == 2

    # r = K is an invalid-mode error, exit code 2 (runtime failure)
    rc = main(["query", "--checkpoint", ck, "--input", "0.5,-0.5", "--r", "3"])
    assert rc == 2


def test_cli_distill_then_finetune(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["distill", "--config", str(cfg), "--seed", "2024"])
    assert rc == 0
    distilled = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["checkpoint"]

    rc = main(["finetune", "--config", str(cfg), "--init", distilled, "--seed", "2024"])
    assert rc == 0
    final = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert final["checkpoint"].endswith("final.pt")


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("hp.warp = 3\n")
    rc = main(["run", "--config", str(bad)])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_cli_missing_config_is_config_error(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.txt")])
    assert rc == 1


def test_cli_set_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["run", "--config", str(cfg), "--presets", "no_adapt",
               "--set", "hp.t_m=2", "--set", f"output_dir={tmp_path / 'other'}"])
    assert rc == 0
    assert (tmp_path / "other" / "report.json").exists()
    rc = main(["run", "--config", str(cfg), "--set", "hp.warp=1"])
    assert rc == 1


def test_cli_finetune_rejects_source_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train-source", "--config", str(cfg)]) == 0
    ck = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["checkpoint"]
    rc = main(["finetune", "--config", str(cfg), "--init", ck])
    assert rc == 1
    assert "not an adaptation-model checkpoint" in capsys.readouterr().err
