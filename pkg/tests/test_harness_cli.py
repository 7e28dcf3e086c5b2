import csv
from dataclasses import replace

import numpy as np
import pytest

from seqseg import io
from seqseg.cli import main
from seqseg.errors import ConfigError, ShapeError
from seqseg.harness import (DEFAULT_R_GRID, DEFAULT_T_GRID, ExperimentConfig, load_model, save_model,
                            summarize, sweep_cells)
from seqseg.labelprop import WeightConfig
from seqseg.phantom import PhantomConfig
from seqseg.registration import RegConfig
from seqseg.unet import Schedule, UNetConfig, build_unet


def tiny_config(out_dir) -> ExperimentConfig:
    return ExperimentConfig(
        out_dir=str(out_dir), seed=3, n_subjects=4, train_fraction=0.5,
        phantom=PhantomConfig(frames=6).scaled((32, 32)),
        unet=UNetConfig(depth=2, base_channels=4, feature_channels=4), hidden=4,
        weights=WeightConfig(2, 0.1), registration=RegConfig(spacing=4, levels=2, iterations=10),
        stage1=Schedule(iterations=4, batch_size=2), stage2=Schedule(iterations=2, batch_size=1))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg_path = root / "config.json"
    io.write_json(cfg_path, tiny_config(root / "out").to_dict())
    codes = {}
    for name, argv in [("generate", ["generate"]), ("propagate", ["propagate"]),
                       ("unet", ["train", "--stage", "unet"]), ("full", ["train", "--stage", "full"]),
                       ("evaluate", ["evaluate", "--baseline", str(root / "out/checkpoints/unet.aock"),
                                     "--plots", "1"]),
                       ("sweep", ["sweep", "--T", "3", "5", "--r", "0", "0.1"])]:
        codes[name] = main(argv + ["--config", str(cfg_path)])
    return root / "out", codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)


def test_pipeline_artifacts(pipeline):
    out, _ = pipeline
    for rel in ["data/manifest.json", "propagated/quality.csv", "checkpoints/unet.aock", "checkpoints/full.aock",
                "logs/train_unet.csv", "logs/train_full.csv", "eval/comparison.csv", "eval/paired_tests.csv",
                "eval/proposed/metrics.csv", "eval/baseline/area_series.csv", "sweep/sweep.csv",
                "run_manifest.json"]:
        assert (out / rel).exists(), rel
    assert len(list((out / "eval/plots").glob("*.svg"))) == 1
    rm = io.read_json(out / "run_manifest.json")
    assert {"generate", "propagate", "train_unet", "train_full", "evaluate", "sweep"} <= set(rm["commands"])


def test_sweep_csv_layout(pipeline):
    out, _ = pipeline
    with open(out / "sweep/sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["T"], r["r"]) for r in rows] == [("3", "0.000000"), ("3", "0.100000"), ("5", "0.000000"),
                                                ("5", "0.100000")]
    assert all(0.0 <= float(r["dice_aao"]) <= 1.0 for r in rows)


def test_comparison_has_both_methods(pipeline):
    out, _ = pipeline
    with open(out / "eval/comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "method" and len(rows[0]) == 9
    assert [r[0] for r in rows[1:]] == ["proposed", "baseline"]


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["generate", "--n", "1", "--out-dir", str(tmp_path)]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train"]) == 1  # --stage is required
    assert main(["sweep", "--T", "4", "--out-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"no_such_key": 1}')
    assert main(["generate", "--config", str(bad)]) == 1


def test_missing_artifacts_exit_2(tmp_path, capsys):
    assert main(["propagate", "--out-dir", str(tmp_path / "empty")]) == 2
    assert main(["train", "--stage", "full", "--out-dir", str(tmp_path / "empty")]) == 2
    assert "generate" in capsys.readouterr().err


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    io.write_json(tmp_path / "c.json", cfg.to_dict())
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash == cfg.hash
    assert replace(cfg, seed=4).hash != cfg.hash
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_sweep_cells():
    cells = sweep_cells()
    assert cells == [(T, 0.1) for T in DEFAULT_T_GRID] + [(9, r) for r in DEFAULT_R_GRID if r != 0.1]
    assert sweep_cells([5, 9], [0.0]) == [(5, 0.0), (9, 0.0)]
    with pytest.raises(ConfigError):
        sweep_cells([6])


def test_checkpoint_model_mismatch(tmp_path):
    small = build_unet(UNetConfig(depth=2, base_channels=4, feature_channels=4))
    save_model(tmp_path / "a.aock", small, {"kind": "unet", "unet": {"depth": 2, "base_channels": 8,
                                                                     "input_channels": 1, "num_classes": 3,
                                                                     "feature_channels": 4}})
    with pytest.raises(ShapeError):
        load_model(tmp_path / "a.aock")


def test_load_model_restores_weights(tmp_path):
    p = build_unet(UNetConfig(depth=2, base_channels=4, feature_channels=4), seed=9)
    from seqseg.harness import _model_config

    save_model(tmp_path / "u.aock", p, _model_config(tiny_config(tmp_path), "unet"))
    q, conf = load_model(tmp_path / "u.aock")
    assert conf["kind"] == "unet"
    for k in p.tensors:
        assert np.array_equal(p[k].data, q[k].data)


def test_summarize_keys():
    class R:
        def row(self, name):
            return {"dice": 1.0, "mcd_mm": float("nan") if name == "DAo" else 2.0, "area_err_mm2": 0.0,
                    "mean_curvature": 0.5}

    s = summarize({"a": R(), "b": R()})
    assert s["dice_aao"] == 1.0 and s["mcd_mm_aao"] == 2.0
    assert np.isnan(s["mcd_mm_dao"])
