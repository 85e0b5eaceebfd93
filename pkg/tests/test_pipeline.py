import json
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np
import pytest

from weakcam.cli import main
from weakcam.config import default_config, load_config, parse_config, save_config
from weakcam.pipeline import (
    ABLATION_CELLS,
    StageError,
    export_prompt_masks,
    run_ablation,
    run_pipeline,
    run_probe_to_csv,
    run_sweep,
)
from weakcam.synth import SynthConfig
from weakcam.subclass import TrainConfig


def tiny_config(tmp_path, seed=3, n_samples=40, epochs=2, **synth_kw):
    cfg = default_config(seed=seed, out_dir=str(tmp_path / "run"))
    return replace(
        cfg,
        synth=SynthConfig(n_samples=n_samples, image_size=64, seed=cfg.synth.seed, **synth_kw),
        train=replace(cfg.train, epochs=epochs),
        k_subclasses=4,
    )


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown key.*bogus"):
            parse_config({"version": 1, "bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="refine.*stepz|unknown key"):
            parse_config({"version": 1, "refine": {"stepz": 3}})

    def test_version_required(self):
        with pytest.raises(ValueError, match="version"):
            parse_config({"seed": 1})

    def test_section_seeds_derived_from_master(self):
        cfg = parse_config({"version": 1, "seed": 100})
        assert cfg.synth.seed == 100
        assert cfg.split_seed == 101
        assert cfg.train.seed == 102
        assert cfg.cluster_seed == 103

    def test_explicit_section_seed_wins(self):
        cfg = parse_config({"version": 1, "seed": 100, "synth": {"seed": 7}})
        assert cfg.synth.seed == 7


class TestRunPipeline:
    def test_artifacts_written(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = run_pipeline(cfg)
        out = result.out_dir
        for name in ("config.json", "assignments.csv", "checkpoint.wck", "train_log.csv",
                     "refine.csv", "metrics.csv", "summary.json"):
            assert (out / name).exists(), name
        assert (out / "pseudo").is_dir() and (out / "cams").is_dir()
        assert result.summary["n_rows"] > 0

    def test_rerun_from_snapshot_byte_identical(self, tmp_path):
        cfg = tiny_config(tmp_path)
        first = run_pipeline(cfg)
        metrics_a = (first.out_dir / "metrics.csv").read_bytes()
        snapshot = load_config(first.out_dir / "config.json")
        rerun_cfg = replace(snapshot, out_dir=str(tmp_path / "rerun"))
        second = run_pipeline(rerun_cfg)
        assert (second.out_dir / "metrics.csv").read_bytes() == metrics_a

    def test_refine_off_skips_refine_csv(self, tmp_path):
        cfg = tiny_config(tmp_path).with_toggles(subclass=False, refine=False)
        result = run_pipeline(cfg)
        assert not (result.out_dir / "refine.csv").exists()
        assert not (result.out_dir / "assignments.csv").exists()
        assert result.summary["toggles"] == {"subclass": False, "refine": False}

    def test_zero_walk_steps_equals_refine_off(self, tmp_path):
        base = tiny_config(tmp_path)
        on = replace(
            base,
            refine=replace(base.refine, walk_steps=0),
            out_dir=str(tmp_path / "t0"),
        ).with_toggles(subclass=True, refine=True)
        off = replace(base, out_dir=str(tmp_path / "off")).with_toggles(subclass=True, refine=False)
        res_on = run_pipeline(on)
        res_off = run_pipeline(off)
        assert abs(res_on.summary["mean_dsc"] - res_off.summary["mean_dsc"]) < 1e-9
        assert abs(res_on.summary["mean_jaccard"] - res_off.summary["mean_jaccard"]) < 1e-9

    def test_stage_error_carries_stage_name(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=5)
        bad = replace(cfg, synth=replace(cfg.synth, image_size=16, halo_width=13, p_class_present=1.0))
        with pytest.raises(StageError) as err:
            run_pipeline(bad)
        assert err.value.stage == "gen"

    def test_until_stops_early(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = run_pipeline(cfg, until="train")
        assert (result.out_dir / "checkpoint.wck").exists()
        assert not (result.out_dir / "metrics.csv").exists()
        assert result.summary == {}

    def test_external_oracle_reproduces_refinement(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=24)
        store = tmp_path / "store"
        export_prompt_masks(cfg, store)
        internal = run_pipeline(replace(cfg, out_dir=str(tmp_path / "internal")))
        external_cfg = replace(
            cfg,
            oracle=replace(cfg.oracle, kind="external", store_dir=str(store)),
            out_dir=str(tmp_path / "external"),
        )
        external = run_pipeline(external_cfg)
        # Binary masks survive PGM quantization exactly, so refined CAM dumps agree.
        for path in sorted((internal.out_dir / "cams").iterdir()):
            other = external.out_dir / "cams" / path.name
            from weakcam.formats import read_field

            assert np.abs(read_field(path) - read_field(other)).max() <= 1 / 255


class TestExportMasks:
    def test_counts_and_manifest(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=10)
        cfg = replace(cfg, refine=replace(cfg.refine, grid=8))
        manifest = export_prompt_masks(cfg, tmp_path / "store")
        lines = manifest.read_text().strip().splitlines()
        assert len(lines) == 10 * 64 + 1
        pairs = [tuple(line.split(",")) for line in lines[1:]]
        assert len(set(pairs)) == 640
        files = list((tmp_path / "store").glob("*/*.pgm"))
        assert len(files) == 640

    def test_requires_synthetic_oracle(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg = replace(cfg, oracle=replace(cfg.oracle, kind="external", store_dir="x"))
        with pytest.raises(ValueError, match="synthetic"):
            export_prompt_masks(cfg, tmp_path / "store")


class TestAblation:
    def test_structure_and_csv(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=30, epochs=1)
        table = run_ablation(cfg, seeds=[0, 1, 2])
        assert table["cells"] == [name for name, _, _ in ABLATION_CELLS]
        rows = (tmp_path / "run" / "ablation.csv").read_text().strip().splitlines()
        assert len(rows) == 4 * 3 + 1
        assert set(table["means"]) == {"baseline", "subclass_only", "refine_only", "full"}
        assert "full_minus_baseline" in table["orderings"]

    def test_requires_three_seeds(self, tmp_path):
        with pytest.raises(ValueError, match="3 seeds"):
            run_ablation(tiny_config(tmp_path), seeds=[0, 1])


class TestSweep:
    def test_t_zero_matches_refine_off(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=30, epochs=1)
        table = run_sweep(cfg, "t", [0, 2], seeds=[5])
        off = run_pipeline(
            replace(cfg, out_dir=str(tmp_path / "off"), seed=5,
                    synth=replace(cfg.synth, seed=5),
                    split_seed=6,
                    train=replace(cfg.train, seed=7),
                    cluster_seed=8, feature_seed=9,
                    oracle=replace(cfg.oracle, seed=10)).with_toggles(True, False)
        )
        assert abs(table["mean_dsc"][0] - off.summary["mean_dsc"]) < 1e-9

    def test_svg_well_formed(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=30, epochs=1)
        run_sweep(cfg, "theta", [0.2, 0.4], seeds=[1])
        svg = tmp_path / "run" / "sweep.svg"
        root = ET.parse(svg).getroot()
        polylines = [e for e in root.iter() if e.tag.endswith("polyline")]
        assert len(polylines) == 2  # dsc and jaccard

    def test_needs_two_values(self, tmp_path):
        with pytest.raises(ValueError, match="2 values"):
            run_sweep(tiny_config(tmp_path), "K", [4])

    def test_unknown_axis_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="axis"):
            run_sweep(tiny_config(tmp_path), "zeta", [1, 2])


class TestProbeCommand:
    def test_probe_csv_columns(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=30, epochs=1)
        path = run_probe_to_csv(cfg, eval_interval=2)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss_p,loss_s,cam_dice"
        assert len(lines) > 1


class TestCli:
    def test_eval_and_exit_code(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)
        assert main(["--config", str(cfg_path), "eval"]) == 0
        out = capsys.readouterr().out
        assert "mean dice" in out

    def test_gen_writes_dataset(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=12)
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)
        assert main(["--config", str(cfg_path), "gen"]) == 0
        assert (tmp_path / "run" / "dataset" / "manifest.csv").exists()

    def test_out_flag_overrides(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=12, epochs=0)
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)
        assert main(["--config", str(cfg_path), "--out", str(tmp_path / "elsewhere"), "train"]) == 0
        assert (tmp_path / "elsewhere" / "checkpoint.wck").exists()

    def test_failure_prints_stage_to_stderr(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, n_samples=4)
        cfg = replace(cfg, synth=replace(cfg.synth, image_size=16, halo_width=13, p_class_present=1.0))
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)
        code = main(["--config", str(cfg_path), "eval"])
        assert code != 0
        assert "stage gen" in capsys.readouterr().err

    def test_bad_config_is_config_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"version": 1, "nope": True}))
        assert main(["--config", str(cfg_path), "eval"]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_export_masks_command(self, tmp_path):
        cfg = tiny_config(tmp_path, n_samples=5)
        cfg = replace(cfg, refine=replace(cfg.refine, grid=2))
        cfg_path = tmp_path / "cfg.json"
        save_config(cfg, cfg_path)
        assert main(["--config", str(cfg_path), "export-masks"]) == 0
        assert len(list((tmp_path / "run" / "mask_store").glob("*/*.pgm"))) == 20
