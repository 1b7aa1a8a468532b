import json
import os

import numpy as np
import pytest

from gaitlab.cli import main
from gaitlab.models import load_checkpoint
from gaitlab.normalization import load_stats
from gaitlab.poses import load_dataset, save_dataset, GaitSequence


def run(argv):
    return main(argv)


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    code = run(["generate", "--mode", "mixed", "--identities", "4", "--seqs", "4",
                "--frames", "12", "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


class TestExitCodes:
    def test_usage_error_unknown_command(self, capsys):
        assert run(["frobnicate"]) == 64

    def test_usage_error_missing_required(self, capsys):
        assert run(["generate", "--mode", "mixed"]) == 64

    def test_input_error_missing_dataset(self, tmp_path, capsys):
        code = run(["stats", "--dataset", str(tmp_path / "nope.jsonl"),
                    "--out", str(tmp_path / "stats.json")])
        assert code == 2

    def test_input_error_malformed_dataset(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("not json\n")
        code = run(["stats", "--dataset", str(bad),
                    "--out", str(tmp_path / "stats.json")])
        assert code == 2

    def test_degeneracy_error(self, tmp_path, capsys):
        # all joints coincident: zero mean height -> degenerate statistics
        seqs = [GaitSequence(np.full((4, 18, 2), 0.5), "a", "a_0"),
                GaitSequence(np.full((4, 18, 2), 0.5), "b", "b_0")]
        path = tmp_path / "flat.jsonl"
        save_dataset(path, seqs)
        code = run(["stats", "--dataset", str(path),
                    "--out", str(tmp_path / "stats.json")])
        assert code == 3

    def test_version_flag(self, capsys):
        assert run(["--version"]) == 0
        assert "gaitlab" in capsys.readouterr().out


class TestGenerate:
    def test_outputs_and_manifest(self, dataset_dir, capsys):
        data = load_dataset(dataset_dir / "dataset.jsonl")
        assert len(data) == 16
        truth = json.loads((dataset_dir / "ground_truth.json").read_text())
        assert len(truth["identities"]) == 4
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 3
        assert str(dataset_dir / "dataset.jsonl") in manifest["outputs"]

    def test_deterministic_across_runs(self, tmp_path, capsys):
        args = ["generate", "--mode", "motion-only", "--identities", "3",
                "--seqs", "2", "--frames", "8", "--seed", "9"]
        run(args + ["--out", str(tmp_path / "a")])
        run(args + ["--out", str(tmp_path / "b")])
        a = load_dataset(tmp_path / "a" / "dataset.jsonl")
        b = load_dataset(tmp_path / "b" / "dataset.jsonl")
        for x, y in zip(a, b):
            assert np.array_equal(x.poses, y.poses)

    def test_seed_env_fallback(self, tmp_path, capsys, monkeypatch):
        # GAITLAB_SEED is read at parser-build time
        monkeypatch.setenv("GAITLAB_SEED", "17")
        out = tmp_path / "env"
        assert run(["generate", "--mode", "mixed", "--identities", "2",
                    "--seqs", "2", "--frames", "6", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 17

    def test_failure_manifest_written(self, tmp_path, capsys):
        out = tmp_path / "fail"
        code = run(["generate", "--mode", "motion-only", "--identities", "45",
                    "--seqs", "2", "--frames", "6", "--out", str(out)])
        assert code == 2
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"].startswith("error:")


class TestStats:
    def test_hand_computed_fixture(self, tmp_path, capsys):
        # two one-frame sequences with known pelvis midpoints and heights
        p1 = np.zeros((18, 2))
        p1[:, 1] = np.linspace(0.0, 1.0, 18)   # height 1.0
        p1[8] = [0.2, 0.4]
        p1[11] = [0.4, 0.8]                     # pelvis (0.3, 0.6)
        p2 = np.zeros((18, 2))
        p2[:, 1] = np.linspace(0.0, 0.5, 18)   # height 0.5
        p2[8] = [0.6, 0.2]
        p2[11] = [0.8, 0.4]                     # pelvis (0.7, 0.3)
        path = tmp_path / "two.jsonl"
        save_dataset(path, [GaitSequence(p1[None], "a", "a_0"),
                            GaitSequence(p2[None], "b", "b_0")])
        out = tmp_path / "stats.json"
        assert run(["stats", "--dataset", str(path), "--out", str(out)]) == 0
        stats = load_stats(out)
        assert stats.mean_height == pytest.approx(0.75)
        np.testing.assert_allclose(stats.mean_pelvis, [0.5, 0.45])
        np.testing.assert_allclose(stats.per_joint_mean, (p1 + p2) / 2)
        np.testing.assert_allclose(stats.per_joint_std, np.abs(p1 - p2) / 2)

    def test_manifest_fingerprints_input(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "stats.json"
        assert run(["stats", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--out", str(out)]) == 0
        manifest = json.loads((tmp_path / "stats.json.manifest.json").read_text())
        assert str(dataset_dir / "dataset.jsonl") in manifest["inputs"]


class TestNormalize:
    def test_postcondition_on_output_file(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "norm.jsonl"
        code = run(["normalize", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--scheme", "skeleton-translate,skeleton-scale",
                    "--out", str(out)])
        assert code == 0
        for seq in load_dataset(out):
            pel = (seq.poses[:, 8] + seq.poses[:, 11]) / 2
            np.testing.assert_allclose(pel, 0.0, atol=1e-9)
            h = seq.poses[..., 1].max(axis=1) - seq.poses[..., 1].min(axis=1)
            np.testing.assert_allclose(h, 1.0, atol=1e-9)

    def test_unknown_scheme(self, dataset_dir, tmp_path, capsys):
        code = run(["normalize", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--scheme", "quantum", "--out", str(tmp_path / "x.jsonl")])
        assert code == 2

    def test_stats_scheme_roundtrip(self, dataset_dir, tmp_path, capsys):
        stats_path = tmp_path / "stats.json"
        run(["stats", "--dataset", str(dataset_dir / "dataset.jsonl"),
             "--out", str(stats_path)])
        out = tmp_path / "norm.jsonl"
        code = run(["normalize", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--scheme", "global-coord-std", "--stats", str(stats_path),
                    "--out", str(out)])
        assert code == 0
        pooled = np.concatenate([s.poses for s in load_dataset(out)])
        np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-9)

    def test_preview_prints_table(self, dataset_dir, tmp_path, capsys):
        run(["normalize", "--dataset", str(dataset_dir / "dataset.jsonl"),
             "--scheme", "skeleton-translate", "--out", str(tmp_path / "n.jsonl"),
             "--preview"])
        out = capsys.readouterr().out
        assert "x before" in out
        assert out.count("\n") > 18


class TestTrain:
    def test_epochs_zero_writes_init_checkpoint(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = run(["train", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--model", "spe", "--scheme", "skeleton-translate",
                    "--epochs", "0", "--seq-len", "8", "--seed", "1",
                    "--set", "c1=8", "--set", "c2=16", "--set", "c3=32",
                    "--set", "c_emb=16", "--set", "n_heads=2",
                    "--set", "p_identities=2", "--set", "k_samples=2",
                    "--out", str(out)])
        assert code == 0
        ckpt = load_checkpoint(out / "checkpoint.json")
        assert ckpt["model"] == "spe"
        assert ckpt["config"].c1 == 8
        from gaitlab.models import init_spe_params
        init = init_spe_params(ckpt["config"], seed=1)
        for name, p in init.params.items():
            assert np.array_equal(ckpt["store"].params[name].data, p.data)

    def test_short_training_run(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "run"
        code = run(["train", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--model", "temporal", "--scheme", "skeleton-translate",
                    "--epochs", "1", "--seq-len", "8", "--seed", "0",
                    "--set", "d_model=16", "--set", "n_heads=2", "--set", "n_layers=1",
                    "--set", "p_identities=2", "--set", "k_samples=2",
                    "--out", str(out)])
        assert code == 0
        assert (out / "metrics.csv").exists()
        assert (out / "effective_config.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok"

    def test_bad_override(self, dataset_dir, tmp_path, capsys):
        code = run(["train", "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--set", "margin", "--out", str(tmp_path / "r")])
        assert code == 2


class TestEvaluateAndAblate:
    def make_splits(self, dataset_dir, tmp_path):
        data = load_dataset(dataset_dir / "dataset.jsonl")
        by_id = {}
        for s in data:
            by_id.setdefault(s.subject_id, []).append(s.sequence_id)
        gallery = [v[2] for v in by_id.values()]
        probe = [v[3] for v in by_id.values()]
        gal_path = tmp_path / "gallery.json"
        probe_path = tmp_path / "probe.json"
        gal_path.write_text(json.dumps(gallery))
        probe_path.write_text(json.dumps(probe))
        return gal_path, probe_path

    def test_evaluate_end_to_end(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", "--dataset", str(dataset_dir / "dataset.jsonl"),
             "--model", "spe", "--scheme", "skeleton-translate",
             "--epochs", "1", "--seq-len", "8", "--seed", "0",
             "--set", "c1=8", "--set", "c2=16", "--set", "c3=32",
             "--set", "c_emb=16", "--set", "n_heads=2",
             "--set", "p_identities=2", "--set", "k_samples=2",
             "--out", str(out)])
        gal, probe = self.make_splits(dataset_dir, tmp_path)
        result_path = tmp_path / "eval.json"
        code = run(["evaluate", "--checkpoint", str(out / "checkpoint.json"),
                    "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--gallery", str(gal), "--probe", str(probe),
                    "--out", str(result_path)])
        assert code == 0
        result = json.loads(result_path.read_text())
        assert 0.0 <= result["rank1"] <= result["rank5"] <= 1.0
        assert result["scheme"] == "skeleton-translate"

    def test_evaluate_unknown_split_id(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", "--dataset", str(dataset_dir / "dataset.jsonl"),
             "--epochs", "0", "--seq-len", "8",
             "--set", "c1=8", "--set", "c2=16", "--set", "c3=32",
             "--set", "c_emb=16", "--set", "n_heads=2",
             "--set", "p_identities=2", "--set", "k_samples=2",
             "--out", str(out)])
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(["nope_99"]))
        code = run(["evaluate", "--checkpoint", str(out / "checkpoint.json"),
                    "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--gallery", str(bad), "--probe", str(bad)])
        assert code == 2

    def grid(self, tmp_path, schemes):
        grid_path = tmp_path / "grid.json"
        grid_path.write_text(json.dumps({
            "cells": [{"model": "spe", "scheme": s} for s in schemes],
            "seeds": [0],
            "train_config": {"epochs": 1, "seq_len": 8, "p_identities": 2,
                             "k_samples": 2, "steps_per_epoch": 1,
                             "mining": "batch-all"},
            "spe_config": {"c1": 8, "c2": 16, "c3": 32, "c_emb": 16, "n_heads": 2},
        }))
        return grid_path

    def test_ablate_and_resume(self, dataset_dir, tmp_path, capsys):
        gal, probe = self.make_splits(dataset_dir, tmp_path)
        grid = self.grid(tmp_path, ["none", "skeleton-translate"])
        out = tmp_path / "ablation"
        code = run(["ablate", "--grid", str(grid),
                    "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--gallery", str(gal), "--probe", str(probe),
                    "--out", str(out)])
        assert code == 0
        csv_before = (out / "results.csv").read_text()
        assert "skeleton-translate" in csv_before
        assert (out / "results.md").exists()
        cells = os.listdir(out / "cells")
        assert len(cells) == 2
        # resume: rerun must reuse cached cells and reproduce identical results
        code = run(["ablate", "--grid", str(grid),
                    "--dataset", str(dataset_dir / "dataset.jsonl"),
                    "--gallery", str(gal), "--probe", str(probe),
                    "--out", str(out)])
        assert code == 0
        assert (out / "results.csv").read_text() == csv_before


class TestGradCheckCommand:
    def test_passes(self, capsys):
        code = run(["grad-check", "--seeds", "1", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "max relative error" in out
        assert "[ok]" in out
