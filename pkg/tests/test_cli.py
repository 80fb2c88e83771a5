"""End-to-end command-line tests on a tiny dataset.

Commands run in-process through ``main(argv)`` so exit codes and
printed output can be asserted without subprocess overhead.  The module
fixture prepares one small two-community dataset and a pair of trained
checkpoints that the attack/evaluate/plot tests share.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from invardef.cli import main, pca_2d
from invardef.data_io import load_dataset, load_split, save_dataset
from invardef.graph import Graph
from invardef.seeds import substream

CONFIG_TEXT = """\
# tiny settings so training finishes in well under a second per epoch
hidden_dim = 16
latent_dim = 8
num_domains = 3
domain_hidden_dim = 8
epochs = 6
patience = 0
feature_steps = 2
structure_candidates = 2
"""


def small_raw_graph() -> Graph:
    """Two feature-separable communities (24 nodes) plus a 4-node path
    that the largest-component extraction should discard."""
    rng = substream(9, "cli-fixture")
    n = 24
    labels = np.array([i % 2 for i in range(n)] + [0] * 4)
    feats = rng.normal(size=(n + 4, 6)) * 0.3
    feats[:n, 0] += labels[:n] * 1.5
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            p = 0.5 if labels[i] == labels[j] else 0.06
            if rng.random() < p:
                edges.add((i, j))
    edges |= {(n, n + 1), (n + 1, n + 2), (n + 2, n + 3)}
    return Graph(
        features=feats,
        edge_index=np.array(sorted(edges)),
        labels=labels,
        num_classes=2,
    )


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    """Raw + prepared dataset, a config file, and two checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    save_dataset(small_raw_graph(), root / "raw", name="twoblock")
    assert main(["prepare-data", str(root / "raw"), str(root / "data")]) == 0
    (root / "tiny.cfg").write_text(CONFIG_TEXT, encoding="utf8")
    assert main([
        "train", str(root / "data"), "--out", str(root / "defense"),
        "--config", str(root / "tiny.cfg"), "--quiet",
    ]) == 0
    assert main([
        "train", str(root / "data"), "--out", str(root / "backbone"),
        "--config", str(root / "tiny.cfg"), "--backbone", "--epochs", "30",
        "--quiet",
    ]) == 0
    return root


def read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf8"))


def strip_timestamps(manifest: dict) -> dict:
    return {
        k: v for k, v in manifest.items()
        if k not in ("started_at", "finished_at", "created_at", "wall_seconds")
    }


# ---------------------------------------------------------------------------
# prepare-data


class TestPrepareData:
    def test_extracts_largest_component(self, workdir):
        graph = load_dataset(workdir / "data")
        assert graph.num_nodes == 24

    def test_writes_split_and_index_map(self, workdir):
        splits = load_split(workdir / "data" / "split.json")
        assert splits.num_nodes == 24
        index_map = read_json(workdir / "data" / "index_map.json")
        assert index_map["source_num_nodes"] == 28
        assert index_map["kept_original_ids"] == list(range(24))

    def test_manifest_lists_outputs(self, workdir):
        manifest = read_json(workdir / "data" / "run.json")
        assert manifest["command"] == "prepare-data"
        assert "split.json" in manifest["outputs"]
        assert manifest["version"].startswith("invardef-")

    def test_rerun_is_byte_identical_except_manifest(self, workdir, tmp_path):
        assert main(["prepare-data", str(workdir / "raw"), str(tmp_path / "again")]) == 0
        for name in ("meta.json", "edges.tsv", "features.csv", "labels.tsv",
                     "split.json", "index_map.json"):
            assert (tmp_path / "again" / name).read_bytes() == (
                workdir / "data" / name
            ).read_bytes()
        a = strip_timestamps(read_json(tmp_path / "again" / "run.json"))
        b = strip_timestamps(read_json(workdir / "data" / "run.json"))
        assert a == b

    def test_missing_labels_file_exits_2(self, workdir, tmp_path, capsys):
        broken = tmp_path / "broken"
        broken.mkdir()
        for name in ("meta.json", "edges.tsv", "features.csv"):
            (broken / name).write_bytes((workdir / "raw" / name).read_bytes())
        assert main(["prepare-data", str(broken), str(tmp_path / "out")]) == 2
        assert "labels.tsv" in capsys.readouterr().err

    def test_name_override(self, workdir, tmp_path):
        assert main([
            "prepare-data", str(workdir / "raw"), str(tmp_path / "renamed"),
            "--name", "other",
        ]) == 0
        assert read_json(tmp_path / "renamed" / "meta.json")["name"] == "other"


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_checkpoint_manifest_records_config(self, workdir):
        manifest = read_json(workdir / "defense" / "checkpoint" / "manifest.json")
        assert manifest["kind"] == "defense"
        assert manifest["config"]["epochs"] == 6
        assert manifest["dataset"] == "twoblock"

    def test_metrics_csv_has_one_row_per_epoch(self, workdir):
        lines = (workdir / "defense" / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("epoch,predictive,")
        assert len(lines) == 1 + 6

    def test_zero_epochs_writes_initialized_checkpoint(self, workdir, tmp_path):
        assert main([
            "train", str(workdir / "data"), "--out", str(tmp_path / "zero"),
            "--config", str(workdir / "tiny.cfg"), "--epochs", "0", "--quiet",
        ]) == 0
        assert (tmp_path / "zero" / "checkpoint" / "model.pt").exists()
        lines = (tmp_path / "zero" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1  # header only

    def test_unknown_config_key_exits_2_naming_it(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs = 2\nlerning_rate = 0.1\n", encoding="utf8")
        assert main([
            "train", str(workdir / "data"), "--out", str(tmp_path / "o"),
            "--config", str(bad),
        ]) == 2
        assert "lerning_rate" in capsys.readouterr().err

    def test_sweep_trains_each_seed(self, workdir, tmp_path):
        sweep = tmp_path / "seeds.txt"
        sweep.write_text("0\n1\n", encoding="utf8")
        assert main([
            "train", str(workdir / "data"), "--out", str(tmp_path / "sweep"),
            "--config", str(workdir / "tiny.cfg"), "--epochs", "2",
            "--sweep", str(sweep), "--quiet",
        ]) == 0
        for seed in (0, 1):
            assert (tmp_path / "sweep" / f"seed-{seed}" / "checkpoint" / "model.pt").exists()

    def test_duplicate_sweep_seeds_exit_2(self, workdir, tmp_path, capsys):
        sweep = tmp_path / "dup.txt"
        sweep.write_text("3\n4\n3\n", encoding="utf8")
        assert main([
            "train", str(workdir / "data"), "--out", str(tmp_path / "o2"),
            "--sweep", str(sweep),
        ]) == 2
        assert "duplicate seed 3" in capsys.readouterr().err

    def test_rerun_checkpoint_byte_identical(self, workdir, tmp_path):
        out = tmp_path / "re"
        for sub in ("a", "b"):
            assert main([
                "train", str(workdir / "data"), "--out", str(out / sub),
                "--config", str(workdir / "tiny.cfg"), "--quiet",
            ]) == 0
        assert (out / "a" / "checkpoint" / "model.pt").read_bytes() == (
            out / "b" / "checkpoint" / "model.pt"
        ).read_bytes()
        assert (out / "a" / "metrics.csv").read_bytes() == (
            out / "b" / "metrics.csv"
        ).read_bytes()


# ---------------------------------------------------------------------------
# attack


class TestAttack:
    def test_random_poison_writes_loadable_dataset(self, workdir, tmp_path):
        assert main([
            "attack", str(workdir / "data"), "random_poison:0.2",
            "--out", str(tmp_path / "pois"),
        ]) == 0
        record = read_json(tmp_path / "pois" / "attack.json")
        assert record["provenance"]["attack"] == "random_poison"
        poisoned = load_dataset(tmp_path / "pois" / "perturbed")
        assert poisoned.num_nodes == 24

    def test_feature_pgd_reports_accuracy_drop_and_audit(self, workdir, tmp_path):
        assert main([
            "attack", str(workdir / "data"), "feature_pgd",
            "--checkpoint", str(workdir / "backbone" / "checkpoint"),
            "--out", str(tmp_path / "pgd"),
        ]) == 0
        record = read_json(tmp_path / "pgd" / "attack.json")
        assert record["budget_audit"]["ok"] is True
        assert record["target_accuracy_after"] <= record["target_accuracy_before"]

    def test_evasion_without_checkpoint_exits_3(self, workdir, tmp_path):
        assert main([
            "attack", str(workdir / "data"), "feature_pgd",
            "--out", str(tmp_path / "x"),
        ]) == 3

    def test_clean_is_not_an_attack(self, workdir, tmp_path):
        assert main([
            "attack", str(workdir / "data"), "clean", "--out", str(tmp_path / "y"),
        ]) == 4

    def test_unknown_scenario_exits_4(self, workdir, tmp_path):
        assert main([
            "attack", str(workdir / "data"), "metattack", "--out", str(tmp_path / "z"),
        ]) == 4


# ---------------------------------------------------------------------------
# evaluate


class TestEvaluate:
    def test_two_models_clean_table(self, workdir, tmp_path, capsys):
        assert main([
            "evaluate", str(workdir / "data"),
            "--model", f"defense={workdir / 'defense' / 'checkpoint'}",
            "--model", f"backbone={workdir / 'backbone' / 'checkpoint'}",
            "--out", str(tmp_path / "ev"), "--scenarios", "clean",
        ]) == 0
        table = capsys.readouterr().out
        assert "clean" in table and "defense" in table and "backbone" in table
        results = read_json(tmp_path / "ev" / "results.json")
        assert set(results["accuracies"]["clean"]) == {"defense", "backbone"}

    def test_missing_checkpoint_exits_3(self, workdir, tmp_path):
        assert main([
            "evaluate", str(workdir / "data"),
            "--model", "d=/nonexistent/ckpt", "--out", str(tmp_path / "e2"),
        ]) == 3

    def test_unknown_scenario_exits_4(self, workdir, tmp_path):
        assert main([
            "evaluate", str(workdir / "data"),
            "--model", f"d={workdir / 'defense' / 'checkpoint'}",
            "--out", str(tmp_path / "e3"), "--scenarios", "clean,warp",
        ]) == 4

    def test_poisoning_scenario_retrains(self, workdir, tmp_path):
        assert main([
            "evaluate", str(workdir / "data"),
            "--model", f"backbone={workdir / 'backbone' / 'checkpoint'}",
            "--out", str(tmp_path / "e4"),
            "--scenarios", "clean,random_poison:0.2", "--quiet",
        ]) == 0
        results = read_json(tmp_path / "e4" / "results.json")
        assert "random_poison:0.2" in results["accuracies"]

    def test_embeddings_export_and_rerun_identity(self, workdir, tmp_path):
        outs = []
        for sub in ("r1", "r2"):
            assert main([
                "evaluate", str(workdir / "data"),
                "--model", f"defense={workdir / 'defense' / 'checkpoint'}",
                "--out", str(tmp_path / sub), "--scenarios", "clean",
                "--embeddings",
            ]) == 0
            outs.append(tmp_path / sub)
        for name in ("scenarios.csv", "results.json", "embeddings-defense.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


# ---------------------------------------------------------------------------
# ablate


class TestAblate:
    def test_small_grid_summary(self, workdir, tmp_path):
        assert main([
            "ablate", str(workdir / "data"), "--out", str(tmp_path / "ab"),
            "--config", str(workdir / "tiny.cfg"), "--seeds", "0,1",
            "--scenarios", "clean,feature_pgd",
            "--variants", "full,no_invariance", "--quiet",
        ]) == 0
        summary = read_json(tmp_path / "ab" / "summary.json")
        assert set(summary) == {"full", "no_invariance"}
        for stats in summary.values():
            assert set(stats["scenario_means"]) == {"clean", "feature_pgd"}
        lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 2  # header + variants x seeds

    def test_unknown_variant_exits_2(self, workdir, tmp_path, capsys):
        assert main([
            "ablate", str(workdir / "data"), "--out", str(tmp_path / "ab2"),
            "--variants", "full,no_everything",
        ]) == 2
        assert "no_everything" in capsys.readouterr().err

    def test_duplicate_seeds_exit_2(self, workdir, tmp_path):
        assert main([
            "ablate", str(workdir / "data"), "--out", str(tmp_path / "ab3"),
            "--seeds", "0,0",
        ]) == 2


# ---------------------------------------------------------------------------
# synthetic-check


class TestSyntheticCheck:
    def test_report_shape(self, tmp_path):
        assert main([
            "synthetic-check", "--out", str(tmp_path / "sc"), "--samples", "2000",
        ]) == 0
        report = read_json(tmp_path / "sc" / "check.json")
        assert set(report["checks"]) == {
            "weights_recovered", "risk_spread_controlled", "passed",
        }
        assert "erm" in report and "invariant" in report
        assert report["thresholds"] == {
            "weight_error_inf": 0.05, "spread_ratio": 0.2,
        }


# ---------------------------------------------------------------------------
# plot


class TestPlot:
    @pytest.fixture()
    def embeddings_csv(self, workdir, tmp_path) -> Path:
        assert main([
            "evaluate", str(workdir / "data"),
            "--model", f"defense={workdir / 'defense' / 'checkpoint'}",
            "--out", str(tmp_path / "emb"), "--scenarios", "clean",
            "--embeddings",
        ]) == 0
        return tmp_path / "emb" / "embeddings-defense.csv"

    def test_writes_one_png_per_csv(self, embeddings_csv, tmp_path):
        assert main(["plot", str(embeddings_csv), "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "embeddings-defense.png").stat().st_size > 0

    def test_rerun_png_byte_identical(self, embeddings_csv, tmp_path):
        for sub in ("p1", "p2"):
            assert main(["plot", str(embeddings_csv), "--out", str(tmp_path / sub)]) == 0
        assert (tmp_path / "p1" / "embeddings-defense.png").read_bytes() == (
            tmp_path / "p2" / "embeddings-defense.png"
        ).read_bytes()

    def test_malformed_csv_exits_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("who,what\n1,2\n", encoding="utf8")
        assert main(["plot", str(bad), "--out", str(tmp_path / "p3")]) == 2


class TestPca2d:
    def test_projects_to_two_dims_with_fixed_sign(self):
        rng = substream(4, "pca")
        z = rng.normal(size=(40, 5))
        z[:, 0] *= 4.0  # dominant direction
        pts = pca_2d(z)
        assert pts.shape == (40, 2)
        again = pca_2d(z)
        assert np.array_equal(pts, again)
        # the dominant input axis should land (up to sign fixed positive)
        # on the first component
        assert abs(np.corrcoef(z[:, 0], pts[:, 0])[0, 1]) > 0.95

    def test_one_dimensional_input_pads_second_axis(self):
        z = np.arange(6, dtype=np.float64).reshape(-1, 1)
        pts = pca_2d(z)
        assert pts.shape == (6, 2)
        assert np.all(pts[:, 1] == 0)

    def test_empty_input(self):
        assert pca_2d(np.zeros((0, 3))).shape == (0, 2)


# ---------------------------------------------------------------------------
# output-root override


def test_out_root_env_redirects_relative_paths(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("INVARDEF_OUT_ROOT", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    assert main([
        "evaluate", str(workdir / "data"),
        "--model", f"d={workdir / 'defense' / 'checkpoint'}",
        "--out", "nested/run", "--scenarios", "clean",
    ]) == 0
    assert (tmp_path / "nested" / "run" / "results.json").exists()
