import csv
import json

import pytest
import torch

from core.cli import (
    AU_TO_EXP_FILE,
    CHECKPOINT_FILE,
    EXIT_INVALID,
    EXIT_OK,
    EXP_TO_AU_FILE,
    WORLD_FILE,
    export_mapping_heatmap,
    read_mapping_csv,
    run,
)
from core.dpm import init_prior
from core.facs import BASIC_EXPRESSIONS, BP4D_AUS, build_prior_matrix, builtin_facs_table, normalize_rows
from core.manifest import MANIFEST_FILE, RESOLVED_CONFIG_FILE, read_manifest


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("SSM_SEED", raising=False)


def _artifacts(run_dir):
    return {a["path"] for a in read_manifest(str(run_dir))["artifacts"]}


def test_gen_data_then_train(tmp_path, write_config):
    cfg = write_config()
    data_dir, train_dir = tmp_path / "data", tmp_path / "train"
    assert run(["gen-data", "--config", cfg, "--out", str(data_dir)]) == EXIT_OK
    assert WORLD_FILE in _artifacts(data_dir)

    code = run(["train", "--config", cfg, "--data", str(data_dir / WORLD_FILE), "--out", str(train_dir)])
    assert code == EXIT_OK
    produced = _artifacts(train_dir)
    assert {CHECKPOINT_FILE, RESOLVED_CONFIG_FILE, "summary.json", "metrics_expression.json", "metrics_au.json"} <= produced
    summary = json.loads((train_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["mapping_distance"] > 0
    assert len(summary["loss_curve"]) == 2
    resolved = json.loads((train_dir / RESOLVED_CONFIG_FILE).read_text(encoding="utf-8"))
    assert resolved["lr_encoder"] == 1e-3
    assert resolved["world"]["au_set"] == BP4D_AUS

    code = run(["evaluate", "--config", cfg, "--data", str(data_dir / WORLD_FILE),
        "--checkpoint", str(train_dir / CHECKPOINT_FILE), "--out", str(tmp_path / "eval"), "--cross"])
    assert code == EXIT_OK
    assert "metrics_cross_au.json" in _artifacts(tmp_path / "eval")


def test_refuses_to_overwrite_without_force(tmp_path, write_config):
    cfg = write_config()
    out = tmp_path / "data"
    assert run(["gen-data", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert run(["gen-data", "--config", cfg, "--out", str(out)]) == EXIT_INVALID
    assert run(["gen-data", "--config", cfg, "--out", str(out), "--force"]) == EXIT_OK


def test_invalid_config_exits_one(tmp_path, write_config):
    cfg = write_config(epochz=3)
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert run(["train", "--bogus"]) == EXIT_INVALID


def test_missing_checkpoint_is_runtime_failure(tmp_path, write_config):
    cfg = write_config()
    code = run(["evaluate", "--config", cfg, "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "e")])
    assert code == 2


def test_grad_check_passes(tmp_path, write_config, capsys):
    cfg = write_config()
    assert run(["grad-check", "--config", cfg, "--h", "1e-6", "--max-entries", "3"]) == EXIT_OK
    assert "worst parameter" in capsys.readouterr().out


def test_export_initial_mapping_raw(tmp_path, write_config):
    cfg = write_config()
    out = tmp_path / "mapping"
    assert run(["export-mapping", "--config", cfg, "--out", str(out), "--raw"]) == EXIT_OK
    rows, columns, values = read_mapping_csv(out / AU_TO_EXP_FILE)
    assert columns == [f"AU{a}" for a in BP4D_AUS]
    happy = values[rows.index("Happiness")]
    assert happy[columns.index("AU6")].item() == 0.5
    assert happy[columns.index("AU12")].item() == 0.5
    assert read_manifest(str(out))["frobenius_distance"] == 0.0
    with open(out / EXP_TO_AU_FILE, encoding="utf-8") as f:
        header = next(csv.reader(f))
    assert header == ["au"] + BASIC_EXPRESSIONS


def test_export_mapping_needs_matrices(tmp_path, write_config):
    cfg = write_config(head="linear")
    assert run(["export-mapping", "--config", cfg, "--out", str(tmp_path / "m")]) == EXIT_INVALID


def test_heatmap_csv_round_trip(tmp_path):
    W0 = normalize_rows(build_prior_matrix(builtin_facs_table(), BASIC_EXPRESSIONS, BP4D_AUS))
    state = init_prior(W0, tau_m=0.3)
    ae_path, ea_path, distance = export_mapping_heatmap(state, tmp_path, BASIC_EXPRESSIONS, BP4D_AUS)
    A_ae, A_ea = state.mixing_weights()
    _, _, ae = read_mapping_csv(ae_path)
    _, _, ea = read_mapping_csv(ea_path)
    assert torch.allclose(ae, A_ae.detach(), atol=1e-9, rtol=0)
    assert torch.allclose(ea, A_ea.detach(), atol=1e-9, rtol=0)
    assert ae.shape == (7, 12) and ea.shape == (12, 7)
    assert distance == 0.0


def test_ablate_component_grid_table(tmp_path, write_config):
    cfg = write_config(epochs=1)
    out = tmp_path / "ablate"
    assert run(["ablate", "--config", cfg, "--grid", "component", "--seeds", "1", "--out", str(out)]) == EXIT_OK
    with open(out / "ablation_component.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    settings = {r["setting"] for r in rows}
    assert settings == {"STL", "Baseline", "Baseline+TSP", "Baseline+TSP+DPM"}
    assert {(r["task"], r["metric"]) for r in rows} == {("au", "avg_f1"), ("expression", "uar"), ("expression", "war")}
    assert MANIFEST_FILE in {p.name for p in out.iterdir()}


def test_failed_train_leaves_no_run_directory(tmp_path, write_config):
    cfg = write_config()
    out = tmp_path / "train"
    code = run(["train", "--config", cfg, "--data", str(tmp_path / "missing.ssmdata"), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == ["config.json"]


def test_train_outputs_are_bitwise_reproducible(tmp_path, write_config):
    cfg = write_config()
    outs = [tmp_path / "first", tmp_path / "second"]
    for out in outs:
        assert run(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    first, second = outs
    assert (first / CHECKPOINT_FILE).read_bytes() == (second / CHECKPOINT_FILE).read_bytes()
    metric_files = sorted(p.name for p in first.glob("metrics_*.json"))
    assert metric_files
    for name in metric_files + ["summary.json", RESOLVED_CONFIG_FILE]:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
