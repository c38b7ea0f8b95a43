"""Command-line driver: config parsing, artifacts, exit codes, determinism."""

import csv
import dataclasses
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from geofence_guard import cli
from geofence_guard.cli import (
    ConfigError,
    component_seed,
    load_config,
    load_dataset,
    load_split,
)
from geofence_guard.dynamics import VehicleParams
from geofence_guard.harness import POLICY_FAMILIES, Label, read_episode_summary
from geofence_guard.models import PcarnnSplit, load_weights
from geofence_guard.training import Dataset

REPO_CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path: Path, body: str) -> Path:
    path = tmp_path / "run.ini"
    path.write_text(body, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """The bundled smoke config run end to end, once for the module."""
    root = tmp_path_factory.mktemp("pipeline")
    shutil.copy(REPO_CONFIGS / "smoke.ini", root / "smoke.ini")
    shutil.copy(REPO_CONFIGS / "fence_square_100.txt", root / "fence_square_100.txt")
    out = root / "out"
    for command in ("generate", "calibrate", "train", "simulate", "evaluate", "linearity"):
        rc = cli.main([command, "--config", str(root / "smoke.ini"), "--out", str(out)])
        assert rc == 0, command
    return root


def out_dir(pipeline: Path) -> Path:
    return pipeline / "out"


# -- seeds and configuration ----------------------------------------------


def test_component_seed_is_stable_and_label_separated():
    assert component_seed(0, "scenario") == component_seed(0, "scenario")
    labels = ("generate", "split", "calibrate", "train", "model", "scenario", "linearity")
    seeds = {component_seed(7, lab) for lab in labels}
    assert len(seeds) == len(labels)
    assert component_seed(1, "train") != component_seed(2, "train")


def test_load_config_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path, ""))
    assert cfg.n == 40 and cfg.runs == 40 and cfg.seed == 0
    assert cfg.v_max == 8.0 and cfg.controller == "dcbf" and cfg.max_t == 20.0
    assert cfg.variant == "pcarnn_split" and cfg.hidden == (64, 64)
    assert cfg.vehicle == VehicleParams()
    assert cfg.plant.drag_coeff == 0.4 and cfg.plant.steering_lag_tau == 0.05
    assert cfg.fence is None
    assert cfg.out_dir == tmp_path / "out"


def test_load_config_overrides_and_sections(tmp_path):
    (tmp_path / "fence.txt").write_text("0 0\n10 0\n10 10\n0 10\n")
    path = write_config(tmp_path, """
[vehicle]
C_f = 100000.0

[plant]
perturb_C_f = 1.5
drag_coeff = 0.0
steering_lag_tau = 0.0

[fence]
path = fence.txt

[scenario]
n = 7
seed = 3
controller = ttc

[model]
variant = residual
hidden = 8,4

[output]
dir = artifacts
""")
    cfg = load_config(path, seed_override=11, out_override=str(tmp_path / "elsewhere"))
    assert cfg.vehicle.C_f == 100000.0
    assert cfg.plant.params.C_f == 150000.0  # perturbation on the override
    assert cfg.fence is not None and cfg.fence.contains((5.0, 5.0))
    assert cfg.n == 7 and cfg.runs == 7
    assert cfg.seed == 11  # --seed beats the file
    assert cfg.controller == "ttc"
    assert cfg.variant == "residual" and cfg.hidden == (8, 4)
    assert cfg.out_dir == tmp_path / "elsewhere"


@pytest.mark.parametrize("body, fragment", [
    ("[nonsense]\nx = 1\n", "unknown section"),
    ("[scenario]\nbogus = 1\n", "unknown key"),
    ("[scenario]\nn = 0\n", ">= 1"),
    ("[scenario]\nn = abc\n", "not an integer"),
    ("[scenario]\ncontroller = pid\n", "controller"),
    ("[vehicle]\nwheelbase = 2.8\n", "unknown key"),
    ("[vehicle]\nm = -5\n", "vehicle"),
    ("[plant]\nperturb_C_f = 9.0\n", "0.5"),
    ("[plant]\nperturb_spoiler = 1.0\n", "spoiler"),
    ("[fence]\npath = missing.txt\n", "not found"),
    ("[model]\nvariant = transformer\n", "variant"),
    ("[model]\nhidden = 8,-4\n", "hidden"),
    ("[dcbf]\ngamma = -1\n", "dcbf"),
])
def test_load_config_rejects(tmp_path, body, fragment):
    with pytest.raises(ConfigError) as err:
        load_config(write_config(tmp_path, body))
    assert fragment in str(err.value)


def test_missing_config_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


# -- generate -------------------------------------------------------------


def test_generate_artifacts_are_consistent(tmp_path):
    path = write_config(tmp_path, "[scenario]\nruns = 8\nseed = 4\n")
    assert cli.main(["generate", "--config", str(path)]) == 0
    out = tmp_path / "out"
    assert len(list((out / "raw").glob("run_*.csv"))) == 8
    ds = load_dataset(out / "processed")
    assert len(ds.runs) == 2 * 8  # every log kept its moving prefix, then mirrored
    # run spans partition the samples
    flat = [i for start, stop in ds.runs for i in range(start, stop)]
    assert flat == list(range(len(ds)))
    # second half mirrors the first
    n = len(ds) // 2
    for j in (0, 5, n - 1):
        a, b = ds.samples[j], ds.samples[n + j]
        assert b.body.v_x == a.body.v_x and b.body.v_y == -a.body.v_y
        assert b.u.F_x == a.u.F_x and b.u.delta_dot == -a.u.delta_dot
        assert b.xdot_gt[0] == a.xdot_gt[0] and b.xdot_gt[2] == -a.xdot_gt[2]
        assert ds.strata[n + j] == ds.strata[j]

    with open(out / "processed" / "splits.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    assert sorted(int(r[0]) for r in rows) == list(range(len(ds)))
    counts = {name: 0 for name in cli.SPLIT_NAMES}
    for _, split in rows:
        counts[split] += 1
    assert sum(counts.values()) == len(ds)
    assert counts["train"] / len(ds) == pytest.approx(0.75, abs=0.02)
    train = load_split(out / "processed", ds, "train")
    assert len(train) == counts["train"]


def test_generate_is_deterministic_and_seed_sensitive(tmp_path):
    path = write_config(tmp_path, "[scenario]\nruns = 4\n")
    assert cli.main(["generate", "--config", str(path)]) == 0
    first = (tmp_path / "out" / "processed" / "dataset.csv").read_bytes()
    assert cli.main(["generate", "--config", str(path)]) == 0
    assert (tmp_path / "out" / "processed" / "dataset.csv").read_bytes() == first
    assert cli.main(["generate", "--config", str(path), "--seed", "9"]) == 0
    assert (tmp_path / "out" / "processed" / "dataset.csv").read_bytes() != first


def test_generate_family_mix_is_balanced(tmp_path):
    # forty runs = ten whole latin-square blocks, so each steering and
    # each force family gets exactly a quarter of the runs, every seed
    for seed in range(10):
        path = write_config(tmp_path, f"[scenario]\nruns = 40\nseed = {seed}\n")
        assert cli.main(["generate", "--config", str(path)]) == 0
        ds = load_dataset(tmp_path / "out" / "processed")
        steer_runs = {fam: set() for fam in POLICY_FAMILIES}
        force_runs = {fam: set() for fam in POLICY_FAMILIES}
        for (start, stop), run_id in zip(ds.runs, range(len(ds.runs))):
            steer, force, _ = ds.strata[start].split("|")
            steer_runs[steer].add(run_id)
            force_runs[force].add(run_id)
        n_runs = len(ds.runs)
        for fam in POLICY_FAMILIES:
            assert abs(len(steer_runs[fam]) / n_runs - 0.25) <= 0.025
            assert abs(len(force_runs[fam]) / n_runs - 0.25) <= 0.025


def test_dataset_loader_rejects_mangled_file(tmp_path):
    path = write_config(tmp_path, "[scenario]\nruns = 4\n")
    assert cli.main(["generate", "--config", str(path)]) == 0
    target = tmp_path / "out" / "processed" / "dataset.csv"
    target.write_text("t,wrong\n1,2\n")
    with pytest.raises(cli.InputError):
        load_dataset(tmp_path / "out" / "processed")


# -- the bundled smoke pipeline -------------------------------------------


def test_calibrate_recovers_toward_plant_stiffness(pipeline):
    with open(out_dir(pipeline) / "params.json", encoding="utf-8") as fh:
        fitted = VehicleParams(**json.load(fh))
    true_cf = 1.1 * VehicleParams().C_f
    assert abs(fitted.C_f - true_cf) < abs(VehicleParams().C_f - true_cf)
    assert fitted.m == VehicleParams().m  # only the tire scalars move


def test_train_artifacts(pipeline):
    out = out_dir(pipeline)
    with open(out / "params.json", encoding="utf-8") as fh:
        params = VehicleParams(**json.load(fh))
    model = load_weights(out / "weights.bin", params)
    assert isinstance(model, PcarnnSplit)
    with open(out / "loss.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss"]
    losses = [float(r[1]) for r in rows[1:]]
    assert len(losses) == 15  # max_epochs in the smoke config
    assert losses[-1] < losses[0]


def test_simulate_and_evaluate_artifacts(pipeline):
    out = out_dir(pipeline)
    episodes = sorted((out / "episodes").glob("ep_*.csv"))
    assert len(episodes) == 20
    summaries = [read_episode_summary(p) for p in episodes]
    assert {s.label for s in summaries} == {Label.Safe, Label.Unsafe}
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "scope" and rows[1][0] == "overall"
    header = dict(zip(rows[0], rows[1]))
    assert 0.0 <= float(header["cf1"]) <= 1.0
    assert int(header["tp"]) + int(header["fp"]) + int(header["tn"]) + int(header["fn"]) == 20
    text = (out / "metrics.txt").read_text()
    assert "overall" in text and "CF1" in text


def test_simulate_rerun_is_byte_identical_and_cleans_stale_files(pipeline):
    out = out_dir(pipeline)
    stale = out / "episodes" / "ep_9999.csv"
    stale.write_text("junk")
    first = (out / "episodes" / "ep_0003.csv").read_bytes()
    rc = cli.main(["simulate", "--config", str(pipeline / "smoke.ini"),
                   "--out", str(out)])
    assert rc == 0
    assert not stale.exists()
    assert (out / "episodes" / "ep_0003.csv").read_bytes() == first


def test_null_controller_reproduces_labels(pipeline):
    root = pipeline
    body = (root / "smoke.ini").read_text().replace("controller = dcbf",
                                                    "controller = null")
    path = root / "null.ini"
    path.write_text(body)
    out = root / "null_out"
    assert cli.main(["simulate", "--config", str(path), "--out", str(out)]) == 0
    for p in sorted((out / "episodes").glob("ep_*.csv")):
        s = read_episode_summary(p)
        assert not s.intervened
        assert s.breach == (s.label is Label.Unsafe)
    rc = cli.main(["evaluate", "--config", str(path), "--out", str(out)])
    assert rc == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    overall = dict(zip(rows[0], rows[1]))
    assert int(overall["tp"]) == 0 and int(overall["fp"]) == 0
    assert int(overall["fn"]) == 8  # the unsafe scenarios of the smoke seed


def test_linearity_artifact(pipeline):
    with open(out_dir(pipeline) / "linearity.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["state_id", "channel", "eps_lin"]
    assert len(rows) == 1 + 20 * 4
    assert all(float(r[2]) >= 0.0 for r in rows[1:])


# -- exit codes ------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, "[scenario]\nbogus = 1\n")
    assert cli.main(["generate", "--config", str(bad)]) == 2

    assert cli.main(["generate", "--config", str(tmp_path / "none.ini")]) == 2

    ok = write_config(tmp_path, "")
    assert cli.main(["train", "--config", str(ok)]) == 3  # no dataset yet

    assert cli.main(["evaluate", "--config", str(ok)]) == 2
    assert "no episodes" in capsys.readouterr().err

    fenceless = write_config(tmp_path, "[model]\nvariant = analytical\n")
    assert cli.main(["simulate", "--config", str(fenceless)]) == 2  # needs a fence


def test_analytical_variant_refuses_to_train(tmp_path):
    path = write_config(tmp_path, "[scenario]\nruns = 4\n\n[model]\nvariant = analytical\n")
    assert cli.main(["generate", "--config", str(path)]) == 0
    assert cli.main(["train", "--config", str(path)]) == 2


def test_diverged_calibration_exits_4(tmp_path):
    path = write_config(tmp_path, """
[scenario]
runs = 4

[training]
learning_rate = 1e9
max_epochs = 2
patience = 1
""")
    assert cli.main(["generate", "--config", str(path)]) == 0
    assert cli.main(["calibrate", "--config", str(path)]) == 4


def test_split_consistency_between_index_and_data(tmp_path):
    # the manifest is produced by splitting row indices; splitting the
    # real dataset with the same seed must give the same partition
    from geofence_guard.training import stratified_split

    path = write_config(tmp_path, "[scenario]\nruns = 6\nseed = 2\n")
    assert cli.main(["generate", "--config", str(path)]) == 0
    ds = load_dataset(tmp_path / "out" / "processed")
    seed = component_seed(2, "split")
    index_ds = Dataset(list(range(len(ds))), list(ds.strata), (), ds.dt)
    by_index = stratified_split(index_ds, cli.SPLIT_FRACTIONS, seed)
    direct = stratified_split(ds, cli.SPLIT_FRACTIONS, seed)
    for part_idx, part_data in zip(by_index, direct):
        assert [ds.samples[i] for i in part_idx.samples] == part_data.samples
