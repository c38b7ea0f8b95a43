"""Command-line front end for the geofence stack.

One INI file drives every stage; artifacts land in the configured output
directory so the stages can be run one at a time or as a pipeline:

    geofence-guard generate  --config run.ini      # plant logs -> dataset
    geofence-guard calibrate --config run.ini      # tire scalars
    geofence-guard train     --config run.ini      # residual weights
    geofence-guard simulate  --config run.ini      # closed-loop episodes
    geofence-guard evaluate  --config run.ini      # CF1 / FPR / MCD+
    geofence-guard linearity --config run.ini      # eps_lin CDF data

Exit codes: 0 success, 2 configuration problem, 3 missing or unreadable
input, 4 numerical divergence.  Every stage is deterministic: one master
seed is expanded per component by fixed labels, and reruns overwrite
their outputs byte for byte.
"""

import argparse
import configparser
import csv
import dataclasses
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from .dynamics import ActuatorBounds, ControlInput, VehicleParams, WorldState
from .geometry import Polygon, load_polygon
from .models import AnalyticalModel, load_weights, make_neural_ode, make_pcarnn_shared, \
    make_pcarnn_split, make_residual, save_weights
from .safety import DcbfConfig
from .training import Dataset, DivergedLoss, TrainConfig, TrajectorySample, \
    calibrate_params, finite_diff_derivatives, mirror_augment, stratified_split, \
    train_residuals
from .harness import CONTROL_PERIOD, POLICY_FAMILIES, PlantConfig, applied_command, \
    compute_metrics, dcbf_controller, format_metrics, generate_scenarios, \
    linearity_analysis, null_controller, plant_step, read_episode_summary, \
    run_episode, sample_policy, ttc_baseline_controller, write_episode_csv, \
    write_linearity_csv, write_metrics_csv
from .dynamics import BodyState


class ConfigError(Exception):
    """Bad configuration: unknown keys, invalid values, missing sections."""


class InputError(Exception):
    """Required input artifact is missing or unreadable."""


EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GEN_DURATION = 4.0  # s of open-loop plant log per generated run
GEN_SPEED_FLOOR = 0.25  # m/s; below this the tire model is meaningless
_SPEED_BUCKETS = (("slow", 1.0, 6.0), ("medium", 6.0, 11.0), ("fast", 11.0, 16.0))
SPLIT_FRACTIONS = (0.75, 0.125, 0.125)
SPLIT_NAMES = ("train", "val", "test")

_RAW_COLUMNS = ("t", "p_x", "p_y", "psi", "v_x", "v_y", "omega", "delta",
                "delta_dot_cmd", "F_x_cmd")
_DATASET_COLUMNS = ("run",) + _RAW_COLUMNS + ("dv_x", "dv_y", "domega", "ddelta", "stratum")

MODEL_VARIANTS = ("analytical", "residual", "neural_ode", "pcarnn_shared", "pcarnn_split")
CONTROLLERS = ("null", "dcbf", "ttc")


def component_seed(master: int, label: str) -> int:
    """Expand the master seed per component by a fixed label."""
    return int(np.random.SeedSequence([master, zlib.crc32(label.encode())]).generate_state(1)[0])


# -- configuration -------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RunConfig:
    vehicle: VehicleParams
    plant: PlantConfig
    fence: Polygon | None
    dcbf: DcbfConfig
    training: TrainConfig
    n: int
    runs: int
    seed: int
    v_max: float
    controller: str
    max_t: float
    variant: str
    hidden: tuple
    weights_name: str
    out_dir: Path


_VEHICLE_KEYS = {f.name for f in dataclasses.fields(VehicleParams)}
_DCBF_KEYS = {f.name for f in dataclasses.fields(DcbfConfig)}
_TRAINING_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_SCENARIO_KEYS = {"n", "runs", "seed", "v_max", "controller", "max_t"}
_MODEL_KEYS = {"variant", "hidden", "weights"}
_SECTIONS = ("vehicle", "plant", "fence", "dcbf", "training", "scenario", "model", "output")


def _section(parser: configparser.ConfigParser, name: str) -> dict:
    return dict(parser[name]) if parser.has_section(name) else {}


def _float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None


def _int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not an integer") from None


def _reject_unknown(section: str, given: dict, known) -> None:
    unknown = sorted(set(given) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def load_config(path, seed_override=None, out_override=None) -> RunConfig:
    """Parse and validate the INI file; every key is checked here so the
    commands themselves can assume a well-formed RunConfig."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case: C_f and c_f are different fields
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise InputError(f"cannot read config: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    unknown = sorted(set(parser.sections()) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    base = path.parent

    sec = _section(parser, "vehicle")
    _reject_unknown("vehicle", sec, _VEHICLE_KEYS)
    try:
        vehicle = dataclasses.replace(
            VehicleParams(), **{k: _float("vehicle", k, v) for k, v in sec.items()}
        )
    except ValueError as e:
        raise ConfigError(f"[vehicle] {e}") from None

    sec = _section(parser, "plant")
    perturb = {}
    drag, lag = 0.4, 0.05
    for key, raw in sec.items():
        if key == "drag_coeff":
            drag = _float("plant", key, raw)
        elif key == "steering_lag_tau":
            lag = _float("plant", key, raw)
        elif key.startswith("perturb_"):
            perturb[key[len("perturb_"):]] = _float("plant", key, raw)
        else:
            raise ConfigError(f"unknown key in [plant]: {key}")
    try:
        plant = PlantConfig(vehicle, perturb, drag, lag)
    except ValueError as e:
        raise ConfigError(f"[plant] {e}") from None

    sec = _section(parser, "fence")
    _reject_unknown("fence", sec, {"path"})
    fence = None
    if "path" in sec:
        fence_path = base / sec["path"]
        if not fence_path.is_file():
            raise ConfigError(f"fence file not found: {fence_path}")
        try:
            fence = load_polygon(fence_path)
        except (OSError, ValueError) as e:
            raise InputError(f"cannot load fence: {e}") from None

    sec = _section(parser, "dcbf")
    _reject_unknown("dcbf", sec, _DCBF_KEYS)
    try:
        dcbf = dataclasses.replace(DcbfConfig(), **{
            k: (_int("dcbf", k, v) if k == "n_sub" else _float("dcbf", k, v))
            for k, v in sec.items()
        })
    except ValueError as e:
        raise ConfigError(f"[dcbf] {e}") from None

    sec = _section(parser, "training")
    _reject_unknown("training", sec, _TRAINING_KEYS)
    int_keys = {"batch_size", "max_epochs", "patience", "val_horizon"}
    try:
        training = dataclasses.replace(TrainConfig(), **{
            k: (_int("training", k, v) if k in int_keys else _float("training", k, v))
            for k, v in sec.items()
        })
    except ValueError as e:
        raise ConfigError(f"[training] {e}") from None

    sec = _section(parser, "scenario")
    _reject_unknown("scenario", sec, _SCENARIO_KEYS)
    n = _int("scenario", "n", sec.get("n", "40"))
    runs = _int("scenario", "runs", sec["runs"]) if "runs" in sec else n
    seed = _int("scenario", "seed", sec.get("seed", "0"))
    v_max = _float("scenario", "v_max", sec.get("v_max", "8.0"))
    controller = sec.get("controller", "dcbf")
    max_t = _float("scenario", "max_t", sec.get("max_t", "20.0"))
    if n < 1 or runs < 1:
        raise ConfigError("[scenario] n and runs must be >= 1")
    if controller not in CONTROLLERS:
        raise ConfigError(f"[scenario] controller must be one of {', '.join(CONTROLLERS)}")
    if seed_override is not None:
        seed = seed_override

    sec = _section(parser, "model")
    _reject_unknown("model", sec, _MODEL_KEYS)
    variant = sec.get("variant", "pcarnn_split")
    if variant not in MODEL_VARIANTS:
        raise ConfigError(f"[model] variant must be one of {', '.join(MODEL_VARIANTS)}")
    try:
        hidden = tuple(int(h) for h in sec.get("hidden", "64,64").split(",") if h.strip())
    except ValueError:
        raise ConfigError("[model] hidden must be a comma-separated list of widths") from None
    if not hidden or any(h < 1 for h in hidden):
        raise ConfigError("[model] hidden widths must be positive")
    weights_name = sec.get("weights", "weights.bin")

    sec = _section(parser, "output")
    _reject_unknown("output", sec, {"dir"})
    out_dir = Path(out_override) if out_override else base / sec.get("dir", "out")

    return RunConfig(vehicle, plant, fence, dcbf, training, n, runs, seed,
                     v_max, controller, max_t, variant, hidden, weights_name, out_dir)


def _require_fence(cfg: RunConfig) -> Polygon:
    if cfg.fence is None:
        raise ConfigError("this command needs a [fence] path")
    return cfg.fence


def _ensure_dir(d: Path) -> Path:
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create {d}: {e}") from None
    return d


# -- generate ------------------------------------------------------------


def _bucket_of(k: int):
    return _SPEED_BUCKETS[k % len(_SPEED_BUCKETS)]


def _run_families(k: int):
    # latin-square enumeration: over any whole block of four runs each
    # steering family and each force family appears exactly once, and the
    # pairing rotates block to block so all 16 combinations recur
    block, slot = divmod(k, len(POLICY_FAMILIES))
    steer = POLICY_FAMILIES[slot]
    force = POLICY_FAMILIES[(slot + block) % len(POLICY_FAMILIES)]
    return steer, force


def _roll_plant(plant: PlantConfig, x0: WorldState, policy, duration: float):
    """Open-loop plant log: states at each cycle plus the applied command."""
    n = int(round(duration / CONTROL_PERIOD))
    ws, rate = x0, 0.0
    states, cmds = [ws], []
    for k in range(n):
        u = applied_command(ws, policy.at(k * CONTROL_PERIOD))
        cmds.append(u)
        ws, rate = plant_step(plant, ws, u, CONTROL_PERIOD, rate)
        states.append(ws)
    cmds.append(cmds[-1])  # hold for the final sample
    return states, cmds


def cmd_generate(cfg: RunConfig) -> None:
    """Plant logs over the policy-family grid, then the processed dataset:
    finite-difference derivatives, lateral mirroring, split manifest."""
    rng = np.random.default_rng(component_seed(cfg.seed, "generate"))
    bounds = ActuatorBounds()
    raw_dir = _ensure_dir(cfg.out_dir / "raw")
    processed_dir = _ensure_dir(cfg.out_dir / "processed")

    samples, strata, spans, poses = [], [], [], []
    for k in range(cfg.runs):
        families = _run_families(k)
        name, lo, hi = _bucket_of(k)
        x0 = WorldState(0.0, 0.0, 0.0, rng.uniform(lo, hi), 0.0, 0.0,
                        rng.uniform(-0.3, 0.3))
        policy = sample_policy(rng, bounds, horizon=GEN_DURATION, families=families)
        states, cmds = _roll_plant(cfg.plant, x0, policy, GEN_DURATION)
        with open(raw_dir / f"run_{k:03d}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_RAW_COLUMNS)
            for i, (ws, u) in enumerate(zip(states, cmds)):
                w.writerow([repr(float(v)) for v in (i * CONTROL_PERIOD, *ws, *u)])

        # the processed dataset keeps only the moving prefix: once the
        # run brakes below the floor, slip angles lose meaning and the
        # finite differences would pair garbage labels with valid states
        cut = next((i for i, ws in enumerate(states) if ws.v_x < GEN_SPEED_FLOOR),
                   len(states))
        if cut < 3:
            continue
        start = len(samples)
        bodies = [ws.body for ws in states[:cut]]
        samples += finite_diff_derivatives(bodies, cmds[:cut], CONTROL_PERIOD)
        strata += [f"{families[0]}|{families[1]}|{name}"] * len(bodies)
        spans.append((start, len(samples)))
        poses += [(k, i * CONTROL_PERIOD, ws.p_x, ws.p_y, ws.psi)
                  for i, ws in enumerate(states[:cut])]

    if not samples:
        raise ConfigError("every generated run stalled below the speed floor; "
                          "raise v ranges or shorten the horizon")
    ds = mirror_augment(Dataset(samples, strata, tuple(spans), CONTROL_PERIOD))
    n_orig = len(poses)
    poses += [(run + cfg.runs, t, p_x, -p_y, -psi) for run, t, p_x, p_y, psi in poses[:n_orig]]

    with open(processed_dir / "dataset.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_DATASET_COLUMNS)
        for (run, t, p_x, p_y, psi), sample, tag in zip(poses, ds.samples, ds.strata):
            w.writerow([run] + [repr(float(v)) for v in (t, p_x, p_y, psi,
                        *sample.body, *sample.u, *sample.xdot_gt)] + [tag])

    # split on row indices so the manifest points into dataset.csv; the
    # permutation matches a split of the real dataset (same strata, seed)
    index_ds = Dataset(list(range(len(ds))), list(ds.strata), (), ds.dt)
    parts = stratified_split(index_ds, SPLIT_FRACTIONS, component_seed(cfg.seed, "split"))
    assignment = {}
    for split_name, part in zip(SPLIT_NAMES, parts):
        for row in part.samples:
            assignment[row] = split_name
    with open(processed_dir / "splits.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("row_id", "split"))
        for row in range(len(ds)):
            w.writerow((row, assignment[row]))
    print(f"wrote {cfg.runs} plant logs -> {len(ds.runs)} dataset runs, "
          f"{len(ds)} samples after mirroring, under {cfg.out_dir}")


# -- dataset loading -----------------------------------------------------


def load_dataset(processed_dir) -> Dataset:
    """Rebuild the Dataset (samples, strata, run spans) from dataset.csv."""
    path = Path(processed_dir) / "dataset.csv"
    if not path.is_file():
        raise InputError(f"no dataset at {path}; run generate first")
    samples, strata, spans = [], [], []
    last_run, start = None, 0
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            r = csv.reader(fh)
            header = tuple(next(r, ()))
            if header != _DATASET_COLUMNS:
                raise ValueError(f"unexpected columns {header}")
            for row in r:
                run = int(row[0])
                vals = [float(v) for v in row[1:15]]
                if run != last_run:
                    if last_run is not None:
                        spans.append((start, len(samples)))
                    last_run, start = run, len(samples)
                samples.append(TrajectorySample(
                    BodyState(*vals[4:8]), ControlInput(*vals[8:10]), tuple(vals[10:14])
                ))
                strata.append(row[15])
    except (OSError, ValueError, IndexError) as e:
        raise InputError(f"cannot read {path}: {e}") from None
    if last_run is not None:
        spans.append((start, len(samples)))
    return Dataset(samples, strata, tuple(spans), CONTROL_PERIOD)


def load_split(processed_dir, ds: Dataset, name: str) -> Dataset:
    path = Path(processed_dir) / "splits.csv"
    if not path.is_file():
        raise InputError(f"no split manifest at {path}; run generate first")
    rows = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            r = csv.reader(fh)
            next(r, None)
            for row_id, split in r:
                if split == name:
                    rows.append(int(row_id))
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read {path}: {e}") from None
    if not rows:
        raise InputError(f"split {name!r} is empty in {path}")
    return Dataset([ds.samples[i] for i in rows], [ds.strata[i] for i in rows], (), ds.dt)


# -- calibrate / train ---------------------------------------------------


def _params_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "params.json"


def _active_params(cfg: RunConfig) -> VehicleParams:
    """Calibrated parameters when present, config vehicle otherwise."""
    path = _params_path(cfg)
    if path.is_file():
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return VehicleParams(**json.load(fh))
        except (OSError, ValueError, TypeError) as e:
            raise InputError(f"cannot load {path}: {e}") from None
    return cfg.vehicle


def cmd_calibrate(cfg: RunConfig) -> None:
    ds = load_dataset(cfg.out_dir / "processed")
    training = dataclasses.replace(cfg.training, seed=component_seed(cfg.seed, "calibrate"))
    fitted = calibrate_params(ds, cfg.vehicle, training)
    _ensure_dir(cfg.out_dir)
    with open(_params_path(cfg), "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(fitted), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"calibrated C_f={fitted.C_f:.1f} C_r={fitted.C_r:.1f} "
          f"C_shape={fitted.C_shape:.4f} E_curv={fitted.E_curv:.4f}")


def _build_model(cfg: RunConfig, params: VehicleParams):
    rng = np.random.default_rng(component_seed(cfg.seed, "model"))
    if cfg.variant == "residual":
        return make_residual(params, cfg.hidden, rng)
    if cfg.variant == "neural_ode":
        return make_neural_ode(cfg.hidden, rng)
    if cfg.variant == "pcarnn_shared":
        return make_pcarnn_shared(params, cfg.hidden, rng)
    return make_pcarnn_split(params, cfg.hidden, cfg.hidden, rng)


def cmd_train(cfg: RunConfig) -> None:
    if cfg.variant == "analytical":
        raise ConfigError("the analytical variant has no weights to train")
    ds = load_dataset(cfg.out_dir / "processed")
    train_ds = load_split(cfg.out_dir / "processed", ds, "train")
    model = _build_model(cfg, _active_params(cfg))
    training = dataclasses.replace(cfg.training, seed=component_seed(cfg.seed, "train"))
    history = []
    train_residuals(train_ds, model, training, loss_history=history)
    _ensure_dir(cfg.out_dir)
    save_weights(cfg.out_dir / cfg.weights_name, model)
    with open(cfg.out_dir / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train_loss"))
        for epoch, loss in enumerate(history):
            w.writerow((epoch, repr(loss)))
    print(f"trained {cfg.variant} for {len(history)} epochs; "
          f"final loss {history[-1]:.6f}" if history else "trained (no epochs)")


# -- simulate / evaluate / linearity --------------------------------------


def _controller_model(cfg: RunConfig):
    params = _active_params(cfg)
    if cfg.variant == "analytical":
        return AnalyticalModel(params)
    path = cfg.out_dir / cfg.weights_name
    if not path.is_file():
        raise InputError(f"no weights at {path}; run train first")
    return load_weights(path, params)


def _make_controller(cfg: RunConfig, fence: Polygon, bounds: ActuatorBounds):
    if cfg.controller == "null":
        return null_controller(fence)
    model = _controller_model(cfg)
    if cfg.controller == "ttc":
        return ttc_baseline_controller(model, bounds, fence)
    return dcbf_controller(model, bounds, fence, cfg.dcbf)


def cmd_simulate(cfg: RunConfig) -> None:
    fence = _require_fence(cfg)
    bounds = ActuatorBounds()
    scenarios = generate_scenarios(fence, cfg.n, component_seed(cfg.seed, "scenario"),
                                   cfg.plant, bounds, cfg.v_max, cfg.max_t)
    controller = _make_controller(cfg, fence, bounds)
    ep_dir = _ensure_dir(cfg.out_dir / "episodes")
    for stale in ep_dir.glob("ep_*.csv"):
        stale.unlink()
    breaches = 0
    for i, sc in enumerate(scenarios):
        log = run_episode(controller, cfg.plant, sc, cfg.max_t, bounds)
        breaches += log.breach
        write_episode_csv(log, ep_dir / f"ep_{i:04d}.csv")
    print(f"ran {len(scenarios)} episodes with controller={cfg.controller}; "
          f"{breaches} breached")


def cmd_evaluate(cfg: RunConfig) -> None:
    ep_dir = cfg.out_dir / "episodes"
    files = sorted(ep_dir.glob("ep_*.csv")) if ep_dir.is_dir() else []
    if not files:
        raise ConfigError(f"no episodes in {ep_dir}")
    try:
        summaries = [read_episode_summary(f) for f in files]
    except (OSError, KeyError, ValueError) as e:
        raise InputError(f"cannot read episode logs: {e}") from None
    report = compute_metrics(summaries)
    write_metrics_csv(report, cfg.out_dir / "metrics.csv")
    text = format_metrics(report)
    with open(cfg.out_dir / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)


def cmd_linearity(cfg: RunConfig) -> None:
    fence = _require_fence(cfg)
    bounds = ActuatorBounds()
    scenarios = generate_scenarios(fence, cfg.n, component_seed(cfg.seed, "linearity"),
                                   cfg.plant, bounds, cfg.v_max, cfg.max_t)
    model = _controller_model(cfg)
    eps = linearity_analysis(model, [sc.x0 for sc in scenarios], fence, bounds)
    _ensure_dir(cfg.out_dir)
    write_linearity_csv(eps, cfg.out_dir / "linearity.csv")
    print(f"median eps_lin {float(np.median(eps)):.6f} m over {eps.shape[0]} states")


# -- entry point ----------------------------------------------------------


_COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "linearity": cmd_linearity,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geofence-guard",
        description="geofence enforcement: data generation, model fitting, "
                    "closed-loop evaluation",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--seed", type=int, default=None, help="override the master seed")
        s.add_argument("--out", default=None, help="override the output directory")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergedLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
