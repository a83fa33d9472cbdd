"""Command-line entry point: ``comlab {generate,train,eval,scan,params}``.

Every command resolves its settings as defaults < ``--config`` file <
``COMLAB_SEED`` < explicit flags, and writes a ``manifest.json`` holding the
resolved config and sha256 hashes of what it wrote. Passing that manifest back
through ``--config`` reruns the command.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (EvalReport, constant_drift, contour_grid, initial_states, learned_constants,
                         rmse_stats, scan_num_constants, write_contour_csv, write_matrix_csv)
from .losses import LossWeights
from .models import NetworkConfig, count_params, load_checkpoint, n_params, save_checkpoint
from .systems import (SYSTEMS, generate_dataset, get_system, integrate, load_dataset, save_dataset,
                      system_rule)
from .training import TrainConfig, train_comet, train_meta_comet

log = logging.getLogger("comlab")

SEED_ENV = "COMLAB_SEED"
MODEL_KINDS = ("meta-comet", "comet")

# rank used for each system in the reference parameter table
TABLE_RANKS = {"mass-spring": 10, "2d-pendulum": 10, "damped-pendulum": 10, "two-body": 20,
               "nonlinear-spring-2d": 30, "lotka-volterra": 10}

DEFAULTS = {
    "seed": 0,
    "out": None,
    "jobs": 1,
    "dataset": None,
    "checkpoint": None,
    "system": {"name": "mass-spring", "n_traj": 100, "t_end": 10.0, "n_points": 50, "sigma": 0.0},
    "net": {"model": "meta-comet", "n_c": None, "width": 250, "depth_hidden": 2, "rank": 10,
            "activation": "silu"},
    "train": {
        "epochs_phase1": 1000, "epochs_phase2": 1000, "batch_size": 512, "lr_max": 1e-3,
        "lr_min": 1e-5, "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8, "patience": 100,
        "val_fraction": 0.2,
        "weights": {"w0": 1.0, "w1_comet": 1.0, "w2_comet": 1.0, "w1_ortho": None, "w2_ortho": None},
    },
    "eval": {"n_sims": 100, "t_end": 100.0, "n_points": 1000, "contour_resolution": 50,
             "contour_bound": 1.5, "drift_t_end": 20.0},
    "scan": {"nc_min": 0, "nc_max": None, "seeds": 5, "threshold": 3.0},
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config resolution


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be a table")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def read_config(path) -> dict:
    """Load a JSON config; a run manifest contributes its ``config`` entry."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    if "manifest_version" in data:
        data = data["config"]
    return data


# flag dest -> path in the config tree
FLAG_PATHS = {
    "seed": ("seed",), "out": ("out",), "jobs": ("jobs",), "dataset": ("dataset",),
    "checkpoint": ("checkpoint",),
    "system": ("system", "name"), "n_traj": ("system", "n_traj"), "data_t_end": ("system", "t_end"),
    "data_n_points": ("system", "n_points"), "sigma": ("system", "sigma"),
    "model": ("net", "model"), "nc": ("net", "n_c"), "width": ("net", "width"),
    "depth": ("net", "depth_hidden"), "rank": ("net", "rank"), "activation": ("net", "activation"),
    "epochs_phase1": ("train", "epochs_phase1"), "epochs_phase2": ("train", "epochs_phase2"),
    "batch_size": ("train", "batch_size"), "lr_max": ("train", "lr_max"),
    "lr_min": ("train", "lr_min"), "patience": ("train", "patience"),
    "val_fraction": ("train", "val_fraction"),
    "n_sims": ("eval", "n_sims"), "t_end": ("eval", "t_end"), "n_points": ("eval", "n_points"),
    "contour_resolution": ("eval", "contour_resolution"),
    "contour_bound": ("eval", "contour_bound"), "drift_t_end": ("eval", "drift_t_end"),
    "nc_min": ("scan", "nc_min"), "nc_max": ("scan", "nc_max"), "seeds": ("scan", "seeds"),
    "threshold": ("scan", "threshold"),
}


def resolve_config(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        cfg = _merge(cfg, read_config(args.config))
    if environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
    for dest, path in FLAG_PATHS.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        if dest == "patience" and val == "none":
            val = None
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = val
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    system = cfg["system"]
    if system["name"] not in SYSTEMS:
        raise ConfigError(f"unknown system {system['name']!r}; valid: {', '.join(SYSTEMS)}")
    if system["sigma"] < 0:
        raise ConfigError(f"sigma must be >= 0, got {system['sigma']}")
    for key in ("n_traj", "n_points"):
        if system[key] < 1:
            raise ConfigError(f"system.{key} must be >= 1")
    if cfg["net"]["model"] not in MODEL_KINDS:
        raise ConfigError(f"model must be one of {MODEL_KINDS}")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg["eval"]["n_sims"] < 1:
        raise ConfigError("eval.n_sims must be >= 1")
    if cfg["scan"]["seeds"] < 1:
        raise ConfigError("scan.seeds must be >= 1")
    try:
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    weights = LossWeights(**t.pop("weights"))
    return TrainConfig(seed=cfg["seed"], weights=weights, **t)


def net_config(cfg: dict, n_s: int, n_f: int, n_c_default: int) -> NetworkConfig:
    net = cfg["net"]
    n_c = n_c_default if net["n_c"] is None else net["n_c"]
    try:
        return NetworkConfig(n_s=n_s, n_c=n_c, n_f=n_f, width=net["width"],
                             depth_hidden=net["depth_hidden"], rank=net["rank"],
                             activation=net["activation"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, artifacts: list[Path],
                   inputs: dict[str, str] | None = None, timing: dict | None = None) -> Path:
    manifest = {
        "manifest_version": 1,
        "comlab_version": __version__,
        "command": command,
        "config": cfg,
        "inputs": {k: sha256_file(v) for k, v in (inputs or {}).items()},
        "artifacts": {p.name: sha256_file(p) for p in artifacts},
    }
    if timing:
        manifest["wall_clock"] = timing
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _out_dir(cfg: dict, default: str) -> Path:
    out = Path(cfg["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_for(cfg: dict, system_given: bool):
    if cfg["dataset"]:
        ds = load_dataset(cfg["dataset"])
        if ds.system != cfg["system"]["name"] and system_given:
            raise ConfigError(f"dataset {cfg['dataset']} holds {ds.system!r}, "
                              f"config asks for {cfg['system']['name']!r}")
        cfg["system"]["name"] = ds.system
        return ds
    s = cfg["system"]
    return generate_dataset(s["name"], s["n_traj"], s["t_end"], s["n_points"], s["sigma"], cfg["seed"])


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict, system_given: bool = True) -> list[Path]:
    s = cfg["system"]
    out_dir = _out_dir(cfg, f"runs/generate-{s['name']}")
    ds = generate_dataset(s["name"], s["n_traj"], s["t_end"], s["n_points"], s["sigma"], cfg["seed"])
    path = out_dir / "dataset.csv"
    save_dataset(ds, path)
    log.info("wrote %d samples to %s", len(ds), path)
    return [path, write_manifest(out_dir, "generate", cfg, [path])]


def cmd_train(cfg: dict, system_given: bool = True) -> list[Path]:
    ds = _dataset_for(cfg, system_given)
    system = get_system(ds.system)
    out_dir = _out_dir(cfg, f"runs/train-{ds.system}")
    net = net_config(cfg, ds.n_s, ds.n_f, system.n_c_true)
    if ds.n_s != system.n_s:
        raise ConfigError(f"dataset has n_s={ds.n_s} but {system.name} has n_s={system.n_s}")
    tcfg = train_config(cfg)
    if cfg["net"]["model"] == "comet":
        result = train_comet(tcfg, net, ds)
        histories = {"history.csv": result.phase2}
    else:
        result = train_meta_comet(tcfg, net, ds)
        histories = {"history_phase1.csv": result.phase1, "history_phase2.csv": result.phase2}
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(result.params, net, ckpt)
    written = [ckpt]
    for name, hist in histories.items():
        hist.write_csv(out_dir / name)
        written.append(out_dir / name)
    log.info("trained %s with %d parameters", cfg["net"]["model"], n_params(result.params))
    inputs = {"dataset": cfg["dataset"]} if cfg["dataset"] else None
    return written + [write_manifest(out_dir, "train", cfg, written, inputs)]


def _checkpoint_system(cfg: dict, ckpt: Path, system_given: bool) -> str:
    if system_given:
        return cfg["system"]["name"]
    sibling = ckpt.parent / "manifest.json"
    if sibling.exists():
        return read_config(sibling)["system"]["name"]
    return cfg["system"]["name"]


def cmd_eval(cfg: dict, system_given: bool = True) -> list[Path]:
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    ckpt = Path(cfg["checkpoint"])
    params, net = load_checkpoint(ckpt)
    system = get_system(_checkpoint_system(cfg, ckpt, system_given))
    cfg["system"]["name"] = system.name
    if net.n_s != system.n_s or net.n_f != system.n_f:
        raise ConfigError(f"checkpoint expects n_s={net.n_s}, n_f={net.n_f}; "
                          f"{system.name} has n_s={system.n_s}, n_f={system.n_f}")
    ev = cfg["eval"]
    out_dir = _out_dir(cfg, f"runs/eval-{system.name}")
    act = net.activation

    entry = rmse_stats(params, system, ev["n_sims"], ev["t_end"], ev["n_points"], cfg["seed"],
                       activation=act, jobs=cfg["jobs"])
    report = EvalReport({system.name: entry}, rollout_failures=entry.failures,
                        wall_clock=entry.wall_clock)

    # learned and true constants along one clean trajectory
    s0, force = initial_states(system, 1, cfg["seed"])[0]
    t = np.linspace(0.0, ev["drift_t_end"], ev["n_points"])
    traj = integrate(system_rule(system, force), s0, (0.0, t[-1]), "rk45", t_eval=t)
    F = force(t) if system.forced else None
    learned = constant_drift(lambda s: learned_constants(params, s, F, activation=act), traj.s)
    true = constant_drift(system.constants, traj.s)
    names = [f"c{i}" for i in range(net.n_c)] + [f"true_{n}" for n in system.constant_names]
    for name, d, flag in zip(names, np.concatenate([learned.drift, true.drift]),
                             np.concatenate([learned.absolute, true.absolute])):
        report.drift[name] = float(d)
        report.drift_absolute[name] = bool(flag)

    paths = [out_dir / "report.json", out_dir / "rmse.csv", out_dir / "drift.csv"]
    report.write_json(paths[0], timing=False)
    write_matrix_csv(paths[1], ["sim", "rmse"], [(i, r) for i, r in enumerate(entry.rmse)])
    write_matrix_csv(paths[2], ["t"] + names,
                     np.column_stack([t, learned.values, true.values]))
    if net.n_c > 0:
        b = ev["contour_bound"]
        xs, ys, grid = contour_grid(params, (0, 1), ((-b, b), (-b, b)), ev["contour_resolution"],
                                    s0, activation=act)
        paths.append(out_dir / "contour.csv")
        write_contour_csv(paths[-1], xs, ys, grid)
    log.info("%s: median RMSE %.4g [%.4g, %.4g], %d failed", system.name, entry.median,
             entry.lower, entry.upper, entry.failures)
    return paths + [write_manifest(out_dir, "eval", cfg, paths, {"checkpoint": str(ckpt)},
                                   timing={system.name: report.wall_clock})]


def cmd_scan(cfg: dict, system_given: bool = True) -> list[Path]:
    ds = _dataset_for(cfg, system_given)
    system = get_system(ds.system)
    sc = cfg["scan"]
    nc_max = system.n_s - 1 if sc["nc_max"] is None else sc["nc_max"]
    if nc_max > system.n_s - 1:
        raise ConfigError(f"nc_max={nc_max} exceeds n_s-1={system.n_s - 1} for {system.name}")
    if sc["nc_min"] < 0 or sc["nc_min"] > nc_max:
        raise ConfigError(f"invalid n_c range [{sc['nc_min']}, {nc_max}]")
    out_dir = _out_dir(cfg, f"runs/scan-{system.name}")
    net = net_config(cfg, ds.n_s, ds.n_f, 0)
    result = scan_num_constants(system, ds, range(sc["nc_min"], nc_max + 1), sc["seeds"],
                                train_config(cfg), net, cfg["seed"], threshold=sc["threshold"],
                                jobs=cfg["jobs"])
    paths = [out_dir / "scan.json", out_dir / "scan_table.csv", out_dir / "scan_curves.csv"]
    result.write_json(paths[0])
    result.write_table_csv(paths[1])
    with open(paths[2], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n_c", "seed_index", "epoch", "val_l1"])
        for key, curve in result.curves.items():
            nc, j = key.split("/")
            for epoch, val in enumerate(curve):
                writer.writerow([nc, j, epoch, repr(float(val))])
    for nc, rel in zip(result.nc_values, result.relative):
        log.info("n_c=%d relative L1 %.4g", nc, rel)
    log.info("detected n_c = %d", result.detected)
    inputs = {"dataset": cfg["dataset"]} if cfg["dataset"] else None
    return paths + [write_manifest(out_dir, "scan", cfg, paths, inputs)]


def params_table(rows=None) -> list[tuple[str, int, int, int]]:
    """``(system, rank, comet, meta-comet)`` for each system."""
    rows = rows or TABLE_RANKS.items()
    out = []
    for name, rank in rows:
        system = get_system(name)
        net = NetworkConfig(n_s=system.n_s, n_c=system.n_c_true, n_f=system.n_f, rank=rank)
        out.append((name, rank, count_params(net, "comet"), count_params(net, "meta-comet")))
    return out


def cmd_params(cfg: dict, explicit: bool) -> list[Path]:
    if explicit:
        system = get_system(cfg["system"]["name"])
        net = net_config(cfg, system.n_s, system.n_f, system.n_c_true)
        print(f"{system.name}: n_c={net.n_c} width={net.width} rank={net.rank} "
              f"{cfg['net']['model']}={count_params(net, cfg['net']['model'])}")
        return []
    print(f"{'system':<22}{'rank':>5}{'COMET':>10}{'Meta-COMET':>12}")
    for name, rank, comet, meta in params_table():
        print(f"{name:<22}{rank:>5}{comet:>10}{meta:>12}")
    return []


# --------------------------------------------------------------------------
# argument parsing


def _patience(text: str):
    if text.lower() in ("none", "off"):
        return "none"
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("patience must be >= 1 or 'none'")
    return value


def _non_negative(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _add_common(p):
    p.add_argument("--config", help="JSON config file or a run manifest")
    p.add_argument("--seed", type=int, help="root seed (overrides COMLAB_SEED)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_system(p, with_data=True):
    p.add_argument("--system", choices=list(SYSTEMS))
    if with_data:
        p.add_argument("--sigma", type=_non_negative, help="noise std added to states and derivatives")
        p.add_argument("--n-traj", dest="n_traj", type=int)
        p.add_argument("--data-t-end", dest="data_t_end", type=float)
        p.add_argument("--data-n-points", dest="data_n_points", type=int)


def _add_net(p):
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--nc", type=int, help="number of learned constants")
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int, help="number of low-rank hidden layers")
    p.add_argument("--rank", type=int)
    p.add_argument("--activation", choices=["silu", "relu"])


def _add_train(p):
    p.add_argument("--epochs-phase1", dest="epochs_phase1", type=int)
    p.add_argument("--epochs-phase2", dest="epochs_phase2", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--patience", type=_patience, help="early-stop epochs, or 'none'")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a noisy training dataset")
    _add_common(p)
    _add_system(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_common(p)
    _add_system(p)
    p.add_argument("--dataset", help="dataset file (generated from --system when omitted)")
    _add_net(p)
    _add_train(p)

    p = sub.add_parser("eval", help="rollout RMSE, drift and contour outputs for a checkpoint")
    _add_common(p)
    _add_system(p, with_data=False)
    p.add_argument("--checkpoint")
    p.add_argument("--n-sims", dest="n_sims", type=int)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--contour-resolution", dest="contour_resolution", type=int)
    p.add_argument("--contour-bound", dest="contour_bound", type=float)
    p.add_argument("--drift-t-end", dest="drift_t_end", type=float)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("scan", help="scan n_c and detect the number of constants")
    _add_common(p)
    _add_system(p)
    p.add_argument("--dataset")
    _add_net(p)
    _add_train(p)
    p.add_argument("--nc-min", dest="nc_min", type=int)
    p.add_argument("--nc-max", dest="nc_max", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("params", help="print parameter counts")
    p.add_argument("--config")
    _add_system(p, with_data=False)
    _add_net(p)
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "scan": cmd_scan}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        system_given = getattr(args, "system", None) is not None or (
            bool(args.config) and "name" in read_config(args.config).get("system", {}))
        log.debug("resolved config: %s", json.dumps(cfg, sort_keys=True))
        if args.command == "params":
            explicit = any(getattr(args, k, None) is not None
                           for k in ("system", "nc", "width", "rank", "depth", "model"))
            cmd_params(cfg, explicit)
            return 0
        paths = COMMANDS[args.command](cfg, system_given)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"comlab {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
