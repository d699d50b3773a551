"""Command-line driver: data, train, sample, eval and study.

Every run is configured by a JSON file (``--config``) plus ``--section.key=value``
overrides and writes the fully resolved configuration next to its outputs.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 containment failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CONTAINMENT = 0, 2, 3, 4
THREADS_ENV = "CONFINED_DIFFUSION_THREADS"

DEFAULTS = {
    "seed": 0,
    "output": "run",
    "domain": None,
    "dynamics": {"T": 1.0, "h": 0.005, "gamma": 1.0, "drift": "zero", "increments": "gaussian"},
    "data": {"set": "gm", "n": None, "path": None},
    "train": {"model": "cld", "scheme": "AcOAc", "iterations": 5000, "batch": 0, "times_per_traj": 1,
              "loss": "", "c": None, "lr": 5e-4, "ema_decay": 0.999, "delta": 1e-3,
              "hidden": [128, 128, 128], "dtype": "float64", "penalty_lambda": None, "barrier_eta": 0.05},
    "generate": {"scheme": "saoas", "n_samples": 2000, "init": "uniform_gauss", "use_ema": True,
                 "keep_velocity": False, "checkpoint": None, "analytic": None, "runs": 1,
                 "penalty_lambda": None, "barrier_eta": 0.05},
    "eval": {"samples": [], "data": None, "bandwidth": None},
    "study": {"model": "cld", "scheme": "AcOAc", "n": 50000, "T": 20.0, "h": 0.01,
              "method": "symmetrized", "h_list": [0.05, 0.025, 0.0125, 0.00625], "x0": [0.5],
              "reference": "pde", "increments": ["gaussian", "rademacher"]},
}

log = logging.getLogger("confined_diffusion")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, update: dict, path: str = ""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    """``--a.b=value`` strings to a nested dict (values parsed as JSON when possible)."""
    out: dict = {}
    for item in items:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognised argument {item!r} (overrides look like --section.key=value)")
        key, value = item[2:].split("=", 1)
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def resolve_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        _merge(cfg, user)
    if overrides:
        _merge(cfg, overrides)
    return cfg


def write_echo(cfg: dict, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "config": cfg}
    (out_dir / "resolved_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def _domain(cfg: dict, fallback_set: str = None):
    from .datasets import DATASET_DOMAINS
    from .geometry import domain_from_dict

    if cfg["domain"] is not None:
        return domain_from_dict(cfg["domain"])
    if fallback_set in DATASET_DOMAINS:
        dom = DATASET_DOMAINS[fallback_set]
        cfg["domain"] = dom.to_dict()
        return dom
    return None


def set_threads(n=None):
    import torch

    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("--threads must be at least 1")
    torch.set_num_threads(n)
    return n


# --------------------------------------------------------------------------
# commands


def cmd_data(args, cfg) -> int:
    from .datasets import GENERATORS, generate_dataset, load_csv, save_csv

    out = Path(cfg["output"])
    if args.action == "gen":
        name = cfg["data"]["set"]
        if name not in GENERATORS:
            raise UsageError(f"unknown dataset {name!r}; expected one of {sorted(GENERATORS)}")
        cloud = generate_dataset(name, cfg["data"]["n"], cfg["seed"])
        target = Path(args.file) if args.file else out / f"{name}.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        save_csv(cloud, target)
        cfg["domain"] = cloud.domain.to_dict()
        write_echo(cfg, target.parent, "data gen")
        print(f"wrote {len(cloud)} points to {target}")
    else:
        path = args.file or cfg["data"]["path"]
        if not path:
            raise UsageError("data check needs a file")
        cloud = load_csv(path, _domain(cfg))
        print(f"{path}: {len(cloud)} points, all inside the domain")
    return EXIT_OK


def _load_training_data(cfg):
    from .datasets import generate_dataset, load_csv

    domain = _domain(cfg, cfg["data"]["set"])
    path = cfg["data"]["path"]
    if path:
        if not Path(path).exists():
            raise UsageError(f"dataset file {path} not found")
        return domain, load_csv(path, domain).points
    if cfg["data"]["set"]:
        return domain, generate_dataset(cfg["data"]["set"], cfg["data"]["n"], cfg["seed"]).points
    raise UsageError("training needs data.path or data.set")


def cmd_train(args, cfg) -> int:
    from .training import TrainConfig, save_result, train, write_history

    out = Path(cfg["output"])
    domain, data = _load_training_data(cfg)
    tc = TrainConfig(**cfg["train"], **cfg["dynamics"], seed=cfg["seed"])
    cfg["train"].update({k: v for k, v in tc.to_dict().items() if k in cfg["train"]})
    if domain is None and tc.model != "unconstrained":
        raise UsageError("a domain is required")
    write_echo(cfg, out, "train")
    result = train(tc, domain, data)
    sha = save_result(result, out / "checkpoint.bin", domain)
    write_history(out / "loss.csv", result.history)
    print(f"trained {tc.iterations} iterations in {result.seconds:.1f}s; final loss {result.history[-1]['total']:.6f}")
    print(f"checkpoint {out / 'checkpoint.bin'} sha256 {sha}")
    return EXIT_OK


def _score_source(cfg):
    """Returns (score, dim, dynamics overrides from the checkpoint, checkpoint sha)."""
    from .sampling import gaussian_velocity_score, is_kinetic, zero_score
    from .score_model import load_checkpoint

    gen = cfg["generate"]
    if gen["analytic"]:
        kinetic = is_kinetic(gen["scheme"])
        if gen["analytic"] == "zero":
            return zero_score(kinetic), None, {}, None
        if gen["analytic"] == "gaussian_velocity":
            return gaussian_velocity_score(), None, {}, None
        raise UsageError(f"unknown analytic score {gen['analytic']!r}")
    if not gen["checkpoint"]:
        raise UsageError("sampling needs generate.checkpoint or generate.analytic")
    if not Path(gen["checkpoint"]).exists():
        raise UsageError(f"checkpoint {gen['checkpoint']} not found")
    net, header, sha = load_checkpoint(gen["checkpoint"], "ema" if gen["use_ema"] else "raw")
    meta = header.get("meta", {})
    train_cfg = meta.get("train", {})
    dyn = {k: train_cfg[k] for k in ("T", "h", "gamma", "drift") if k in train_cfg}
    if cfg["domain"] is None and meta.get("domain"):
        cfg["domain"] = meta["domain"]
    return net, net.dim, dyn, sha


def _generate_runs(cfg, runs: int):
    from .sampling import GenConfig, generate

    score, dim, dyn, sha = _score_source(cfg)
    cfg["dynamics"].update(dyn)
    domain = _domain(cfg)
    gen = cfg["generate"]
    results = []
    for r in range(runs):
        gc = GenConfig(scheme=gen["scheme"], n_samples=gen["n_samples"], T=cfg["dynamics"]["T"],
                       h=cfg["dynamics"]["h"], gamma=cfg["dynamics"]["gamma"], drift=cfg["dynamics"]["drift"],
                       init=gen["init"], seed=cfg["seed"] + r, use_ema=gen["use_ema"],
                       keep_velocity=gen["keep_velocity"], penalty_lambda=gen["penalty_lambda"],
                       barrier_eta=gen["barrier_eta"])
        results.append((gc, generate(gc, domain, score, dim=dim)))
    return domain, results, sha


def cmd_sample(args, cfg) -> int:
    from .datasets import save_csv
    from .sampling import canonical_scheme, write_metadata

    try:
        cfg["generate"]["scheme"] = canonical_scheme(cfg["generate"]["scheme"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["output"])
    domain, results, sha = _generate_runs(cfg, int(cfg["generate"]["runs"]))
    write_echo(cfg, out, "sample")
    for i, (gc, res) in enumerate(results):
        stem = "samples" if len(results) == 1 else f"samples_{i}"
        save_csv(res.x, out / f"{stem}.csv")
        if res.v is not None:
            save_csv(res.v, out / f"{stem}_velocity.csv")
        write_metadata(out / f"{stem}.meta.json", gc, res, sha)
        print(f"{stem}: {res.x.shape[0]} points, scheme {gc.scheme}, NFE {res.nfe}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .datasets import load_csv
    from .evaluation import constraint_violation, mean_stderr, mmd

    out = Path(cfg["output"])
    ev = cfg["eval"]
    if not ev["data"]:
        raise UsageError("eval needs eval.data")
    domain = _domain(cfg)
    data = load_csv(ev["data"]).points
    clouds = []
    if ev["samples"]:
        clouds = [(p, load_csv(p).points) for p in ev["samples"]]
    elif cfg["generate"]["checkpoint"] or cfg["generate"]["analytic"]:
        domain, results, _ = _generate_runs(cfg, int(cfg["generate"]["runs"]))
        clouds = [(f"run{i}", res.x) for i, (_, res) in enumerate(results)]
    else:
        raise UsageError("eval needs eval.samples or a generate.checkpoint")
    per_run = []
    for name, pts in clouds:
        row = {"name": str(name), "mmd": mmd(pts, data, ev["bandwidth"])}
        if domain is not None:
            row["violation"] = constraint_violation(pts, domain)
        per_run.append(row)
    summary = {"runs": per_run}
    for key in ("mmd", "violation"):
        vals = [r[key] for r in per_run if key in r]
        if vals:
            m, se = mean_stderr(vals)
            summary[key] = {"mean": m, "stderr": se}
    write_echo(cfg, out, "eval")
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}))
    return EXIT_OK


def cmd_study(args, cfg) -> int:
    from .evaluation import (local_time_rate_study, reflected_generator_expectation, stationarity_tests,
                             weak_order_study)
    from .geometry import Box
    from .integrators import DynamicsConfig, Drift, KineticState, forward_cld_step, simulate_reflected
    from .noise import NoiseSource
    from .sampling import uniform_in

    out = Path(cfg["output"])
    st = cfg["study"]
    write_echo(cfg, out, f"study {args.which}")
    if args.which == "stationarity":
        domain = _domain(cfg) or Box.cube(-1.0, 1.0, 2)
        dyn = DynamicsConfig(st["T"], st["h"], cfg["dynamics"]["gamma"], cfg["dynamics"]["drift"])
        noise = NoiseSource(cfg["seed"])
        x0 = uniform_in(domain, st["n"], noise.rng(0, slot=77))
        if st["model"] == "cld":
            v0 = noise.gaussian(0, x0.shape, slot=78)
            state = KineticState(x0, v0, 0)
            for _ in range(dyn.N):
                state, _ = forward_cld_step(domain, st["scheme"], state, dyn, noise)
            x, v = state.x, state.v
        else:
            path = simulate_reflected(domain, st["method"], dyn, x0, noise)
            x, v = path.x[-1], None
        report = stationarity_tests(x, v, domain, gibbs=dyn.drift.kind == "linear")
        (out / "stationarity.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(json.dumps(report))
        return EXIT_OK
    if args.which == "weak-order":
        domain = _domain(cfg) or Box.cube(-1.0, 1.0, 1)
        drift = Drift.parse(cfg["dynamics"]["drift"])
        T = cfg["dynamics"]["T"]
        phi = lambda x: np.sum(np.asarray(x) ** 2, axis=-1)
        ref = None
        if st["reference"] == "pde":
            if not isinstance(domain, Box) or domain.dim != 1:
                raise UsageError("the PDE reference needs a 1-D box")
            ref = reflected_generator_expectation(lambda x: x**2, st["x0"][0], T, drift, domain.lo[0], domain.hi[0])
        rep = weak_order_study(st["method"], domain, st["h_list"], phi, st["x0"], T=T, drift=drift, n=st["n"],
                               seed=cfg["seed"], reference=ref)
        rep.save(out / "weak_order")
        print(json.dumps({"orders": rep.orders, "rows": rep.rows}))
        return EXIT_OK
    if args.which == "local-time":
        domain = _domain(cfg) or Box.cube(0.0, 1.0, 1)
        orders = {}
        ref_kind = "fine" if st["reference"] in ("fine", "pde") else st["reference"]
        for inc in st["increments"]:
            rep = local_time_rate_study(st["h_list"], inc, domain, x0=st["x0"], t=cfg["dynamics"]["T"], n=st["n"],
                                        seed=cfg["seed"], method=st["method"], reference=ref_kind)
            rep.save(out / f"local_time_{inc}")
            orders.update(rep.orders)
        print(json.dumps({"orders": orders}))
        return EXIT_OK
    raise UsageError(f"unknown study {args.which!r}")


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="confined-diffusion", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--threads", type=int, default=None, help=f"torch threads (default ${THREADS_ENV} or all cores)")
    p.add_argument("--out", help="output directory (same as --output=...)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="generate or validate point clouds")
    d.add_argument("action", choices=["gen", "check"])
    d.add_argument("--set", dest="set_name")
    d.add_argument("--n", type=int)
    d.add_argument("--file", help="output (gen) or input (check) CSV")

    t = sub.add_parser("train", help="train a score network")
    t.add_argument("--data", help="training CSV")
    t.add_argument("--loss")
    t.add_argument("--scheme")
    t.add_argument("--model")
    t.add_argument("--iterations", type=int)

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--scheme")
    s.add_argument("--n", type=int)
    s.add_argument("--runs", type=int)

    e = sub.add_parser("eval", help="MMD and constraint violation")
    e.add_argument("--data")
    e.add_argument("--samples", nargs="*")
    e.add_argument("--checkpoint")
    e.add_argument("--scheme")
    e.add_argument("--runs", type=int)

    st = sub.add_parser("study", help="numerical studies")
    st.add_argument("which", choices=["stationarity", "weak-order", "local-time"])
    return p


def _flag_overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if args.out is not None:
        o["output"] = args.out
    if args.seed is not None:
        o["seed"] = args.seed
    if args.command == "data":
        put("data", "set", args.set_name)
        put("data", "n", args.n)
    elif args.command == "train":
        put("data", "path", args.data)
        put("train", "loss", args.loss)
        put("train", "scheme", args.scheme)
        put("train", "model", args.model)
        put("train", "iterations", args.iterations)
    elif args.command in ("sample", "eval"):
        put("generate", "checkpoint", args.checkpoint)
        put("generate", "scheme", args.scheme)
        put("generate", "runs", args.runs)
        if args.command == "sample":
            put("generate", "n_samples", args.n)
        else:
            put("eval", "data", args.data)
            put("eval", "samples", args.samples)
    return o


COMMANDS = {"data": cmd_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "study": cmd_study}


def main(argv=None) -> int:
    from .datasets import ContainmentViolation
    from .sampling import ContainmentError
    from .training import TrainingError

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = parse_overrides(extra)
        cfg = resolve_config(args.config, overrides)
        _merge(cfg, _flag_overrides(args))
        set_threads(args.threads)
        return COMMANDS[args.command](args, cfg)
    except (ContainmentViolation, ContainmentError) as exc:
        print(f"containment failure: {exc}", file=sys.stderr)
        return EXIT_CONTAINMENT
    except (FloatingPointError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
