"""Command-line front end: simulate, train, benchmark, spectrum, inspect."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import SYSTEMS, generate_dataset, get_system, load_csv, save_csv, simulate, warmup_length
from .errors import ColokeError
from .harness import STEP_FIELDS, ExperimentConfig, derive_seed, run_experiment, stream
from .koopman import load_snapshot, save_snapshot, spectrum
from .learners import LEARNERS, KoopmanLearner, LearnerConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TRAIN_FIELDS = {"learner", "system", "csv", "dt", "seed", "horizon", "t0", "hyper", "out"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser():
    p = _Parser(prog="coloke", description="Online Koopman learning experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("simulate", help="write simulated trajectories as CSV files")
    s.add_argument("--system", required=True, choices=sorted(SYSTEMS))
    s.add_argument("--n", type=int, required=True, help="number of trajectories")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--horizon", type=int, default=None)

    t = sub.add_parser("train", help="run one learner on one stream")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--learner", choices=sorted(LEARNERS), default=None)

    b = sub.add_parser("benchmark", help="run a full multi-split experiment")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", default=None)

    sp = sub.add_parser("spectrum", help="print continuous-time eigenvalues of a snapshot")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dt", type=float, required=True)

    i = sub.add_parser("inspect", help="print snapshot dimensions and parameter counts")
    i.add_argument("--model", required=True)
    return p


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None


def cmd_simulate(args):
    print(f"seed: {args.seed}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    system = get_system(args.system)
    ds = generate_dataset(system, args.n, args.seed, n_splits=1, horizon=args.horizon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"x{i + 1}" for i in range(system.dim)]
    for k, traj in enumerate(ds.trajectories):
        save_csv(traj, out / f"{system.name}_{k:04d}.csv", header)
    print(f"wrote {len(ds.trajectories)} trajectories of {len(ds.trajectories[0])} states to {out}")
    return EXIT_OK


def _learner_snapshot(learner, path, w, seed):
    if isinstance(learner, KoopmanLearner):
        return save_snapshot(learner.model, path, w, seed)
    doc = {"learner": learner.name, "w": int(w), "seed": int(seed)}
    state = getattr(learner, "state", None)
    if state is not None:
        doc["K"] = np.asarray(state.K).ravel().tolist()
        doc["m"] = int(state.K.shape[0])
        if getattr(state, "C", None) is not None:
            doc["C"] = state.C.tolist()
            doc["degree"] = state.degree
    else:
        doc["K"] = learner.params.view("K").ravel().tolist()
        doc["m"] = int(learner.m)
        doc["params"] = learner.params.values.tolist()
    Path(path).write_text(json.dumps(doc))
    return path


def _train_stream(doc, seed):
    if doc.get("csv") is not None:
        traj = load_csv(doc["csv"], doc.get("dt"))
        return traj.states, traj.dt
    if doc.get("system") is None:
        raise UsageError("train config needs field 'system' or 'csv'")
    system = get_system(doc["system"])
    rng = np.random.default_rng(derive_seed(seed, "dataset"))
    lo, hi = np.array(system.init_box).T
    traj = simulate(system, rng.uniform(lo, hi), doc.get("horizon"))
    return traj.states, system.dt


def cmd_train(args):
    doc = _read_json(args.config)
    unknown = set(doc) - TRAIN_FIELDS
    if unknown:
        raise UsageError(f"unknown config field(s): {sorted(unknown)}")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.learner is not None:
        doc["learner"] = args.learner
    seed = int(doc.get("seed", 0))
    print(f"seed: {seed}")
    name = doc.get("learner", "coloke")
    if name not in LEARNERS:
        raise UsageError(f"field 'learner': unknown learner {name!r}")
    if "out" not in doc:
        raise UsageError("field 'out' is required (or pass --out)")
    hyper = dict(doc.get("hyper", {}))
    hyper.setdefault("seed", seed)
    try:
        cfg = LearnerConfig.from_dict(hyper)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"field 'hyper': {exc}") from None
    states, dt = _train_stream(doc, seed)
    t0 = int(doc.get("t0") or warmup_length(len(states)))
    learner = LEARNERS[name].initialise(states[:t0], cfg)
    trace = stream(learner, [states], t0, protocol="sequential")
    out = Path(doc["out"])
    out.mkdir(parents=True, exist_ok=True)
    _learner_snapshot(learner, out / "model.json", cfg.w, seed)
    with (out / f"steps_{name}.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STEP_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for st in trace.steps:
            writer.writerow(dict(asdict(st), split=0))
    err = float(np.mean(trace.errors[0])) if trace.errors[0] else float("nan")
    print(f"{name}: {len(trace.steps)} steps, online error {err:.4e}, snapshot {out / 'model.json'}")
    return EXIT_OK


def cmd_benchmark(args):
    doc = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["output_dir"] = args.out
    try:
        config = ExperimentConfig.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None
    print(f"seed: {config.seed}")
    if config.output_dir is None:
        raise UsageError("field 'output_dir' is required (or pass --out)")

    def progress(k, name, res):
        status = res.failure or f"xi={res.generalization_error} eps={res.online_error:.3e}"
        print(f"split {k} {name}: {status} ({res.wall_time:.1f}s)", flush=True)

    report = run_experiment(config, progress=progress)
    for name, entry in report.summary.items():
        xi = entry.get("generalization_error")
        eps = entry.get("online_error")
        print(f"{name:9s} xi={xi if xi is None else f'{xi:.3e}'} eps={eps if eps is None else f'{eps:.3e}'}"
              + (f" failures={len(entry['failures'])}" if entry["failures"] else ""))
    print(f"report written to {config.output_dir}")
    failed = any(e["failures"] for e in report.summary.values())
    return EXIT_RUNTIME if failed else EXIT_OK


def _load_any_snapshot(path):
    doc = _read_json(path)
    if "spec" in doc:
        try:
            model, w = load_snapshot(path)
        except KeyError as exc:
            raise UsageError(f"{path}: {exc}") from None
        return doc, model
    if "K" not in doc or "m" not in doc:
        raise UsageError(f"{path}: snapshot missing field 'K' or 'm'")
    return doc, None


def cmd_spectrum(args):
    doc, model = _load_any_snapshot(args.model)
    print(f"seed: {doc.get('seed', 0)}")
    m = int(doc["m"])
    K = model.K if model is not None else np.asarray(doc["K"], dtype=float).reshape(m, m)
    for lam in spectrum(K, args.dt):
        print(f"{lam.real:+.10e} {lam.imag:+.10e}j")
    return EXIT_OK


def cmd_inspect(args):
    doc, model = _load_any_snapshot(args.model)
    print(f"seed: {doc.get('seed', 0)}")
    if model is not None:
        print(f"d: {model.d}")
        print(f"m: {model.m}")
        print(f"layer widths: {list(model.spec.layer_widths)}")
        print(f"network parameters: {model.spec.n_params}")
        print(f"koopman parameters: {model.m * model.m}")
        print(f"total parameters: {len(model.params)}")
    else:
        print(f"learner: {doc.get('learner', 'unknown')}")
        print(f"m: {doc['m']}")
        print(f"koopman parameters: {len(doc['K'])}")
    print(f"window: {doc.get('w')}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "benchmark": cmd_benchmark,
    "spectrum": cmd_spectrum,
    "inspect": cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (ColokeError, ArithmeticError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
