"""Command-line interface: ``simulate``, ``identify`` and ``experiment``.

Exit codes: 0 on success, 1 on a configuration or usage error, 2 when a
solver fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .em_disturbances import default_initial_model, em_dist_run
from .em_states import SingularModelError, em_states_run
from .experiments import KINDS, ConfigError, ExperimentConfig, run_experiment
from .model import Dimensions, ExplicitModel, make_random_stable_system, sample_trajectory
from .relaxation import MStepError, NotCertifiablyStableError

__all__ = ["main", "read_data", "write_data", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

log = logging.getLogger("lrsysid")


class UsageError(Exception):
    pass


class SolverFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ data files

def read_data(path):
    """Read ``u*``/``y*`` columns from a CSV file; ``#`` lines are comments."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise UsageError(f"{path}: no data")
    rows = list(csv.reader(lines))
    header = [h.strip() for h in rows[0]]
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not y_cols or values.ndim != 2 or values.shape[0] < 2:
        raise UsageError(f"{path}: need a header with y columns and at least two rows")
    u = values[:, u_cols] if u_cols else np.zeros((values.shape[0], 0))
    return u, values[:, y_cols]


def write_data(path, u, y, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"u{i + 1}" for i in range(u.shape[1])] + [f"y{i + 1}" for i in range(y.shape[1])])
        for a, b in zip(u, y):
            wr.writerow([f"{v:.17g}" for v in np.concatenate([a, b])])


def sample_data_path():
    return resources.files("lrsysid") / "data" / "sample.csv"


# ------------------------------------------------------------------ commands

def _cmd_simulate(args):
    if args.model:
        model = ExplicitModel.from_json(Path(args.model).read_text())
    else:
        dims = Dimensions(args.n_x, args.n_u, args.n_y, args.n_w or args.n_x)
        model = make_random_stable_system(dims, args.radius, args.seed, sigma_1=args.sigma_1,
                                          sigma_w=args.sigma_w, sigma_v=args.sigma_v)
        if args.save_model:
            Path(args.save_model).write_text(model.to_json())
    u = np.random.default_rng([args.seed, 1]).standard_normal((args.T, model.n_u))
    traj = sample_trajectory(model, u, args.seed)
    write_data(args.output, traj.u, traj.y, comment=f"lrsysid {__version__} simulate seed={args.seed}")
    return EXIT_OK


def _cmd_identify(args):
    path = sample_data_path() if args.sample else args.data
    if path is None:
        raise UsageError("identify needs --data PATH or --sample")
    u, y = read_data(path)
    if u.shape[1] == 0:
        raise UsageError("identify needs at least one input column (u1, ...)")
    n_w = args.n_w or args.n_x
    dims = Dimensions(args.n_x, u.shape[1], y.shape[1], n_w)
    theta0 = default_initial_model(dims, u, y, seed=args.seed)
    if args.algorithm == "states":
        try:
            hist = em_states_run(theta0, u, y, max_iters=args.max_iters, delta=args.delta)
        except SingularModelError as exc:
            raise UsageError(str(exc)) from None
    else:
        hist = em_dist_run(theta0, u, y, max_iters=args.max_iters, delta=args.delta)
    Path(args.output).write_text(hist.final.to_json())
    if args.history:
        Path(args.history).write_text(hist.to_csv(timing=args.timing))
    r = hist.records[-1]
    print(f"iterations={r.iter} loglik={r.loglik:.6f} spectral_radius={r.spectral_radius:.6f} "
          f"converged={hist.converged}")
    if hist.error:
        raise SolverFailure(hist.error)
    return EXIT_OK


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"override {text!r} must look like key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().replace("-", "_"), value


def _cmd_experiment(args):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    data["kind"] = args.kind
    if args.full_scale:
        data.update(T=250, trials=10)
    for item in args.set or []:
        k, v = _parse_override(item)
        data[k] = v
    if args.output:
        data["output"] = args.output
    if args.timing:
        data["timing"] = True
    if args.workers:
        data["workers"] = args.workers
    cfg = ExperimentConfig.from_mapping(data)
    text = run_experiment(cfg, args.seed)
    if not cfg.output:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = _Parser(prog="lrsysid", description="Stable maximum-likelihood identification of linear state-space models.")
    p.add_argument("--version", action="version", version=f"lrsysid {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="{simulate,identify,experiment}", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="draw a trajectory from a model and write u/y columns to CSV")
    s.add_argument("--model", help="model JSON file; a random stable model is drawn when omitted")
    s.add_argument("--save-model", help="write the drawn random model to this JSON file")
    s.add_argument("--n-x", type=int, default=2)
    s.add_argument("--n-u", type=int, default=1)
    s.add_argument("--n-y", type=int, default=1)
    s.add_argument("--n-w", type=int, default=None, help="disturbance dimension (default n_x)")
    s.add_argument("--radius", type=float, default=0.9, help="spectral radius of the random A")
    s.add_argument("--sigma-1", type=float, default=1.0)
    s.add_argument("--sigma-w", type=float, default=0.1)
    s.add_argument("--sigma-v", type=float, default=0.1)
    s.add_argument("--T", type=int, default=100, help="number of samples")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--output", required=True, help="CSV path")
    s.set_defaults(func=_cmd_simulate)

    i = sub.add_parser("identify", help="estimate a model from u/y data with EM")
    src = i.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CSV with u1.., y1.. columns")
    src.add_argument("--sample", action="store_true", help="use the packaged sample data set")
    i.add_argument("--n-x", type=int, required=True, help="model order")
    i.add_argument("--n-w", type=int, default=None, help="disturbance dimension (default n_x)")
    i.add_argument("--algorithm", choices=("disturbances", "states"), default="disturbances",
                   help="latent-disturbances EM with stability certificate, or latent-states EM")
    i.add_argument("--max-iters", type=int, default=500)
    i.add_argument("--delta", type=float, default=1e-4, help="stop when the log-likelihood gain is below this")
    i.add_argument("--seed", type=int, default=0, help="seed for the initial model")
    i.add_argument("--output", required=True, help="model JSON path")
    i.add_argument("--history", help="per-iteration CSV path")
    i.add_argument("--timing", action="store_true", help="record wall-clock times in the history")
    i.set_defaults(func=_cmd_identify)

    e = sub.add_parser("experiment", help="run one of the reproduction experiments and emit CSV")
    e.add_argument("kind", choices=KINDS)
    e.add_argument("--seed", type=int, required=True, help="master seed (required for reproducibility)")
    e.add_argument("--config", help="JSON file with ExperimentConfig fields")
    e.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field; VALUE is parsed as JSON when possible")
    e.add_argument("--full-scale", action="store_true", help="T=250 and 10 trials")
    e.add_argument("--workers", type=int, default=None, help="process pool size for trials")
    e.add_argument("--timing", action="store_true", help="fill wall_ms columns (output is then not reproducible)")
    e.add_argument("--output", help="CSV path (default: stdout)")
    e.set_defaults(func=_cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SingularModelError, OSError) as exc:
        print(f"lrsysid: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"lrsysid: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, MStepError, NotCertifiablyStableError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"lrsysid: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
