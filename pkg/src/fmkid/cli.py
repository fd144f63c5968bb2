"""Command-line interface.

Subcommands: ``gen-data``, ``fit``, ``simulate``, ``closed-loop``,
``experiment``, ``verify``, ``inspect``. Exit codes: 0 on success, 1 for
usage errors (bad flags, unreadable or malformed files, invalid
parameter values), 2 for numeric failures (diverging integrations,
singular solves).

Heavy modules are imported only after argument parsing so that
``--threads`` can cap BLAS parallelism through environment variables
before the numerics stack loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_FLOAT_FMT = "%.17g"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument(
        "--seed", type=int, default=None,
        help="override the config seed",
    )
    common.add_argument(
        "--threads", type=int, default=None,
        help="cap numeric library parallelism",
    )

    parser = _Parser(prog="fmkid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser(
        "gen-data", parents=[common],
        help="generate an experiment's training datasets",
    )
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit", parents=[common], help="fit a kernel model")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--kernel", required=True, help="kernel spec JSON")
    p.add_argument("--gamma", required=True, help="regularization weight")
    p.add_argument("--out", required=True, help="model file to write")

    p = sub.add_parser(
        "simulate", parents=[common], help="run a model open loop on an input"
    )
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--input", required=True, help="input trajectory CSV")
    p.add_argument("--out", required=True, help="output trajectory CSV")

    p = sub.add_parser(
        "closed-loop", parents=[common],
        help="run two channel models inside the membrane circuit",
    )
    p.add_argument("--k-model", required=True, help="potassium model file")
    p.add_argument("--na-model", required=True, help="sodium model file")
    p.add_argument("--config", required=True, help="loop config JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser(
        "experiment", parents=[common], help="reproduce one experiment end to end"
    )
    p.add_argument("--name", required=True, help="experiment name")
    p.add_argument("--config", default=None, help="config JSON overriding defaults")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("verify", parents=[common], help="run invariant suites")
    p.add_argument(
        "--suite", required=True,
        choices=["kernels", "regression", "plants", "all"],
    )

    p = sub.add_parser("inspect", parents=[common], help="describe a trained model")
    p.add_argument("--model", required=True, help="trained model file")

    return parser


def _pin_threads(threads) -> None:
    if threads is None:
        return
    if threads < 1:
        raise _UsageError("--threads must be a positive integer")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(threads)


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise _UsageError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _UsageError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise _UsageError(f"{path} must hold a JSON object")
    return data


def _parse_gamma(text: str) -> float:
    try:
        gamma = float(text)
    except ValueError as exc:
        raise _UsageError(f"--gamma must be a number, got {text!r}") from exc
    if not gamma > 0:
        raise _UsageError(f"--gamma must be positive, got {text}")
    return gamma


def _cmd_gen_data(args) -> int:
    from . import harness
    from .regression import write_dataset_csv

    cfg = harness.load_config(path=args.config, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, (data, meta) in harness.gen_datasets(cfg).items():
        write_dataset_csv(out_dir / name, data, extra={**meta, "config": cfg})
        print(out_dir / name)
    return 0


def _cmd_fit(args) -> int:
    from .kernels import kernel_from_dict
    from .regression import fit, read_dataset_csv, save_model

    gamma = _parse_gamma(args.gamma)
    spec = kernel_from_dict(_read_json(args.kernel))
    try:
        data, _meta = read_dataset_csv(args.data)
    except OSError as exc:
        raise _UsageError(f"cannot read {args.data}: {exc}") from exc
    model = fit(data, spec, gamma)
    save_model(args.out, model)
    print(args.out)
    return 0


def _cmd_simulate(args) -> int:
    from .signals import read_trajectory_csv, write_trajectory_csv
    from .simulate import simulate_open_loop

    model = _load_model_usage(args.model)
    try:
        traj = read_trajectory_csv(args.input)
    except OSError as exc:
        raise _UsageError(f"cannot read {args.input}: {exc}") from exc
    out = simulate_open_loop(model, traj)
    write_trajectory_csv(args.out, out)
    print(args.out)
    return 0


def _load_model_usage(path):
    from .regression import load_model

    try:
        return load_model(path)
    except OSError as exc:
        raise _UsageError(f"cannot read {path}: {exc}") from exc


def _cmd_closed_loop(args) -> int:
    import numpy as np

    from . import harness
    from .plants import V_K, V_NA, V_REST
    from .signals import Trajectory, read_trajectory_csv, write_trajectory_csv
    from .simulate import (
        ClosedLoopConfig,
        KernelChannel,
        detect_spikes,
        simulate_closed_loop,
    )

    cfg = _read_json(args.config)
    if "duration" not in cfg:
        raise _UsageError(f"{args.config} must set \"duration\"")
    k_model = _load_model_usage(args.k_model)
    na_model = _load_model_usage(args.na_model)
    dt = float(cfg.get("dt", k_model.grid.dt))
    duration = float(cfg["duration"])
    if args.seed is not None:
        cfg["seed"] = int(args.seed)

    if "i_ext_csv" in cfg:
        try:
            i_ext = read_trajectory_csv(cfg["i_ext_csv"])
        except OSError as exc:
            raise _UsageError(f"cannot read {cfg['i_ext_csv']}: {exc}") from exc
    else:
        noise = dict(
            {"seed": 42, "baseline": 5.0, "amplitude": 15.0, "cutoff": 1.0},
            **cfg.get("noise", {}),
        )
        n = int(round(duration / dt)) + 1
        z = harness.band_limited_noise(
            int(cfg.get("seed", noise["seed"])), dt, n, noise["cutoff"]
        )
        i_ext = Trajectory(
            t0=0.0, dt=dt, values=noise["baseline"] + noise["amplitude"] * z
        )

    loop = ClosedLoopConfig(
        dt=dt,
        duration=duration,
        v0=float(cfg.get("v0", V_REST)),
        capacitance=float(cfg.get("capacitance", 1.0)),
        g_leak=float(cfg.get("g_leak", 0.3)),
        e_leak=float(cfg.get("e_leak", -54.4)),
        i_ext=i_ext,
    )
    v = simulate_closed_loop(
        KernelChannel(k_model, input_offset=float(cfg.get("k_input_offset", V_K))),
        KernelChannel(na_model, input_offset=float(cfg.get("na_input_offset", V_NA))),
        loop,
    )
    spike_cfg = dict({"threshold": 0.0, "refractory": 2.0}, **cfg.get("spike", {}))
    spikes = detect_spikes(v, spike_cfg["threshold"], spike_cfg["refractory"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out_dir / "trace_input_current.csv", i_ext)
    write_trajectory_csv(out_dir / "trace_voltage.csv", v)
    lines = ["spike_time"] + [_FLOAT_FMT % t for t in spikes]
    (out_dir / "spikes.csv").write_text("\n".join(lines) + "\n")
    report = {
        "config": cfg,
        "spike_count": int(spikes.size),
        "files": [
            "report.json",
            "spikes.csv",
            "trace_input_current.csv",
            "trace_voltage.csv",
        ],
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    for name in report["files"]:
        print(out_dir / name)
    return 0


def _cmd_experiment(args) -> int:
    from . import harness

    cfg = harness.load_config(
        experiment=args.name, path=args.config, seed=args.seed
    )
    report = harness.run_experiment(cfg, args.out)
    for name in report["files"]:
        print(Path(args.out) / name)
    return 0


def _cmd_verify(args) -> int:
    from . import verify

    names = (
        ["kernels", "regression", "plants"]
        if args.suite == "all"
        else [args.suite]
    )
    return 0 if verify.run_suites(names) else 2


def _cmd_inspect(args) -> int:
    from .kernels import kernel_to_dict, nominal_lipschitz_constant
    from .regression import small_gain_check

    model = _load_model_usage(args.model)
    print(f"kernel: {json.dumps(kernel_to_dict(model.spec))}")
    print(f"gamma: {_FLOAT_FMT % model.gamma}")
    print(f"n: {model.alpha.size}")
    print(f"rkhs_norm: {_FLOAT_FMT % model.rkhs_norm()}")
    if nominal_lipschitz_constant(model.spec) is None:
        print("beta: n/a (kernel has no nominal Lipschitz constant)")
        print("certified: n/a")
    else:
        check = small_gain_check(model)
        print(f"beta: {_FLOAT_FMT % check['beta']}")
        print(f"c: {_FLOAT_FMT % check['c']}")
        print(f"certified: {'yes' if check['certified'] else 'no'}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "closed-loop": _cmd_closed_loop,
    "experiment": _cmd_experiment,
    "verify": _cmd_verify,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        _pin_threads(args.threads)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1

    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # sorted into usage vs numeric below
        return _classify_failure(exc)


def _classify_failure(exc: Exception) -> int:
    import numpy as np

    from .plants import IntegrationError
    from .regression import FitError

    if isinstance(exc, (FitError, IntegrationError, np.linalg.LinAlgError,
                        ArithmeticError)):
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    if isinstance(exc, (OSError, ValueError, KeyError, TypeError)):
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    raise exc


if __name__ == "__main__":
    sys.exit(main())
