"""Render publication-style figures from experiment output directories.

A figure spec is a JSON object::

    {
      "figure": "fig-lti",          one of FIGURES
      "run_dir": "runs/lti",        directory holding the experiment output
      "inputs": {...},              optional per-role trace file overrides
      "out": "fig-lti.png"          output image (.png or .svg)
    }

Relative input paths resolve against ``run_dir`` (or the spec file's
directory when no ``run_dir`` is given); the output path resolves
against the spec file's directory.  When ``inputs`` is omitted, the
roles are filled from the standard file layout of the named experiment.

Rendering is deterministic: fixed style parameters, fixed DPI, and no
timestamps in the output, so identical inputs produce identical bytes.
True-system traces are drawn solid, approximations dashed.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURES = (
    "fig-lti",
    "fig-satlag",
    "fig-lpv",
    "fig-hh-k",
    "fig-hh-na",
    "fig-closed-loop",
)

_RC = {
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "grid.linewidth": 0.5,
    "svg.hashsalt": "fmkid-figures",
}

_TRUE_STYLE = {"linestyle": "-", "color": "black"}
_APPROX_LINESTYLE = "--"


class SpecError(ValueError):
    """A figure spec, or a file it references, is unusable."""


# ---------------------------------------------------------------------------
# trace files


def _read_rows(path: Path, expected_header: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"missing trace file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SpecError(f"empty trace file {path}")
    header = lines[0]
    if header != expected_header:
        raise SpecError(
            f"bad header in {path}: expected {expected_header!r}, got {header!r}"
        )
    width = len(expected_header.split(","))
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise SpecError(
                f"ragged CSV {path}: line {i} has {len(parts)} fields, "
                f"expected {width}"
            )
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise SpecError(f"unparsable CSV {path}: line {i}: {exc}") from exc
    return np.asarray(rows, dtype=float).reshape(-1, width)


def read_trace(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``t,value`` trace CSV; errors name the file."""
    rows = _read_rows(Path(path), "t,value")
    if rows.shape[0] == 0:
        raise SpecError(f"empty trace file {path}")
    return rows[:, 0], rows[:, 1]


def read_spikes(path) -> np.ndarray:
    """Read a ``spike_time`` CSV; a header with no rows means no spikes."""
    rows = _read_rows(Path(path), "spike_time")
    return rows[:, 0]


def _on_axis(t_ref, t, v):
    """Resample ``(t, v)`` onto the reference time axis when they differ."""
    if t.shape == t_ref.shape and np.array_equal(t, t_ref):
        return v
    return np.interp(t_ref, t, v)


# ---------------------------------------------------------------------------
# spec loading


def _tag_value(tag: str) -> float:
    # File-name tags encode '-' as 'm' (e.g. gamma_1em05, amp_m10).
    return float(tag.replace("m", "-"))


def _glob_sorted(run_dir: Path, pattern: str, key_regex: str | None = None):
    files = sorted(run_dir.glob(pattern))
    if key_regex is not None:
        files.sort(key=lambda p: _tag_value(re.match(key_regex, p.name).group(1)))
    return files


def _default_inputs(figure: str, run_dir: Path) -> dict:
    if figure == "fig-lti":
        return {
            "true": run_dir / "trace_step_true.csv",
            "approx": _glob_sorted(
                run_dir, "trace_step_lambda_*.csv", r"trace_step_lambda_(.+)\.csv"
            ),
        }
    if figure == "fig-satlag":
        panels: dict[str, list] = {}
        for p in sorted(run_dir.glob("trace_step_gamma_*_amp_*.csv")):
            tag = re.match(r"trace_step_gamma_(.+)_amp_.+\.csv", p.name).group(1)
            panels.setdefault(tag, []).append(p)
        panels = dict(sorted(panels.items(), key=lambda kv: _tag_value(kv[0])))
        return {
            "true": _glob_sorted(
                run_dir, "trace_step_true_amp_*.csv",
                r"trace_step_true_amp_(.+)\.csv",
            ),
            "panels": panels,
        }
    if figure == "fig-lpv":
        return {
            "sine_true": run_dir / "trace_sine_true.csv",
            "sine_approx": sorted(run_dir.glob("trace_sine_*_trained_*.csv")),
            "step_true": run_dir / "trace_step_true.csv",
            "step_approx": sorted(run_dir.glob("trace_step_*_trained_*.csv")),
        }
    if figure in ("fig-hh-k", "fig-hh-na"):
        return {
            "voltage": run_dir / "trace_test_voltage.csv",
            "true": run_dir / "trace_channel_true.csv",
            "approx": run_dir / "trace_channel_model.csv",
        }
    if figure == "fig-closed-loop":
        return {
            "current": run_dir / "trace_input_current.csv",
            "true": run_dir / "trace_voltage_true.csv",
            "approx": run_dir / "trace_voltage_model.csv",
            "spikes_true": run_dir / "spikes_true.csv",
            "spikes_model": run_dir / "spikes_model.csv",
        }
    raise SpecError(f"unknown figure id {figure!r}")


_REQUIRED_ROLES = {
    "fig-lti": ("true", "approx"),
    "fig-satlag": ("true", "panels"),
    "fig-lpv": ("sine_true", "sine_approx", "step_true", "step_approx"),
    "fig-hh-k": ("voltage", "true", "approx"),
    "fig-hh-na": ("voltage", "true", "approx"),
    "fig-closed-loop": ("current", "true", "approx", "spikes_true",
                        "spikes_model"),
}


def _resolve_paths(node, base: Path):
    if isinstance(node, dict):
        return {k: _resolve_paths(v, base) for k, v in node.items()}
    if isinstance(node, (list, tuple)):
        return [_resolve_paths(v, base) for v in node]
    path = Path(node)
    return path if path.is_absolute() else base / path


def _walk_files(node):
    if isinstance(node, dict):
        for v in node.values():
            yield from _walk_files(v)
    elif isinstance(node, (list, tuple)):
        for v in node:
            yield from _walk_files(v)
    else:
        yield node


def load_spec(path) -> dict:
    """Load and validate a figure spec; all referenced files must exist."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SpecError(f"spec {path} must hold a JSON object")
    unknown = set(raw) - {"figure", "run_dir", "inputs", "out"}
    if unknown:
        raise SpecError(f"spec {path}: unknown keys {sorted(unknown)}")
    figure = raw.get("figure")
    if figure not in FIGURES:
        raise SpecError(
            f"spec {path}: figure must be one of {', '.join(FIGURES)}; "
            f"got {figure!r}"
        )
    out = raw.get("out")
    if not isinstance(out, str) or not out:
        raise SpecError(f"spec {path}: missing output image path 'out'")
    out_path = Path(out)
    if not out_path.is_absolute():
        out_path = path.parent / out_path
    if out_path.suffix not in (".png", ".svg"):
        raise SpecError(
            f"spec {path}: output must end in .png or .svg, got {out_path.name}"
        )

    run_dir = raw.get("run_dir")
    base = path.parent
    if run_dir is not None:
        run_dir = Path(run_dir)
        if not run_dir.is_absolute():
            run_dir = path.parent / run_dir
        if not run_dir.is_dir():
            raise SpecError(f"spec {path}: run_dir {run_dir} is not a directory")
        base = run_dir

    inputs = _default_inputs(figure, run_dir) if run_dir is not None else {}
    overrides = raw.get("inputs", {})
    if not isinstance(overrides, dict):
        raise SpecError(f"spec {path}: 'inputs' must be an object")
    inputs.update(_resolve_paths(overrides, base))

    for role in _REQUIRED_ROLES[figure]:
        if role not in inputs or not list(_walk_files(inputs[role])):
            raise SpecError(
                f"spec {path}: no trace files for role {role!r} "
                f"(searched {base})"
            )
    for file in _walk_files(inputs):
        if not Path(file).is_file():
            raise SpecError(f"missing trace file {file}")
    return {"figure": figure, "inputs": inputs, "out": out_path}


# ---------------------------------------------------------------------------
# figure builders (true system solid, approximations dashed)


def _tag_of(name: str, pattern: str) -> str:
    match = re.match(pattern, name)
    return match.group(1) if match else Path(name).stem


def _fig_lti(inputs):
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    t, v = read_trace(inputs["true"])
    ax.plot(t, v, label="true system", **_TRUE_STYLE)
    for i, file in enumerate(inputs["approx"]):
        tag = _tag_of(Path(file).name, r"trace_step_lambda_(.+)\.csv")
        ta, va = read_trace(file)
        ax.plot(t, _on_axis(t, ta, va), _APPROX_LINESTYLE,
                color=f"C{i}", label=f"λ = {tag.replace('m', '-')}")
    ax.set_xlabel("t")
    ax.set_ylabel("output")
    ax.set_title("Unit-step response: bilinear kernel, weight-rate sweep")
    ax.legend(loc="lower right")
    return fig


def _fig_satlag(inputs):
    panels = inputs["panels"]
    fig, axes = plt.subplots(
        1, len(panels), figsize=(4.0 * len(panels), 3.2), sharey=True,
        squeeze=False,
    )
    true_by_amp = {}
    for file in inputs["true"]:
        tag = _tag_of(Path(file).name, r"trace_step_true_amp_(.+)\.csv")
        true_by_amp[tag] = read_trace(file)
    for ax, (gamma_tag, files) in zip(axes[0], panels.items()):
        for i, (amp, (t, v)) in enumerate(sorted(
            true_by_amp.items(), key=lambda kv: _tag_value(kv[0])
        )):
            label = "true system" if i == 0 else None
            ax.plot(t, v, **_TRUE_STYLE, label=label)
        for i, file in enumerate(files):
            amp = _tag_of(Path(file).name, r"trace_step_gamma_.+_amp_(.+)\.csv")
            t, v = read_trace(file)
            label = "model" if i == 0 else None
            ax.plot(t, v, _APPROX_LINESTYLE, color=f"C{i}", label=label)
        ax.set_title(f"γ = {gamma_tag.replace('m', '-')}")
        ax.set_xlabel("t")
        ax.legend(loc="upper left")
    axes[0][0].set_ylabel("output")
    fig.suptitle("Saturated lag: step responses, RBF kernel", y=0.99)
    return fig


def _fig_lpv(inputs):
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
    cases = (
        ("sine", "step-trained models on a sine input"),
        ("step", "sine-trained models on a step input"),
    )
    for ax, (test, title) in zip(axes, cases):
        t, v = read_trace(inputs[f"{test}_true"])
        ax.plot(t, v, label="true system", **_TRUE_STYLE)
        for i, file in enumerate(inputs[f"{test}_approx"]):
            kernel = _tag_of(
                Path(file).name, rf"trace_{test}_(.+)_trained_.+\.csv"
            )
            ta, va = read_trace(file)
            ax.plot(t, _on_axis(t, ta, va), _APPROX_LINESTYLE,
                    color=f"C{i}", label=kernel.upper())
        ax.set_title(title)
        ax.set_xlabel("t")
        ax.legend(loc="lower right")
    axes[0].set_ylabel("output")
    return fig


def _fig_hh(inputs, channel: str):
    fig, (ax_v, ax_i) = plt.subplots(
        2, 1, figsize=(6.4, 4.6), sharex=True,
        gridspec_kw={"height_ratios": [1, 2]},
    )
    t, v = read_trace(inputs["voltage"])
    ax_v.plot(t, v, **_TRUE_STYLE)
    ax_v.set_ylabel("V (mV)")
    ax_v.set_title(f"{channel} channel, open loop on a spiking voltage trace")
    t1, y1 = read_trace(inputs["true"])
    t2, y2 = read_trace(inputs["approx"])
    ax_i.plot(t1, y1, label="true channel", **_TRUE_STYLE)
    ax_i.plot(t1, _on_axis(t1, t2, y2), _APPROX_LINESTYLE, color="C1",
              label="kernel model")
    ax_i.set_xlabel("t (ms)")
    ax_i.set_ylabel("I (µA/cm²)")
    ax_i.legend(loc="upper right")
    return fig


def _fig_closed_loop(inputs):
    fig, (ax_i, ax_v) = plt.subplots(
        2, 1, figsize=(7.2, 4.8), sharex=True,
        gridspec_kw={"height_ratios": [1, 2.6]},
    )
    t, i_ext = read_trace(inputs["current"])
    ax_i.plot(t, i_ext, color="C2")
    ax_i.set_ylabel("I_ext")
    ax_i.set_title("Closed loop: kernel channels inside the membrane circuit")
    t1, v1 = read_trace(inputs["true"])
    t2, v2 = read_trace(inputs["approx"])
    ax_v.plot(t1, v1, label="true circuit", **_TRUE_STYLE)
    ax_v.plot(t1, _on_axis(t1, t2, v2), _APPROX_LINESTYLE, color="C1",
              label="kernel circuit")
    top = max(v1.max(), v2.max())
    s_true = read_spikes(inputs["spikes_true"])
    s_model = read_spikes(inputs["spikes_model"])
    if s_true.size:
        ax_v.plot(s_true, np.full(s_true.size, top + 6.0), "|",
                  color="black", markersize=9, linestyle="none")
    if s_model.size:
        ax_v.plot(s_model, np.full(s_model.size, top + 14.0), "|",
                  color="C1", markersize=9, linestyle="none")
    ax_v.set_xlabel("t (ms)")
    ax_v.set_ylabel("V (mV)")
    ax_v.legend(loc="lower right")
    return fig


_BUILDERS = {
    "fig-lti": _fig_lti,
    "fig-satlag": _fig_satlag,
    "fig-lpv": _fig_lpv,
    "fig-hh-k": lambda inputs: _fig_hh(inputs, "Potassium"),
    "fig-hh-na": lambda inputs: _fig_hh(inputs, "Sodium"),
    "fig-closed-loop": _fig_closed_loop,
}


def render(spec: dict) -> Path:
    """Render one loaded figure spec; returns the output path."""
    out = Path(spec["out"])
    if out.suffix == ".png":
        metadata = {"Software": "render_figure"}
    else:
        metadata = {"Date": None}
    with plt.rc_context(_RC):
        fig = _BUILDERS[spec["figure"]](spec["inputs"])
        try:
            fig.tight_layout()
            out.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out, metadata=metadata)
        finally:
            plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="render_figure",
        description="Render one figure from fmkid experiment outputs.",
    )
    parser.add_argument("--spec", required=True, help="figure spec JSON file")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        out = render(load_spec(args.spec))
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
