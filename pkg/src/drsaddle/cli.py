"""Configuration-driven experiment runner.

A single TOML file describes the problem instance, the solver, the metric
cadence, and the output layout.  ``run`` executes every configured seed and
writes per-seed CSV traces, an ensemble mean trace, convergence plots, and a
manifest that records each effective parameter.  ``compare`` aligns several
configs on one problem, ``ref`` builds and caches reference solutions,
``check`` runs the structural invariant suite, and ``plot`` renders saved
traces.

All emitted artifacts are deterministic for a fixed (config, seed) pair
except wall-clock columns and the manifest timing section.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .linops import op_norm_estimate
from .metrics import (
    TRACE_COLUMNS,
    MetricRecorder,
    ReferencePoint,
    RunTrace,
    _fmt,
)
from .precond import check_feasible
from .problems import make_problem, reference_solution, write_pgm
from .solvers import (
    ALGORITHMS,
    RelaxationSchedule,
    SamplingScheme,
    SolverConfig,
    fixed_point_state,
    make_preconditioner,
    run,
    step_residual,
    weight_m,
)
from .spaces import BlockVector

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_experiment",
    "emit_plot",
    "compare",
    "run_checks",
    "main",
]

ENV_OUT = "DRSADDLE_OUT"


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

_REQUIRED = object()

_PROBLEM_KEYS = {
    "deblur": {
        "d1": (int, 32),
        "d2": (int, 32),
        "image": (str, None),
        "blur_len": (int, 5),
        "blur_angle": (float, 0.0),
        "poisson": (bool, False),
        "peak": (float, 1000.0),
        "data_seed": (int, 5),
        "alpha0": (float, _REQUIRED),
        "alpha1": (float, _REQUIRED),
    },
    "classification": {
        "path": (str, None),
        "n": (int, 50),
        "d": (int, 20),
        "data_seed": (int, 0),
        "n_features": (int, None),
        "lam": (float, _REQUIRED),
    },
    "toy_qp": {
        "variant": (str, "active"),
    },
}

_SOLVER_KEYS = {
    "algorithm": (str, _REQUIRED),
    "sigma": (float, _REQUIRED),
    "tau": (float, _REQUIRED),
    "preconditioner": (str, "auto"),
    "rho": (float, 1.0),
    "rho_x": (float, None),
    "rho_y": (float, None),
    "sampling": (str, "uniform"),
    "probs": (list, None),
    "seeds": (list, None),
    "epochs": (float, 10.0),
}

_METRICS_KEYS = {
    "cadence": (float, 1.0),
    "gap": (bool, False),
    "reference": (str, "auto"),
    "ref_epochs": (float, 5000.0),
    "ref_tol": (float, 1e-10),
}

_OUTPUT_KEYS = {
    "directory": (str, None),
    "formats": (list, None),
    "label": (str, None),
}

_PRECONDITIONERS = ("auto", "richardson", "sgs", "exact")
_FORMATS = ("csv", "svg", "pgm")


def _check_type(path: str, value, kind):
    """Coerced value, or a ConfigError naming the offending field."""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return int(value)
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, list):
            return value
    raise ConfigError(f"{path}: expected {kind.__name__}, "
                      f"got {type(value).__name__}")


def _resolve_section(name: str, raw: dict, schema: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a table")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{name}.{key}: unknown key")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _check_type(f"{name}.{key}", raw[key], kind)
        elif default is _REQUIRED:
            raise ConfigError(f"{name}.{key}: required key missing")
        elif default is not None:
            out[key] = default
    return out


def _positive(section: dict, name: str, *keys: str) -> None:
    for key in keys:
        if key in section and not section[key] > 0:
            raise ConfigError(f"{name}.{key}: must be positive")


def _resolve_problem(raw: dict) -> dict:
    kind = raw.get("kind")
    if kind not in _PROBLEM_KEYS:
        known = ", ".join(sorted(_PROBLEM_KEYS))
        raise ConfigError(f"problem.kind: expected one of {known}, "
                          f"got {kind!r}")
    schema = {"kind": (str, _REQUIRED), **_PROBLEM_KEYS[kind]}
    out = _resolve_section("problem", raw, schema)
    if kind == "deblur":
        _positive(out, "problem", "alpha0", "alpha1", "peak")
        if out["blur_len"] < 1:
            raise ConfigError("problem.blur_len: must be at least 1")
        if "image" in out:
            for key in ("d1", "d2"):
                if key in raw:
                    raise ConfigError(
                        f"problem.{key}: conflicts with problem.image")
            out.pop("d1", None)
            out.pop("d2", None)
        elif out["d1"] < 4 or out["d2"] < 4:
            raise ConfigError("problem.d1/d2: image must be at least 4x4")
    elif kind == "classification":
        _positive(out, "problem", "lam")
        if "path" in out:
            for key in ("n", "d"):
                if key in raw:
                    raise ConfigError(
                        f"problem.{key}: conflicts with problem.path")
            out.pop("n", None)
            out.pop("d", None)
        else:
            _positive(out, "problem", "n", "d")
    elif out["variant"] not in ("active", "pure"):
        raise ConfigError("problem.variant: expected 'active' or 'pure'")
    return out


def _resolve_solver(raw: dict) -> dict:
    out = _resolve_section("solver", raw, _SOLVER_KEYS)
    if out["algorithm"] not in ALGORITHMS:
        known = ", ".join(sorted(ALGORITHMS))
        raise ConfigError(f"solver.algorithm: expected one of {known}, "
                          f"got {out['algorithm']!r}")
    _positive(out, "solver", "sigma", "tau")
    if out["preconditioner"] not in _PRECONDITIONERS:
        raise ConfigError("solver.preconditioner: expected one of "
                          + ", ".join(_PRECONDITIONERS))
    out.setdefault("rho_x", out["rho"])
    out.setdefault("rho_y", out["rho"])
    for key in ("rho", "rho_x", "rho_y"):
        if not 0.0 < out[key] < 2.0:
            raise ConfigError(f"solver.{key}: must lie strictly in (0, 2)")
    if out["sampling"] not in ("uniform", "full"):
        raise ConfigError("solver.sampling: expected 'uniform' or 'full'")
    if "probs" in out:
        probs = [_check_type("solver.probs", p, float) for p in out["probs"]]
        if not probs or any(p <= 0 for p in probs) or sum(probs) > 1 + 1e-9:
            raise ConfigError("solver.probs: positive values summing to <= 1")
        out["probs"] = probs
    seeds = out.get("seeds")
    if seeds is None:
        seeds = [5]
    seeds = [_check_type("solver.seeds", s, int) for s in seeds]
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("solver.seeds: nonempty list of distinct integers")
    out["seeds"] = seeds
    if out["epochs"] < 0:
        raise ConfigError("solver.epochs: must be nonnegative")
    return out


def _resolve_metrics(raw: dict) -> dict:
    out = _resolve_section("metrics", raw, _METRICS_KEYS)
    _positive(out, "metrics", "cadence", "ref_epochs", "ref_tol")
    if out["reference"] not in ("auto", "none"):
        raise ConfigError("metrics.reference: expected 'auto' or 'none'")
    return out


def _resolve_output(raw: dict, stem: str, algorithm: str) -> dict:
    out = _resolve_section("output", raw, _OUTPUT_KEYS)
    out.setdefault("directory", stem)
    out.setdefault("label", algorithm)
    formats = out.get("formats")
    if formats is None:
        formats = ["csv", "svg"]
    for f in formats:
        if f not in _FORMATS:
            raise ConfigError(f"output.formats: unknown format {f!r}")
    out["formats"] = sorted(set(formats))
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description: every default filled in."""

    problem: dict
    solver: dict
    metrics: dict
    output: dict
    base_dir: Path = field(default_factory=Path)

    def resolved(self) -> dict:
        return {
            "problem": self.problem,
            "solver": self.solver,
            "metrics": self.metrics,
            "output": self.output,
        }

    @property
    def hash(self) -> str:
        return _digest(self.resolved())

    @property
    def problem_hash(self) -> str:
        # reference points depend on the instance and the reference budget
        return _digest({
            "problem": self.problem,
            "ref_epochs": self.metrics["ref_epochs"],
            "ref_tol": self.metrics["ref_tol"],
        })


def _digest(tree: dict) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _locate_config(name: str) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    if "/" not in name and not name.endswith(".toml"):
        from importlib import resources

        preset = resources.files("drsaddle") / "presets" / f"{name}.toml"
        if preset.is_file():
            return Path(str(preset))
    raise ConfigError(f"{name}: no such config file or preset")


def load_config(path) -> ExperimentConfig:
    """Parsed, schema-checked, fully defaulted experiment configuration.

    ``path`` is a TOML file or the name of a shipped preset.  Unknown keys,
    wrong types, and out-of-range values raise :class:`ConfigError` naming
    the offending field.
    """
    p = _locate_config(str(path))
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    for section in raw:
        if section not in ("problem", "solver", "metrics", "output"):
            raise ConfigError(f"{section}: unknown section")
    for section in ("problem", "solver"):
        if section not in raw:
            raise ConfigError(f"{section}: required section missing")
    problem = _resolve_problem(raw["problem"])
    solver = _resolve_solver(raw["solver"])
    metrics = _resolve_metrics(raw.get("metrics", {}))
    output = _resolve_output(raw.get("output", {}), p.stem,
                             solver["algorithm"])
    return ExperimentConfig(problem, solver, metrics, output,
                            base_dir=p.parent)


# ---------------------------------------------------------------------------
# building runtime objects
# ---------------------------------------------------------------------------


def output_root(override=None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(ENV_OUT, "out"))


def build_problem(cfg: ExperimentConfig):
    spec = dict(cfg.problem)
    for key in ("image", "path"):
        if key in spec:
            spec[key] = str((cfg.base_dir / spec[key]).resolve())
    if spec["kind"] == "toy_qp":
        spec = {"kind": "toy_qp", "variant": spec["variant"]}
    return make_problem(spec)


def build_solver_config(cfg: ExperimentConfig, prob, seed: int) -> SolverConfig:
    s = cfg.solver
    relaxation = RelaxationSchedule.constant(s["rho"], s["rho_x"], s["rho_y"])
    info = ALGORITHMS[s["algorithm"]]
    sampling = None
    if info.stochastic:
        try:
            if "probs" in s:
                sampling = SamplingScheme.from_probs(s["probs"])
            elif s["sampling"] == "full":
                sampling = SamplingScheme.partition(
                    [list(range(prob.n_dual))])
            else:
                sampling = SamplingScheme.uniform(prob.n_dual)
        except ValueError as exc:
            raise ConfigError(f"solver.probs: {exc}") from None
        if not sampling.covers(prob.n_dual):
            raise ConfigError("solver.probs: sampling must cover every "
                              f"dual block (problem has {prob.n_dual})")
    try:
        return SolverConfig(
            algorithm=s["algorithm"],
            sigma=s["sigma"],
            tau=s["tau"],
            preconditioner=s["preconditioner"],
            relaxation=relaxation,
            sampling=sampling,
            seed=seed,
            epochs=s["epochs"],
            cadence=cfg.metrics["cadence"],
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None


def get_reference(cfg: ExperimentConfig, prob,
                  root: Path) -> Optional[ReferencePoint]:
    """Reference saddle point for the configured problem, cached on disk."""
    if cfg.metrics["reference"] == "none":
        return None
    cache = root / "refs" / f"{cfg.problem_hash}.ref"
    if cache.is_file():
        return ReferencePoint.load(cache)
    ref = reference_solution(prob, tol=cfg.metrics["ref_tol"],
                             epochs=cfg.metrics["ref_epochs"])
    cache.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.with_name(cache.name + ".tmp")
    ref.save(tmp)
    os.replace(tmp, cache)
    return ref


def _write_atomic(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def _trace_csv_bytes(trace: RunTrace) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRACE_COLUMNS) + "\n")
    for row in trace.rows:
        buf.write(",".join(_fmt(c, v) for c, v in
                           zip(TRACE_COLUMNS, row)) + "\n")
    return buf.getvalue()


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (bool, int, float, str)) or value is None:
        return value
    return repr(value)


def _mean_trace(traces: Sequence[RunTrace]) -> RunTrace:
    out = RunTrace()
    cols = {c: np.mean([t.column(c) for t in traces], axis=0)
            for c in TRACE_COLUMNS}
    cols["k"] = traces[0].column("k")
    cols["epoch"] = traces[0].column("epoch")
    for i in range(len(traces[0])):
        out.append({c: cols[c][i] for c in TRACE_COLUMNS})
    return out


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

_KIND_COLUMNS = {
    "bregman": "bregman",
    "gap": "gap",
    "primal_error": "primal_err_rel",
    "psnr": "psnr",
    "mp_distance": "mp_dist",
}

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

_VIEW_W, _VIEW_H = 640, 480
_BOX_L, _BOX_T = 70, 20
_BOX_W, _BOX_H = 550, 410


def _series_of(trace, kind: str):
    if isinstance(trace, RunTrace):
        return trace.column("k"), trace.column(_KIND_COLUMNS[kind])
    ks, vs = trace
    return np.asarray(ks, dtype=float), np.asarray(vs, dtype=float)


def _pad(lo: float, hi: float, amount: float):
    if hi > lo:
        return lo, hi
    return lo - amount, hi + amount


def emit_plot(traces, kind: str, scale: str = "loglog",
              labels: Optional[Sequence[str]] = None) -> str:
    """Deterministic standalone SVG with one polyline per trace.

    ``traces`` holds :class:`RunTrace` instances or ``(k, value)`` pairs.
    ``loglog`` uses log10 on both axes, ``semilog`` only on the iteration
    axis.  Samples that are not finite (or not positive, on a log axis) are
    skipped; a trace with no plottable sample raises ``ValueError``.  The
    axis ranges and per-polyline labels are embedded as ``data-`` attributes
    so coordinates can be inverted exactly.
    """
    if kind not in _KIND_COLUMNS:
        raise ValueError(f"unknown plot kind {kind!r}")
    if scale not in ("loglog", "semilog"):
        raise ValueError(f"unknown scale {scale!r}")
    if labels is None:
        labels = [f"trace{i}" for i in range(len(traces))]
    logy = scale == "loglog"

    series = []
    for label, trace in zip(labels, traces):
        ks, vs = _series_of(trace, kind)
        mask = np.isfinite(ks) & np.isfinite(vs) & (ks > 0)
        if logy:
            mask &= vs > 0
        if not mask.any():
            raise ValueError(f"trace {label!r}: no finite samples to plot")
        us = np.log10(ks[mask])
        ws = np.log10(vs[mask]) if logy else vs[mask]
        series.append((label, us, ws))

    ulo = min(float(u.min()) for _, u, _ in series)
    uhi = max(float(u.max()) for _, u, _ in series)
    wlo = min(float(w.min()) for _, _, w in series)
    whi = max(float(w.max()) for _, _, w in series)
    ulo, uhi = _pad(ulo, uhi, 0.5)
    wlo, whi = _pad(wlo, whi, 0.5 if logy else 1.0)

    def px(u):
        return _BOX_L + (u - ulo) / (uhi - ulo) * _BOX_W

    def py(w):
        return _BOX_T + (whi - w) / (whi - wlo) * _BOX_H

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{_VIEW_W}" height="{_VIEW_H}" '
        f'viewBox="0 0 {_VIEW_W} {_VIEW_H}" '
        f'data-kind="{kind}" data-scale="{scale}" '
        f'data-box="{_BOX_L},{_BOX_T},{_BOX_W},{_BOX_H}" '
        f'data-ulo="{ulo!r}" data-uhi="{uhi!r}" '
        f'data-wlo="{wlo!r}" data-whi="{whi!r}">',
        f'<rect x="{_BOX_L}" y="{_BOX_T}" width="{_BOX_W}" '
        f'height="{_BOX_H}" fill="none" stroke="#000000"/>',
    ]

    # decade ticks on the iteration axis, decade or linear ticks on the value
    # axis; labels are plain text and carry no geometric information
    for p in range(math.ceil(ulo), math.floor(uhi) + 1):
        x = px(p)
        parts.append(f'<line x1="{x:.2f}" y1="{_BOX_T + _BOX_H}" '
                     f'x2="{x:.2f}" y2="{_BOX_T + _BOX_H + 6}" '
                     f'stroke="#000000"/>')
        parts.append(f'<text x="{x:.2f}" y="{_BOX_T + _BOX_H + 20}" '
                     f'font-family="monospace" font-size="11" '
                     f'text-anchor="middle">1e{p}</text>')
    if logy:
        ticks = [(float(p), f"1e{p}")
                 for p in range(math.ceil(wlo), math.floor(whi) + 1)]
    else:
        ticks = [(v, f"{v:.4g}") for v in np.linspace(wlo, whi, 5)]
    for w, text in ticks:
        y = py(w)
        parts.append(f'<line x1="{_BOX_L - 6}" y1="{y:.2f}" '
                     f'x2="{_BOX_L}" y2="{y:.2f}" stroke="#000000"/>')
        parts.append(f'<text x="{_BOX_L - 10}" y="{y + 4:.2f}" '
                     f'font-family="monospace" font-size="11" '
                     f'text-anchor="end">{text}</text>')

    for i, (label, us, ws) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(u):.2f},{py(w):.2f}" for u, w in zip(us, ws))
        parts.append(f'<polyline data-label="{label}" data-n="{len(us)}" '
                     f'points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = _BOX_T + 16 + 16 * i
        lx = _BOX_L + _BOX_W - 150
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 30}" y="{ly}" '
                     f'font-family="monospace" font-size="12">{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _emit_metric_plots(outdir: Path, traces: Sequence[RunTrace],
                       labels: Sequence[str]) -> list:
    written = []
    for kind in _KIND_COLUMNS:
        scale = "semilog" if kind == "psnr" else "loglog"
        try:
            svg = emit_plot(traces, kind, scale=scale, labels=labels)
        except ValueError:
            continue  # metric entirely absent from these runs
        name = f"plot_{kind}.svg"
        _write_atomic(outdir / name, svg)
        written.append(name)
    return written


# ---------------------------------------------------------------------------
# experiment execution
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, root=None,
                   outdir: Optional[Path] = None) -> dict:
    """Execute every configured seed; returns the manifest written to disk.

    Artifacts land in ``<root>/<output.directory>``: ``trace_seed<S>.csv``
    per seed, ``mean.csv`` over finished seeds, plots and a restored image
    when configured, and ``manifest.json`` last.  Seed failures are recorded
    in the manifest (status ``partial``) and re-raised after the loop.
    """
    root = output_root(root)
    outdir = Path(outdir) if outdir is not None else root / cfg.output["directory"]
    outdir.mkdir(parents=True, exist_ok=True)

    prob = build_problem(cfg)
    ref = get_reference(cfg, prob, root)
    info = ALGORITHMS[cfg.solver["algorithm"]]
    scfg0 = build_solver_config(cfg, prob, cfg.solver["seeds"][0])

    pre = weight = ref_state = None
    if not info.baseline:
        pre = make_preconditioner(prob, scfg0)
        if ref is not None:
            probs = (scfg0.sampling.block_probs(prob.n_dual)
                     if info.stochastic else None)
            weight = weight_m(prob, pre, scfg0.sigma, scfg0.tau,
                              quadratic=info.quadratic, block_probs=probs)
            ref_state = fixed_point_state(prob, ref.x, ref.y, scfg0.sigma,
                                          scfg0.tau, quadratic=info.quadratic)

    manifest = {
        "config": cfg.resolved(),
        "config_hash": cfg.hash,
        "problem_hash": cfg.problem_hash,
        "label": cfg.output["label"],
        "versions": {
            "drsaddle": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "reference": None if ref is None else _json_safe(ref.meta),
        "status": "ok",
        "files": [],
        "wall_s": {},
        "errors": {},
    }

    traces = []
    first_result = None
    for seed in cfg.solver["seeds"]:
        t0 = time.perf_counter()
        try:
            rec = MetricRecorder(prob, ref=ref, ref_state=ref_state,
                                 weight=weight,
                                 with_gap=cfg.metrics["gap"],
                                 box_primal=prob.default_box_primal,
                                 box_dual=prob.default_box_dual)
            result = run(prob, build_solver_config(cfg, prob, seed),
                         recorder=rec, pre=pre)
        except Exception as exc:  # noqa: BLE001 - isolate seeds
            manifest["status"] = "partial"
            manifest["errors"][str(seed)] = f"{type(exc).__name__}: {exc}"
            continue
        name = f"trace_seed{seed}.csv"
        _write_atomic(outdir / name, _trace_csv_bytes(rec.trace))
        manifest["files"].append(name)
        manifest["wall_s"][str(seed)] = round(time.perf_counter() - t0, 3)
        traces.append(rec.trace)
        if first_result is None:
            first_result = result

    if traces:
        mean = _mean_trace(traces)
        _write_atomic(outdir / "mean.csv", _trace_csv_bytes(mean))
        manifest["files"].append("mean.csv")
        if "svg" in cfg.output["formats"]:
            manifest["files"] += _emit_metric_plots(
                outdir, [mean], [cfg.output["label"]])
        if ("pgm" in cfg.output["formats"]
                and cfg.problem["kind"] == "deblur"
                and first_result is not None):
            write_pgm(outdir / "restored.pgm", first_result.x_test.block(0))
            manifest["files"].append("restored.pgm")
            manifest["restored_seed"] = cfg.solver["seeds"][0]

    _write_atomic(outdir / "manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if manifest["errors"]:
        failed = ", ".join(sorted(manifest["errors"]))
        raise RuntimeError(f"seeds failed: {failed} (see {outdir}/manifest.json)")
    return manifest


def compare(cfgs: Sequence[ExperimentConfig], root=None) -> dict:
    """Run several configs on one shared problem and merge their traces.

    Produces per-config artifact directories plus ``combined.csv`` (mean
    traces joined on the iteration axis), one plot per metric, and a final
    value summary.
    """
    if len(cfgs) < 2:
        raise ConfigError("compare: need at least two configs")
    first = cfgs[0].problem
    for cfg in cfgs[1:]:
        if cfg.problem != first:
            raise ConfigError("compare: configs do not share a problem")
    labels = [cfg.output["label"] for cfg in cfgs]
    if len(set(labels)) != len(labels):
        raise ConfigError("compare: output.label values must be distinct")

    root = output_root(root)
    tag = _digest({"configs": [cfg.hash for cfg in cfgs]})[:8]
    outdir = root / f"compare-{tag}"
    outdir.mkdir(parents=True, exist_ok=True)

    means = []
    for cfg, label in zip(cfgs, labels):
        run_experiment(cfg, root=root, outdir=outdir / label)
        means.append(RunTrace.from_csv(outdir / label / "mean.csv"))

    metric_cols = [c for c in TRACE_COLUMNS if c not in
                   ("k", "epoch", "wall_ms")]
    all_ks = sorted(set(float(k) for tr in means for k in tr.column("k")))
    by_label = []
    for tr in means:
        by_label.append({float(r[0]): r for r in tr.rows})
    epoch_of = {float(r[0]): r[1] for tr in means for r in tr.rows}

    lines = ["k,epoch," + ",".join(f"{lb}:{c}" for lb in labels
                                   for c in metric_cols)]
    for k in all_ks:
        cells = [str(int(k)), repr(float(epoch_of[k]))]
        for label, rows in zip(labels, by_label):
            row = rows.get(k)
            for c in metric_cols:
                idx = TRACE_COLUMNS.index(c)
                cells.append("nan" if row is None else _fmt(c, row[idx]))
        lines.append(",".join(cells))
    _write_atomic(outdir / "combined.csv", "\n".join(lines) + "\n")

    plots = _emit_metric_plots(outdir, means, labels)

    summary = ["label,k," + ",".join(metric_cols)]
    table = []
    for label, tr in zip(labels, means):
        last = tr.rows[-1]
        vals = [_fmt(c, last[TRACE_COLUMNS.index(c)]) for c in metric_cols]
        summary.append(f"{label},{int(last[0])}," + ",".join(vals))
        table.append((label, int(last[0]), vals))
    _write_atomic(outdir / "summary.csv", "\n".join(summary) + "\n")

    manifest = {
        "configs": [cfg.resolved() for cfg in cfgs],
        "labels": labels,
        "files": ["combined.csv", "summary.csv"] + plots,
    }
    _write_atomic(outdir / "manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    print(f"compare: {outdir}")
    width = max(len(lb) for lb in labels)
    print(f"{'label':<{width}}  {'k':>8}  " + "  ".join(metric_cols))
    for label, k, vals in table:
        print(f"{label:<{width}}  {k:>8}  " + "  ".join(vals))
    return manifest


# ---------------------------------------------------------------------------
# invariant checks
# ---------------------------------------------------------------------------


def _random_block(layout, rng) -> BlockVector:
    return BlockVector(layout, rng.standard_normal(layout.total))


def _check_adjoint(prob, rng) -> tuple:
    if prob.norm_K_sq_bound is not None:
        norm = math.sqrt(prob.norm_K_sq_bound)
    else:
        norm = max(op_norm_estimate(prob.K), 1e-30)
    worst = 0.0
    for _ in range(20):
        x = _random_block(prob.primal_layout, rng)
        y = _random_block(prob.dual_layout, rng)
        lhs = float(prob.K.apply(x).data @ y.data)
        rhs = float(x.data @ prob.K.adjoint(y).data)
        scale = x.norm() * y.norm() * norm
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst <= 1e-10, f"max normalized mismatch {worst:.3e}"


def _check_feasibility(prob, scfg) -> tuple:
    pre = make_preconditioner(prob, scfg)
    worst = check_feasible(pre, probes=200)
    return worst >= -1e-10, f"min Rayleigh(M - T) {worst:.3e}"


def _check_firm(resolvent, layout, step, rng) -> tuple:
    worst = 0.0
    for _ in range(20):
        a = _random_block(layout, rng)
        b = _random_block(layout, rng)
        d = resolvent(a, step) - resolvent(b, step)
        gap = float(d.data @ (a - b).data) - float(d.data @ d.data)
        scale = max(float((a - b).data @ (a - b).data), 1e-30)
        worst = min(worst, gap / scale)
    return worst >= -1e-8, f"min firmness slack {worst:.3e}"


def _check_fixed_point(prob, scfg, ref) -> tuple:
    info = ALGORITHMS[scfg.algorithm]
    pre = make_preconditioner(prob, scfg)
    star = fixed_point_state(prob, ref.x, ref.y, scfg.sigma, scfg.tau,
                             quadratic=info.quadratic)
    res = step_residual(prob, scfg, pre, star)
    return res <= 1e-6, f"one-step displacement {res:.3e}"


def run_checks(cfg: ExperimentConfig) -> list:
    """Structural invariant results as (name, passed, detail) triples."""
    prob = build_problem(cfg)
    scfg = build_solver_config(cfg, prob, cfg.solver["seeds"][0])
    rng = np.random.default_rng(0)
    results = [
        ("adjoint", *_check_adjoint(prob, rng)),
        ("preconditioner-feasible", *_check_feasibility(prob, scfg)),
        ("resolvent-firm-primal",
         *_check_firm(prob.resolvent_F, prob.primal_layout, scfg.sigma, rng)),
        ("resolvent-firm-dual",
         *_check_firm(prob.resolvent_G, prob.dual_layout, scfg.tau, rng)),
    ]
    if scfg.sampling is not None:
        results.append(("sampling-coverage",
                        scfg.sampling.covers(prob.n_dual),
                        f"{scfg.sampling.n_units} units over "
                        f"{prob.n_dual} blocks"))
    if prob.meta.get("kind") in ("toy_qp", "classification"):
        ref = reference_solution(prob, tol=cfg.metrics["ref_tol"])
        results.append(("fixed-point", *_check_fixed_point(prob, scfg, ref)))
    return results


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest = run_experiment(cfg, root=args.out_root)
    outdir = output_root(args.out_root) / cfg.output["directory"]
    print(f"run: {outdir} ({len(manifest['files'])} files)")
    return 0


def _cmd_compare(args) -> int:
    cfgs = [load_config(c) for c in args.configs]
    compare(cfgs, root=args.out_root)
    return 0


def _cmd_ref(args) -> int:
    cfg = load_config(args.config)
    root = output_root(args.out_root)
    prob = build_problem(cfg)
    ref = get_reference(cfg, prob, root)
    if ref is None:
        print("ref: metrics.reference = 'none', nothing to build")
        return 0
    cache = root / "refs" / f"{cfg.problem_hash}.ref"
    print(f"ref: {cache}")
    print(f"  primal value {ref.primal!r}")
    for key, val in sorted(ref.meta.items()):
        print(f"  {key}: {val}")
    return 0


def _cmd_check(args) -> int:
    cfg = load_config(args.config)
    results = run_checks(cfg)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} of {len(results)} checks failed")
        return 3
    return 0


def _cmd_plot(args) -> int:
    traces = [RunTrace.from_csv(p) for p in args.traces]
    labels = [Path(p).stem for p in args.traces]
    svg = emit_plot(traces, args.kind, scale=args.scale, labels=labels)
    out = Path(args.out) if args.out else Path(f"plot_{args.kind}.svg")
    _write_atomic(out, svg)
    print(f"plot: {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drsaddle",
        description="Saddle-point solver benchmark runner")
    parser.add_argument("--out-root", default=None,
                        help=f"output root (default ${ENV_OUT} or ./out)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config", help="TOML config path or preset name")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="run several configs on one problem")
    p.add_argument("configs", nargs="+")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ref", help="build and cache the reference solution")
    p.add_argument("config")
    p.set_defaults(func=_cmd_ref)

    p = sub.add_parser("check", help="run structural invariant checks")
    p.add_argument("config")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("plot", help="render saved traces as SVG")
    p.add_argument("traces", nargs="+")
    p.add_argument("--kind", required=True, choices=sorted(_KIND_COLUMNS))
    p.add_argument("--scale", default="loglog",
                   choices=("loglog", "semilog"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
