"""Command-line surface: dataset generation, training, analysis, plots.

One executable with verbs. Behavior is controlled by a flat key=value
config file (section-prefixed keys such as solver.eta=1.0), overridable
with repeated --set key=value arguments and a few convenience flags;
flags win over --set, which wins over the file. Exit codes: 0 success,
2 config error, 3 data error, 4 divergence, 5 verification failure.
"""

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import criterion as _criterion
from . import data as _data
from . import decomposition as _decomposition
from . import experiment as _experiment
from . import model as _model
from . import solver as _solver
from . import spectral as _spectral
from .errors import (
    AnalysisError,
    ConfigError,
    ConsistencyError,
    DataError,
    DataFormatError,
    DivergenceError,
    ShapeError,
)
from .linalg import sym_eig

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_DIVERGED = 4
_EXIT_VERIFY = 5

_PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
)
_UNSIZED_COLOR = "#555555"


# ---------------------------------------------------------------------------
# Config files and overrides
# ---------------------------------------------------------------------------


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat key=value lines; # comments and blank lines are skipped."""
    settings = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or "." not in key:
            raise ConfigError(f"{origin}:{lineno}: keys look like section.name")
        settings[key] = value
    return settings


def load_config(args) -> dict:
    """Config file merged with --set overrides (overrides win)."""
    settings = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        settings = parse_config_text(path.read_text(), str(path))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        settings[key] = value
    return settings


def check_known_keys(settings: dict, sections: dict) -> None:
    """Reject typos inside owned sections; foreign sections pass through.

    sections maps an owned prefix to its known key names, so one shared
    config file can drive several verbs.
    """
    for key in settings:
        prefix, _, name = key.partition(".")
        if prefix in sections and name not in sections[prefix]:
            known = ", ".join(f"{prefix}.{n}" for n in sorted(sections[prefix]))
            raise ConfigError(f"unknown config key {key!r} (known: {known})")


def _convert(settings, key, default, conv):
    if key not in settings:
        return default
    raw = settings[key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from None


def get_int(settings, key, default):
    return _convert(settings, key, default, int)


def get_float(settings, key, default):
    return _convert(settings, key, default, float)


def get_str(settings, key, default):
    return _convert(settings, key, default, str)


def get_bool(settings, key, default):
    def to_bool(raw):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected true/false")

    return _convert(settings, key, default, to_bool)


def get_int_list(settings, key, default):
    def to_list(raw):
        return tuple(int(part) for part in raw.split(",") if part.strip())

    return _convert(settings, key, default, to_list)


def resolve_criterion(name: str, num_classes: int) -> _criterion.CriterionKind:
    tag = name.strip().lower().replace("-", "_")
    if tag in ("ce", "xent", "cross_entropy"):
        return _criterion.CriterionKind(_criterion.CROSS_ENTROPY, num_classes)
    if tag in ("mse", "squared_error"):
        return _criterion.CriterionKind(_criterion.MSE, num_classes)
    raise ConfigError(f"unknown criterion {name!r} (use cross-entropy or mse)")


def thread_budget(requested: int) -> int:
    """Requested worker count capped by the EOS_THREADS environment variable."""
    cap = os.environ.get("EOS_THREADS")
    if cap is None:
        return requested
    try:
        cap_value = int(cap)
    except ValueError:
        raise ConfigError(f"EOS_THREADS must be an integer, got {cap!r}") from None
    if cap_value < 1:
        raise ConfigError("EOS_THREADS must be positive")
    return min(requested, cap_value)


# ---------------------------------------------------------------------------
# gen-dice
# ---------------------------------------------------------------------------

_DICE_KEYS = {"dice": {"n_per_class", "seed", "out"}}


def cmd_gen_dice(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _DICE_KEYS)
    n_per_class = get_int(settings, "dice.n_per_class", 100)
    seed = get_int(settings, "dice.seed", 0)
    out = Path(get_str(settings, "dice.out", "dice.eosd"))
    if args.n_per_class is not None:
        n_per_class = args.n_per_class
    if args.seed is not None:
        seed = args.seed
    if args.out is not None:
        out = Path(args.out)
    dataset = _data.generate_dice_dataset(n_per_class, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    _data.save_dataset(dataset, out)
    print(
        f"wrote {dataset.n_samples} samples "
        f"({dataset.num_classes} classes, {dataset.dim} features) to {out}"
    )
    return _EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {
    "train": {"dataset", "criterion", "out_dir", "sizes", "init_seeds", "subset_seeds"},
    "model": {"depth", "width", "gain"},
    "solver": {"eta", "k", "loss_threshold", "max_steps", "snapshot_interval"},
    "experiment": {"threads"},
}


def cmd_train(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _TRAIN_KEYS)
    dataset_path = get_str(settings, "train.dataset", None)
    if args.dataset is not None:
        dataset_path = args.dataset
    if dataset_path is None:
        raise ConfigError("train.dataset (or --dataset) is required")
    base = _data.load_dataset(dataset_path)

    criterion_name = get_str(settings, "train.criterion", "cross-entropy")
    if args.criterion is not None:
        criterion_name = args.criterion
    criterion = resolve_criterion(criterion_name, base.num_classes)

    max_steps = get_int(settings, "solver.max_steps", 100_000)
    if args.max_steps is not None:
        max_steps = args.max_steps
    out_dir = Path(get_str(settings, "train.out_dir", "runs"))
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)

    k = get_int(settings, "solver.k", 0)
    threshold = get_float(settings, "solver.loss_threshold", 0.0)
    config = _experiment.ExperimentConfig(
        base_dataset=base,
        criterion=criterion,
        subset_sizes=get_int_list(settings, "train.sizes", (base.n_samples,)),
        init_seeds=get_int_list(settings, "train.init_seeds", (0,)),
        subset_seeds=get_int_list(settings, "train.subset_seeds", (0,)),
        depth=get_int(settings, "model.depth", 4),
        width=get_int(settings, "model.width", 32),
        gain=get_float(settings, "model.gain", float(np.sqrt(2.0))),
        solver=_solver.SolverConfig(
            k=k if k > 0 else _solver.choose_k(criterion, base.num_classes),
            eta=get_float(settings, "solver.eta", 1.0),
            loss_threshold=threshold if threshold > 0.0 else None,
            max_steps=max_steps,
            snapshot_interval=get_int(settings, "solver.snapshot_interval", 100),
        ),
        out_dir=out_dir,
        threads=thread_budget(get_int(settings, "experiment.threads", 1)),
    )
    run_dirs = _experiment.run_experiment_grid(config)
    diverged = []
    for run_dir in run_dirs:
        meta = json.loads((run_dir / "run_meta.json").read_text())
        line = f"{run_dir.name}: {meta['status']}"
        if meta["status"] == "diverged":
            line += f" at step {meta['divergence_step']}"
            diverged.append((run_dir.name, meta["divergence_step"]))
        else:
            line += f" after {meta['steps']} steps (loss {meta['final_loss']:.6g})"
        print(line)
    if diverged:
        name, step = diverged[0]
        print(f"error: run {name} diverged at step {step}", file=sys.stderr)
        return _EXIT_DIVERGED
    return _EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

_ANALYZE_KEYS = {"analyze": {"tol", "max_iters"}}


def cmd_analyze(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _ANALYZE_KEYS)
    tol = get_float(settings, "analyze.tol", 1e-6)
    if args.tol is not None:
        tol = args.tol
    max_iters = get_int(settings, "analyze.max_iters", 5000)
    for run_dir in map(Path, args.run_dirs):
        if not (run_dir / "run_meta.json").exists():
            raise DataError(f"{run_dir} is not a run directory (no run_meta.json)")
        records = _experiment.analyze_snapshots(run_dir, tol=tol, max_iters=max_iters)
        out = run_dir / "metrics.csv"
        _experiment.emit_metrics_csv(records, out)
        print(f"wrote {len(records)} records to {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# fit-powerlaw
# ---------------------------------------------------------------------------

_FIT_KEYS = {"fit": {"mode", "start_layer", "min_step"}}


def _run_metrics(run_dir: Path):
    """(dataset size, parsed records) for one analyzed run directory."""
    meta_path = run_dir / "run_meta.json"
    csv_path = run_dir / "metrics.csv"
    if not meta_path.exists():
        raise DataError(f"{run_dir} is not a run directory (no run_meta.json)")
    if not csv_path.exists():
        raise DataError(f"{run_dir} has no metrics.csv (run analyze first)")
    size = json.loads(meta_path.read_text())["size"]
    return size, _experiment.parse_metrics_csv(csv_path)


def cmd_fit_powerlaw(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _FIT_KEYS)
    mode = get_str(settings, "fit.mode", "mean")
    if args.mode is not None:
        mode = args.mode
    start_layer = get_int(settings, "fit.start_layer", 1)
    min_step = get_int(settings, "fit.min_step", 10)
    pairs = []
    for run_dir in map(Path, args.run_dirs):
        size, records = _run_metrics(run_dir)
        kept = _experiment.trim_transient(records, min_step)
        if not kept:
            raise AnalysisError(
                f"{run_dir}: every record falls inside the {min_step}-step transient"
            )
        pairs.append((size, _experiment.peak_alignment_product(kept, start_layer)))
    fit = _experiment.fit_power_law(_experiment.aggregate_peaks(pairs, mode))
    sys.stdout.write(_experiment.power_law_report(fit))
    return _EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

_PLOT_KEYS = {"plot": {"metrics", "out_dir", "log_y", "x"}}


def _ticks(lo: float, hi: float, count: int = 5) -> np.ndarray:
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if lo == hi:
        pad = 0.5 if lo == 0.0 else abs(lo) * 0.1
        lo, hi = lo - pad, hi + pad
    return np.linspace(lo, hi, count)


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


@dataclass(frozen=True)
class PlotSeries:
    """One curve: label, color, and the (x, y) samples to draw."""

    label: str
    color: str
    x: np.ndarray
    y: np.ndarray


def render_line_chart(title, series, *, log_y=False, width=640, height=420) -> str:
    """Deterministic standalone SVG line chart.

    Non-finite samples (and non-positive ones under log_y) break the
    polyline rather than being interpolated over. With no drawable
    points the chart still renders titled, empty axes.
    """
    left, right, top, bottom = 64.0, 16.0, 28.0, 40.0
    plot_w = width - left - right
    plot_h = height - top - bottom

    drawable = []
    for s in series:
        x = np.asarray(s.x, dtype=np.float64)
        y = np.asarray(s.y, dtype=np.float64)
        keep = np.isfinite(x) & np.isfinite(y)
        if log_y:
            keep &= y > 0.0
        y_t = np.where(keep, np.log10(np.where(keep, y, 1.0)) if log_y else y, np.nan)
        drawable.append((s, x, y_t, keep))

    xs = np.concatenate([x[k] for _, x, _, k in drawable]) if drawable else np.array([])
    ys = np.concatenate([y[k] for _, _, y, k in drawable]) if drawable else np.array([])
    x_ticks = _ticks(xs.min() if xs.size else 0.0, xs.max() if xs.size else 1.0)
    y_ticks = _ticks(ys.min() if ys.size else 0.0, ys.max() if ys.size else 1.0)

    def to_px(x, y):
        px = left + (x - x_ticks[0]) / (x_ticks[-1] - x_ticks[0]) * plot_w
        py = top + (y_ticks[-1] - y) / (y_ticks[-1] - y_ticks[0]) * plot_h
        return px, py

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-family="sans-serif" font-size="13" '
        f'font-weight="bold">{_escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="black" stroke-width="1"/>',
    ]
    for tick in x_ticks:
        px, _ = to_px(tick, y_ticks[0])
        parts.append(
            f'<line x1="{px:.2f}" y1="{top + plot_h:.2f}" x2="{px:.2f}" '
            f'y2="{top + plot_h + 4:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{top + plot_h + 16:.2f}" font-family="sans-serif" '
            f'font-size="10" text-anchor="middle">{tick:.4g}</text>'
        )
    for tick in y_ticks:
        _, py = to_px(x_ticks[0], tick)
        label = 10.0**tick if log_y else tick
        parts.append(
            f'<line x1="{left - 4:.2f}" y1="{py:.2f}" x2="{left:.2f}" '
            f'y2="{py:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{left - 7:.2f}" y="{py + 3:.2f}" font-family="sans-serif" '
            f'font-size="10" text-anchor="end">{label:.4g}</text>'
        )
    for index, (s, x, y_t, keep) in enumerate(drawable):
        runs = []
        run = []
        for j in range(x.size):
            if keep[j]:
                run.append(to_px(x[j], y_t[j]))
            elif run:
                runs.append(run)
                run = []
        if run:
            runs.append(run)
        for run in runs:
            points = " ".join(f"{px:.2f},{py:.2f}" for px, py in run)
            parts.append(
                f'<polyline points="{points}" fill="none" stroke="{s.color}" '
                f'stroke-width="1.5"/>'
            )
        ly = top + 14 + 14 * index
        parts.append(
            f'<line x1="{left + plot_w - 120:.2f}" y1="{ly - 4:.2f}" '
            f'x2="{left + plot_w - 100:.2f}" y2="{ly - 4:.2f}" '
            f'stroke="{s.color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{left + plot_w - 96:.2f}" y="{ly:.2f}" '
            f'font-family="sans-serif" font-size="10">{_escape(s.label)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _plot_inputs(paths):
    """Resolve run dirs / CSV paths to (label, size, records) triples."""
    resolved = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            size, records = _run_metrics(path)
            resolved.append((path.name, size, records))
        else:
            if not path.exists():
                raise DataError(f"no such metrics file: {path}")
            resolved.append((path.stem, None, _experiment.parse_metrics_csv(path)))
    return resolved


def _series_values(records, column: str) -> np.ndarray:
    depth = records[0].depth if records else 2
    columns = _experiment.metrics_columns(depth)
    if column not in columns:
        raise ConfigError(
            f"unknown column {column!r}; available: {', '.join(columns)}"
        )
    index = columns.index(column)
    rows = [_experiment.record_row(r) for r in records]
    return np.array([float(row[index]) for row in rows], dtype=np.float64)


def cmd_plot(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _PLOT_KEYS)
    metrics = tuple(
        part.strip()
        for part in get_str(settings, "plot.metrics", "lambda1_full").split(",")
        if part.strip()
    )
    if args.metric:
        metrics = tuple(args.metric)
    out_dir = Path(get_str(settings, "plot.out_dir", "plots"))
    if args.out_dir is not None:
        out_dir = Path(args.out_dir)
    log_y = get_bool(settings, "plot.log_y", False) or args.log_y
    x_column = get_str(settings, "plot.x", "step")
    if args.x_axis is not None:
        x_column = args.x_axis

    inputs = _plot_inputs(args.inputs)
    sizes = sorted({size for _, size, _ in inputs if size is not None})
    colors = {size: _PALETTE[i % len(_PALETTE)] for i, size in enumerate(sizes)}
    out_dir.mkdir(parents=True, exist_ok=True)
    for metric in metrics:
        series = []
        for label, size, records in inputs:
            shown = label if size is None else f"{label} (n={size})"
            series.append(
                PlotSeries(
                    label=shown,
                    color=_UNSIZED_COLOR if size is None else colors[size],
                    x=_series_values(records, x_column),
                    y=_series_values(records, metric),
                )
            )
        out = out_dir / f"{metric}.svg"
        out.write_text(render_line_chart(metric, series, log_y=log_y))
        print(f"wrote {out}")
    return _EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

_VERIFY_KEYS = {"verify": {"seed"}}


@dataclass(frozen=True)
class CheckResult:
    """One self-check: what was measured against which tolerance."""

    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance


def _rel(err: float, scale: float) -> float:
    return float(err / max(scale, 1e-300))


def run_verification(seed: int = 0, propagator_fault: float = 1.0):
    """Dual-route identity suite on a small random model.

    Every check compares an independent route (finite differences, dense
    per-sample builds) against the streamed implementation. The fault
    multiplier perturbs the per-sample propagator route so the suite's
    sensitivity itself is testable.
    """
    rng = np.random.default_rng(seed)
    widths = [4, 6, 6, 3]
    model = _model.init_xavier_gain(widths, gain=np.sqrt(2.0), seed=seed + 1)
    n = 12
    inputs = rng.normal(size=(n, widths[0]))
    labels = rng.integers(0, widths[-1], n)
    dataset = _data.LabeledDataset(
        inputs, labels, widths[-1], _data.Provenance("verify", seed, n)
    )
    criterion = _criterion.CriterionKind(_criterion.CROSS_ENTROPY, widths[-1])
    theta = _model.flatten_params(model)
    dim = theta.size
    checks = []

    def loss_at(vec):
        probe = model.copy()
        _model.set_params(probe, vec)
        return _model.training_loss(probe, dataset, criterion)

    def grad_at(vec):
        probe = model.copy()
        _model.set_params(probe, vec)
        return _model.loss_gradient(probe, dataset, criterion)

    # 1. analytic gradient vs central finite differences on sampled coords
    grad = _model.loss_gradient(model, dataset, criterion)
    coords = rng.choice(dim, size=min(40, dim), replace=False)
    eps = 1e-6
    fd = np.empty(coords.size)
    for j, c in enumerate(coords):
        bump = np.zeros(dim)
        bump[c] = eps
        fd[j] = (loss_at(theta + bump) - loss_at(theta - bump)) / (2 * eps)
    checks.append(
        CheckResult(
            "gradient matches central differences",
            _rel(np.linalg.norm(grad[coords] - fd), np.linalg.norm(fd)),
            1e-6,
        )
    )

    # 2. Hessian-vector product vs differentiated gradient
    full, gauss, rest = _spectral.operator_triple(model, dataset, criterion)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    fd_hvp = (grad_at(theta + eps * direction) - grad_at(theta - eps * direction)) / (
        2 * eps
    )
    hvp = full.matvec(direction)
    checks.append(
        CheckResult(
            "hessian-vector product matches central differences",
            _rel(np.linalg.norm(hvp - fd_hvp), np.linalg.norm(fd_hvp)),
            1e-5,
        )
    )

    # Dense per-sample builds shared by the remaining identity checks.
    trace = _model.forward(model, dataset.inputs)
    curvatures = [
        _criterion.output_hessian(criterion, trace.output[s], int(dataset.labels[s]))
        for s in range(n)
    ]
    k_blocks = [
        _decomposition.build_K(model, trace, curvatures[s], sample=s) for s in range(n)
    ]
    k_rows = [np.hstack(blocks) for blocks in k_blocks]
    deltas = [
        [
            propagator_fault
            * _decomposition.build_delta(model, trace, curvatures[s], i, sample=s)
            for i in range(1, model.depth + 1)
        ]
        for s in range(n)
    ]

    # 3. streamed Gauss-Newton operator vs dense materialization
    g_dense = sum(k.T @ k for k in k_rows) / n
    g_stream = np.column_stack([gauss.matvec(col) for col in np.eye(dim)])
    checks.append(
        CheckResult(
            "streamed gauss-newton matches dense build",
            _rel(np.abs(g_stream - g_dense).max(), max(np.abs(g_dense).max(), 1.0)),
            1e-10,
        )
    )

    # 4. curvature split: dense Gauss-Newton + remainder = Hessian product
    split = g_dense @ direction + rest.matvec(direction) - hvp
    scale = (
        np.linalg.norm(hvp)
        + np.linalg.norm(g_dense @ direction)
        + np.linalg.norm(rest.matvec(direction))
    )
    checks.append(
        CheckResult(
            "curvature split sums to the hessian product",
            _rel(np.linalg.norm(split), scale),
            1e-12,
        )
    )

    # 5. per-layer blocks sum to the full Gram
    residual_sum = max(
        np.abs(
            sum(block @ block.T for block in k_blocks[s]) - k_rows[s] @ k_rows[s].T
        ).max()
        for s in range(n)
    )
    checks.append(
        CheckResult("layer blocks sum to the full gram", residual_sum, 1e-10)
    )

    # 6. parameter-side and propagator-side Grams agree per layer
    residual_gram = max(
        np.abs(
            k_blocks[s][i] @ k_blocks[s][i].T - deltas[s][i] @ deltas[s][i].T
        ).max()
        for s in range(n)
        for i in range(model.depth)
    )
    checks.append(
        CheckResult("parameter and propagator grams agree", residual_gram, 1e-9)
    )

    # 7. factor products reconstruct every start layer's propagator norm
    # (norms here are squared top singular values, not Frobenius norms)
    def top_gram_eig(matrix):
        gram = matrix @ matrix.T
        return float(np.linalg.eigvalsh((gram + gram.T) / 2.0)[-1])

    slices = _decomposition.curvature_slices(model, dataset, criterion)
    worst = 0.0
    for start in range(1, model.depth):
        factors = _decomposition.decomposition_factors(
            model, dataset, criterion, start
        )
        rebuilt = (
            factors.input_ratio_product
            * factors.scalar_alignment_product
            * factors.jacobian_norm_product
            * factors.propagator_alignment_product
            * factors.last_layer_norm_sq
        )
        target = float(np.mean([top_gram_eig(deltas[s][start - 1]) for s in range(n)]))
        worst = max(worst, _rel(abs(rebuilt - target), abs(target)))
    checks.append(
        CheckResult("factor products reconstruct propagator norms", worst, 1e-9)
    )

    # 8. overlap ratio stays inside [0, 1]
    top_g = _spectral.power_iterate(gauss, 1, tol=1e-10, max_iters=20_000)
    rho = float(top_g.values[0] / slices.k_norm_sq.mean())
    checks.append(
        CheckResult(
            "overlap ratio stays within [0, 1]",
            max(0.0, rho - 1.0, -rho),
            1e-9,
        )
    )

    # 9. top eigenvalue transfers between the two Gram orders
    rect = rng.normal(size=(4, 7))
    lam_small = sym_eig(rect @ rect.T).values[0]
    lam_large = sym_eig(rect.T @ rect).values[0]
    checks.append(
        CheckResult(
            "eigenvalues transfer across gram orders",
            _rel(abs(lam_small - lam_large), abs(lam_large)),
            1e-9,
        )
    )

    # 10. serialization round-trips are exact
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        _data.save_dataset(dataset, tmp / "d.eosd")
        loaded = _data.load_dataset(tmp / "d.eosd")
        data_err = float(
            max(
                np.abs(loaded.inputs - dataset.inputs).max(),
                np.abs(loaded.labels - dataset.labels).max(),
            )
        )
        _experiment.write_snapshot(tmp / "s.eosl", 7, 1.5, model)
        _, _, reloaded = _experiment.read_snapshot(tmp / "s.eosl")
        snap_err = float(
            np.abs(_model.flatten_params(reloaded) - theta).max()
        )
        rec, _ = _decomposition.analyze_model(model, dataset, criterion)
        _experiment.emit_metrics_csv([rec], tmp / "m.csv")
        parsed = _experiment.parse_metrics_csv(tmp / "m.csv")
        _experiment.emit_metrics_csv(parsed, tmp / "m2.csv")
        csv_err = float(
            (tmp / "m.csv").read_bytes() != (tmp / "m2.csv").read_bytes()
        )
    checks.append(
        CheckResult(
            "serialization round-trips are exact",
            max(data_err, snap_err, csv_err),
            0.0,
        )
    )
    return checks


def cmd_verify(args) -> int:
    settings = load_config(args)
    check_known_keys(settings, _VERIFY_KEYS)
    seed = get_int(settings, "verify.seed", 0)
    if args.seed is not None:
        seed = args.seed
    fault = 1.001 if args.inject_g_fault else 1.0
    checks = run_verification(seed, propagator_fault=fault)
    name_width = max(len(c.name) for c in checks)
    print(f"{'check'.ljust(name_width)}  {'residual':>12}  {'tolerance':>10}  status")
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(
            f"{check.name.ljust(name_width)}  {check.residual:>12.3e}  "
            f"{check.tolerance:>10.1e}  {status}"
        )
    failed = [c for c in checks if not c.passed]
    print(f"overall: {'PASS' if not failed else 'FAIL'} "
          f"({len(checks) - len(failed)}/{len(checks)})")
    return _EXIT_OK if not failed else _EXIT_VERIFY


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eoslab",
        description="Sharpness decomposition toolkit: generate, train, analyze.",
    )
    verbs = parser.add_subparsers(dest="verb", required=True)

    gen = verbs.add_parser("gen-dice", help="generate the pip-pattern dataset")
    _add_common(gen)
    gen.add_argument("--n-per-class", type=int, help="images per class")
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--out", help="output dataset path")
    gen.set_defaults(func=cmd_gen_dice)

    train = verbs.add_parser("train", help="train a grid of runs")
    _add_common(train)
    train.add_argument("--dataset", help="input dataset file")
    train.add_argument("--criterion", help="cross-entropy or mse")
    train.add_argument("--max-steps", type=int, help="step budget per run")
    train.add_argument("--out-dir", help="grid output directory")
    train.set_defaults(func=cmd_train)

    analyze = verbs.add_parser("analyze", help="measure snapshots into metrics.csv")
    _add_common(analyze)
    analyze.add_argument("run_dirs", nargs="+", help="run directories to analyze")
    analyze.add_argument("--tol", type=float, help="eigensolver tolerance")
    analyze.set_defaults(func=cmd_analyze)

    fit = verbs.add_parser("fit-powerlaw", help="fit peak alignment vs dataset size")
    _add_common(fit)
    fit.add_argument("run_dirs", nargs="+", help="analyzed run directories")
    fit.add_argument("--mode", choices=("mean", "max", "pool"), help="aggregation")
    fit.set_defaults(func=cmd_fit_powerlaw)

    plot = verbs.add_parser("plot", help="render metric curves to SVG")
    _add_common(plot)
    plot.add_argument("inputs", nargs="+", help="run directories or metrics CSVs")
    plot.add_argument(
        "--metric", action="append", help="column to plot (repeatable)"
    )
    plot.add_argument("--out-dir", help="directory for SVG files")
    plot.add_argument("--log-y", action="store_true", help="log-scale y axis")
    plot.add_argument("--x-axis", help="column for the x axis (default step)")
    plot.set_defaults(func=cmd_plot)

    verify = verbs.add_parser("verify", help="run the self-check identity suite")
    _add_common(verify)
    verify.add_argument("--seed", type=int, help="seed for the random model")
    verify.add_argument(
        "--inject-g-fault",
        action="store_true",
        help="perturb the propagator route to prove the checks can fail",
    )
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return _EXIT_CONFIG
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return _EXIT_DIVERGED
    except (
        DataError,
        DataFormatError,
        AnalysisError,
        ShapeError,
        ConsistencyError,
        FileNotFoundError,
    ) as err:
        print(f"error: {err}", file=sys.stderr)
        return _EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
