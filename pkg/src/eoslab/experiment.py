"""Experiment driver: training grids, snapshot analysis, and fits.

A grid trains one network per (subset size, init seed, subset seed)
triple, persisting model snapshots and the exact training subset into a
run directory so analysis can be re-run at any time. Analysis walks the
snapshots in step order, measuring the sharpness decomposition at each
one while threading warm-started eigenvector estimates from snapshot to
snapshot. Peak alignment products per run feed a log-log power-law fit
of peak-versus-dataset-size.

Everything is deterministic given the config: re-running an interrupted
grid skips completed runs via the manifest and produces byte-identical
outputs.
"""

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import criterion as _criterion
from .data import LabeledDataset, load_dataset, save_dataset, subset
from .decomposition import DecompositionRecord, analyze_model
from .errors import AnalysisError, ConfigError, DataError, DataFormatError
from .model import MlpModel, flatten_params, init_xavier_gain, unflatten_params
from .solver import SolverConfig, run_training
from .errors import DivergenceError

logger = logging.getLogger("eoslab.experiment")

_SNAP_MAGIC = b"EOSL"
_SNAP_VERSION = 1
_DEFAULT_GAIN = float(np.sqrt(2.0))
_TRANSIENT_STEPS = 10


# ---------------------------------------------------------------------------
# Snapshot files
# ---------------------------------------------------------------------------


def write_snapshot(path, step: int, flow_time: float, model: MlpModel) -> None:
    """Serialize (step, flow time, architecture, parameters) to one file."""
    widths = np.asarray(model.widths, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(np.asarray([_SNAP_VERSION], dtype="<u4").tobytes())
        fh.write(np.asarray([step], dtype="<u8").tobytes())
        fh.write(np.asarray([flow_time], dtype="<f8").tobytes())
        fh.write(np.asarray([model.depth], dtype="<u4").tobytes())
        fh.write(widths.tobytes())
        fh.write(flatten_params(model).astype("<f8").tobytes())


def read_snapshot(path, gain: float = _DEFAULT_GAIN):
    """Inverse of write_snapshot: returns (step, flow_time, model)."""
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:4] != _SNAP_MAGIC:
        raise DataFormatError(f"{path}: not a snapshot file (bad magic)")
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if version != _SNAP_VERSION:
        raise DataFormatError(f"{path}: unsupported snapshot version {version}")
    step = int(np.frombuffer(raw, dtype="<u8", count=1, offset=8)[0])
    flow_time = float(np.frombuffer(raw, dtype="<f8", count=1, offset=16)[0])
    depth = int(np.frombuffer(raw, dtype="<u4", count=1, offset=24)[0])
    widths_end = 28 + 4 * (depth + 1)
    if len(raw) < widths_end:
        raise DataFormatError(f"{path}: truncated header at byte {len(raw)}")
    widths = np.frombuffer(raw, dtype="<u4", count=depth + 1, offset=28).tolist()
    n_params = sum(widths[i + 1] * (widths[i] + 1) for i in range(depth))
    expect = widths_end + 8 * n_params
    if len(raw) != expect:
        raise DataFormatError(
            f"{path}: payload length {len(raw) - widths_end} does not match "
            f"architecture {widths} (expected {8 * n_params} bytes)"
        )
    params = np.frombuffer(raw, dtype="<f8", count=n_params, offset=widths_end)
    shell = init_xavier_gain(widths, gain=gain, seed=0)
    weights, biases = unflatten_params(shell, params.copy())
    return step, flow_time, MlpModel(weights, biases, gain)


# ---------------------------------------------------------------------------
# Grid configuration and runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid: dataset x sizes x seeds, one architecture, one solver."""

    base_dataset: LabeledDataset
    criterion: _criterion.CriterionKind
    subset_sizes: tuple[int, ...]
    init_seeds: tuple[int, ...]
    subset_seeds: tuple[int, ...]
    depth: int
    width: int
    solver: SolverConfig
    out_dir: Path
    gain: float = _DEFAULT_GAIN
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "subset_sizes", tuple(self.subset_sizes))
        object.__setattr__(self, "init_seeds", tuple(self.init_seeds))
        object.__setattr__(self, "subset_seeds", tuple(self.subset_seeds))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if not self.subset_sizes:
            raise ConfigError("need at least one subset size")
        if any(b <= a for a, b in zip(self.subset_sizes, self.subset_sizes[1:])):
            raise ConfigError("subset sizes must be strictly increasing")
        if not self.init_seeds or not self.subset_seeds:
            raise ConfigError("seed lists must be nonempty")
        if self.depth < 2:
            raise ConfigError("depth must be at least 2 layers")
        if self.width < 1:
            raise ConfigError("width must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    @property
    def widths(self) -> list[int]:
        return (
            [self.base_dataset.dim]
            + [self.width] * (self.depth - 1)
            + [self.base_dataset.num_classes]
        )

    def run_dir(self, size: int, init_seed: int, subset_seed: int) -> Path:
        return self.out_dir / f"size{size}_init{init_seed}_sub{subset_seed}"

    def triples(self):
        for size in self.subset_sizes:
            for init_seed in self.init_seeds:
                for subset_seed in self.subset_seeds:
                    yield size, init_seed, subset_seed


def _snapshot_paths(run_dir: Path):
    return sorted(Path(run_dir).glob("snap_*.eosl"))


def _run_digest(run_dir: Path) -> str:
    digest = hashlib.sha256()
    for path in _snapshot_paths(run_dir):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _read_manifest(out_dir: Path) -> dict:
    manifest = out_dir / "manifest.txt"
    done = {}
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) == 5:
                size, init_seed, subset_seed, status, digest = parts
                done[(int(size), int(init_seed), int(subset_seed))] = (status, digest)
    return done


def _run_one(config: ExperimentConfig, size: int, init_seed: int, subset_seed: int):
    """Train one grid cell; returns (run_dir, status string)."""
    run_dir = config.run_dir(size, init_seed, subset_seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = subset(config.base_dataset, size, subset_seed)
    save_dataset(ds, run_dir / "dataset.eosd")
    model = init_xavier_gain(config.widths, gain=config.gain, seed=init_seed)

    def sink(step, flow_time, snapshot_model):
        write_snapshot(
            run_dir / f"snap_{step:08d}.eosl", step, flow_time, snapshot_model
        )

    meta = {
        "criterion": config.criterion.tag,
        "num_classes": config.criterion.num_classes,
        "widths": config.widths,
        "gain": config.gain,
        "size": size,
        "init_seed": init_seed,
        "subset_seed": subset_seed,
        "eta": config.solver.eta,
        "k": config.solver.k,
        "max_steps": config.solver.max_steps,
        "snapshot_interval": config.solver.snapshot_interval,
    }
    try:
        summary = run_training(model, ds, config.criterion, config.solver, sink)
    except DivergenceError as err:
        meta.update(status="diverged", divergence_step=err.step)
        status = "diverged"
        logger.warning("run %s diverged at step %s", run_dir.name, err.step)
    else:
        status = "converged" if summary.converged else "budget"
        meta.update(
            status=status,
            steps=summary.steps,
            flow_time=summary.flow_time,
            final_loss=summary.final_loss,
        )
    (run_dir / "run_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return run_dir, status


def run_experiment_grid(config: ExperimentConfig) -> list[Path]:
    """Train every grid cell not already recorded in the manifest.

    Returns all run directories in grid order. Completed and diverged
    cells are skipped on re-invocation; a divergence is recorded and the
    rest of the grid continues.
    """
    config.out_dir.mkdir(parents=True, exist_ok=True)
    done = _read_manifest(config.out_dir)
    manifest = config.out_dir / "manifest.txt"
    lock = threading.Lock()

    def record(size, init_seed, subset_seed, status, run_dir):
        line = "\t".join(
            [str(size), str(init_seed), str(subset_seed), status, _run_digest(run_dir)]
        )
        with lock:
            with open(manifest, "a") as fh:
                fh.write(line + "\n")

    pending = [t for t in config.triples() if t not in done]

    def work(triple):
        size, init_seed, subset_seed = triple
        run_dir, status = _run_one(config, size, init_seed, subset_seed)
        record(size, init_seed, subset_seed, status, run_dir)

    if config.threads > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            for future in [pool.submit(work, t) for t in pending]:
                future.result()
    else:
        for triple in pending:
            work(triple)
    return [config.run_dir(*t) for t in config.triples()]


# ---------------------------------------------------------------------------
# Snapshot analysis
# ---------------------------------------------------------------------------


def analyze_snapshots(run_dir, *, tol: float = 1e-6, max_iters: int = 5000):
    """Decomposition record per snapshot, in step order.

    Eigenvector estimates warm-start from the previous snapshot, so the
    whole series costs little more than one cold solve. Unreadable
    snapshot files are skipped with a log entry.
    """
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run_meta.json").read_text())
    criterion = _criterion.CriterionKind(meta["criterion"], meta["num_classes"])
    dataset = load_dataset(run_dir / "dataset.eosd")
    records = []
    warm = None
    for path in _snapshot_paths(run_dir):
        try:
            step, flow_time, model = read_snapshot(path, gain=meta["gain"])
        except DataFormatError as err:
            logger.warning("skipping corrupt snapshot: %s", err)
            continue
        record, warm = analyze_model(
            model,
            dataset,
            criterion,
            step=step,
            flow_time=flow_time,
            tol=tol,
            max_iters=max_iters,
            warm=warm,
        )
        records.append(record)
    return records


def trim_transient(records, min_step: int = _TRANSIENT_STEPS):
    """Drop the warm-up records (step < min_step) before peak statistics."""
    kept = [r for r in records if r.step >= min_step]
    if records and not kept:
        logger.warning(
            "all %d records fall inside the %d-step transient", len(records), min_step
        )
    return kept


def peak_alignment_product(records, start_layer: int = 1) -> float:
    """Largest propagator-alignment product over a (trimmed) record series."""
    if not records:
        raise AnalysisError("no records to take a peak over")
    values = np.array([r.p_delta_jac[start_layer - 1] for r in records])
    if np.all(np.isnan(values)):
        raise AnalysisError("every record's alignment product is NaN")
    return float(np.nanmax(values))


def peak_series(records, field: str) -> float:
    """Largest finite value of one scalar record field; NaN entries ignored."""
    if not records:
        raise AnalysisError("no records to take a peak over")
    values = np.array([getattr(r, field) for r in records], dtype=np.float64)
    if np.all(np.isnan(values)):
        return float("nan")
    return float(np.nanmax(values))


# ---------------------------------------------------------------------------
# Power-law fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLawFit:
    """peak = c1 * size^c2, fitted on log-log axes with its R^2."""

    c1: float
    c2: float
    r_squared: float
    points: tuple

    def predict(self, size) -> np.ndarray:
        return self.c1 * np.asarray(size, dtype=np.float64) ** self.c2


def aggregate_peaks(pairs, mode: str = "mean"):
    """Reduce per-run (size, peak) pairs to fit points.

    mean/max collapse each size's runs to one point; pool keeps every
    run as its own point.
    """
    if mode == "pool":
        return [(float(d), float(p)) for d, p in pairs]
    if mode not in ("mean", "max"):
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    by_size = {}
    for d, p in pairs:
        by_size.setdefault(float(d), []).append(float(p))
    reduce = np.mean if mode == "mean" else np.max
    return [(d, float(reduce(ps))) for d, ps in sorted(by_size.items())]


def fit_power_law(points) -> PowerLawFit:
    """Least squares of log(peak) on log(size), with the log-space R^2."""
    pts = [(float(d), float(p)) for d, p in points]
    sizes = np.array([d for d, _ in pts])
    peaks = np.array([p for _, p in pts])
    if len(set(sizes.tolist())) < 3:
        raise DataError("power-law fit needs at least 3 distinct sizes")
    if np.any(peaks <= 0.0) or np.any(sizes <= 0.0):
        raise DataError("power-law fit needs positive sizes and peaks")
    x = np.log(sizes)
    y = np.log(peaks)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    fitted = design @ coef
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(
        c1=float(np.exp(coef[0])),
        c2=float(coef[1]),
        r_squared=float(min(max(r_squared, 0.0), 1.0)),
        points=tuple(pts),
    )


def power_law_report(fit: PowerLawFit) -> str:
    """Plain-text summary: constants, R^2, and the fitted points."""
    lines = [
        f"peak = c1 * size^c2 with c1 = {fit.c1:.6g}, c2 = {fit.c2:.6g}",
        f"R^2 (log-log) = {fit.r_squared:.6g}",
        "size        peak            fitted",
    ]
    for d, p in fit.points:
        lines.append(f"{d:<11.6g} {p:<15.9g} {float(fit.predict(d)):.9g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------


def metrics_columns(depth: int) -> list[str]:
    """Fixed column order for a depth-L analysis series."""
    cols = [
        "step",
        "flow_time",
        "loss",
        "lambda1_full",
        "lambda1_G",
        "lambda1_H",
        "rho_K",
        "e_K_sq",
    ]
    cols += [f"e_K{i}_sq" for i in range(1, depth + 1)]
    cols += ["pi_chi_1", "p_chi_delta_1", "pi_J_1", "p_delta_J_1", "e_deltaL_sq"]
    cols += [f"chi_sq_{i}" for i in range(1, depth)]
    cols += [f"jac_norm_sq_{i}" for i in range(1, depth)]
    cols += [f"align_chi_{i}" for i in range(1, depth)]
    cols += [f"align_dJ_{i}" for i in range(1, depth)]
    return cols


def record_row(record: DecompositionRecord) -> list:
    """One metrics row in metrics_columns order (step int first, floats after)."""
    row = [
        record.step,
        record.flow_time,
        record.loss,
        record.lambda1_full,
        record.lambda1_g,
        record.lambda1_h,
        record.rho_k,
        record.e_k_norm_sq,
    ]
    row += record.e_ki_norm_sq.tolist()
    row += [
        float(record.pi_chi[0]),
        float(record.p_chi_delta[0]),
        float(record.pi_jac[0]),
        float(record.p_delta_jac[0]),
        record.e_delta_last_sq,
    ]
    row += record.chi_sq.tolist()
    row += record.jac_norm_sq.tolist()
    row += record.align_chi.tolist()
    row += record.align_dj.tolist()
    return row


def emit_metrics_csv(records, path, depth: int | None = None) -> None:
    """Write one row per record with 17-significant-digit floats.

    With no records and no depth given, only the architecture-independent
    header prefix is written.
    """
    if depth is None and records:
        depth = records[0].depth
    columns = metrics_columns(depth) if depth is not None else metrics_columns(1)[:8]
    lines = [",".join(columns)]
    for record in records:
        row = record_row(record)
        lines.append(
            ",".join(
                str(v) if isinstance(v, int) else format(float(v), ".17g")
                for v in row
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def parse_metrics_csv(path):
    """Rebuild DecompositionRecord objects from an emitted metrics file."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    depth = sum(1 for c in header if c.startswith("e_K") and c != "e_K_sq")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        values = line.split(",")
        if len(values) != len(header):
            raise DataFormatError(
                f"{path}:{lineno}: {len(values)} fields, header has {len(header)}"
            )
        named = dict(zip(header, values))
        floats = {k: float(v) for k, v in named.items()}
        records.append(
            DecompositionRecord(
                step=int(named["step"]),
                flow_time=floats["flow_time"],
                loss=floats["loss"],
                lambda1_full=floats["lambda1_full"],
                lambda1_g=floats["lambda1_G"],
                lambda1_h=floats["lambda1_H"],
                rho_k=floats["rho_K"],
                e_k_norm_sq=floats["e_K_sq"],
                e_ki_norm_sq=np.array(
                    [floats[f"e_K{i}_sq"] for i in range(1, depth + 1)]
                ),
                chi_sq=np.array([floats[f"chi_sq_{i}"] for i in range(1, depth)]),
                jac_norm_sq=np.array(
                    [floats[f"jac_norm_sq_{i}"] for i in range(1, depth)]
                ),
                align_chi=np.array(
                    [floats[f"align_chi_{i}"] for i in range(1, depth)]
                ),
                align_dj=np.array(
                    [floats[f"align_dJ_{i}"] for i in range(1, depth)]
                ),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Rank statistics
# ---------------------------------------------------------------------------


def _average_ranks(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank_correlation(x, y) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DataError("need two equal-length series of at least 2 points")
    rx = _average_ranks(x) - (x.size + 1) / 2.0
    ry = _average_ranks(y) - (y.size + 1) / 2.0
    denom = np.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise DataError("rank correlation undefined for a constant series")
    return float((rx @ ry) / denom)
