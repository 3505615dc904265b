"""Compression / communication metrics, scaling sweeps and CSV reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from . import dist
from .config import RunConfig, RunMode, round_half_up
from .errors import ConfigError
from .training import GROUP_TRAIN, RunReport, load_datasets, run_training

DEFAULT_F = 25.0
DEFAULT_L = 75.0

METRICS_COLUMNS = (
    "run", "mode", "seed", "world_size", "num_groups", "local_batch", "global_batch", "total_steps",
    "final_top1", "best_top1", "compression_ratio", "total_bytes", "job_bytes", "scaled_traffic", "ecr",
)


def compression_ratio(full_elements: int, retained_elements: int) -> float:
    if retained_elements <= 0:
        raise ValueError("retained_elements must be positive")
    return full_elements / retained_elements


def ecr(F: float, L: float, c: float, group_phase_frac: float = 0.0, is_ab: bool = False) -> float:
    """Estimated communication reduction, in percent.

    ``F`` and ``L`` are the percentages of training spent near full rank and
    near the final compressed state, ``c`` the final size as a percentage of
    the full model. For AB training the time spent in independent group
    training (``group_phase_frac``, percent) is taken off ``L``.
    """
    if F < 0 or L < 0 or F + L > 100:
        raise ValueError(f"need F, L >= 0 and F + L <= 100, got F={F}, L={L}")
    if not 0 < c <= 100:
        raise ValueError(f"c must lie in (0, 100], got {c}")
    if is_ab and not 0 <= group_phase_frac <= L:
        raise ValueError(f"group_phase_frac must lie in [0, L], got {group_phase_frac}")
    effective = L - group_phase_frac if is_ab else L
    return 100.0 - F - effective * c / 100.0


@dataclass
class MetricsReport:
    run: int
    mode: str
    seed: int
    world_size: int
    num_groups: int
    local_batch: int
    global_batch: int
    total_steps: int
    final_top1: float
    best_top1: float
    compression_ratio: float
    total_bytes: Fraction
    job_bytes: Fraction
    scaled_traffic: float
    ecr: float
    wall_time: float = 0.0
    per_phase: dict[str, Fraction] = field(default_factory=dict)

    def row(self) -> list[str]:
        out = []
        for col in METRICS_COLUMNS:
            v = getattr(self, col)
            if isinstance(v, Fraction):
                out.append(dist._fmt_bytes(v))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


def metrics_from_run(report: RunReport, run: int = 0, F: float = DEFAULT_F, L: float = DEFAULT_L,
                     backward_fraction: float = dist.BACKWARD_FRACTION) -> MetricsReport:
    cfg = report.config
    totals = report.ledger.totals(backward_fraction=backward_fraction)
    ratio = report.compression_ratio
    is_ab = cfg.mode is not RunMode.TRAD_DDP
    # A factored model larger than the original still counts as "no saving".
    c = min(100.0, 100.0 / ratio)
    group_frac = 100.0 * report.schedule.steps_in(GROUP_TRAIN) / report.schedule.total_steps
    value = ecr(F, L, c, min(group_frac, L), is_ab)
    return MetricsReport(
        run=run,
        mode=cfg.mode.value,
        seed=cfg.seed,
        world_size=cfg.world_size,
        num_groups=cfg.num_groups if cfg.mode is RunMode.AB_GROUPS else 1,
        local_batch=cfg.local_batch,
        global_batch=cfg.global_batch,
        total_steps=report.schedule.total_steps,
        final_top1=report.final_top1,
        best_top1=report.best_top1,
        compression_ratio=ratio,
        total_bytes=totals.total_bytes,
        job_bytes=totals.job_bytes,
        scaled_traffic=totals.scaled_traffic,
        ecr=value,
        wall_time=report.wall_time,
        per_phase=totals.per_phase,
    )


# -- scaling sweeps ------------------------------------------------------------


def sweep_batch_sizes(nodes: int, scaling: str, local_batch: int | None = None,
                      global_batch: int | None = None, workers_per_node: int = 1) -> tuple[int, int, int]:
    """``(world_size, local_batch, global_batch)`` for a node count.

    ``scaling="local"`` keeps the per-worker batch fixed; ``"global"`` keeps
    the global batch fixed and splits it over more workers.
    """
    p = nodes * workers_per_node
    if p < 1:
        raise ConfigError("need at least one worker")
    if scaling == "local":
        if local_batch is None:
            raise ConfigError("constant-local scaling needs a local batch size")
        return p, local_batch, local_batch * p
    if scaling == "global":
        if global_batch is None:
            raise ConfigError("constant-global scaling needs a global batch size")
        if global_batch % p:
            raise ConfigError(f"global batch {global_batch} is not divisible by {p} workers")
        return p, global_batch // p, global_batch
    raise ConfigError(f"unknown scaling mode {scaling!r}")


def sweep_config(base: RunConfig, nodes: int, scaling: str) -> RunConfig:
    """Derive the config for one sweep point.

    Constant-local runs keep the number of samples seen fixed, so the step
    count shrinks as the global batch grows.
    """
    p, local, glob = sweep_batch_sizes(nodes, scaling, base.local_batch, base.global_batch,
                                       base.workers_per_node)
    if scaling == "local":
        steps = max(1, round_half_up(base.ab.total_training_steps * base.global_batch / glob))
        return replace(base, world_size=p, local_batch_size=local, global_batch_size=None,
                       ab=replace(base.ab, total_training_steps=steps))
    return replace(base, world_size=p, local_batch_size=None, global_batch_size=glob)


def scaling_sweep(base: RunConfig, node_counts, scaling: str, datasets=None):
    """Run one training per node count; returns ``[(config, report, metrics)]``."""
    configs = [sweep_config(base, n, scaling) for n in node_counts]
    if datasets is None and configs:
        datasets = load_datasets(base.dataset)
    results = []
    for i, cfg in enumerate(configs):
        report = run_training(cfg, datasets)
        results.append((cfg, report, metrics_from_run(report, run=i)))
    return results


# -- output ----------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _run_files(report: RunReport, directory: Path) -> None:
    _write(directory / "ledger.csv", report.ledger.to_csv())
    _write(directory / "accuracy_curve.csv", _csv(("step", "top1"), [(s, repr(a)) for s, a in report.accuracy_curve]))
    _write(directory / "compression.csv",
           _csv(("step", "compression_ratio"), [(s, repr(c)) for s, c in report.compression_series]))


def emit_reports(results, out_dir) -> Path:
    """Write ``run_config.json``, ``metrics.csv`` and per-run CSVs.

    A single run puts ``ledger.csv`` / ``accuracy_curve.csv`` next to
    ``metrics.csv``; a sweep writes them under ``run_NNN/``. Wall-clock time
    goes to ``timing.csv`` so the other files are byte-stable across reruns.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    configs = [cfg.to_dict() for cfg, _, _ in results]
    echo = configs[0] if len(configs) == 1 else configs
    _write(out / "run_config.json", json.dumps(echo, indent=2) + "\n")
    _write(out / "metrics.csv", _csv(METRICS_COLUMNS, [m.row() for _, _, m in results]))
    _write(out / "phase_traffic.csv", _csv(
        ("run", "phase", "bytes"),
        [(m.run, ph, dist._fmt_bytes(b)) for _, _, m in results for ph, b in m.per_phase.items()],
    ))
    _write(out / "timing.csv", _csv(("run", "wall_time_seconds_real"), [(m.run, f"{m.wall_time:.3f}") for _, _, m in results]))
    if len(results) == 1:
        _run_files(results[0][1], out)
    else:
        for _, report, m in results:
            sub = out / f"run_{m.run:03d}"
            sub.mkdir(exist_ok=True)
            _run_files(report, sub)
    return out


def read_metrics(directory) -> list[dict[str, str]]:
    path = Path(directory) / "metrics.csv"
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


def format_table(rows: list[dict[str, str]], columns=None) -> str:
    columns = columns or ["run", "mode", "world_size", "global_batch", "final_top1",
                          "compression_ratio", "total_bytes", "scaled_traffic", "ecr"]
    cells = [columns] + [[_short(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def _short(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    if f.is_integer() and "." not in v:
        return v
    return f"{f:.4g}"
