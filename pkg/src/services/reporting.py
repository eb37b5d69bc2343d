"""Round tables, summaries and sweep aggregates on disk."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd
import yaml

from src.services.memory_reducer import RecomputationPlan
from src.services.sim_engine import RoundReport

ROUND_COLUMNS = [
    "round",
    "policy",
    "selected",
    "participants",
    "cuts",
    "dropouts",
    "memory_violations",
    "t_system_seconds",
    "mean_device_seconds",
    "peak_memory_bytes",
    "mean_peak_memory_bytes",
    "extra_forward_flops",
    "comm_bytes",
    "lan_bytes",
    "sum_dis",
    "sum_stat",
    "active_samples",
    "speed_segments",
    "memory_segments",
]

DEVICE_COLUMNS = [
    "round",
    "device_id",
    "cut",
    "iterations",
    "dropped",
    "violation",
    "memory_mode",
    "budget_bytes",
    "peak_memory_bytes",
    "speed_segments",
    "memory_segments",
    "extra_forward_flops",
    "device_compute_seconds",
    "recompute_seconds",
    "transfer_seconds",
    "server_compute_seconds",
    "upload_seconds",
    "total_seconds",
    "comm_bytes",
    "lan_bytes",
]

AGGREGATE_COLUMNS = [
    "cell",
    "policy",
    "rounds",
    "t_system_mean",
    "t_system_median",
    "t_system_p95",
    "total_comm_bytes",
    "total_lan_bytes",
    "total_dropouts",
    "total_violations",
    "final_active_samples",
    "mean_peak_memory_bytes",
]


def _ids(values: Iterable[int]) -> str:
    return ";".join(str(v) for v in values)


def rounds_frame(reports: Sequence[RoundReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        rows.append({
            "round": r.round,
            "policy": r.policy,
            "selected": _ids(r.selected),
            "participants": _ids(r.participants),
            "cuts": _ids(r.cuts),
            "dropouts": _ids(r.dropouts),
            "memory_violations": r.memory_violations,
            "t_system_seconds": r.t_system_seconds,
            "mean_device_seconds": r.mean_device_seconds,
            "peak_memory_bytes": r.peak_memory_bytes,
            "mean_peak_memory_bytes": r.mean_peak_memory_bytes,
            "extra_forward_flops": r.extra_forward_flops,
            "comm_bytes": r.comm_bytes,
            "lan_bytes": r.lan_bytes,
            "sum_dis": r.sum_dis,
            "sum_stat": r.sum_stat,
            "active_samples": r.active_samples,
            "speed_segments": r.speed_segments,
            "memory_segments": r.memory_segments,
        })
    return pd.DataFrame(rows, columns=ROUND_COLUMNS)


def devices_frame(reports: Sequence[RoundReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        for d in r.devices:
            rows.append({
                "round": r.round,
                "device_id": d.device_id,
                "cut": d.cut,
                "iterations": d.iterations,
                "dropped": d.dropped,
                "violation": d.violation,
                "memory_mode": d.memory_mode,
                "budget_bytes": d.budget_bytes,
                "peak_memory_bytes": d.peak_memory_bytes,
                "speed_segments": d.speed_segments,
                "memory_segments": d.memory_segments,
                "extra_forward_flops": d.extra_forward_flops,
                "device_compute_seconds": d.device_compute_seconds,
                "recompute_seconds": d.recompute_seconds,
                "transfer_seconds": d.transfer_seconds,
                "server_compute_seconds": d.server_compute_seconds,
                "upload_seconds": d.upload_seconds,
                "total_seconds": d.total_seconds,
                "comm_bytes": d.comm_bytes,
                "lan_bytes": d.lan_bytes,
            })
    return pd.DataFrame(rows, columns=DEVICE_COLUMNS)


def plan_frame(plan: RecomputationPlan) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "segment": i,
                "layers": f"{s.segment.start_layer}-{s.segment.end_layer}",
                "strategy": s.strategy.value,
                "peak_bytes": s.peak_bytes,
                "extra_forward_flops": s.extra_forward_flops,
            }
            for i, s in enumerate(plan.segments, start=1)
        ],
        columns=["segment", "layers", "strategy", "peak_bytes", "extra_forward_flops"],
    )


def _atomic_write(path: Path, write) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    return _atomic_write(Path(path), lambda fh: frame.to_csv(fh, index=False))


def write_yaml(data, path: str | Path) -> Path:
    return _atomic_write(Path(path), lambda fh: yaml.safe_dump(data, fh, sort_keys=False, allow_unicode=True))


def read_rounds(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, keep_default_na=False, dtype={c: str for c in ("selected", "participants", "cuts", "dropouts")})
    missing = [c for c in ROUND_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: not a rounds table, missing columns {missing}")
    return frame[ROUND_COLUMNS]


def summarize_frame(frame: pd.DataFrame) -> dict:
    """Summary statistics recomputed from a rounds table."""
    t = frame["t_system_seconds"].astype(float)
    dropouts = frame["dropouts"].map(lambda s: len([x for x in str(s).split(";") if x]))
    return {
        "policy": str(frame["policy"].iloc[0]) if len(frame) else "",
        "rounds": int(len(frame)),
        "t_system_mean": float(t.mean()),
        "t_system_median": float(t.median()),
        "t_system_p95": float(t.quantile(0.95)),
        "total_comm_bytes": float(frame["comm_bytes"].sum()),
        "total_lan_bytes": float(frame["lan_bytes"].sum()),
        "total_dropouts": int(dropouts.sum()),
        "total_violations": int(frame["memory_violations"].sum()),
        "final_active_samples": int(frame["active_samples"].iloc[-1]) if len(frame) else 0,
        "mean_peak_memory_bytes": float(frame["peak_memory_bytes"].mean()),
    }


def aggregate(frames: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    rows = [{"cell": cell, **summarize_frame(frame)} for cell, frame in sorted(frames.items())]
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


def cell_name(policy: str, seed: int) -> str:
    return f"{policy}_seed{seed}"
