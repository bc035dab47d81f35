"""Run one configured scenario and write its outputs.

Output directory layout::

    metrics.csv | metrics.jsonl   one row per record, fixed columns
    manifest.jsonl                run identity: config hash, seed, versions, status
    config.json                   the normalised effective configuration
    <snapshots>                   tree/ensemble json, summaries

Nothing written depends on wall-clock time, so identical configs produce
identical files.
"""
from __future__ import annotations

import json
import logging
import platform
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from edgelearn import __version__
from edgelearn.config import ExperimentConfig
from edgelearn.metrics import MetricsWriter
from edgelearn.scenarios import REGISTRY, Sink

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    status: int
    out_dir: Path
    rows: int
    files: list[str] = field(default_factory=list)
    error: str | None = None


def versions() -> dict:
    return {"edgelearn": __version__, "numpy": np.__version__, "python": platform.python_version()}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Dispatch ``cfg.scenario``; returns status 0 on success, 1 on failure.

    On failure every record produced so far is already on disk and the
    manifest carries ``status: "failed"`` plus the error message.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = REGISTRY[cfg.scenario]
    sink = Sink()
    metrics_name = f"metrics.{cfg.format}"
    status, error, rows = 0, None, 0
    with open(out / metrics_name, "w", encoding="utf-8", newline="") as fh:
        writer = MetricsWriter(fh, sc.columns, cfg.format)
        try:
            for rec in sc.run(cfg, sink):
                writer.write(rec)
        except Exception as exc:  # report, keep partial output
            status, error = 1, f"{type(exc).__name__}: {exc}"
            log.error("scenario %s failed: %s", cfg.scenario, error)
            log.debug(traceback.format_exc())
        rows = writer.count
    (out / "config.json").write_text(cfg.dumps() + "\n", encoding="utf-8")
    files = [metrics_name, "config.json"]
    for name in sorted(sink.files):
        (out / name).write_text(sink.files[name], encoding="utf-8")
        files.append(name)
    manifest = {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "format": cfg.format,
        "rows": rows,
        "files": files,
        "versions": versions(),
        "status": "ok" if status == 0 else "failed",
    }
    if error is not None:
        manifest["error"] = error
    (out / "manifest.jsonl").write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(status, out, rows, files + ["manifest.jsonl"], error)
