"""CSV, JSON and SVG artefacts of experiment runs.

Per-frame CSVs use a fixed header, comma separators and ``repr`` floats, so
parsing a file back reproduces the in-memory values exactly. SVGs are
written with a fixed hash salt and no date stamp so reruns are
byte-identical; each plotted series carries the element id
``series-<name>``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .experiment import FRAME_COLUMNS, ScenarioResult

METADATA = {
    "throughput": "mean over post-burn-in frames of sum_j r_j, counted only on feasible frames",
    "utility": "mean of sum_j log r_j over feasible post-burn-in frames",
    "P_out": "fraction of post-burn-in frames where some MAC residual exceeds outage_margin times its rate demand",
    "e_x": "mean of |(p, lam) - x_hat(r, h)|^2 over post-burn-in frames",
    "e_y": "mean of |r - y*(h_l)|^2 over post-burn-in frames",
    "ci": "normal-approximation 95% interval across seeds",
    "csi": "metrics always use the true current CSI; latency only affects decisions",
}


def _fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    return repr(float(value))


def write_frames_csv(path: str | Path, frames: Mapping[str, Sequence[float]]) -> Path:
    """One row per frame with the columns of ``FRAME_COLUMNS``."""
    path = Path(path)
    n = len(frames.get("t_sec", ()))
    try:
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FRAME_COLUMNS)
            for k in range(n):
                row = []
                for col in FRAME_COLUMNS:
                    v = frames[col][k]
                    row.append(_fmt(bool(v)) if col == "feasible" else _fmt(v))
                writer.writerow(row)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_frames_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FRAME_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [[float(x) for x in row] for row in reader]
    data = np.asarray(rows, dtype=float).reshape(-1, len(FRAME_COLUMNS))
    return {col: data[:, j] for j, col in enumerate(FRAME_COLUMNS)}


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if not math.isfinite(value) else float(value)
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    return value


def write_json(path: str | Path, doc: Mapping[str, Any]) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n", "utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _new_figure() -> Figure:
    fig = Figure(figsize=(6.0, 4.0))
    fig.add_subplot(1, 1, 1)
    return fig


def _save_svg(fig: Figure, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "mtnetopt", "svg.fonttype": "none"}):
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def plot_series(
    path: str | Path,
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    logy: bool = False,
) -> Path:
    """Line plot with one ``series-<name>`` element per entry."""
    fig = _new_figure()
    ax = fig.axes[0]
    for name, (xs, ys) in series.items():
        xs = np.asarray(xs, float)
        marker = "o" if xs.size <= 50 else None
        (line,) = ax.plot(xs, np.asarray(ys, float), marker=marker, label=name)
        line.set_gid(f"series-{name}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy and series:
        ax.set_yscale("log")
    if series:
        ax.legend()
    fig.tight_layout()
    return _save_svg(fig, Path(path))


def grid_value(result: ScenarioResult, key: str | None) -> float:
    cfg = result.scenario.config
    if key is None:
        return cfg.channel.a_H
    name = key.split(".")[-1]
    for section in ("channel", "topology", "solver", "oracle", "experiment"):
        sec = getattr(cfg, section)
        if name in sec.__dataclass_fields__:
            return float(getattr(sec, name))
    raise KeyError(key)


def run_file_stem(result: ScenarioResult, seed: int, key: str | None) -> str:
    label = key.split(".")[-1] if key else "a_H"
    return f"frames_{result.scenario.scheme}_{label}{grid_value(result, key):g}_seed{seed}"


def emit_outputs(
    results: Iterable[ScenarioResult], out_dir: str | Path, grid_key: str | None = None
) -> list[Path]:
    """Write per-frame CSVs, ``summary.json`` and SVG plots into ``out_dir``.

    Returns the written paths in emission order.
    """
    results = list(results)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    written: list[Path] = []
    entries = []
    for res in results:
        runs = []
        for rec in res.records:
            csv_path = write_frames_csv(out / f"{run_file_stem(res, rec.seed, grid_key)}.csv", rec.frames)
            written.append(csv_path)
            runs.append({"seed": rec.seed, "summary": rec.summary, "events": rec.events,
                         "burn_in": rec.burn_in, "csv": csv_path.name})
        entries.append({
            "scheme": res.scenario.scheme,
            "grid_value": grid_value(res, grid_key),
            "a_H": res.scenario.a_H,
            "aggregate": res.aggregate,
            "runs": runs,
        })
    if not results:
        written.append(write_frames_csv(out / "frames.csv", {}))
    config = results[0].scenario.config.as_dict() if results else {}
    doc = {"grid_key": grid_key or "a_H", "config": config, "metadata": METADATA, "results": entries}
    written.append(write_json(out / "summary.json", doc))

    label = (grid_key or "a_H").split(".")[-1]
    schemes = list(dict.fromkeys(r.scenario.scheme for r in results))
    for metric in ("P_out", "throughput", "utility", "e_x"):
        series = {}
        for scheme in schemes:
            pts = sorted((grid_value(r, grid_key), r.aggregate[metric]["mean"])
                         for r in results if r.scenario.scheme == scheme)
            series[scheme] = ([p[0] for p in pts], [p[1] for p in pts])
        written.append(plot_series(out / f"{metric}_vs_{label}.svg", series, label, metric))

    # tracking-error snapshot of the first seed at the first grid value
    snapshot = {}
    for res in results:
        if res.scenario.scheme in snapshot or not res.records:
            continue
        rec = res.records[0]
        if np.all(np.isfinite(rec.frames["e_x_inst"])):
            snapshot[res.scenario.scheme] = (rec.frames["t_sec"], np.maximum(rec.frames["e_x_inst"], 1e-16))
    written.append(plot_series(out / "trajectory_e_x.svg", snapshot, "t [s]", "e_x instantaneous", logy=True))
    return written

