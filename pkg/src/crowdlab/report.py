"""Curves and a JSON summary rebuilt from a run directory's persisted files."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import MissingLogs
from .stage1 import TrainLog


def _plot(xs, ys, xlabel: str, ylabel: str, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, lw=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def summarize_log(trace: TrainLog) -> dict:
    out = {"rows": len(trace.rows), "series": {}}
    for name in trace.columns[1:]:
        values = trace.column(name)
        out["series"][name] = {
            "final": values[-1] if values else None,
            "min": min(values) if values else None,
            "max": max(values) if values else None,
        }
    return out


def build_report(run_dir, plots: bool = True) -> dict:
    """One curve per logged series plus ``reports/summary.json``.

    Raises MissingLogs when ``run_dir/logs`` holds no CSV files.
    """
    run_dir = Path(run_dir)
    logs = sorted((run_dir / "logs").glob("*.csv")) if (run_dir / "logs").is_dir() else []
    if not logs:
        raise MissingLogs(f"no CSV logs under {run_dir / 'logs'}")
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    summary: dict = {"logs": {}, "curves": []}
    for path in logs:
        trace = TrainLog.read_csv(path)
        summary["logs"][path.stem] = summarize_log(trace)
        if not plots:
            continue
        xs = trace.column(trace.columns[0])
        for name in trace.columns[1:]:
            out = reports / f"{path.stem}_{name}.png"
            _plot(xs, trace.column(name), trace.columns[0], name, f"{path.stem}: {name}", out)
            summary["curves"].append(out.name)
    eval_path = reports / "eval.json"
    if eval_path.is_file():
        summary["eval"] = json.loads(eval_path.read_text(encoding="utf-8"))
    (reports / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
