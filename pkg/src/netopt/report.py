"""Plot-ready summaries from run directories."""

from __future__ import annotations

import csv
from fractions import Fraction
from pathlib import Path

from .cluster import read_metrics
from .fabric import ring_reference


class ReportError(FileNotFoundError):
    pass


def _load(run: Path) -> list[dict]:
    path = Path(run) / "metrics.csv"
    if not path.exists():
        raise ReportError(f"{path}: no metrics.csv (did the run finish?)")
    return read_metrics(path)


def loss_curves(a: list[dict], b: list[dict]) -> list[dict]:
    rows = []
    for ra, rb in zip(a, b):
        la, lb = float(ra["loss"]), float(rb["loss"])
        rows.append({"round": int(ra["round"]), "loss_a": repr(la), "loss_b": repr(lb),
                     "abs_dev": repr(abs(la - lb))})
    return rows


def traffic_table(rows: list[dict], num_workers: int) -> list[dict]:
    out = []
    for row in rows:
        if not row.get("push_elems_per_worker"):
            continue
        s = int(row["model_elems"])
        measured = Fraction(row["push_elems_per_worker"])
        ring = ring_reference(num_workers, s)
        out.append({
            "round": int(row["round"]),
            "measured_elems": str(measured),
            "ring_reference_elems": str(ring),
            "ratio": "" if ring == 0 else str(measured / ring),
            "ratio_float": "" if ring == 0 else repr(float(measured / ring)),
        })
    return out


def _workers(run: Path) -> int:
    for line in (Path(run) / "config.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "run.workers":
            return int(value)
    raise ReportError(f"{run}: config.txt lacks run.workers")


def _write(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def make_report(run: Path, reference: Path | None, out: Path) -> dict:
    """Write loss_curve.csv, traffic.csv (and overlap.csv) under ``out``; return a summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _load(run)
    summary: dict = {"rounds": len(rows)}
    traffic = traffic_table(rows, _workers(run))
    _write(out / "traffic.csv", traffic)
    if traffic and traffic[-1]["ratio"]:
        summary["traffic_ratio"] = traffic[-1]["ratio"]
    if reference is not None:
        ref = _load(reference)
        curves = loss_curves(rows, ref)
        _write(out / "loss_curve.csv", curves)
        summary["max_loss_dev"] = max((float(c["abs_dev"]) for c in curves), default=0.0)
        if rows and ref and rows[0].get("bwd_ticks") and ref[0].get("bwd_ticks"):
            overlap = [{"round": int(a["round"]), "bwd_ticks": a["bwd_ticks"],
                        "reference_bwd_ticks": b["bwd_ticks"],
                        "ratio": repr(float(a["bwd_ticks"]) / float(b["bwd_ticks"]))}
                       for a, b in zip(rows, ref)]
            _write(out / "overlap.csv", overlap)
            summary["mean_overlap_ratio"] = sum(float(o["ratio"]) for o in overlap) / len(overlap)
    return summary
