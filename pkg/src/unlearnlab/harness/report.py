"""Report assembly (serial reducer over cells) and table rendering."""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path

import numpy as np

from .. import __version__
from .config import ExperimentConfig

__all__ = ["METRIC_COLUMNS", "GAP_COLUMNS", "assemble_rows", "write_report", "render_report",
           "ReportWarning"]

METRIC_COLUMNS = ("UA", "RA", "TA", "MIA", "JSD", "RTE", "IDI", "IDI_all_layers", "ID", "probe")
# columns rendered as |value - Retrain's value|; the rest are shown as-is
GAP_COLUMNS = ("UA", "RA", "TA", "MIA", "probe")
TABLE_COLUMNS = ("UA", "RA", "TA", "MIA", "JSD", "probe", "IDI", "RTE")


class ReportWarning(UserWarning):
    """A metric column is missing from the results."""


def _num(v) -> float | None:
    if v is None:
        return None
    v = float(v)
    return None if math.isnan(v) else v


def _row(cell: dict) -> dict:
    m, i = cell.get("metrics", {}), cell.get("idi", {})
    row = {"model": cell["model"], "method": cell["method"], "seed": cell["seed"],
           "checkpoint": cell["checkpoint"], "RTE": _num(cell.get("rte"))}
    for key in ("UA", "RA", "TA", "MIA", "JSD", "probe"):
        row[key] = _num(m.get(key))
    for key in ("IDI", "IDI_all_layers", "ID"):
        row[key] = _num(i.get(key))
    row["IDI_degenerate"] = i.get("degenerate")
    row["MIA_degenerate"] = m.get("MIA_degenerate")
    return row


def _aggregate(rows: list[dict], seeds: list[int]) -> dict:
    """Mean and sample std (ddof 1; 0 for a single seed) over exactly ``seeds``."""
    by_seed = {r["seed"]: r for r in rows}
    if sorted(by_seed) != sorted(seeds):
        raise ValueError(f"{rows[0]['model']}: rows cover seeds {sorted(by_seed)}, "
                         f"expected {sorted(seeds)}")
    out = {"model": rows[0]["model"], "method": rows[0]["method"], "n_seeds": len(seeds),
           "mean": {}, "std": {}}
    for key in METRIC_COLUMNS:
        vals = [by_seed[s][key] for s in seeds]
        if any(v is None for v in vals):
            out["mean"][key] = out["std"][key] = None
            continue
        a = np.asarray(vals, dtype=np.float64)
        out["mean"][key] = float(a.mean())
        out["std"][key] = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return out


def assemble_rows(cfg: ExperimentConfig, ws) -> tuple[list[dict], list[dict]]:
    from .runner import BASELINES
    rows, aggregates = [], []
    for label in [*BASELINES, *cfg.method_labels()]:
        cells = []
        for s in cfg.seeds:
            cell = ws.read_cell(label, s)
            if cell is None:
                raise FileNotFoundError(f"missing results for {label} seed {s}; "
                                        "run the earlier stages first")
            if not (ws.root / cell["checkpoint"]).exists():
                raise FileNotFoundError(f"{label} seed {s}: checkpoint {cell['checkpoint']} "
                                        "is missing")
            cells.append(_row(cell))
        rows.extend(cells)
        aggregates.append(_aggregate(cells, cfg.seeds))
    return rows, aggregates


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(cfg: ExperimentConfig, ws) -> tuple[Path, Path]:
    """Write ``report.json`` and ``report.csv`` plus the rendered table."""
    rows, aggregates = assemble_rows(cfg, ws)
    provenance = {"config_digest": cfg.digest(), "code_version": __version__,
                  "seeds": cfg.seeds, "name": cfg.name,
                  "split_mode": cfg.split["mode"], "idi_layers": cfg.metrics["idi_layers"]}
    js = ws.root / "report.json"
    js.write_text(json.dumps({"provenance": provenance, "rows": rows, "aggregate": aggregates},
                             indent=1, sort_keys=True))
    header = ["model", "method", "seed", *METRIC_COLUMNS, "IDI_degenerate", "MIA_degenerate",
              "checkpoint"]
    cs = ws.root / "report.csv"
    with cs.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r["model"], r["method"], r["seed"], *[_fmt(r[k]) for k in METRIC_COLUMNS],
                        r["IDI_degenerate"], r["MIA_degenerate"], r["checkpoint"]])
        for a in aggregates:
            for stat in ("mean", "std"):
                w.writerow([a["model"], a["method"], stat,
                            *[_fmt(a[stat][k]) for k in METRIC_COLUMNS], "", "", ""])
    render_report(ws.root)
    return cs, js


def _cell_text(mean, std, bold: bool) -> str:
    if mean is None:
        return "-"
    text = f"{mean:.3f}" if std is None else f"{mean:.3f}±{std:.3f}"
    return f"**{text}**" if bold else text


def render_report(results_dir: str | Path) -> str:
    """Comparison table (gap to Retrain, best bolded) plus per-(model, layer) MI series.

    Writes ``report.md`` and ``mi_curve_series.csv`` next to ``report.json`` and
    returns the table text. Missing metric columns produce a warning and a
    partial table.
    """
    root = Path(results_dir)
    report = json.loads((root / "report.json").read_text())
    aggs = {a["model"]: a for a in report["aggregate"]}
    if "Retrain" not in aggs:
        raise ValueError("report has no Retrain baseline")
    ref = aggs["Retrain"]["mean"]
    columns = []
    for col in TABLE_COLUMNS:
        if all(a["mean"].get(col) is None for a in aggs.values()):
            warnings.warn(f"metric column {col} is missing; rendering without it", ReportWarning,
                          stacklevel=2)
        else:
            columns.append(col)

    def shown(model: str, col: str):
        mean, std = aggs[model]["mean"].get(col), aggs[model]["std"].get(col)
        if mean is None:
            return None, None
        if col in GAP_COLUMNS:
            r = ref.get(col)
            return (None, None) if r is None else (abs(mean - r), std)
        return mean, std

    def order(model: str):
        v = aggs[model]["mean"].get("IDI")
        return (math.inf if v is None else abs(v), model != "Retrain", model)

    models = sorted(aggs, key=order)
    methods = [m for m in models if m not in ("Original", "Retrain")]
    best = {}
    for col in columns:
        vals = [(abs(shown(m, col)[0]), m) for m in methods if shown(m, col)[0] is not None]
        if vals:
            best[col] = min(vals)[1]
    head = ["Model", *[f"|Δ{c}|" if c in GAP_COLUMNS else c for c in columns]]
    body = [[m, *[_cell_text(*shown(m, c), best.get(c) == m) for c in columns]] for m in models]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    line = lambda r: "| " + " | ".join(t.ljust(w) for t, w in zip(r, widths)) + " |"
    table = "\n".join([line(head), "|" + "|".join("-" * (w + 2) for w in widths) + "|",
                       *[line(r) for r in body]]) + "\n"
    (root / "report.md").write_text(table)
    _write_series(root, report)
    return table


def _write_series(root: Path, report: dict) -> None:
    """Seed-averaged MI per (model, layer), read from the per-cell curve files."""
    series: dict[tuple[str, int], list[float]] = {}
    for row in report["rows"]:
        path = root / "mi_curves" / f"{row['model']}_s{row['seed']}.csv"
        if not path.exists():
            continue
        with path.open() as fh:
            for rec in csv.DictReader(fh):
                series.setdefault((row["model"], int(rec["layer"])), []).append(
                    float(rec["estimate_nats"]))
    with (root / "mi_curve_series.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "layer", "mi_mean_nats", "mi_std_nats", "n_seeds"])
        for (model, layer), vals in series.items():
            a = np.asarray(vals)
            w.writerow([model, layer, repr(float(a.mean())),
                        repr(float(a.std(ddof=1)) if a.size > 1 else 0.0), a.size])
