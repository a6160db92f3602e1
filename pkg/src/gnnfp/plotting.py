"""Deterministic SVG rendering of benchmark traces.

Output bytes are a pure function of the input rows: the SVG id hash salt is
pinned, the date metadata is dropped, and fonts are emitted as paths. Two
renders of the same rows are byte-identical.
"""

from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_HASHSALT = "gnnfp-fixed-salt"

# stable series order and styling; anything unlisted gets defaults
_STYLE = {
    "fp": {"color": "#1f77b4", "marker": "o", "label": "FP"},
    "fastfp": {"color": "#2ca02c", "marker": "s", "label": "FastFP"},
    "gnnfp": {"color": "#d62728", "marker": "^", "label": "GNNFP"},
    "deepfp": {"color": "#9467bd", "marker": "d", "label": "DeepFP"},
}


class BadPlotInput(Exception):
    """Rows lack the columns a convergence plot needs."""


def read_bench_rows(text: str) -> list[dict]:
    """Parse benchmark CSV text; empty input means an empty plot, but rows
    missing the required columns are an error."""
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        if not {"algorithm", "iteration", "mean_wsr"} <= row.keys():
            raise BadPlotInput("rows need algorithm, iteration, mean_wsr")
    return rows


def _series(rows: list[dict]) -> tuple[dict[str, tuple[list, list]], str]:
    out: dict[str, tuple[list, list]] = {}
    unit = "nats"
    for row in rows:
        if row["mean_wsr"] in ("", None):
            continue  # constants without traces (published comparisons)
        xs, ys = out.setdefault(row["algorithm"], ([], []))
        xs.append(int(row["iteration"]))
        ys.append(float(row["mean_wsr"]))
        unit = row.get("unit") or unit
    return out, unit


def render_svg(rows: list[dict]) -> bytes:
    series, unit = _series(rows)
    with plt.rc_context({"svg.hashsalt": _HASHSALT, "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        try:
            for name in sorted(series):
                xs, ys = series[name]
                pairs = sorted(zip(xs, ys))
                style = _STYLE.get(name, {"label": name})
                ax.plot([p[0] for p in pairs], [p[1] for p in pairs],
                        markersize=4, linewidth=1.4, **style)
            ax.set_xlabel("iteration")
            ax.set_ylabel(f"weighted sum rate ({unit}/s/Hz)")
            ax.grid(True, alpha=0.3)
            if series:
                ax.legend(loc="lower right")
            buf = io.BytesIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buf.getvalue()
