"""Static SVG plots plus CSV of the same series."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("sweep", "strength", "routing")


def series_for(payload: Mapping, kind: str) -> tuple[list[str], list[list]]:
    """(header, rows) for a payload; raises if the payload does not match ``kind``."""
    if kind == "sweep":
        if "p_by_position" not in payload:
            raise ValueError("payload is not a position sweep")
        base = payload["baseline_p"]
        return (["position", "p_target", "baseline_p"],
                [[i, p, base] for i, p in enumerate(payload["p_by_position"])])
    if kind == "strength":
        if "points" not in payload or not payload["points"] or "p_target" not in payload["points"][0]:
            raise ValueError("payload is not a strength sweep")
        return (["strength", "p_target", "top_head", "top_head_delta", "total_shift"],
                [[p["strength"], p["p_target"], p["top_head"], p["top_head_delta"], p["total_shift"]]
                 for p in payload["points"]])
    if kind == "routing":
        rep = payload.get("full", payload)
        if "top10" not in rep:
            raise ValueError("payload is not a routing report")
        return (["head", "baseline", "steered", "delta"],
                [[f"L{h['layer']}:H{h['head']}", h["baseline"], h["steered"], h["delta"]]
                 for h in rep["top10"]])
    raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")


def render_plot(payload: Mapping, kind: str, svg_path, csv_path=None) -> tuple[Path, Path]:
    header, rows = series_for(payload, kind)
    svg_path = Path(svg_path)
    csv_path = Path(csv_path) if csv_path else svg_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

    with plt.rc_context({"svg.hashsalt": "cltprobe", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        if kind == "sweep":
            xs = [r[0] for r in rows]
            ax.plot(xs, [max(r[1], 1e-30) for r in rows], marker="o", label="steered")
            ax.plot(xs, [max(r[2], 1e-30) for r in rows], ls="--", label="baseline")
            site = payload.get("planning_site")
            if site is not None:
                ax.axvline(site, color="grey", lw=0.8)
            ax.set_yscale("log")
            ax.set_xlabel("injection position")
            ax.set_ylabel("P(target)")
        elif kind == "strength":
            xs = [r[0] for r in rows]
            ax.plot(xs, [r[1] for r in rows], marker="o", label="P(target)")
            ax.plot(xs, [r[4] for r in rows], marker="s", label="total shift")
            ax.set_xlabel("strength")
        else:
            names = [r[0] for r in rows]
            ax.barh(range(len(rows)), [r[3] for r in rows],
                    color=["tab:red" if r[3] < 0 else "tab:blue" for r in rows])
            ax.set_yticks(range(len(rows)), names)
            ax.invert_yaxis()
            ax.axvline(0, color="black", lw=0.8)
            ax.set_xlabel("attention change")
        if kind != "routing":
            ax.legend()
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return svg_path, csv_path
