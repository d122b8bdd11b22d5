"""Deterministic report files: delimited tables, JSON summaries, SVG heatmaps.

All floats are written with repr so every table round-trips to the exact
float64 computed; no timestamps or machine identifiers appear in any output.
SVGs are self-contained (inline styles, no external assets); the grid-search
argmax cell carries a star marker. nan cells render gray.
"""
from __future__ import annotations

import csv
import os
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from ._util import canonical_json, format_float
from .experiment import GainReport, InterpretReport, ScalingCurve
from .hte_metrics import QiniCurve, RateReport
from .simulation import SimReport

_NAN_FILL = "#b0b0b0"
# dark-blue -> teal -> yellow stops, interpolated linearly in RGB
_STOPS = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))


def _cell(v: object) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format_float(float(v))
    return str(v)


def write_table(path: str, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_json(path: str, obj: object) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def write_matrix_csv(path: str, scales: Sequence[int], matrix: np.ndarray) -> None:
    """Square scale-by-scale matrix with labeled first row and column."""
    header = ["scale"] + [str(s) for s in scales]
    rows = [[s] + list(np.asarray(matrix)[i]) for i, s in enumerate(scales)]
    write_table(path, header, rows)


def read_matrix_csv(path: str) -> tuple[tuple[int, ...], np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        scales = tuple(int(s) for s in header[1:])
        rows = list(reader)
    matrix = np.array([[float(v) for v in row[1:]] for row in rows], dtype=np.float64)
    return scales, matrix


def write_singles_csv(path: str, scales: Sequence[int], singles: np.ndarray) -> None:
    write_table(path, ["scale", "mean_ratio"], list(zip(scales, np.asarray(singles))))


def read_singles_csv(path: str) -> dict[int, float]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(r[0]): float(r[1]) for r in reader}


def gain_report_json(report: GainReport) -> dict:
    return {
        "scales": list(report.scales),
        "reduction": report.reduction,
        "displaced": report.displaced,
        "replicates": report.replicates,
        "best_multi": {
            "s1": report.best_multi[0],
            "s2": report.best_multi[1],
            "ratio": report.best_multi[2],
        },
        "best_single": {"s": report.best_single[0], "ratio": report.best_single[1]},
        "gain": report.gain,
        "se_gain": report.se_gain,
        "per_replicate_gain": list(report.per_replicate_gain),
    }


def write_gain_report(outdir: str, report: GainReport, prefix: str = "") -> list[str]:
    """heatmap/singles tables, gain summary, and the starred SVG; returns paths."""
    paths = {
        "heatmap": os.path.join(outdir, f"{prefix}heatmap.csv"),
        "singles": os.path.join(outdir, f"{prefix}singles.csv"),
        "gain": os.path.join(outdir, f"{prefix}gain.json"),
        "svg": os.path.join(outdir, f"{prefix}heatmap.svg"),
        "cells": os.path.join(outdir, f"{prefix}cell_replicates.csv"),
    }
    write_matrix_csv(paths["heatmap"], report.scales, report.heatmap)
    write_singles_csv(paths["singles"], report.scales, report.singles)
    write_json(paths["gain"], gain_report_json(report))
    rows = [
        ["pair", s1, s2, r, v]
        for (s1, s2), vals in sorted(report.cell_ratios.items())
        for r, v in enumerate(vals)
    ]
    rows += [
        ["single", s, "", r, v]
        for s, vals in sorted(report.single_ratios.items())
        for r, v in enumerate(vals)
    ]
    write_table(paths["cells"], ["kind", "s1", "s2", "replicate", "ratio"], rows)
    svg = render_heatmap_svg(
        report.scales,
        report.heatmap,
        star=(report.best_multi[0], report.best_multi[1]),
        title="mean RATE ratio",
    )
    with open(paths["svg"], "w", encoding="utf-8", newline="") as fh:
        fh.write(svg)
    return [paths[k] for k in ("heatmap", "singles", "gain", "cells", "svg")]


def _lerp_color(t: float) -> tuple[int, int, int]:
    t = min(max(t, 0.0), 1.0)
    pos = t * (len(_STOPS) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(_STOPS) - 1)
    frac = pos - lo
    return tuple(
        int(round(_STOPS[lo][c] + frac * (_STOPS[hi][c] - _STOPS[lo][c])))
        for c in range(3)
    )


def _color(v: float, vmin: float, vmax: float) -> str:
    if not np.isfinite(v):
        return _NAN_FILL
    t = 0.5 if vmax == vmin else (v - vmin) / (vmax - vmin)
    r, g, b = _lerp_color(t)
    return f"#{r:02x}{g:02x}{b:02x}"


def _text_color(fill: str) -> str:
    r, g, b = (int(fill[i:i + 2], 16) for i in (1, 3, 5))
    return "#000000" if 0.299 * r + 0.587 * g + 0.114 * b > 140 else "#ffffff"


def render_heatmap_svg(
    scales: Sequence[int],
    matrix: np.ndarray,
    star: tuple[int, int] | None = None,
    title: str = "",
) -> str:
    """Self-contained SVG of the mirrored scale grid.

    Cells whose (min,max) scale pair equals `star` carry a star marker
    (class="star" with data-s1/data-s2 attributes) for machine checking.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n = len(scales)
    cell = 64
    left, top, pad = 72, 56, 16
    width = left + n * cell + pad
    height = top + n * cell + pad + 8
    finite = matrix[np.isfinite(matrix)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 1.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>' if title else "",
    ]
    for j, s in enumerate(scales):
        x = left + j * cell + cell // 2
        out.append(f'<text x="{x}" y="{top - 8}" text-anchor="middle">{s}</text>')
    for i, s in enumerate(scales):
        y = top + i * cell + cell // 2 + 4
        out.append(f'<text x="{left - 8}" y="{y}" text-anchor="end">{s}</text>')
    for i, s1 in enumerate(scales):
        for j, s2 in enumerate(scales):
            v = float(matrix[i, j])
            fill = _color(v, vmin, vmax)
            x, y = left + j * cell, top + i * cell
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{fill}" stroke="#ffffff" stroke-width="1"/>'
            )
            label = "nan" if not np.isfinite(v) else f"{v:.3g}"
            out.append(
                f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" '
                f'text-anchor="middle" fill="{_text_color(fill)}">{label}</text>'
            )
            if star is not None and (min(s1, s2), max(s1, s2)) == (
                min(star), max(star),
            ):
                out.append(
                    f'<text class="star" data-s1="{star[0]}" data-s2="{star[1]}" '
                    f'x="{x + cell - 6}" y="{y + 14}" text-anchor="end" '
                    f'font-size="16" fill="{_text_color(fill)}">*</text>'
                )
    out.append("</svg>")
    return "\n".join(line for line in out if line) + "\n"


def write_scaling_report(outdir: str, curve: ScalingCurve) -> list[str]:
    curve_path = os.path.join(outdir, "scaling_curve.csv")
    subsets_path = os.path.join(outdir, "scaling_subsets.csv")
    write_table(
        curve_path,
        ["n_scales", "mean_ratio"],
        list(zip(curve.c_values, curve.mean_ratio)),
    )
    rows = [
        [c, "|".join(str(s) for s in subset), v]
        for c in curve.c_values
        for subset, v in curve.per_subset[c]
    ]
    write_table(subsets_path, ["n_scales", "scales", "mean_ratio"], rows)
    return [curve_path, subsets_path]


def write_qini_report(outdir: str, curve: QiniCurve, prefix: str = "") -> list[str]:
    path = os.path.join(outdir, f"{prefix}qini_curve.csv")
    net = np.asarray(curve.gain) - np.asarray(curve.baseline)
    write_table(
        path,
        ["spend", "gain", "baseline", "net_gain", "se"],
        list(zip(curve.spend, curve.gain, curve.baseline, net, curve.se)),
    )
    return [path]


def write_rate_json(path: str, report: RateReport) -> None:
    write_json(
        path,
        {
            "weighting": report.weighting,
            "point": report.point,
            "sd": report.sd,
            "ratio": report.ratio,
            "n_eval": report.n_eval,
            "n_boot": report.n_boot,
            "zero_variance": report.zero_variance,
        },
    )


def write_sim_report(outdir: str, reports: Mapping[str, Mapping[object, SimReport]]) -> list[str]:
    """One row per (design, mode): mean/SD of cv R^2 across replicates."""
    path = os.path.join(outdir, "sim_results.csv")
    rows = []
    for design_name in sorted(reports):
        for mode in sorted(reports[design_name], key=str):
            rep = reports[design_name][mode]
            rows.append(
                [
                    design_name,
                    rep.mode,
                    "+".join(p.value for p in rep.perturbations) or "none",
                    rep.r2_mean,
                    rep.r2_sd,
                    rep.degenerate,
                    rep.n_replicates,
                ]
            )
    write_table(
        path,
        ["design", "mode", "perturbations", "r2_mean", "r2_sd", "degenerate", "replicates"],
        rows,
    )
    return [path]


def write_interpret_report(outdir: str, report: InterpretReport) -> list[str]:
    csv_path = os.path.join(outdir, "interpret_matrix.csv")
    svg_path = os.path.join(outdir, "interpret_matrix.svg")
    write_matrix_csv(csv_path, report.scales, report.matrix)
    svg = render_heatmap_svg(
        report.scales, report.matrix, star=None, title="fraction of top-10 from smaller scale"
    )
    with open(svg_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(svg)
    return [csv_path, svg_path]
