"""Deterministic SVG plots: trajectories, distance box plots and ROC curves."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
TRAJECTORY_LABELS = ("alpha (deg)", "beta (deg)", "gamma (deg)", "dx (mm)", "dy (mm)", "dz (mm)")


def _num(x: float) -> str:
    return f"{x:.2f}"


class _Panel:
    """Maps data coordinates into a pixel rectangle."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = xlim if xlim[1] > xlim[0] else (xlim[0] - 0.5, xlim[0] + 0.5)
        self.ylim = ylim if ylim[1] > ylim[0] else (ylim[0] - 0.5, ylim[0] + 0.5)

    def px(self, x):
        return self.x0 + (np.asarray(x, float) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w

    def py(self, y):
        return self.y0 + self.h - (np.asarray(y, float) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h

    def frame(self, title: str, xlabel: str = "", ylabel: str = "") -> list[str]:
        out = [f'<rect x="{_num(self.x0)}" y="{_num(self.y0)}" width="{_num(self.w)}" '
               f'height="{_num(self.h)}" fill="none" stroke="#444"/>',
               f'<text x="{_num(self.x0 + self.w / 2)}" y="{_num(self.y0 - 6)}" '
               f'text-anchor="middle" font-size="12">{escape(title)}</text>']
        for v, anchor, (x, y) in ((self.ylim[0], "end", (self.x0 - 4, self.y0 + self.h)),
                                  (self.ylim[1], "end", (self.x0 - 4, self.y0 + 10))):
            out.append(f'<text x="{_num(x)}" y="{_num(y)}" text-anchor="{anchor}" font-size="9">{v:.3g}</text>')
        for v, x in ((self.xlim[0], self.x0), (self.xlim[1], self.x0 + self.w)):
            out.append(f'<text x="{_num(x)}" y="{_num(self.y0 + self.h + 12)}" text-anchor="middle" '
                       f'font-size="9">{v:.3g}</text>')
        if xlabel:
            out.append(f'<text x="{_num(self.x0 + self.w / 2)}" y="{_num(self.y0 + self.h + 24)}" '
                       f'text-anchor="middle" font-size="10">{escape(xlabel)}</text>')
        if ylabel:
            out.append(f'<text x="{_num(self.x0 - 30)}" y="{_num(self.y0 + self.h / 2)}" '
                       f'text-anchor="middle" font-size="10">{escape(ylabel)}</text>')
        return out

    def polyline(self, x, y, color: str, label: str = "", dash: str = "") -> str:
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(self.px(x), self.py(y)))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline class="series" data-label="{escape(label)}" points="{pts}" fill="none" '
                f'stroke="{color}" stroke-width="1"{extra}/>')


def _document(width, height, body: list[str]) -> str:
    return "\n".join([f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                      f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
                      f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>", ""])


def _legend(x, y, labels, colors) -> list[str]:
    out = []
    for i, (lab, col) in enumerate(zip(labels, colors)):
        yy = y + 14 * i
        out.append(f'<line x1="{_num(x)}" y1="{_num(yy)}" x2="{_num(x + 18)}" y2="{_num(yy)}" stroke="{col}"/>')
        out.append(f'<text x="{_num(x + 22)}" y="{_num(yy + 4)}" font-size="10">{escape(lab)}</text>')
    return out


def _limits(arrays):
    vals = np.concatenate([np.asarray(a, float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    return (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)


def trajectory_svg(series: dict, title: str = "Motion parameters") -> str:
    """Six panels, one per parameter; ``series`` maps a label to an
    ``(T, 6)`` array in degrees/mm. A series labelled ``truth`` is dashed."""
    body = [f'<text x="20" y="20" font-size="14">{escape(title)}</text>']
    labels = list(series)
    colors = {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(labels)}
    for k in range(6):
        col, row = k % 3, k // 3
        ys = [np.asarray(series[lab])[:, k] for lab in labels]
        t_max = max(len(y) for y in ys) - 1
        panel = _Panel(70 + col * 290, 50 + row * 230, 240, 170, (0.0, float(max(t_max, 1))), _limits(ys))
        body += panel.frame(TRAJECTORY_LABELS[k], "t (slice)")
        for lab, y in zip(labels, ys):
            body.append(panel.polyline(np.arange(len(y)), y, colors[lab], lab, "4,2" if lab == "truth" else ""))
    body += _legend(70, 520, labels, [colors[lab] for lab in labels])
    return _document(940, 540 + 14 * len(labels), body)


def boxplot_stats(values) -> dict:
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {"q1": float(q1), "median": float(med), "q3": float(q3), "mean": float(v.mean()),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max())}


def boxplot_svg(groups: dict, title: str = "Average voxel distance", ylabel: str = "D_t (mm)") -> str:
    stats = {lab: boxplot_stats(v) for lab, v in groups.items()}
    hi = max(s["whisker_high"] for s in stats.values())
    panel = _Panel(70, 40, 110 * max(len(groups), 1), 300, (0.0, float(len(groups))), (0.0, hi * 1.05 or 1.0))
    body = panel.frame(title, "", ylabel)
    for i, (lab, s) in enumerate(stats.items()):
        cx = float(panel.px(i + 0.5))
        y = {k: float(panel.py(v)) for k, v in s.items()}
        body += [
            f'<g class="box" data-label="{escape(lab)}" data-median="{s["median"]:.6g}" data-mean="{s["mean"]:.6g}">',
            f'<line x1="{_num(cx)}" y1="{_num(y["whisker_low"])}" x2="{_num(cx)}" y2="{_num(y["whisker_high"])}" stroke="#444"/>',
            f'<rect x="{_num(cx - 25)}" y="{_num(y["q3"])}" width="50" height="{_num(y["q1"] - y["q3"])}" '
            f'fill="{PALETTE[i % len(PALETTE)]}" fill-opacity="0.4" stroke="#444"/>',
            f'<line x1="{_num(cx - 25)}" y1="{_num(y["median"])}" x2="{_num(cx + 25)}" y2="{_num(y["median"])}" stroke="#000"/>',
            f'<text x="{_num(cx)}" y="{_num(panel.y0 + panel.h + 14)}" text-anchor="middle" font-size="10">{escape(lab)}</text>',
            "</g>",
        ]
    return _document(int(panel.w + 100), 380, body)


def roc_svg(curves: dict, title: str = "ROC") -> str:
    """``curves`` maps a label to ``(fpr, tpr, auc)``."""
    panel = _Panel(60, 40, 300, 300, (0.0, 1.0), (0.0, 1.0))
    body = panel.frame(title, "false positive rate", "TPR")
    body.append(panel.polyline([0, 1], [0, 1], "#999", "chance", "2,2"))
    labels = []
    for i, (lab, (fpr, tpr, auc)) in enumerate(curves.items()):
        body.append(panel.polyline(fpr, tpr, PALETTE[i % len(PALETTE)], lab))
        labels.append(f"{lab} (AUC {auc:.3f})")
    body += _legend(380, 60, labels, [PALETTE[i % len(PALETTE)] for i in range(len(labels))])
    return _document(560, 390, body)
