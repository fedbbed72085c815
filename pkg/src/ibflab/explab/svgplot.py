"""Minimal self-contained SVG line plots (estimate with error bars vs time).

No plotting dependency: reports are small and a hand-rolled polyline with
error whiskers covers everything the lab emits.
"""

from __future__ import annotations

from pathlib import Path

W, H = 640, 400
MARGIN = 60


def _scale(vals, lo, hi, out_lo, out_hi):
    if hi <= lo:
        hi = lo + 1.0
    return [out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo) for v in vals]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def write_svg_lines(path, series, title="", xlabel="t", ylabel="value") -> None:
    """Write a line plot; series is a list of dicts with keys
    name, x, y and optionally se (error bars) and target (dashed rule)."""
    xs_all = [x for s in series for x in s["x"]]
    ys_all = []
    for s in series:
        se = s.get("se") or [0.0] * len(s["y"])
        ys_all.extend([y - e for y, e in zip(s["y"], se)])
        ys_all.extend([y + e for y, e in zip(s["y"], se)])
        if s.get("target") is not None:
            ys_all.append(s["target"])
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    pad = 0.05 * (y_hi - y_lo or 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{W - 20}" y2="{H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{MARGIN}" y2="30" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{xlabel}</text>',
        f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">{ylabel}</text>',
    ]
    # axis ticks
    for i in range(5):
        xv = x_lo + i * (x_hi - x_lo) / 4
        yv = y_lo + i * (y_hi - y_lo) / 4
        (px,) = _scale([xv], x_lo, x_hi, MARGIN, W - 20)
        (py,) = _scale([yv], y_lo, y_hi, H - MARGIN, 30)
        parts.append(
            f'<text x="{px:.1f}" y="{H - MARGIN + 16}" text-anchor="middle">{_fmt(xv)}</text>'
        )
        parts.append(
            f'<text x="{MARGIN - 6}" y="{py:.1f}" text-anchor="end" dominant-baseline="middle">{_fmt(yv)}</text>'
        )
    for idx, s in enumerate(series):
        color = colors[idx % len(colors)]
        px = _scale(s["x"], x_lo, x_hi, MARGIN, W - 20)
        py = _scale(s["y"], y_lo, y_hi, H - MARGIN, 30)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        se = s.get("se")
        if se:
            for a, y, e in zip(s["x"], s["y"], se):
                if e <= 0:
                    continue
                (cx,) = _scale([a], x_lo, x_hi, MARGIN, W - 20)
                (y1,) = _scale([y - e], y_lo, y_hi, H - MARGIN, 30)
                (y2,) = _scale([y + e], y_lo, y_hi, H - MARGIN, 30)
                parts.append(
                    f'<line x1="{cx:.1f}" y1="{y1:.1f}" x2="{cx:.1f}" y2="{y2:.1f}" '
                    f'stroke="{color}" stroke-width="1"/>'
                )
        if s.get("target") is not None:
            (ty,) = _scale([s["target"]], y_lo, y_hi, H - MARGIN, 30)
            parts.append(
                f'<line x1="{MARGIN}" y1="{ty:.1f}" x2="{W - 20}" y2="{ty:.1f}" '
                f'stroke="{color}" stroke-dasharray="6 4" stroke-width="1"/>'
            )
        parts.append(
            f'<text x="{W - 24}" y="{34 + 16 * idx}" text-anchor="end" fill="{color}">{s["name"]}</text>'
        )
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts))


def report_svg(report, path) -> None:
    """Plot the report rows grouped by label prefix."""
    groups: dict[str, dict] = {}
    for r in report.rows:
        g = groups.setdefault(r.label, {"name": r.label, "x": [], "y": [], "se": [], "target": r.target})
        g["x"].append(r.t)
        g["y"].append(r.estimate)
        g["se"].append(r.std_error)
    series = [g for g in groups.values() if g["x"]]
    if series:
        write_svg_lines(path, series, title=report.experiment)
