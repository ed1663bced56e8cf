"""Dependency-free SVG emission for the report bar chart and case-study plot.

Hand-rolled on purpose: the artifact needs two deterministic, well-formed
plots, not a plotting stack. Coordinates are rounded to 2 decimals so output
bytes are stable across platforms.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377")

_W, _H = 640, 360
_ML, _MR, _MT, _MB = 60, 20, 40, 60  # margins


def _svg_open(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.2f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]


def _axes(y_min: float, y_max: float, y_ticks: int = 5) -> list[str]:
    parts = [
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" '
        'stroke="black"/>',
    ]
    for i in range(y_ticks + 1):
        frac = i / y_ticks
        y = _H - _MB - frac * (_H - _MT - _MB)
        val = y_min + frac * (y_max - y_min)
        parts.append(
            f'<line x1="{_ML - 4}" y1="{y:.2f}" x2="{_ML}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{_ML - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{val:.2f}</text>'
        )
    return parts


def _legend(labels: list[str], colors: list[str]) -> list[str]:
    parts = []
    x = _ML + 10
    y = _MT - 8
    for label, color in zip(labels, colors):
        parts.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(
            f'<text x="{x + 14}" y="{y}" font-family="sans-serif" '
            f'font-size="11">{escape(label)}</text>'
        )
        x += 14 + 8 * len(label) + 24
    return parts


def grouped_bar_chart(
    path,
    title: str,
    group_names: list[str],
    series: list[tuple[str, list[float | None]]],
) -> None:
    """Bars for several models across metric groups; None values get a dash.

    ``series`` maps each model name to one value per group, all in [0, 1].
    """
    parts = _svg_open(title)
    parts += _axes(0.0, 1.0)
    n_groups = len(group_names)
    n_series = max(len(series), 1)
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB
    group_w = plot_w / max(n_groups, 1)
    bar_w = min(28.0, group_w * 0.8 / n_series)

    for gi, gname in enumerate(group_names):
        x0 = _ML + gi * group_w + group_w / 2
        total_w = bar_w * n_series
        for si, (sname, values) in enumerate(series):
            v = values[gi]
            x = x0 - total_w / 2 + si * bar_w
            color = PALETTE[si % len(PALETTE)]
            if v is None:
                parts.append(
                    f'<text x="{x + bar_w / 2:.2f}" y="{_H - _MB - 6:.2f}" '
                    f'text-anchor="middle" font-family="sans-serif" '
                    f'font-size="11" fill="{color}">&#8212;</text>'
                )
                continue
            h = max(0.0, min(1.0, v)) * plot_h
            parts.append(
                f'<rect x="{x:.2f}" y="{_H - _MB - h:.2f}" width="{bar_w:.2f}" '
                f'height="{h:.2f}" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{x0:.2f}" y="{_H - _MB + 18:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{escape(gname)}</text>'
        )

    parts += _legend([s[0] for s in series],
                     [PALETTE[i % len(PALETTE)] for i in range(len(series))])
    parts.append("</svg>")
    _write(path, parts)


def line_chart(
    path,
    title: str,
    x_values: list[int],
    series: list[tuple[str, list[float]]],
    y_label: str,
    x_label: str = "day",
) -> None:
    """Simple multi-series line plot with linear axes."""
    flat = [v for _, values in series for v in values]
    y_max = max(flat + [1.0])
    y_min = 0.0
    x_min, x_max = min(x_values), max(x_values)
    span_x = max(x_max - x_min, 1)
    plot_w = _W - _ML - _MR
    plot_h = _H - _MT - _MB

    def px(x: float) -> float:
        return _ML + (x - x_min) / span_x * plot_w

    def py(y: float) -> float:
        return _H - _MB - (y - y_min) / (y_max - y_min) * plot_h

    parts = _svg_open(title)
    parts += _axes(y_min, y_max)
    for si, (name, values) in enumerate(series):
        color = PALETTE[si % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(v):.2f}" for x, v in zip(x_values, values))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
    step = max(1, len(x_values) // 8)
    for x in x_values[::step]:
        parts.append(
            f'<text x="{px(x):.2f}" y="{_H - _MB + 16:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{x}</text>'
        )
    parts.append(
        f'<text x="{_W / 2:.2f}" y="{_H - 14:.2f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{escape(x_label)}</text>'
    )
    parts.append(
        f'<text x="16" y="{_H / 2:.2f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {_H / 2:.2f})">{escape(y_label)}</text>'
    )
    parts += _legend([s[0] for s in series],
                     [PALETTE[i % len(PALETTE)] for i in range(len(series))])
    parts.append("</svg>")
    _write(path, parts)


def _write(path, parts: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
