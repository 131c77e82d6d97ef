"""Four-lane timeline export: one lane per queue, rectangles at
(start, duration), colored by instruction class.

Color conventions: activation loads light blue, weight loads black,
convolutions purple, pools green, element-wise and data movement yellow,
saves a lighter purple; red is reserved for unit initialization, which
this instruction set does not emit.
"""

import json

from .machine import OP_TYPES

COLOR_HEX = {
    "load-activation": "#7fb8e6",
    "load-weight": "#1a1a1a",
    "conv": "#7030a0",
    "conv-init": "#d03030",
    "pool": "#2e9e4f",
    "eltwise": "#e6c229",
    "save": "#b28fd0",
}

_LANE_H = 28
_LANE_GAP = 10
_LEFT = 70
_WIDTH = 1200


def emit_timeline(trace, fmt="svg"):
    """Render a Trace as an SVG document or a JSON payload (all event
    fields, for external tooling)."""
    if fmt == "json":
        return json.dumps(trace.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt != "svg":
        raise ValueError(f"unknown timeline format {fmt!r}")

    span = max(trace.makespan, 1)
    scale = _WIDTH / span
    height = len(OP_TYPES) * (_LANE_H + _LANE_GAP) + _LANE_GAP + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{_LEFT + _WIDTH + 20}" height="{height}" '
        f'viewBox="0 0 {_LEFT + _WIDTH + 20} {height}">',
        '<style>text{font-family:monospace;font-size:12px}</style>',
    ]
    lane_y = {}
    for i, op in enumerate(OP_TYPES):
        y = _LANE_GAP + i * (_LANE_H + _LANE_GAP)
        lane_y[op] = y
        out.append(f'<text x="4" y="{y + _LANE_H * 0.7:.1f}">{op}</text>')
        out.append(f'<line x1="{_LEFT}" y1="{y + _LANE_H}" '
                   f'x2="{_LEFT + _WIDTH}" y2="{y + _LANE_H}" '
                   f'stroke="#cccccc"/>')
    for e in trace.events:
        x = _LEFT + e.start * scale
        w = max(e.duration * scale, 0.5)
        y = lane_y[e.queue]
        color = COLOR_HEX.get(e.color, "#888888")
        out.append(
            f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{_LANE_H}" '
            f'fill="{color}"><title>#{e.index} {e.queue}/{e.sub} '
            f'issue={e.issue} start={e.start} dur={e.duration}</title>'
            f'</rect>')
    y = height - 8
    out.append(f'<text x="{_LEFT}" y="{y}">0</text>')
    out.append(f'<text x="{_LEFT + _WIDTH - 80}" y="{y}">'
               f'{trace.makespan} cycles</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
