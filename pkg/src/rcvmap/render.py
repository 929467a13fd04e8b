"""SVG rendering of vectorized maps in BEV."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .map_model import MapClass, VectorizedMap

# dividers yellow, boundaries green, pedestrian crossings blue
CLASS_COLORS = {
    MapClass.DIVIDER: "#f2c200",
    MapClass.BOUNDARY: "#1fa33a",
    MapClass.PED_CROSSING: "#1f5bd6",
}


class MapDocumentError(ValueError):
    pass


def read_map_document(path) -> VectorizedMap:
    """Parse a map document, reporting the line of any syntax or schema error."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapDocumentError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return VectorizedMap.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        line = _locate(text, exc)
        raise MapDocumentError(f"{path}:{line}: invalid map document ({type(exc).__name__}: {exc})") from exc


def _locate(text: str, exc: Exception) -> int:
    key = str(exc).strip("'\"")
    for i, line in enumerate(text.splitlines(), 1):
        if key and key in line:
            return i
    return 1


def _panel(vmap: VectorizedMap, x0: float, scale: float, title: str) -> list[str]:
    r = vmap.range
    w = (r.x_max - r.x_min) * scale
    h = (r.y_max - r.y_min) * scale

    def xy(p):
        return f"{x0 + (p[0] - r.x_min) * scale:.2f},{(r.y_max - p[1]) * scale + 20:.2f}"

    out = [
        f'<g class="panel" data-title="{escape(title)}">',
        f'<rect x="{x0:.2f}" y="20" width="{w:.2f}" height="{h:.2f}" fill="white" stroke="black" stroke-width="1"/>',
        f'<text x="{x0 + 4:.2f}" y="14" font-size="12" font-family="sans-serif">{escape(title)}</text>',
    ]
    for el in vmap.elements:
        color = CLASS_COLORS[el.class_id]
        pts = " ".join(xy(p) for p in el.points)
        cls = el.class_id.name.lower()
        if el.is_closed:
            out.append(
                f'<polygon class="{cls}" points="{pts}" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="2"/>'
            )
        else:
            out.append(f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
    out.append("</g>")
    return out


def render_svg(maps: Sequence[VectorizedMap], titles: Sequence[str] | None = None, scale: float = 6.0) -> str:
    """One panel per map, laid out left to right (e.g. ground truth, prediction)."""
    if not maps:
        raise ValueError("nothing to render")
    titles = list(titles or [m.scene_id or f"map {i}" for i, m in enumerate(maps)])
    gap = 20.0
    widths = [(m.range.x_max - m.range.x_min) * scale for m in maps]
    height = max((m.range.y_max - m.range.y_min) * scale for m in maps) + 30
    total_w = sum(widths) + gap * (len(maps) + 1)
    body = []
    x = gap
    for m, t, w in zip(maps, titles, widths):
        body += _panel(m, x, scale, t)
        x += w + gap
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0f}" height="{height:.0f}" '
            f'viewBox="0 0 {total_w:.2f} {height:.2f}">',
            *body,
            "</svg>",
            "",
        ]
    )
