"""Tabular and SVG phase-diagram output.

The SVG is assembled from strings with fixed number formatting so that
identical inputs give byte-identical files.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .hull import ConvexHullResult, PhaseEntry, energy_above_hull, formation_energy_per_atom

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 640, 520
MARGIN = 70


def _g(x: float) -> str:
    return f"{x:.10g}"


def _c(x: float) -> str:
    return f"{x:.2f}"


def hull_rows(hull: ConvexHullResult, entries: Sequence[PhaseEntry]) -> list[dict]:
    rows = []
    known = {e.id for e in entries}
    for e in [*entries, *(s for s in hull.synthetic if s.id not in known)]:
        ea = energy_above_hull(e, hull)
        rows.append({
            "id": e.id,
            "formula": e.composition.reduced_formula,
            "fractions": e.composition.fractions(hull.elements),
            "e_form": formation_energy_per_atom(e.energy_per_atom * e.composition.natoms,
                                                e.composition, hull.refs),
            "e_above": ea,
            "on_hull": ea <= hull.tolerance,
        })
    rows.sort(key=lambda r: (tuple(r["fractions"][1:]), r["e_form"], r["id"]))
    return rows


def write_hull_tsv(hull: ConvexHullResult, entries: Sequence[PhaseEntry], path) -> Path:
    path = Path(path)
    header = ["id", "formula", *[f"x_{el}" for el in hull.elements], "e_form_eV_per_atom",
              "e_above_hull_eV_per_atom", "on_hull"]
    lines = ["\t".join(header)]
    for r in hull_rows(hull, entries):
        # snap round-off noise to an exact zero so the table is stable
        ea = r["e_above"] if abs(r["e_above"]) > 1e-12 else 0.0
        lines.append("\t".join([
            r["id"], r["formula"], *[_g(v) for v in r["fractions"]],
            _g(r["e_form"] + 0.0), _g(ea + 0.0), "true" if r["on_hull"] else "false",
        ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def _svg_open(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]


def _nice_step(span: float) -> float:
    raw = span / 5.0
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def binary_svg(hull: ConvexHullResult, entries: Sequence[PhaseEntry]) -> str:
    a, b = hull.elements
    rows = hull_rows(hull, entries)
    ef = [r["e_form"] for r in rows] + [0.0]
    lo, hi = min(ef), max(ef)
    pad = 0.05 * (hi - lo) if hi > lo else 0.1
    lo, hi = lo - pad, hi + pad
    x0, x1, y0, y1 = MARGIN, WIDTH - MARGIN / 2, HEIGHT - MARGIN, MARGIN / 2

    def px(x: float) -> float:
        return x0 + x * (x1 - x0)

    def py(e: float) -> float:
        return y0 + (e - lo) / (hi - lo) * (y1 - y0)

    out = _svg_open(f"{a}-{b} convex hull")
    out.append(f'<rect class="frame" x="{_c(x0)}" y="{_c(y1)}" width="{_c(x1 - x0)}" '
               f'height="{_c(y0 - y1)}" fill="none" stroke="black"/>')
    step = _nice_step(hi - lo)
    tick = math.ceil(lo / step) * step
    while tick <= hi + 1e-12:
        out.append(f'<line class="tick" x1="{_c(x0 - 5)}" y1="{_c(py(tick))}" x2="{_c(x0)}" '
                   f'y2="{_c(py(tick))}" stroke="black"/>')
        out.append(f'<text x="{_c(x0 - 8)}" y="{_c(py(tick) + 4)}" text-anchor="end">{tick + 0.0:.3g}</text>')
        tick += step
    out.append(f'<line class="zero" x1="{_c(x0)}" y1="{_c(py(0))}" x2="{_c(x1)}" y2="{_c(py(0))}" '
               f'stroke="#999" stroke-dasharray="4 3"/>')
    for fac in hull.facets:
        p, q = (hull.compositions[i].fractions(hull.elements)[1] for i in fac)
        ep, eq = (hull.formation[i] for i in fac)
        out.append(f'<line class="tie-line" x1="{_c(px(p))}" y1="{_c(py(ep))}" x2="{_c(px(q))}" '
                   f'y2="{_c(py(eq))}" stroke="#1f4e9c" stroke-width="2"/>')
    vertices = set(hull.vertices)
    for r in rows:
        x, e = r["fractions"][1], r["e_form"]
        if r["id"] in vertices:
            out.append(f'<circle class="vertex" cx="{_c(px(x))}" cy="{_c(py(e))}" r="5" fill="#1f4e9c">'
                       f'<title>{escape(r["id"])} {escape(r["formula"])}</title></circle>')
        else:
            out.append(f'<circle class="entry" cx="{_c(px(x))}" cy="{_c(py(e))}" r="3.5" fill="none" '
                       f'stroke="#c0392b"><title>{escape(r["id"])} {escape(r["formula"])} '
                       f'+{r["e_above"]:.3f} eV/atom</title></circle>')
    out.append(f'<text x="{_c(x0)}" y="{_c(y0 + 20)}" text-anchor="middle">{escape(a)}</text>')
    out.append(f'<text x="{_c(x1)}" y="{_c(y0 + 20)}" text-anchor="middle">{escape(b)}</text>')
    out.append(f'<text x="{_c((x0 + x1) / 2)}" y="{_c(y0 + 40)}" text-anchor="middle">x({escape(b)})</text>')
    out.append(f'<text x="18" y="{_c((y0 + y1) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 18 {_c((y0 + y1) / 2)})">formation energy (eV/atom)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def ternary_svg(hull: ConvexHullResult, entries: Sequence[PhaseEntry]) -> str:
    """Gibbs triangle: first element at bottom left, second bottom right, third on top."""
    els = hull.elements
    side = WIDTH - 2 * MARGIN
    corners = [
        (MARGIN, HEIGHT - MARGIN),
        (MARGIN + side, HEIGHT - MARGIN),
        (MARGIN + side / 2, HEIGHT - MARGIN - side * math.sqrt(3) / 2),
    ]

    def pos(fr) -> tuple[float, float]:
        return (sum(f * c[0] for f, c in zip(fr, corners)),
                sum(f * c[1] for f, c in zip(fr, corners)))

    rows = hull_rows(hull, entries)
    out = _svg_open("-".join(els) + " convex hull")
    pts = " ".join(f"{_c(x)},{_c(y)}" for x, y in corners)
    out.append(f'<polygon class="frame" points="{pts}" fill="none" stroke="black"/>')
    edges = set()
    for fac in hull.facets:
        for i, j in ((0, 1), (1, 2), (0, 2)):
            edges.add(tuple(sorted((fac[i], fac[j]))))
    for i, j in sorted(edges):
        (xa, ya), (xb, yb) = (pos(hull.compositions[k].fractions(els)) for k in (i, j))
        out.append(f'<line class="tie-line" x1="{_c(xa)}" y1="{_c(ya)}" x2="{_c(xb)}" y2="{_c(yb)}" '
                   f'stroke="#1f4e9c" stroke-width="1.5"/>')
    vertices = set(hull.vertices)
    for r in rows:
        x, y = pos(r["fractions"])
        if r["id"] in vertices:
            out.append(f'<circle class="vertex" cx="{_c(x)}" cy="{_c(y)}" r="5" fill="#1f4e9c">'
                       f'<title>{escape(r["id"])} {escape(r["formula"])} '
                       f'{r["e_form"]:.3f} eV/atom</title></circle>')
        else:
            out.append(f'<circle class="entry" cx="{_c(x)}" cy="{_c(y)}" r="3.5" fill="none" '
                       f'stroke="#c0392b"><title>{escape(r["id"])} {escape(r["formula"])} '
                       f'+{r["e_above"]:.3f} eV/atom</title></circle>')
    offsets = [(-10, 18), (10, 18), (0, -10)]
    anchors = ["end", "start", "middle"]
    for el, (cx, cy), (dx, dy), anchor in zip(els, corners, offsets, anchors):
        out.append(f'<text x="{_c(cx + dx)}" y="{_c(cy + dy)}" text-anchor="{anchor}" '
                   f'font-size="16">{escape(el)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_phase_diagram(hull: ConvexHullResult, entries: Sequence[PhaseEntry], out_dir) -> list[Path]:
    """Write ``hull.tsv`` and, for binary/ternary systems, ``phase_diagram.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_hull_tsv(hull, entries, out_dir / "hull.tsv")]
    n = hull.dimension
    if n == 2:
        svg = binary_svg(hull, entries)
    elif n == 3:
        svg = ternary_svg(hull, entries)
    else:
        logger.warning("%d-element system: writing hull.tsv only, no phase-diagram plot", n)
        return written
    path = out_dir / "phase_diagram.svg"
    path.write_text(svg, encoding="utf-8", newline="\n")
    written.append(path)
    return written
