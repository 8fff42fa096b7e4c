"""Stroke-format data model: ingestion, normalization, scoring, SVG rendering.

Sketches are sequences of pen moves. Two layouts are used:

* stroke-3: ``(dx, dy, p)`` where ``p = 1`` means the pen is lifted after
  this point. This is the compact on-disk form (one JSON record per line,
  ``{"label": ..., "drawing": [[dx, dy, p], ...]}``).
* stroke-5: ``(dx, dy, q1, q2, q3)`` with a one-hot pen-state: on paper,
  lifted, or end of drawing. Fixed-length training sequences pad with the
  end-of-drawing tuple ``(0, 0, 0, 0, 1)``.

Everything in this module is a pure function over immutable sketches and is
safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import IO, Iterable, NamedTuple, Sequence, Union

import numpy as np

from .errors import EmptyDatasetError, StrokeFormatError


class StrokePoint3(NamedTuple):
    dx: float
    dy: float
    p: int


class StrokePoint5(NamedTuple):
    dx: float
    dy: float
    q1: int
    q2: int
    q3: int


#: Start-of-sequence symbol: zero offsets, pen on paper.
START_TOKEN = StrokePoint5(0.0, 0.0, 1, 0, 0)

#: Padding / end-of-drawing tuple.
END_TOKEN = StrokePoint5(0.0, 0.0, 0, 0, 1)


@dataclass(frozen=True)
class Sketch:
    """An ordered stroke-5 sequence with an optional category label."""

    points: tuple[StrokePoint5, ...]
    label: str = ""

    def __len__(self) -> int:
        return len(self.points)

    def validate(self) -> "Sketch":
        """Check the sequence invariants, raising StrokeFormatError on violation."""
        ended = False
        for i, pt in enumerate(self.points):
            q = (pt.q1, pt.q2, pt.q3)
            if sorted(q) != [0, 0, 1]:
                raise StrokeFormatError(f"point {i}: pen-state {q} is not one-hot")
            if not (math.isfinite(pt.dx) and math.isfinite(pt.dy)):
                raise StrokeFormatError(f"point {i}: non-finite offset ({pt.dx}, {pt.dy})")
            if ended and pt != END_TOKEN:
                raise StrokeFormatError(
                    f"point {i}: non-padding point {tuple(pt)} after the end of drawing"
                )
            if pt.q3 == 1:
                ended = True
        return self

    def real_points(self) -> tuple[StrokePoint5, ...]:
        """Points before the first end-of-drawing token."""
        for i, pt in enumerate(self.points):
            if pt.q3 == 1:
                return self.points[:i]
        return self.points


@dataclass
class SketchDataset:
    """A collection of sketches in padded stroke-5 form.

    ``n_max`` is the length of the longest raw (stroke-3) sequence, so every
    padded sequence has length ``n_max + 1`` (the extra slot holds the end
    token). ``offset_scale`` records the divisor applied by
    :func:`normalize_offsets` so offsets can be mapped back to input units.
    """

    sketches: list[Sketch]
    n_max: int
    offset_scale: float = 1.0
    skipped_count: int = 0

    def __len__(self) -> int:
        return len(self.sketches)

    def __iter__(self):
        return iter(self.sketches)


def _parse_record(line: str) -> tuple[str, list[StrokePoint3]]:
    record = json.loads(line)
    if not isinstance(record, dict):
        raise StrokeFormatError("record is not an object")
    label = record.get("label")
    drawing = record.get("drawing")
    if not isinstance(label, str) or not isinstance(drawing, list) or not drawing:
        raise StrokeFormatError("record needs a string label and a non-empty drawing")
    points = []
    for triple in drawing:
        if not isinstance(triple, (list, tuple)) or len(triple) != 3:
            raise StrokeFormatError(f"bad triple {triple!r}")
        dx, dy, p = triple
        if p not in (0, 1):
            raise StrokeFormatError(f"pen flag {p!r} not in {{0, 1}}")
        dx, dy = float(dx), float(dy)
        if not (math.isfinite(dx) and math.isfinite(dy)):
            raise StrokeFormatError(f"non-finite offset ({dx}, {dy})")
        points.append(StrokePoint3(dx, dy, int(p)))
    return label, points


def parse_stroke3_lines(source: Union[IO, Iterable[Union[str, bytes]]]) -> SketchDataset:
    """Parse line-delimited stroke-3 records into a padded dataset.

    Malformed lines are skipped and counted in ``dataset.skipped_count``.
    Raises EmptyDatasetError when no valid record is found.
    """
    raw: list[tuple[str, list[StrokePoint3]]] = []
    skipped = 0
    for line in source:
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        line = line.strip()
        if not line:
            continue
        try:
            raw.append(_parse_record(line))
        except (StrokeFormatError, json.JSONDecodeError):
            skipped += 1
    if not raw:
        raise EmptyDatasetError("empty dataset: no valid stroke records")
    n_max = max(len(points) for _, points in raw)
    sketches = [
        Sketch(points=tuple(to_stroke5(points, n_max)), label=label) for label, points in raw
    ]
    return SketchDataset(sketches=sketches, n_max=n_max, skipped_count=skipped)


def offset_std(dataset: SketchDataset) -> float:
    """Population standard deviation of all real-point dx and dy values."""
    values = [
        v for sketch in dataset.sketches for pt in sketch.real_points() for v in (pt.dx, pt.dy)
    ]
    if not values:
        raise EmptyDatasetError("dataset has no real points")
    return float(np.std(np.asarray(values, dtype=np.float64)))


def normalize_offsets(dataset: SketchDataset) -> SketchDataset:
    """Divide every offset by the dataset-wide offset standard deviation.

    The divisor is stored in ``offset_scale`` (composed multiplicatively if
    the dataset was already scaled) so generation output can be inverted.
    """
    if not dataset.sketches:
        raise EmptyDatasetError("cannot normalize an empty dataset")
    scale = offset_std(dataset)
    if scale == 0.0:
        raise StrokeFormatError("offset standard deviation is zero; nothing to normalize by")
    sketches = [
        replace(
            sketch,
            points=tuple(
                StrokePoint5(pt.dx / scale, pt.dy / scale, pt.q1, pt.q2, pt.q3)
                for pt in sketch.points
            ),
        )
        for sketch in dataset.sketches
    ]
    return SketchDataset(
        sketches=sketches,
        n_max=dataset.n_max,
        offset_scale=dataset.offset_scale * scale,
        skipped_count=dataset.skipped_count,
    )


def to_stroke5(sketch3: Sequence[StrokePoint3], n_max: int) -> list[StrokePoint5]:
    """Expand a stroke-3 sequence to padded stroke-5 of length ``n_max + 1``."""
    if len(sketch3) > n_max:
        raise StrokeFormatError(f"sequence of length {len(sketch3)} exceeds n_max={n_max}")
    out = []
    for pt in sketch3:
        if pt.p not in (0, 1):
            raise StrokeFormatError(f"pen flag {pt.p!r} not in {{0, 1}}")
        out.append(StrokePoint5(float(pt.dx), float(pt.dy), 1 - pt.p, pt.p, 0))
    out.append(END_TOKEN)
    out.extend([END_TOKEN] * (n_max - len(sketch3)))
    return out


def from_stroke5(seq: Sequence[StrokePoint5]) -> list[StrokePoint3]:
    """Strip padding/end tokens and collapse one-hot pen-states to a p flag."""
    out = []
    for i, pt in enumerate(seq):
        q = (pt.q1, pt.q2, pt.q3)
        if sorted(q) != [0, 0, 1]:
            raise StrokeFormatError(f"point {i}: pen-state {q} is not one-hot")
        if pt.q3 == 1:
            break
        out.append(StrokePoint3(float(pt.dx), float(pt.dy), int(pt.q2)))
    return out


def pen_state_counts(sketch: Sketch) -> tuple[int, int]:
    """(on-paper count, lifted count) over real points only."""
    on = lift = 0
    for pt in sketch.real_points():
        if pt.q1 == 1:
            on += 1
        elif pt.q2 == 1:
            lift += 1
    return on, lift


def ske_score(sketch: Sketch) -> float:
    """Ratio of pen lifts to on-paper moves.

    A sketch with no on-paper point has no meaningful denominator; the raw
    lift count is returned so corpus averages stay finite, and callers can
    detect the case via :func:`is_degenerate_score`.
    """
    on, lift = pen_state_counts(sketch)
    if on == 0:
        return float(lift)
    return lift / on


def is_degenerate_score(sketch: Sketch) -> bool:
    """True when the sketch has no on-paper point (Ske-score denominator 0)."""
    on, _ = pen_state_counts(sketch)
    return on == 0


def sketch_polylines(sketch: Sketch) -> list[list[tuple[float, float]]]:
    """Cumulate offsets into absolute drawn polylines.

    The pen starts on the paper at the origin (the start token leaves it
    there); a segment into a point is drawn when the pen was down after the
    previous point, and every lifted point closes its polyline.
    """
    pos = (0.0, 0.0)
    current = [pos]
    pen_down = True
    polylines: list[list[tuple[float, float]]] = []
    for pt in sketch.real_points():
        pos = (pos[0] + pt.dx, pos[1] + pt.dy)
        if pen_down:
            current.append(pos)
        else:
            current = [pos]
        if pt.q2 == 1:
            if len(current) >= 2:
                polylines.append(current)
            pen_down = False
        else:
            pen_down = True
    if pen_down and len(current) >= 2:
        polylines.append(current)
    return polylines


def render_svg(sketch: Sketch, stroke_width: float = 2.0, canvas_size: float = 256.0) -> str:
    """Render a sketch as an SVG 1.1 document of polyline elements.

    The drawing's bounding box is uniformly scaled and centered into the
    square canvas, leaving a 5% margin on each side.
    """
    polylines = sketch_polylines(sketch)
    margin = 0.05 * canvas_size
    transformed = _fit_to_canvas(polylines, canvas_size, margin)
    lines = [svg_polyline(line, stroke_width) for line in transformed]
    header = (
        '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'viewBox="0 0 {canvas_size:g} {canvas_size:g}" '
        f'width="{canvas_size:g}" height="{canvas_size:g}">'
    )
    if not lines:
        return header + "</svg>\n"
    return header + "\n" + "\n".join(lines) + "\n</svg>\n"


def svg_polyline(points: list[tuple[float, float]], stroke_width: float, color: str = "black") -> str:
    coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in points)
    return (
        f'  <polyline points="{coords}" fill="none" stroke="{color}" '
        f'stroke-width="{stroke_width:g}" stroke-linecap="round" stroke-linejoin="round" />'
    )


def _fit_to_canvas(
    polylines: list[list[tuple[float, float]]], canvas_size: float, margin: float
) -> list[list[tuple[float, float]]]:
    if not polylines:
        return []
    xs = [x for line in polylines for x, _ in line]
    ys = [y for line in polylines for _, y in line]
    min_x, max_x = min(xs), max(xs)
    min_y, max_y = min(ys), max(ys)
    extent = max(max_x - min_x, max_y - min_y)
    avail = canvas_size - 2 * margin
    scale = avail / extent if extent > 0 else 1.0
    # Center each axis within the margin box.
    off_x = margin + (avail - (max_x - min_x) * scale) / 2 - min_x * scale
    off_y = margin + (avail - (max_y - min_y) * scale) / 2 - min_y * scale
    return [[(x * scale + off_x, y * scale + off_y) for x, y in line] for line in polylines]


def write_stroke3_lines(dataset: SketchDataset, stream: IO[str]) -> None:
    """Write a dataset back out as line-delimited stroke-3 records."""
    for sketch in dataset.sketches:
        triples = [[pt.dx, pt.dy, pt.p] for pt in from_stroke5(sketch.points)]
        stream.write(json.dumps({"label": sketch.label, "drawing": triples}) + "\n")
