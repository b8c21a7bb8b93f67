"""Grounding markup, (0, 1000) coordinate normalisation and task prompts.

Wire format for a grounded span::

    <ref>TEXT</ref><box>(x1,y1),(x2,y2)</box>     rectangle
    <ref>TEXT</ref><box>(x1,y1),(x2,y2),...</box> polygon, three or more vertices
    <ref>TEXT</ref><box>(x,y)</box>               point

Text always precedes its location. No whitespace is emitted; the parser
tolerates spaces inside and between coordinate tuples.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass
from typing import Optional, Union

SCALE = 1000
RESERVED_TAGS = ("<ref>", "</ref>", "<box>", "</box>")


class GroundingError(ValueError):
    """Invalid coordinates, reserved text or malformed markup."""

    def __init__(self, msg: str, offset: Optional[int] = None):
        self.reason = msg
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte {offset})")


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def _check_norm(*vals: int) -> None:
    for v in vals:
        if not isinstance(v, int) or not 0 <= v <= SCALE:
            raise GroundingError(f"normalized coordinate {v!r} outside [0, {SCALE}]")


@dataclass(frozen=True)
class Point:
    x: int
    y: int

    def __post_init__(self):
        _check_norm(self.x, self.y)

    @property
    def points(self) -> tuple["Point", ...]:
        return (self,)


@dataclass(frozen=True)
class NormalizedBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        _check_norm(self.x1, self.y1, self.x2, self.y2)
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GroundingError(f"box corners out of order: {self}")

    @classmethod
    def canonical(cls, x1: int, y1: int, x2: int, y2: int) -> "NormalizedBox":
        return cls(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))

    @property
    def points(self) -> tuple[Point, Point]:
        return (Point(self.x1, self.y1), Point(self.x2, self.y2))

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[Point, ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise GroundingError("polygon needs at least three vertices")

    @property
    def points(self) -> tuple[Point, ...]:
        return self.vertices

    def bounding_box(self) -> NormalizedBox:
        xs = [p.x for p in self.vertices]
        ys = [p.y for p in self.vertices]
        return NormalizedBox(min(xs), min(ys), max(xs), max(ys))


Location = Union[NormalizedBox, Polygon, Point]


@dataclass(frozen=True)
class GroundedSpan:
    text: str
    location: Optional[Location] = None

    @property
    def kind(self) -> str:
        return {NormalizedBox: "rect", Polygon: "polygon", Point: "point", type(None): "none"}[
            type(self.location)
        ]


# -- coordinates -----------------------------------------------------------


def normalize_coord(x: float, y: float, w_r: float, h_r: float,
                    divide_x_by_height: bool = False) -> tuple[int, int]:
    """Map pixel (x, y) in a W_r x H_r image onto the integer 0..1000 grid.

    ``divide_x_by_height`` scales x by H_r instead of W_r. That variant of the
    formula is wrong for non-square images and exists only for comparison runs.
    """
    if w_r <= 0 or h_r <= 0:
        raise GroundingError(f"image dims must be positive, got {w_r}x{h_r}")
    if not (0 <= x <= w_r and 0 <= y <= h_r):
        raise GroundingError(f"pixel ({x}, {y}) outside {w_r}x{h_r} image")
    nx = round_half_away(x * SCALE / (h_r if divide_x_by_height else w_r))
    ny = round_half_away(y * SCALE / h_r)
    return min(max(nx, 0), SCALE), min(max(ny, 0), SCALE)


def denormalize_coord(nx: int, ny: int, w_r: float, h_r: float) -> tuple[int, int]:
    if not (0 <= nx <= SCALE and 0 <= ny <= SCALE):
        raise GroundingError(f"normalized ({nx}, {ny}) outside [0, {SCALE}]")
    return round_half_away(nx * w_r / SCALE), round_half_away(ny * h_r / SCALE)


def box_to_point(b: NormalizedBox) -> Point:
    """Centre point of a box, halves rounded away from zero."""
    return Point(round_half_away((b.x1 + b.x2) / 2), round_half_away((b.y1 + b.y2) / 2))


def to_representation(loc: Location, kind: str) -> Location:
    """Convert a location to ``rect``, ``polygon`` (4-corner) or ``point`` form."""
    if isinstance(loc, Polygon):
        box = loc.bounding_box()
    elif isinstance(loc, Point):
        box = NormalizedBox(loc.x, loc.y, loc.x, loc.y)
    else:
        box = loc
    if kind == "rect":
        return box
    if kind == "point":
        return loc if isinstance(loc, Point) else box_to_point(box)
    if kind == "polygon":
        if isinstance(loc, Polygon):
            return loc
        return Polygon((Point(box.x1, box.y1), Point(box.x2, box.y1),
                        Point(box.x2, box.y2), Point(box.x1, box.y2)))
    raise ValueError(f"unknown representation {kind!r}")


# -- markup ----------------------------------------------------------------


def serialize_location(loc: Location) -> str:
    return "<box>" + ",".join(f"({p.x},{p.y})" for p in loc.points) + "</box>"


def serialize_grounded(span: GroundedSpan) -> str:
    for tag in RESERVED_TAGS:
        if tag in span.text:
            raise GroundingError(f"span text contains reserved tag {tag}")
    out = f"<ref>{span.text}</ref>"
    if span.location is not None:
        out += serialize_location(span.location)
    return out


_TUPLE = re.compile(r"\s*\(\s*([0-9]+)\s*,\s*([0-9]+)\s*\)\s*")


def parse_location(body: str, offset: int = 0) -> Location:
    """Parse the inside of a ``<box>...</box>`` element."""
    pts: list[Point] = []
    pos = 0
    while True:
        m = _TUPLE.match(body, pos)
        if m is None:
            raise GroundingError("malformed coordinate tuple", offset + pos)
        x, y = int(m.group(1)), int(m.group(2))
        if x > SCALE or y > SCALE:
            raise GroundingError(f"coordinate ({x},{y}) outside [0, {SCALE}]", offset + m.start(1))
        pts.append(Point(x, y))
        pos = m.end()
        if pos == len(body):
            break
        if body[pos] != ",":
            raise GroundingError("expected ',' between coordinate tuples", offset + pos)
        pos += 1
    if len(pts) == 1:
        return pts[0]
    if len(pts) == 2:
        a, b = pts
        if a.x > b.x or a.y > b.y:
            raise GroundingError("rectangle corners out of order", offset)
        return NormalizedBox(a.x, a.y, b.x, b.y)
    return Polygon(tuple(pts))


def _byte_offset(s: str, i: int) -> int:
    return len(s[:i].encode("utf-8"))


def parse_grounded(s: str) -> list[GroundedSpan]:
    """Extract every ``<ref>...</ref>`` (optionally followed by ``<box>...</box>``) in order.

    Error offsets are byte offsets into the UTF-8 encoding of ``s``.
    """
    spans: list[GroundedSpan] = []
    i = 0
    while True:
        start = s.find("<ref>", i)
        if start < 0:
            return spans
        text_start = start + len("<ref>")
        end = s.find("</ref>", text_start)
        if end < 0:
            raise GroundingError("unterminated <ref>", _byte_offset(s, start))
        text = s[text_start:end]
        i = end + len("</ref>")
        loc = None
        if s.startswith("<box>", i):
            body_start = i + len("<box>")
            body_end = s.find("</box>", body_start)
            if body_end < 0:
                raise GroundingError("unterminated <box>", _byte_offset(s, i))
            body = s[body_start:body_end]
            try:
                loc = parse_location(body)
            except GroundingError as exc:
                at = _byte_offset(s, body_start + (exc.offset or 0))
                raise GroundingError(exc.reason, at) from None
            i = body_end + len("</box>")
        spans.append(GroundedSpan(text, loc))


def strip_markup(s: str) -> str:
    """Plain text of a grounded string: box contents removed, ref tags to spaces."""
    s = re.sub(r"<box>.*?</box>", " ", s, flags=re.S)
    return s.replace("<ref>", " ").replace("</ref>", " ")


def span_to_json(span: GroundedSpan) -> str:
    coords = [] if span.location is None else [[p.x, p.y] for p in span.location.points]
    return json.dumps({"text": span.text, "kind": span.kind, "coords": coords}, ensure_ascii=False)


def span_from_json(line: str) -> GroundedSpan:
    rec = json.loads(line)
    kind = rec["kind"]
    pts = [Point(int(x), int(y)) for x, y in rec["coords"]]
    if kind == "none":
        loc = None
    elif kind == "point" and len(pts) == 1:
        loc = pts[0]
    elif kind == "rect" and len(pts) == 2:
        loc = NormalizedBox(pts[0].x, pts[0].y, pts[1].x, pts[1].y)
    elif kind == "polygon":
        loc = Polygon(tuple(pts))
    else:
        raise GroundingError(f"span record kind {kind!r} does not fit {len(pts)} coordinates")
    return GroundedSpan(rec["text"], loc)


# -- prompts ---------------------------------------------------------------


class PromptTask(enum.Enum):
    READ_ALL_TEXT = "read-all"
    TEXT_SPOTTING = "spotting"
    ORIGINAL_TASK = "original"
    POSITION_OF_TEXT = "position"
    TEXT_RECOGNITION = "recognition"
    VQA_GROUNDING = "vqa-grounding"


GROUNDING_SUFFIX = "Provide the location coordinates of the answer when answering the question."


def build_prompt(task: PromptTask, question: Optional[str] = None,
                 location: Optional[Location] = None) -> str:
    """Render the instruction for ``task``.

    ``question`` fills the question slot (and is the text for the
    position-of-text task); ``location`` is required for text recognition.
    """
    task = PromptTask(task)
    if task is PromptTask.READ_ALL_TEXT:
        return "Read all the text in the image."
    if task is PromptTask.TEXT_SPOTTING:
        return "OCR with grounding:"
    if task is PromptTask.TEXT_RECOGNITION:
        if location is None:
            raise ValueError("text recognition prompt needs a location")
        return f"<ref>This</ref>{serialize_location(location)} is"
    if question is None:
        raise ValueError(f"{task.value} prompt needs a question")
    if task is PromptTask.ORIGINAL_TASK:
        return f"{question}. Answer:"
    if task is PromptTask.POSITION_OF_TEXT:
        return serialize_grounded(GroundedSpan(question))
    return f"{question}. {GROUNDING_SUFFIX}"
