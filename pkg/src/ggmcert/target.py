"""Planar targets built from convex polygons and a Boolean composition.

A target lives in its own frame (z = 0 plane, meters).  Each polygon is a
list of vertices in counter-clockwise order; the composition expression
combines the per-polygon images with NOT / OR / AND / XOR.

Target files use a small XML dialect::

    <target name="tri">
      <point id="1" x="0" y="0"/>
      <point id="2" x="1" y="0"/>
      <point id="3" x="0" y="1"/>
      <polygon>1 2 3</polygon>
      <composition>P1</composition>
    </target>

``P<i>`` refers to the i-th ``<polygon>`` element (1-based, document order).
Operators in the composition: ``!`` (not), ``&`` (and), ``^`` (xor), ``|``
(or), in decreasing precedence, plus parentheses.
"""

from __future__ import annotations

import math
import warnings
import xml.sax
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, NamedTuple, Sequence, Union


class TargetSpecError(ValueError):
    """Raised for malformed target documents or invalid references."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TargetWarning(UserWarning):
    pass


class Vertex2(NamedTuple):
    x: float
    y: float


class Winding(str, Enum):
    CCW = "CCW"
    CW = "CW"
    DEGENERATE = "degenerate"


Polygon = tuple[Vertex2, ...]


# ---------------------------------------------------------------------------
# composition expression tree


@dataclass(frozen=True)
class Leaf:
    index: int  # 1-based polygon index


@dataclass(frozen=True)
class Not:
    child: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # "|", "&", "^"
    left: "Expr"
    right: "Expr"


Expr = Union[Leaf, Not, BinOp]

_PRECEDENCE = {"|": 1, "^": 2, "&": 3}
OP_NAMES = {"|": "OR", "&": "AND", "^": "XOR", "!": "NOT"}


def leaves(expr: Expr) -> list[int]:
    if isinstance(expr, Leaf):
        return [expr.index]
    if isinstance(expr, Not):
        return leaves(expr.child)
    return leaves(expr.left) + leaves(expr.right)


def parse_expression(text: str, line: int | None = None) -> Expr:
    """Parse an infix composition expression into a tree."""
    tokens = _tokenize(text, line)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def parse_binary(min_prec: int) -> Expr:
        lhs = parse_unary()
        while True:
            tok = peek()
            if tok is None or tok not in _PRECEDENCE or _PRECEDENCE[tok] < min_prec:
                return lhs
            op = take()
            rhs = parse_binary(_PRECEDENCE[op] + 1)
            lhs = BinOp(op, lhs, rhs)

    def parse_unary() -> Expr:
        tok = peek()
        if tok is None:
            raise TargetSpecError(f"unexpected end of composition {text!r}", line)
        if tok == "!":
            take()
            return Not(parse_unary())
        if tok == "(":
            take()
            inner = parse_binary(1)
            if peek() != ")":
                raise TargetSpecError(f"missing ')' in composition {text!r}", line)
            take()
            return inner
        if isinstance(tok, int):
            take()
            return Leaf(tok)
        raise TargetSpecError(f"unexpected token {tok!r} in composition", line)

    expr = parse_binary(1)
    if pos != len(tokens):
        raise TargetSpecError(f"trailing tokens in composition {text!r}", line)
    return expr


def _tokenize(text: str, line: int | None) -> list:
    tokens: list = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "|&^!~()":
            tokens.append("!" if ch == "~" else ch)
            i += 1
        elif ch in "Pp":
            j = i + 1
            while j < len(text) and text[j].isdigit():
                j += 1
            if j == i + 1:
                raise TargetSpecError(f"polygon reference without index at offset {i}", line)
            idx = int(text[i + 1 : j])
            if idx < 1:
                raise TargetSpecError(f"polygon indices start at P1, got P{idx}", line)
            tokens.append(idx)
            i = j
        else:
            raise TargetSpecError(f"invalid character {ch!r} in composition", line)
    if not tokens:
        raise TargetSpecError("empty composition", line)
    return tokens


def format_expression(expr: Expr, parent_prec: int = 0) -> str:
    """Canonical infix form with the minimum parentheses needed."""
    if isinstance(expr, Leaf):
        return f"P{expr.index}"
    if isinstance(expr, Not):
        inner = format_expression(expr.child, 4)
        return "!" + inner
    prec = _PRECEDENCE[expr.op]
    # left-associative: right operand needs parentheses at equal precedence
    s = f"{format_expression(expr.left, prec)} {expr.op} {format_expression(expr.right, prec + 1)}"
    return f"({s})" if prec < parent_prec else s


# ---------------------------------------------------------------------------
# polygons


def signed_area(poly: Sequence[Sequence[float]]) -> float:
    n = len(poly)
    s = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def winding_orientation(poly: Sequence[Sequence[float]]) -> Winding:
    if len(poly) < 3:
        raise ValueError("a polygon needs at least 3 vertices")
    a = signed_area(poly)
    if a > 0:
        return Winding.CCW
    if a < 0:
        return Winding.CW
    return Winding.DEGENERATE


def convexity_check(poly: Sequence[Sequence[float]]) -> bool:
    """True iff every pair of consecutive edges turns with the same strict sign."""
    n = len(poly)
    if n < 3:
        raise ValueError("a polygon needs at least 3 vertices")
    sign = 0
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cx, cy = poly[(i + 2) % n]
        cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx)
        if cross == 0:
            return False
        s = 1 if cross > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    # a star polygon can turn consistently yet wind more than once
    total = 0.0
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cx, cy = poly[(i + 2) % n]
        a1 = math.atan2(by - ay, bx - ax)
        a2 = math.atan2(cy - by, cx - bx)
        d = a2 - a1
        while d <= -math.pi:
            d += 2 * math.pi
        while d > math.pi:
            d -= 2 * math.pi
        total += d
    return abs(abs(total) - 2 * math.pi) < 1e-6


# ---------------------------------------------------------------------------
# target model


@dataclass(frozen=True)
class TargetModel:
    name: str
    polygons: tuple[Polygon, ...]
    composition: Expr
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def size(self) -> int:
        return len(self.polygons)

    @property
    def vertex_count(self) -> int:
        return sum(len(p) for p in self.polygons)

    def vertex_array(self):
        """All vertices stacked as an (V, 2) float array plus polygon offsets."""
        import numpy as np

        verts = np.array([v for p in self.polygons for v in p], dtype=np.float64)
        offsets = np.zeros(len(self.polygons) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(p) for p in self.polygons])
        return verts, offsets


def make_target(
    name: str,
    polygons: Iterable[Iterable[Sequence[float]]],
    composition: str | Expr | None = None,
) -> TargetModel:
    polys = tuple(tuple(Vertex2(float(x), float(y)) for x, y in p) for p in polygons)
    if not polys:
        raise TargetSpecError("target has no polygons")
    if composition is None:
        composition = " | ".join(f"P{i + 1}" for i in range(len(polys)))
    expr = parse_expression(composition) if isinstance(composition, str) else composition
    for idx in leaves(expr):
        if not 1 <= idx <= len(polys):
            raise TargetSpecError(f"composition references P{idx} but only {len(polys)} polygons exist")
    return TargetModel(name, polys, expr)


@dataclass
class ValidationReport:
    failures: list[tuple[int, str]] = field(default_factory=list)
    warnings: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "failures": [{"polygon": i, "reason": r} for i, r in self.failures],
            "warnings": [{"polygon": i, "reason": r} for i, r in self.warnings],
        }


def validate_target(t: TargetModel) -> ValidationReport:
    report = ValidationReport()
    if not t.polygons:
        report.failures.append((0, "no polygons"))
    for i, poly in enumerate(t.polygons, start=1):
        if len(poly) < 3:
            report.failures.append((i, "fewer than 3 vertices"))
            continue
        if len(set(poly)) != len(poly):
            report.failures.append((i, "repeated vertex"))
        w = winding_orientation(poly)
        if w is Winding.CW:
            report.failures.append((i, "clockwise winding"))
        elif w is Winding.DEGENERATE:
            report.failures.append((i, "degenerate (zero area)"))
        if w is not Winding.DEGENERATE and not convexity_check(poly):
            report.failures.append((i, "not strictly convex"))
        if not all(math.isfinite(c) for v in poly for c in v):
            report.failures.append((i, "non-finite coordinate"))
    used = leaves(t.composition)
    for idx in used:
        if not 1 <= idx <= len(t.polygons):
            report.failures.append((idx, f"composition references missing polygon P{idx}"))
    for i in range(1, len(t.polygons) + 1):
        if i not in used:
            report.warnings.append((i, "polygon not referenced by composition"))
    return report


# ---------------------------------------------------------------------------
# XML dialect


class _Handler(xml.sax.ContentHandler):
    def __init__(self):
        super().__init__()
        self.locator = None
        self.name = None
        self.points: dict[str, tuple[Vertex2, int]] = {}
        self.polygons: list[tuple[list[str], int]] = []
        self.composition: tuple[str, int] | None = None
        self._text: list[str] = []
        self._current: str | None = None
        self._line = 0

    def setDocumentLocator(self, locator):
        self.locator = locator

    def _lineno(self) -> int:
        return self.locator.getLineNumber() if self.locator else 0

    def startElement(self, name, attrs):
        line = self._lineno()
        if name == "target":
            self.name = attrs.get("name", "target")
        elif name == "point":
            try:
                pid = attrs["id"]
                x = float(attrs["x"])
                y = float(attrs["y"])
            except KeyError as exc:
                raise TargetSpecError(f"point is missing attribute {exc.args[0]!r}", line) from None
            except ValueError:
                raise TargetSpecError("point coordinate is not a number", line) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TargetSpecError("point coordinate is not finite", line)
            if pid in self.points:
                raise TargetSpecError(f"duplicate point id {pid!r}", line)
            self.points[pid] = (Vertex2(x, y), line)
        elif name in ("polygon", "composition"):
            self._current = name
            self._text = []
            self._line = line
        else:
            raise TargetSpecError(f"unknown element <{name}>", line)

    def characters(self, content):
        if self._current is not None:
            self._text.append(content)

    def endElement(self, name):
        if name == "polygon":
            self.polygons.append(("".join(self._text).replace(",", " ").split(), self._line))
        elif name == "composition":
            if self.composition is not None:
                raise TargetSpecError("more than one <composition>", self._line)
            self.composition = ("".join(self._text).strip(), self._line)
        if name in ("polygon", "composition"):
            self._current = None


def parse_target_spec(text: str) -> TargetModel:
    """Parse a target document.  Clockwise polygons are reversed with a warning."""
    handler = _Handler()
    try:
        xml.sax.parseString(text.encode("utf-8"), handler)
    except xml.sax.SAXParseException as exc:
        raise TargetSpecError(exc.getMessage(), exc.getLineNumber()) from None
    if not handler.polygons:
        raise TargetSpecError("target has no polygons")
    notes: list[str] = []
    polys: list[Polygon] = []
    for i, (ids, line) in enumerate(handler.polygons, start=1):
        verts = []
        for pid in ids:
            if pid not in handler.points:
                raise TargetSpecError(f"polygon P{i} references unknown point {pid!r}", line)
            verts.append(handler.points[pid][0])
        if len(verts) < 3:
            raise TargetSpecError(f"polygon P{i} has fewer than 3 vertices", line)
        if winding_orientation(verts) is Winding.CW:
            verts.reverse()
            msg = f"polygon P{i} was clockwise; reversed to counter-clockwise"
            notes.append(msg)
            warnings.warn(msg, TargetWarning, stacklevel=2)
        polys.append(tuple(verts))
    if handler.composition is None:
        comp_text, comp_line = " | ".join(f"P{i}" for i in range(1, len(polys) + 1)), None
    else:
        comp_text, comp_line = handler.composition
    expr = parse_expression(comp_text, comp_line)
    for idx in leaves(expr):
        if not 1 <= idx <= len(polys):
            raise TargetSpecError(
                f"composition references P{idx} but only {len(polys)} polygons exist", comp_line
            )
    return TargetModel(handler.name or "target", tuple(polys), expr, tuple(notes))


def _fmt(v: float) -> str:
    s = f"{v:.9g}"
    return "0" if s == "-0" else s


def serialize_target(t: TargetModel) -> str:
    """Canonical document: shared points deduplicated, ids in first-use order."""
    ids: dict[Vertex2, int] = {}
    for poly in t.polygons:
        for v in poly:
            key = Vertex2(float(_fmt(v.x)), float(_fmt(v.y)))
            if key not in ids:
                ids[key] = len(ids) + 1
    lines = [f'<target name="{_xml_escape(t.name)}">']
    for v, pid in sorted(ids.items(), key=lambda kv: kv[1]):
        lines.append(f'  <point id="{pid}" x="{_fmt(v.x)}" y="{_fmt(v.y)}"/>')
    for poly in t.polygons:
        refs = " ".join(str(ids[Vertex2(float(_fmt(v.x)), float(_fmt(v.y)))]) for v in poly)
        lines.append(f"  <polygon>{refs}</polygon>")
    comp = format_expression(t.composition).replace("&", "&amp;")
    lines.append(f"  <composition>{comp}</composition>")
    lines.append("</target>")
    return "\n".join(lines) + "\n"


def _xml_escape(s: str) -> str:
    return s.replace("&", "&amp;").replace('"', "&quot;").replace("<", "&lt;")


SHIPPED_TARGETS = ("stop_sign", "runway", "slow_vehicle")


def load_target(name_or_path: str) -> TargetModel:
    """Load a shipped target by name, or any target file by path."""
    key = name_or_path.replace("-", "_")
    if key in SHIPPED_TARGETS:
        text = resources.files("ggmcert.targets").joinpath(f"{key}.xml").read_text("utf-8")
    else:
        with open(name_or_path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_target_spec(text)
