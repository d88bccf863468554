"""Parser and serializer for model-emitted cropping decisions.

Expected output shape::

    {"Decision": "REGION", "Tool": <tool_call>
    {"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [x1, y1, x2, y2]}}
    </tool_call>}

The tool call may also follow the decision object instead of sitting
inside it.  ``"FULL"`` decisions need no tool call.  Box coordinates are
rounded half-up to integer cells and clamped to the image; a box that is
still inverted after clamping is kept and flagged as malformed.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

from .env import Action, BBox, Decision
from .errors import (
    BadBBoxArity,
    MalformedJson,
    MissingToolCall,
    NoDecisionField,
    ParseError,
    UnknownDecisionValue,
)

TOOL_NAME = "image_zoom_in_tool"
_TOOL_CALL = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_DECISION = re.compile(r'"Decision"\s*:\s*"((?:[^"\\]|\\.)*)"', re.DOTALL)


@dataclass(frozen=True)
class ParsedDecision:
    action: Action
    label: str | None = None
    raw_box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not self.action.is_full and self.raw_box is None:
            raise ValueError("a REGION decision needs its raw box")

    @property
    def malformed(self) -> bool:
        return self.action.box is not None and self.action.box.malformed


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def snap_box(raw, image_w: int, image_h: int) -> BBox:
    """Round to cells, then clamp into [0, W] x [0, H]."""
    x1, y1, x2, y2 = (_round_half_up(v) for v in raw)
    cx = lambda v: min(max(v, 0), image_w)  # noqa: E731
    cy = lambda v: min(max(v, 0), image_h)  # noqa: E731
    return BBox(cx(x1), cy(y1), cx(x2), cy(y2))


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _loads(text: str):
    try:
        return json.loads(text)
    except (ValueError, RecursionError) as exc:
        raise MalformedJson(f"cannot decode JSON: {exc}") from None


def _tool_call_box(body: str) -> tuple[tuple[float, ...], str | None]:
    obj = _loads(body)
    if not isinstance(obj, dict) or obj.get("name") != TOOL_NAME:
        raise MissingToolCall(f"tool call is not a {TOOL_NAME} call")
    args = obj.get("arguments")
    if isinstance(args, str):
        # some models double-encode the arguments object
        args = _loads(args)
    if not isinstance(args, dict) or "bbox_2d" not in args:
        raise MissingToolCall("tool call has no bbox_2d argument")
    bbox = args["bbox_2d"]
    if not isinstance(bbox, list) or len(bbox) != 4 or not all(_is_number(v) for v in bbox):
        raise BadBBoxArity(f"bbox_2d must be 4 finite numbers, got {bbox!r}")
    label = args.get("label")
    if label is not None and not isinstance(label, str):
        label = None
    return tuple(float(v) for v in bbox), label


def parse(output, image_w: int, image_h: int) -> ParsedDecision:
    if isinstance(output, (bytes, bytearray)):
        output = output.decode("utf-8", errors="replace")
    text = str(output)
    blocks = [m.group(1) for m in _TOOL_CALL.finditer(text)]
    outer = _TOOL_CALL.sub("", text)
    m = _DECISION.search(outer)
    if m is None:
        raise NoDecisionField("no \"Decision\" field in output")
    value = _loads(f'"{m.group(1)}"')
    if value == Decision.FULL.value:
        return ParsedDecision(Action.full())
    if value != Decision.REGION.value:
        raise UnknownDecisionValue(f"decision must be FULL or REGION, got {value!r}")
    if not blocks:
        raise MissingToolCall("REGION decision without a <tool_call> block")
    first_error: ParseError | None = None
    for body in blocks:
        try:
            raw, label = _tool_call_box(body)
        except ParseError as exc:
            first_error = first_error or exc
            continue
        return ParsedDecision(Action.region(snap_box(raw, image_w, image_h)), label, raw)
    raise first_error


def _num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _dumps(obj) -> str:
    # keep tag delimiters out of string values
    return json.dumps(obj).replace("<", "\\u003c").replace(">", "\\u003e")


def serialize(d: ParsedDecision) -> str:
    if d.action.is_full:
        return '{"Decision": "FULL"}'
    box = ", ".join(_num(v) for v in d.raw_box)
    args = f'"bbox_2d": [{box}]'
    if d.label is not None:
        args += f', "label": {_dumps(d.label)}'
    call = f'{{"name": "{TOOL_NAME}", "arguments": {{{args}}}}}'
    return f'{{"Decision": "REGION", "Tool": <tool_call>\n{call}\n</tool_call>}}'


def parse_batch(rows: Iterable[dict]) -> Iterator[dict]:
    """Parse ``{"text", "width", "height"[, "id"]}`` rows; errors become data."""
    for n, row in enumerate(rows):
        out = {"id": row.get("id", n)}
        try:
            d = parse(row["text"], int(row["width"]), int(row["height"]))
        except ParseError as exc:
            out.update(decision=None, error=type(exc).__name__, message=str(exc))
        else:
            out.update(
                decision=d.action.decision.value,
                box=None if d.action.box is None else list(d.action.box),
                raw_box=None if d.raw_box is None else list(d.raw_box),
                label=d.label,
                malformed=d.malformed,
                error=None,
            )
        yield out
