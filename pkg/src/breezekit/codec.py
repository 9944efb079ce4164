"""Conversation rendering and assistant-output parsing for the header-block chat prompt format.

The layout follows Llama 3 chat markup. Every turn is rendered as::

    <|start_header_id|>{role}<|end_header_id|>\\n\\n{content}<|eot_id|>

On top of that the format adds image and bounding-box placeholders, a
``Customized Functions:`` block in the system turn, a leading decision token
on assistant turns whenever functions are available, and parallel calls /
responses (JSON arrays after ``<|python_tag|>`` and in the ``ipython`` role).
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence, Union

START_IMG = "<|start_img|>"
IMG = "<|img|>"
END_IMG = "<|end_img|>"
START_BBOX = "<|start_bbox|>"
END_BBOX = "<|end_bbox|>"
USE_TOOL = "<|use_tool|>"
ANSWER = "<|answer|>"
PYTHON_TAG = "<|python_tag|>"

START_HEADER = "<|start_header_id|>"
END_HEADER = "<|end_header_id|>"
EOT = "<|eot_id|>"

FUNCTIONS_MARKER = "Customized Functions:"

PLACEHOLDER_TOKENS = (START_IMG, IMG, END_IMG, START_BBOX, END_BBOX)
RESERVED_TOKENS = PLACEHOLDER_TOKENS + (
    USE_TOOL,
    ANSWER,
    PYTHON_TAG,
    START_HEADER,
    END_HEADER,
    EOT,
)

BBOX_SCALE = 1000

_IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_BBOX_BODY = re.compile(r"\s*\[?\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]?\s*")

Value = Union[None, bool, int, float, str, list, dict]


class Role(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    IPYTHON = "ipython"


class Decision(str, enum.Enum):
    ANSWER = "answer"
    USE_TOOL = "use_tool"

    @property
    def token(self) -> str:
        return ANSWER if self is Decision.ANSWER else USE_TOOL


# ---------------------------------------------------------------------------
# Errors


class CodecError(ValueError):
    """Base class for prompt-format errors."""


class InvalidConversation(CodecError):
    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid conversation: {lines}")


class ConversationFormatError(CodecError):
    """The conversation exchange JSON does not have the expected shape."""


class MissingDecisionToken(CodecError):
    pass


class MalformedCallPayload(CodecError):
    def __init__(self, position: int, detail: str):
        self.position = position
        self.detail = detail
        super().__init__(f"malformed call payload at {position}: {detail}")


class UnbalancedPlaceholder(CodecError):
    def __init__(self, token: str, detail: str = ""):
        self.token = token
        self.detail = detail
        msg = f"unbalanced placeholder {token}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class DegenerateImage(CodecError):
    pass


class OutOfBounds(CodecError):
    pass


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class NormalizedBBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in coords):
            raise ValueError(f"bbox coordinates must be integers: {coords}")
        if not (0 <= self.x1 <= self.x2 <= BBOX_SCALE and 0 <= self.y1 <= self.y2 <= BBOX_SCALE):
            raise ValueError(f"bbox out of range or inverted: {coords}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class Image:
    patch_count: int

    def __post_init__(self) -> None:
        if isinstance(self.patch_count, bool) or not isinstance(self.patch_count, int) or self.patch_count < 1:
            raise ValueError(f"patch_count must be a positive integer, got {self.patch_count!r}")


@dataclass(frozen=True)
class BBox:
    box: NormalizedBBox


Segment = Union[Text, Image, BBox]


def coalesce_segments(segments: Iterable[Segment]) -> list[Segment]:
    """Merge adjacent text segments and drop empty ones.

    Rendering concatenates text, so two adjacent ``Text`` values are
    indistinguishable from one after a round trip. Turns store the
    coalesced form.
    """
    out: list[Segment] = []
    for seg in segments:
        if isinstance(seg, Text):
            if not seg.text:
                continue
            if out and isinstance(out[-1], Text):
                out[-1] = Text(out[-1].text + seg.text)
                continue
        out.append(seg)
    return out


@dataclass(frozen=True)
class FunctionDescription:
    name: str
    description: str = ""
    parameters: dict = field(default_factory=lambda: {"type": "object", "properties": {}, "required": []})

    @property
    def properties(self) -> dict:
        return self.parameters.get("properties") or {}

    @property
    def required(self) -> list:
        return list(self.parameters.get("required") or [])

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "parameters": self.parameters}

    @classmethod
    def from_dict(cls, data: dict) -> "FunctionDescription":
        if not isinstance(data, dict) or "name" not in data:
            raise ConversationFormatError(f"function description needs a name: {data!r}")
        params = data.get("parameters")
        if params is None:
            params = {"type": "object", "properties": {}, "required": []}
        if not isinstance(params, dict):
            raise ConversationFormatError(f"parameters of {data['name']!r} must be an object")
        return cls(name=data["name"], description=data.get("description", ""), parameters=params)


@dataclass(frozen=True)
class FunctionCall:
    name: str
    arguments: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class UserTurn:
    segments: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(coalesce_segments(self.segments)))

    role = Role.USER


@dataclass(frozen=True)
class AssistantTurn:
    decision: Decision | None = None
    segments: tuple = ()
    calls: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(coalesce_segments(self.segments)))
        object.__setattr__(self, "calls", tuple(self.calls))

    role = Role.ASSISTANT


@dataclass(frozen=True)
class IpythonTurn:
    responses: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "responses", tuple(self.responses))

    role = Role.IPYTHON


Turn = Union[UserTurn, AssistantTurn, IpythonTurn]


@dataclass(frozen=True)
class Conversation:
    turns: tuple = ()
    system_text: str | None = None
    functions: tuple | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if self.functions is not None:
            object.__setattr__(self, "functions", tuple(self.functions))


@dataclass(frozen=True)
class AssistantOutput:
    """A parsed assistant generation.

    ``error`` is set when the generation could not be parsed; the decision is
    still filled in whenever the leading token was recognizable.
    """

    decision: Decision | None = None
    calls: tuple = ()
    segments: tuple = ()
    error: str | None = None

    @property
    def emitted_call(self) -> bool:
        return self.decision is Decision.USE_TOOL or bool(self.calls)


@dataclass(frozen=True)
class Violation:
    code: str
    path: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code} at {self.path}" + (f": {self.detail}" if self.detail else "")


# ---------------------------------------------------------------------------
# Canonical JSON


def canonical_json(value: Any) -> str:
    """Serialize to the compact UTF-8 JSON used inside prompts.

    Keys keep insertion order. Non-finite floats are rejected.
    """
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def serialize_calls(calls: Sequence[FunctionCall]) -> str:
    return canonical_json([c.to_dict() for c in calls])


def _reject_duplicate_keys(pairs: list) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name: str) -> None:
    raise ValueError(f"non-finite number {name}")


_DECODER = json.JSONDecoder(object_pairs_hook=_reject_duplicate_keys, parse_constant=_reject_constant)


def parse_calls(payload: str, offset: int = 0) -> list[FunctionCall]:
    """Parse the JSON call array that follows ``<|python_tag|>``.

    ``offset`` is added to reported positions so errors point into the
    enclosing generation.
    """
    start = len(payload) - len(payload.lstrip())
    if start == len(payload):
        raise MalformedCallPayload(offset + start, "empty call payload")
    try:
        data, end = _DECODER.raw_decode(payload, start)
    except ValueError as exc:
        pos = getattr(exc, "pos", start)
        raise MalformedCallPayload(offset + pos, str(exc)) from None
    if payload[end:].strip():
        raise MalformedCallPayload(offset + end, "trailing characters after call array")
    if not isinstance(data, list):
        raise MalformedCallPayload(offset + start, "call payload must be a JSON array")
    if not data:
        raise MalformedCallPayload(offset + start, "call array is empty")
    calls = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or set(item) - {"name", "arguments"} or "name" not in item:
            raise MalformedCallPayload(offset + start, f"call {i} must be an object with name and arguments")
        name, args = item["name"], item.get("arguments", {})
        if not isinstance(name, str) or not _IDENTIFIER.fullmatch(name):
            raise MalformedCallPayload(offset + start, f"call {i} has invalid name {name!r}")
        if not isinstance(args, dict):
            raise MalformedCallPayload(offset + start, f"arguments of call {i} must be an object")
        calls.append(FunctionCall(name, args))
    return calls


# ---------------------------------------------------------------------------
# Bounding boxes


def _half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def normalize_bbox(
    x1: float, y1: float, x2: float, y2: float, width: float, height: float
) -> NormalizedBBox:
    """Map a pixel-space box onto the integer 0..1000 grid (round half up)."""
    if not width > 0 or not height > 0:
        raise DegenerateImage(f"image extent must be positive, got {width}x{height}")
    if not (0 <= x1 <= x2 <= width and 0 <= y1 <= y2 <= height):
        raise OutOfBounds(f"box ({x1}, {y1}, {x2}, {y2}) not inside {width}x{height}")
    w, h = Fraction(width), Fraction(height)

    def scale(v: float, extent: Fraction) -> int:
        return min(BBOX_SCALE, max(0, _half_up(Fraction(v) * BBOX_SCALE / extent)))

    return NormalizedBBox(scale(x1, w), scale(y1, h), scale(x2, w), scale(y2, h))


def denormalize_bbox(nb: NormalizedBBox, width: float, height: float) -> tuple[float, float, float, float]:
    if not width > 0 or not height > 0:
        raise DegenerateImage(f"image extent must be positive, got {width}x{height}")
    return (
        nb.x1 * width / BBOX_SCALE,
        nb.y1 * height / BBOX_SCALE,
        nb.x2 * width / BBOX_SCALE,
        nb.y2 * height / BBOX_SCALE,
    )


# ---------------------------------------------------------------------------
# Validation


def _contains_reserved(text: str) -> list[str]:
    return [tok for tok in RESERVED_TOKENS if tok in text]


def _non_finite(value: Any) -> bool:
    if isinstance(value, float):
        return not math.isfinite(value)
    if isinstance(value, list):
        return any(_non_finite(v) for v in value)
    if isinstance(value, dict):
        return any(_non_finite(v) for v in value.values())
    return False


def _check_segments(segments: Sequence[Segment], path: str, allow_images: bool) -> list[Violation]:
    out = []
    for i, seg in enumerate(segments):
        p = f"{path}.segments[{i}]"
        if isinstance(seg, Text):
            found = _contains_reserved(seg.text)
            if found:
                out.append(Violation("ReservedTokenInText", p, ", ".join(found)))
        elif isinstance(seg, Image):
            if not allow_images:
                out.append(Violation("PlaceholderMisuse", p, "image placeholder outside a user turn"))
        elif not isinstance(seg, BBox):
            out.append(Violation("UnknownSegment", p, type(seg).__name__))
    return out


def _check_functions(functions: Sequence[FunctionDescription]) -> list[Violation]:
    out = []
    if not functions:
        out.append(Violation("EmptyFunctionList", "functions", "use None when no functions are offered"))
    seen: set[str] = set()
    for i, fn in enumerate(functions):
        p = f"functions[{i}]"
        if not isinstance(fn.name, str) or not _IDENTIFIER.fullmatch(fn.name):
            out.append(Violation("InvalidFunctionName", p, repr(fn.name)))
        if fn.name in seen:
            out.append(Violation("FunctionNameCollision", p, fn.name))
        seen.add(fn.name)
        props = fn.parameters.get("properties", {})
        if not isinstance(props, dict):
            out.append(Violation("InvalidParameters", p, "properties must be an object"))
            props = {}
        for name, prop in props.items():
            if not isinstance(prop, dict) or "type" not in prop:
                out.append(Violation("InvalidParameters", f"{p}.parameters.properties.{name}", "missing type"))
        required = fn.parameters.get("required", [])
        if not isinstance(required, list):
            out.append(Violation("InvalidParameters", p, "required must be a list"))
            required = []
        for name in required:
            if name not in props:
                out.append(Violation("RequiredNotInProperties", p, str(name)))
        try:
            text = canonical_json(fn.to_dict())
        except (TypeError, ValueError) as exc:
            out.append(Violation("NotSerializable", p, str(exc)))
        else:
            found = _contains_reserved(text)
            if found:
                out.append(Violation("ReservedTokenInText", p, ", ".join(found)))
    return out


def validate_conversation(conv: Conversation) -> list[Violation]:
    """Return every structural breach in ``conv``; an empty list means valid."""
    out: list[Violation] = []
    has_functions = conv.functions is not None
    names: set[str] = set()

    if conv.system_text is not None:
        found = _contains_reserved(conv.system_text)
        if found:
            out.append(Violation("ReservedTokenInText", "system", ", ".join(found)))
        if FUNCTIONS_MARKER in conv.system_text:
            out.append(Violation("ReservedTokenInText", "system", FUNCTIONS_MARKER))
    if has_functions:
        out.extend(_check_functions(conv.functions))
        names = {fn.name for fn in conv.functions}

    if not conv.turns:
        out.append(Violation("EmptyConversation", "turns"))
        return out

    prev: Turn | None = None
    for i, turn in enumerate(conv.turns):
        p = f"turns[{i}]"
        if prev is None and not isinstance(turn, UserTurn):
            out.append(Violation("FirstTurnNotUser", p, turn.role.value))

        if isinstance(turn, UserTurn):
            if isinstance(prev, UserTurn):
                out.append(Violation("RoleOrder", p, "user follows user"))
            elif isinstance(prev, IpythonTurn):
                out.append(Violation("RoleOrder", p, "user follows ipython; the assistant must respond first"))
            elif isinstance(prev, AssistantTurn) and prev.decision is Decision.USE_TOOL:
                out.append(Violation("MissingToolResponse", p, "tool calls must be answered by an ipython turn"))
            out.extend(_check_segments(turn.segments, p, allow_images=True))

        elif isinstance(turn, AssistantTurn):
            if isinstance(prev, AssistantTurn):
                out.append(Violation("RoleOrder", p, "assistant follows assistant"))
            if turn.decision is not None and not has_functions:
                out.append(Violation("DecisionWithoutFunctions", p))
            if turn.decision is None and has_functions:
                out.append(Violation("MissingDecision", p))
            if turn.calls and turn.decision is not Decision.USE_TOOL:
                out.append(Violation("CallsWithoutUseTool", p))
            if turn.decision is Decision.USE_TOOL:
                if not turn.calls:
                    out.append(Violation("UseToolWithoutCalls", p))
                if turn.segments:
                    out.append(Violation("UseToolWithText", p))
            for j, call in enumerate(turn.calls):
                cp = f"{p}.calls[{j}]"
                if not _IDENTIFIER.fullmatch(call.name or ""):
                    out.append(Violation("InvalidFunctionName", cp, repr(call.name)))
                elif has_functions and call.name not in names:
                    out.append(Violation("UnknownFunctionCall", cp, call.name))
                if not isinstance(call.arguments, dict) or not all(isinstance(k, str) for k in call.arguments):
                    out.append(Violation("InvalidArguments", cp, "arguments must map names to values"))
                elif _non_finite(call.arguments):
                    out.append(Violation("NonFiniteNumber", cp))
            if turn.calls:
                try:
                    found = _contains_reserved(serialize_calls(turn.calls))
                except (TypeError, ValueError) as exc:
                    out.append(Violation("NotSerializable", p, str(exc)))
                else:
                    if found:
                        out.append(Violation("ReservedTokenInText", p, ", ".join(found)))
            out.extend(_check_segments(turn.segments, p, allow_images=False))

        elif isinstance(turn, IpythonTurn):
            if not has_functions:
                out.append(Violation("IpythonWithoutFunctions", p))
            if not (isinstance(prev, AssistantTurn) and prev.decision is Decision.USE_TOOL):
                out.append(Violation("IpythonWithoutToolCall", p))
            elif len(turn.responses) != len(prev.calls):
                out.append(
                    Violation("ArityMismatch", p, f"expected {len(prev.calls)}, got {len(turn.responses)}")
                )
            try:
                found = _contains_reserved(canonical_json(list(turn.responses)))
            except (TypeError, ValueError) as exc:
                out.append(Violation("NotSerializable", p, str(exc)))
            else:
                if found:
                    out.append(Violation("ReservedTokenInText", p, ", ".join(found)))
        else:
            out.append(Violation("UnknownTurn", p, type(turn).__name__))
        prev = turn
    return out


# ---------------------------------------------------------------------------
# Rendering


def render_segments(segments: Iterable[Segment]) -> str:
    parts = []
    for seg in segments:
        if isinstance(seg, Text):
            parts.append(seg.text)
        elif isinstance(seg, Image):
            parts.append(START_IMG + IMG * seg.patch_count + END_IMG)
        else:
            b = seg.box
            parts.append(f"{START_BBOX}[{b.x1}, {b.y1}, {b.x2}, {b.y2}]{END_BBOX}")
    return "".join(parts)


def _block(role: Role, content: str) -> str:
    return f"{START_HEADER}{role.value}{END_HEADER}\n\n{content}{EOT}"


def generation_header() -> str:
    return f"{START_HEADER}{Role.ASSISTANT.value}{END_HEADER}\n\n"


def render_system(system_text: str | None, functions: Sequence[FunctionDescription] | None) -> str | None:
    if functions is None:
        return system_text
    lines = [FUNCTIONS_MARKER] + [canonical_json(fn.to_dict()) for fn in functions]
    body = "\n".join(lines)
    return body if system_text is None else f"{system_text}\n\n{body}"


def render_assistant(turn: AssistantTurn) -> str:
    head = turn.decision.token if turn.decision is not None else ""
    if turn.decision is Decision.USE_TOOL:
        return head + PYTHON_TAG + serialize_calls(turn.calls)
    return head + render_segments(turn.segments)


def render_prompt(conv: Conversation, append_generation_header: bool = True) -> str:
    """Render ``conv`` into the conditional prompt string.

    Raises:
        InvalidConversation: if :func:`validate_conversation` reports anything.
    """
    violations = validate_conversation(conv)
    if violations:
        raise InvalidConversation(violations)
    blocks = []
    system = render_system(conv.system_text, conv.functions)
    if system is not None:
        blocks.append(_block(Role.SYSTEM, system))
    for turn in conv.turns:
        if isinstance(turn, UserTurn):
            blocks.append(_block(Role.USER, render_segments(turn.segments)))
        elif isinstance(turn, AssistantTurn):
            blocks.append(_block(Role.ASSISTANT, render_assistant(turn)))
        else:
            blocks.append(_block(Role.IPYTHON, canonical_json(list(turn.responses))))
    if append_generation_header:
        blocks.append(generation_header())
    return "".join(blocks)


# ---------------------------------------------------------------------------
# Parsing


_SEGMENT_TOKENS = (START_IMG, START_BBOX, IMG, END_IMG, END_BBOX)


def parse_segments(text: str) -> list[Segment]:
    """Split raw text into text, image and bbox segments.

    Unknown ``<|...|>`` tokens stay in the text untouched.
    """
    segments: list[Segment] = []
    pos = 0
    n = len(text)
    while pos < n:
        hits = [(text.find(tok, pos), tok) for tok in _SEGMENT_TOKENS]
        hits = [(i, tok) for i, tok in hits if i >= 0]
        if not hits:
            segments.append(Text(text[pos:]))
            break
        idx, tok = min(hits)
        if idx > pos:
            segments.append(Text(text[pos:idx]))
        if tok == START_IMG:
            cur = idx + len(START_IMG)
            count = 0
            while text.startswith(IMG, cur):
                count += 1
                cur += len(IMG)
            if not text.startswith(END_IMG, cur):
                raise UnbalancedPlaceholder(START_IMG, f"no {END_IMG} after position {idx}")
            if count == 0:
                raise UnbalancedPlaceholder(START_IMG, f"image at {idx} has no {IMG} patches")
            segments.append(Image(count))
            pos = cur + len(END_IMG)
        elif tok == START_BBOX:
            body_start = idx + len(START_BBOX)
            end = text.find(END_BBOX, body_start)
            if end < 0:
                raise UnbalancedPlaceholder(START_BBOX, f"no {END_BBOX} after position {idx}")
            m = _BBOX_BODY.fullmatch(text, body_start, end)
            if m is None:
                raise UnbalancedPlaceholder(START_BBOX, f"bad coordinates {text[body_start:end]!r}")
            try:
                box = NormalizedBBox(*(int(g) for g in m.groups()))
            except ValueError as exc:
                raise UnbalancedPlaceholder(START_BBOX, str(exc)) from None
            segments.append(BBox(box))
            pos = end + len(END_BBOX)
        else:
            raise UnbalancedPlaceholder(tok, f"stray token at position {idx}")
    return coalesce_segments(segments)


def parse_assistant(raw: str, functions_present: bool) -> AssistantOutput:
    """Parse one assistant generation.

    Args:
        raw: generated text, optionally terminated by ``<|eot_id|>``.
        functions_present: whether the prompt advertised functions; if so the
            generation must open with a decision token.

    Raises:
        MissingDecisionToken: functions were offered but no decision token leads.
        MalformedCallPayload: the call array after ``<|use_tool|>`` is unusable.
        UnbalancedPlaceholder: an image or bbox span is not closed properly.
    """
    body = raw[: -len(EOT)] if raw.endswith(EOT) else raw
    if not functions_present:
        return AssistantOutput(None, (), tuple(parse_segments(body)))
    if body.startswith(ANSWER):
        return AssistantOutput(Decision.ANSWER, (), tuple(parse_segments(body[len(ANSWER):])))
    if body.startswith(USE_TOOL):
        pos = len(USE_TOOL)
        rest = body[pos:]
        stripped = rest.lstrip()
        if not stripped.startswith(PYTHON_TAG):
            raise MalformedCallPayload(pos, f"expected {PYTHON_TAG} after {USE_TOOL}")
        pos += len(rest) - len(stripped) + len(PYTHON_TAG)
        calls = parse_calls(body[pos:], offset=pos)
        return AssistantOutput(Decision.USE_TOOL, tuple(calls), ())
    raise MissingDecisionToken(f"generation does not start with {ANSWER} or {USE_TOOL}: {body[:40]!r}")


def parse_assistant_lenient(raw: str, functions_present: bool) -> AssistantOutput:
    """Like :func:`parse_assistant` but returns parse failures in-band."""
    try:
        return parse_assistant(raw, functions_present)
    except CodecError as exc:
        body = raw.lstrip()
        decision = None
        if functions_present and body.startswith(USE_TOOL):
            decision = Decision.USE_TOOL
        elif functions_present and body.startswith(ANSWER):
            decision = Decision.ANSWER
        return AssistantOutput(decision, (), (), error=f"{type(exc).__name__}: {exc}")


_BLOCK = re.compile(
    re.escape(START_HEADER) + r"(\w+)" + re.escape(END_HEADER) + r"\n\n(.*?)" + re.escape(EOT),
    re.S,
)


def split_blocks(prompt: str) -> tuple[list[tuple[str, str]], bool]:
    """Split a rendered prompt into ``(role, content)`` blocks.

    Returns the blocks and whether the prompt ends in an open assistant header.
    """
    blocks = []
    pos = 0
    for m in _BLOCK.finditer(prompt):
        if m.start() != pos:
            raise CodecError(f"unexpected text at position {pos}")
        blocks.append((m.group(1), m.group(2)))
        pos = m.end()
    tail = prompt[pos:]
    if tail == "":
        return blocks, False
    if tail == generation_header():
        return blocks, True
    raise CodecError(f"unexpected text at position {pos}: {tail[:40]!r}")


def _parse_system(content: str) -> tuple[str | None, list[FunctionDescription] | None]:
    if content.startswith(FUNCTIONS_MARKER + "\n"):
        system_text, fn_block = None, content
    else:
        sep = "\n\n" + FUNCTIONS_MARKER + "\n"
        idx = content.rfind(sep)
        if idx < 0:
            return content, None
        system_text, fn_block = content[:idx], content[idx + 2 :]
    lines = fn_block.split("\n")[1:]
    try:
        functions = [FunctionDescription.from_dict(json.loads(line)) for line in lines]
    except json.JSONDecodeError as exc:
        raise CodecError(f"bad function description line: {exc}") from None
    return system_text, functions


def parse_prompt(prompt: str) -> tuple[Conversation, bool]:
    """Recover the conversation that rendered to ``prompt``.

    Returns the conversation and whether a generation header was appended.
    """
    blocks, open_header = split_blocks(prompt)
    system_text, functions = None, None
    if blocks and blocks[0][0] == Role.SYSTEM.value:
        system_text, functions = _parse_system(blocks[0][1])
        blocks = blocks[1:]
    turns: list[Turn] = []
    for role, content in blocks:
        if role == Role.USER.value:
            turns.append(UserTurn(tuple(parse_segments(content))))
        elif role == Role.ASSISTANT.value:
            out = parse_assistant(content, functions is not None)
            turns.append(AssistantTurn(out.decision, out.segments, out.calls))
        elif role == Role.IPYTHON.value:
            try:
                responses = json.loads(content)
            except json.JSONDecodeError as exc:
                raise CodecError(f"bad ipython payload: {exc}") from None
            if not isinstance(responses, list):
                raise CodecError("ipython payload must be a JSON array")
            turns.append(IpythonTurn(tuple(responses)))
        else:
            raise CodecError(f"unexpected role {role!r}")
    conv = Conversation(tuple(turns), system_text, None if functions is None else tuple(functions))
    return conv, open_header


def parse_assistant_tail(prompt: str, functions_present: bool) -> AssistantOutput:
    """Parse the last assistant block of a rendered prompt."""
    blocks, _ = split_blocks(prompt)
    for role, content in reversed(blocks):
        if role == Role.ASSISTANT.value:
            return parse_assistant(content + EOT, functions_present)
    raise CodecError("prompt has no assistant block")


# ---------------------------------------------------------------------------
# Exchange format (one JSON object per conversation)


def segment_to_dict(seg: Segment) -> dict:
    if isinstance(seg, Text):
        return {"type": "text", "text": seg.text}
    if isinstance(seg, Image):
        return {"type": "image", "patch_count": seg.patch_count}
    return {"type": "bbox", "box": list(seg.box.as_tuple())}


def segment_from_dict(data: Any) -> Segment:
    if isinstance(data, str):
        return Text(data)
    if not isinstance(data, dict):
        raise ConversationFormatError(f"segment must be an object or string: {data!r}")
    kind = data.get("type")
    try:
        if kind == "text":
            return Text(data["text"])
        if kind == "image":
            return Image(data["patch_count"])
        if kind == "bbox":
            return BBox(NormalizedBBox(*data["box"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConversationFormatError(f"bad {kind} segment {data!r}: {exc}") from None
    raise ConversationFormatError(f"unknown segment type {kind!r}")


def _segments_from(content: Any) -> tuple:
    if content is None:
        return ()
    if isinstance(content, str):
        return (Text(content),)
    if not isinstance(content, list):
        raise ConversationFormatError(f"content must be a string or a list: {content!r}")
    return tuple(segment_from_dict(s) for s in content)


def turn_to_dict(turn: Turn) -> dict:
    if isinstance(turn, UserTurn):
        return {"role": "user", "content": [segment_to_dict(s) for s in turn.segments]}
    if isinstance(turn, IpythonTurn):
        return {"role": "ipython", "content": list(turn.responses)}
    out: dict = {"role": "assistant"}
    if turn.decision is not None:
        out["decision"] = turn.decision.value
    if turn.calls:
        out["calls"] = [c.to_dict() for c in turn.calls]
    else:
        out["content"] = [segment_to_dict(s) for s in turn.segments]
    return out


def turn_from_dict(data: Any) -> Turn:
    if not isinstance(data, dict):
        raise ConversationFormatError(f"turn must be an object: {data!r}")
    role = data.get("role")
    if role == "user":
        return UserTurn(_segments_from(data.get("content")))
    if role == "ipython":
        content = data.get("content", [])
        if not isinstance(content, list):
            raise ConversationFormatError("ipython content must be a list of responses")
        return IpythonTurn(tuple(content))
    if role == "assistant":
        decision = data.get("decision")
        try:
            decision = Decision(decision) if decision is not None else None
        except ValueError:
            raise ConversationFormatError(f"unknown decision {decision!r}") from None
        calls = []
        for c in data.get("calls") or []:
            if not isinstance(c, dict) or "name" not in c:
                raise ConversationFormatError(f"bad call {c!r}")
            calls.append(FunctionCall(c["name"], c.get("arguments", {})))
        return AssistantTurn(decision, _segments_from(data.get("content")), tuple(calls))
    raise ConversationFormatError(f"unknown role {role!r}")


def conversation_to_dict(conv: Conversation) -> dict:
    out: dict = {}
    if conv.system_text is not None:
        out["system"] = conv.system_text
    if conv.functions is not None:
        out["functions"] = [fn.to_dict() for fn in conv.functions]
    out["turns"] = [turn_to_dict(t) for t in conv.turns]
    return out


def conversation_from_dict(data: Any) -> Conversation:
    if not isinstance(data, dict):
        raise ConversationFormatError("conversation must be a JSON object")
    system = data.get("system")
    if system is not None and not isinstance(system, str):
        raise ConversationFormatError("system must be a string")
    functions = data.get("functions")
    if functions is not None:
        if not isinstance(functions, list):
            raise ConversationFormatError("functions must be a list")
        functions = tuple(FunctionDescription.from_dict(f) for f in functions)
    turns = data.get("turns", [])
    if not isinstance(turns, list):
        raise ConversationFormatError("turns must be a list")
    return Conversation(tuple(turn_from_dict(t) for t in turns), system, functions)


def output_to_dict(out: AssistantOutput) -> dict:
    data: dict = {
        "decision": out.decision.value if out.decision is not None else None,
        "calls": [c.to_dict() for c in out.calls],
        "segments": [segment_to_dict(s) for s in out.segments],
    }
    if out.error is not None:
        data["error"] = out.error
    return data
