"""Call-expression grammar, canonical forms and structural (AST) matching.

Grammar (whitespace-insensitive)::

    calls    := call | "[" [call ("," call)* [","]] "]"
    call     := dotted "(" [kwarg ("," kwarg)* [","]] ")"
    kwarg    := IDENT "=" literal
    literal  := STRING | NUMBER | "True" | "False" | "None" | "true" | "false"
              | "null" | "[" [literal ("," literal)* [","]] "]"
              | "{" [STRING ":" literal ("," STRING ":" literal)* [","]] "}"

Positional arguments are rejected.
"""

from __future__ import annotations

import enum
import json
import math
import unicodedata
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .codec import FunctionCall

MAX_MATCH_CALLS = 6
FLOAT_REL_TOL = 1e-6


class ProblemType(str, enum.Enum):
    SIMPLE = "simple"
    MULTIPLE = "multiple"
    PARALLEL = "parallel"
    PARALLEL_MULTIPLE = "parallel_multiple"

    @property
    def short(self) -> str:
        return {"simple": "S.", "multiple": "M.", "parallel": "P.", "parallel_multiple": "P.M."}[self.value]

    @property
    def is_parallel(self) -> bool:
        return self in (ProblemType.PARALLEL, ProblemType.PARALLEL_MULTIPLE)


class CallSyntaxError(ValueError):
    def __init__(self, position: int, expected: str, found: str):
        self.position = position
        self.expected = expected
        self.found = found
        super().__init__(f"at position {position}: expected {expected}, found {found}")


class MatchLimitExceeded(ValueError):
    pass


@dataclass(frozen=True)
class CallExpr:
    name: str
    kwargs: tuple = ()

    def __post_init__(self) -> None:
        kwargs = tuple((k, v) for k, v in self.kwargs)
        names = [k for k, _ in kwargs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate keyword argument in call to {self.name}")
        object.__setattr__(self, "kwargs", kwargs)

    @property
    def arguments(self) -> dict:
        return dict(self.kwargs)

    @classmethod
    def from_function_call(cls, call: FunctionCall) -> "CallExpr":
        return cls(call.name, tuple(call.arguments.items()))

    def to_function_call(self) -> FunctionCall:
        return FunctionCall(self.name, dict(self.kwargs))


@dataclass(frozen=True)
class AnswerSpec:
    """Acceptable values for one target call."""

    name: str
    acceptable: dict = field(default_factory=dict)
    optional: frozenset = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "optional", frozenset(self.optional))
        for arg, values in self.acceptable.items():
            if not isinstance(values, list) or not values:
                raise ValueError(f"{self.name}.{arg}: acceptable values must be a nonempty list")
        extra = self.optional - set(self.acceptable)
        if extra:
            raise ValueError(f"{self.name}: optional args {sorted(extra)} have no acceptable values")

    def to_dict(self) -> dict:
        out: dict = {"name": self.name, "arguments": self.acceptable}
        if self.optional:
            out["optional"] = sorted(self.optional)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AnswerSpec":
        """Load either ``{"name", "arguments", "optional"}`` or the BFCL
        ``{name: {arg: [values...]}}`` form, where ``""`` marks an optional
        argument."""
        if "name" in data and "arguments" in data:
            return cls(data["name"], dict(data["arguments"]), frozenset(data.get("optional", ())))
        if len(data) != 1:
            raise ValueError(f"cannot read answer spec {data!r}")
        ((name, args),) = data.items()
        acceptable, optional = {}, set()
        for arg, values in args.items():
            kept = [v for v in values if v != ""]
            if len(kept) != len(values):
                optional.add(arg)
            acceptable[arg] = kept or [None]
        return cls(name, acceptable, frozenset(optional))

    def canonical_call(self) -> CallExpr:
        """The call built from the first acceptable value of every required argument."""
        return CallExpr(self.name, tuple((k, v[0]) for k, v in self.acceptable.items() if k not in self.optional))


# ---------------------------------------------------------------------------
# Parser


_ESCAPES = {
    "\\": "\\", "'": "'", '"': '"', "n": "\n", "r": "\r", "t": "\t",
    "b": "\b", "f": "\f", "0": "\0", "/": "/",
}
_DIGITS = "0123456789"
_KEYWORD_LITERALS = {"True": True, "False": False, "None": None, "true": True, "false": False, "null": None}


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, expected: str) -> CallSyntaxError:
        found = repr(self.text[self.pos]) if self.pos < len(self.text) else "end of input"
        return CallSyntaxError(self.pos, expected, found)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise self.error(repr(ch))
        self.pos += 1

    def accept(self, ch: str) -> bool:
        if self.peek() == ch:
            self.pos += 1
            return True
        return False

    def identifier(self) -> str:
        self.skip_ws()
        start = self.pos
        if self.pos < len(self.text) and (self.text[self.pos].isalpha() or self.text[self.pos] == "_"):
            self.pos += 1
            while self.pos < len(self.text) and (self.text[self.pos].isalnum() or self.text[self.pos] == "_"):
                self.pos += 1
        if start == self.pos:
            raise self.error("identifier")
        return self.text[start:self.pos]

    def sequence(self, close: str, item: Callable[[], Any]) -> list:
        items = []
        if self.accept(close):
            return items
        while True:
            items.append(item())
            if self.accept(close):
                return items
            if not self.accept(","):
                raise self.error(f"',' or '{close}'")
            if self.accept(close):
                return items

    def parse_calls(self) -> list[CallExpr]:
        if self.accept("["):
            calls = self.sequence("]", self.call)
        else:
            calls = [self.call()]
        if self.peek():
            raise self.error("end of input")
        return calls

    def call(self) -> CallExpr:
        parts = [self.identifier()]
        while self.accept("."):
            parts.append(self.identifier())
        self.expect("(")
        kwargs = self.sequence(")", self.kwarg)
        seen = set()
        for name, _ in kwargs:
            if name in seen:
                raise CallSyntaxError(self.pos, "unique keyword names", repr(name))
            seen.add(name)
        return CallExpr(".".join(parts), tuple(kwargs))

    def kwarg(self) -> tuple[str, Any]:
        start = self.pos
        ch = self.peek()
        if not (ch.isalpha() or ch == "_"):
            raise self.error("keyword argument")
        name = self.identifier()
        if self.peek() != "=":
            self.pos = start
            self.skip_ws()
            raise self.error("keyword argument")
        self.pos += 1
        return name, self.literal()

    def literal(self) -> Any:
        ch = self.peek()
        if ch in "\"'":
            return self.string()
        if ch == "[":
            self.pos += 1
            return self.sequence("]", self.literal)
        if ch == "{":
            self.pos += 1
            return dict(self.sequence("}", self.map_entry))
        if ch and ch in _DIGITS + "+-.":
            return self.number()
        if ch.isalpha():
            start = self.pos
            word = self.identifier()
            if word in _KEYWORD_LITERALS:
                return _KEYWORD_LITERALS[word]
            self.pos = start
        raise self.error("literal")

    def map_entry(self) -> tuple[str, Any]:
        if self.peek() not in "\"'" or not self.peek():
            raise self.error("string key")
        key = self.string()
        self.expect(":")
        return key, self.literal()

    def string(self) -> str:
        quote = self.text[self.pos]
        self.pos += 1
        out = []
        text = self.text
        while True:
            if self.pos >= len(text):
                raise self.error(f"closing {quote}")
            ch = text[self.pos]
            if ch == quote:
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                self.pos += 1
                if self.pos >= len(text):
                    raise self.error("escape sequence")
                esc = text[self.pos]
                if esc in _ESCAPES:
                    out.append(_ESCAPES[esc])
                    self.pos += 1
                elif esc in "xuU":
                    width = {"x": 2, "u": 4, "U": 8}[esc]
                    digits = text[self.pos + 1:self.pos + 1 + width]
                    if len(digits) != width or any(c not in "0123456789abcdefABCDEF" for c in digits):
                        raise self.error(f"{width} hex digits")
                    code = int(digits, 16)
                    if code > 0x10FFFF:
                        raise self.error("code point")
                    out.append(chr(code))
                    self.pos += 1 + width
                else:
                    raise self.error("escape sequence")
            else:
                out.append(ch)
                self.pos += 1

    def number(self) -> int | float:
        start = self.pos
        text = self.text
        if text[self.pos] in "+-":
            self.pos += 1
        digits_start = self.pos
        while self.pos < len(text) and text[self.pos] in _DIGITS:
            self.pos += 1
        is_float = False
        if self.pos < len(text) and text[self.pos] == ".":
            is_float = True
            self.pos += 1
            while self.pos < len(text) and text[self.pos] in _DIGITS:
                self.pos += 1
        mantissa = text[digits_start:self.pos].replace(".", "")
        if not mantissa:
            self.pos = start
            raise self.error("number")
        if self.pos < len(text) and text[self.pos] in "eE":
            is_float = True
            self.pos += 1
            if self.pos < len(text) and text[self.pos] in "+-":
                self.pos += 1
            exp_start = self.pos
            while self.pos < len(text) and text[self.pos] in _DIGITS:
                self.pos += 1
            if exp_start == self.pos:
                raise self.error("exponent digits")
        token = text[start:self.pos]
        if is_float:
            value = float(token)
            if not math.isfinite(value):
                self.pos = start
                raise self.error("finite number")
            return value
        return int(token)


def parse_call_expressions(text: str) -> list[CallExpr]:
    """Parse one call or a bracketed list of calls.

    >>> parse_call_expressions('f(x=1)')
    [CallExpr(name='f', kwargs=(('x', 1),))]
    """
    return _Parser(text).parse_calls()


def format_literal(value: Any) -> str:
    if value is None:
        return "None"
    if value is True:
        return "True"
    if value is False:
        return "False"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"cannot format non-finite float {value}")
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_literal(v) for v in value) + "]"
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k), ensure_ascii=False)}: {format_literal(v)}" for k, v in value.items()) + "}"
    raise TypeError(f"unsupported literal {value!r}")


def format_call(call: CallExpr) -> str:
    return f"{call.name}(" + ", ".join(f"{k}={format_literal(v)}" for k, v in call.kwargs) + ")"


def format_call_expressions(calls: Sequence[CallExpr]) -> str:
    return "[" + ", ".join(format_call(c) for c in calls) + "]"


# ---------------------------------------------------------------------------
# Canonical form


def canonical_value(value: Any) -> Any:
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        if math.isfinite(value) and value.is_integer():
            return int(value)
        return value
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    if isinstance(value, (list, tuple)):
        return [canonical_value(v) for v in value]
    if isinstance(value, dict):
        items = ((unicodedata.normalize("NFC", str(k)), canonical_value(v)) for k, v in value.items())
        return dict(sorted(items))
    return value


def canonicalize(call: CallExpr) -> CallExpr:
    """Sort kwargs, fold integral floats to ints and NFC-normalize strings."""
    kwargs = sorted((k, canonical_value(v)) for k, v in call.kwargs) if call.kwargs else []
    return CallExpr(call.name, tuple(kwargs))


def values_match(a: Any, b: Any) -> bool:
    """Compare canonical literals: strict kinds, floats within 1e-6 relative."""
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    a_num = isinstance(a, (int, float))
    b_num = isinstance(b, (int, float))
    if a_num or b_num:
        if not (a_num and b_num):
            return False
        if isinstance(a, int) and isinstance(b, int):
            return a == b
        return math.isclose(a, b, rel_tol=FLOAT_REL_TOL, abs_tol=0.0)
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(values_match(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(values_match(a[k], b[k]) for k in a)
    if a is None or b is None:
        return a is b
    return type(a) is type(b) and a == b


def call_matches(call: CallExpr, spec: AnswerSpec) -> bool:
    if call.name != spec.name:
        return False
    args = canonicalize(call).arguments
    if set(args) - set(spec.acceptable):
        return False
    for name, options in spec.acceptable.items():
        if name not in args:
            if name in spec.optional:
                continue
            return False
        value = args[name]
        if not any(values_match(value, canonical_value(opt)) for opt in options):
            return False
    return True


def find_assignment(n: int, compatible: Callable[[int, int], bool]) -> list[int] | None:
    """Depth-first search for a perfect matching of ``n`` left items to ``n``
    right items; returns ``assignment[left] = right`` or ``None``."""
    if n > MAX_MATCH_CALLS:
        raise MatchLimitExceeded(f"{n} calls exceeds the matching limit of {MAX_MATCH_CALLS}")
    table = [[compatible(i, j) for j in range(n)] for i in range(n)]
    used = [False] * n
    assignment = [-1] * n

    def place(i: int) -> bool:
        if i == n:
            return True
        for j in range(n):
            if table[i][j] and not used[j]:
                used[j] = True
                assignment[i] = j
                if place(i + 1):
                    return True
                used[j] = False
        return False

    return assignment if place(0) else None


def ast_match(candidates: Sequence[CallExpr], target: Sequence[AnswerSpec], mode: ProblemType) -> bool:
    """True iff the candidate calls can be paired one-to-one with the target specs.

    Parallel modes ignore order; the other modes compare position by position.
    """
    if not target:
        raise ValueError("target must be nonempty")
    if len(candidates) != len(target):
        return False
    if not mode.is_parallel:
        return all(call_matches(c, s) for c, s in zip(candidates, target))
    return find_assignment(len(target), lambda i, j: call_matches(candidates[i], target[j])) is not None


def calls_from_outputs(calls: Iterable[FunctionCall]) -> list[CallExpr]:
    return [CallExpr.from_function_call(c) for c in calls]

