"""Shared generators and a tiny HTTP stub server for the test suite."""

from __future__ import annotations

import json
import random
import threading
import unicodedata
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

from breezekit.codec import (
    AssistantTurn,
    BBox,
    Conversation,
    Decision,
    FunctionCall,
    FunctionDescription,
    Image,
    IpythonTurn,
    RESERVED_TOKENS,
    NormalizedBBox,
    Text,
    UserTurn,
    coalesce_segments,
)

FIXTURES = Path(__file__).parent / "fixtures"

# criterion name -> (passed, detail); printed in the terminal summary
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record(name: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_RESULTS[name] = (ok, detail)
    return ok

_ALPHABET = list("abcdefgh XYZ 0123 .,;:!?-_'\"{}[]()<>|/\\\n\t") + list("台北天氣你好嗎") + ["😀", "é", "é"]
_FRAGMENTS = ["<|foo|>", "<|", "|>", "<|img", "start_img|>", "<|eom_id|>", "Customized", '{"name":1}']


def random_text(rng: random.Random, min_len: int = 1, max_len: int = 24) -> str:
    """Awkward text that never contains a reserved token."""
    while True:
        parts = []
        for _ in range(rng.randint(min_len, max_len)):
            if rng.random() < 0.08:
                parts.append(rng.choice(_FRAGMENTS))
            else:
                parts.append(rng.choice(_ALPHABET))
        text = "".join(parts)
        if not any(tok in text for tok in RESERVED_TOKENS):
            return text


def random_bbox(rng: random.Random) -> NormalizedBBox:
    x1, x2 = sorted(rng.randint(0, 1000) for _ in range(2))
    y1, y2 = sorted(rng.randint(0, 1000) for _ in range(2))
    return NormalizedBBox(x1, y1, x2, y2)


def random_value(rng: random.Random, depth: int = 0):
    kinds = ["null", "bool", "int", "float", "str"]
    if depth < 2:
        kinds += ["list", "map"]
    kind = rng.choice(kinds)
    if kind == "null":
        return None
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "int":
        return rng.randint(-10**6, 10**6)
    if kind == "float":
        return rng.choice([0.5, -2.25, 1e-7, 3.0, rng.uniform(-1e3, 1e3)])
    if kind == "str":
        return random_text(rng, 0, 10)
    if kind == "list":
        return [random_value(rng, depth + 1) for _ in range(rng.randint(0, 3))]
    return {f"k{i}_{random_text(rng, 1, 3)}": random_value(rng, depth + 1) for i in range(rng.randint(0, 3))}


def random_function(rng: random.Random, name: str) -> FunctionDescription:
    props = {f"p{i}": {"type": rng.choice(["string", "number", "integer"]), "description": random_text(rng, 0, 8)} for i in range(rng.randint(0, 3))}
    required = [p for p in props if rng.random() < 0.5]
    return FunctionDescription(name, random_text(rng, 0, 12), {"type": "object", "properties": props, "required": required})


def _segments(rng: random.Random, images: int, bboxes: int) -> list:
    while True:
        items: list = [Image(rng.randint(1, 6)) for _ in range(images)] + [BBox(random_bbox(rng)) for _ in range(bboxes)]
        items += [Text(random_text(rng)) for _ in range(rng.randint(0 if items else 1, 3))]
        rng.shuffle(items)
        # adjacent texts merge on render; the merged text must stay clean too
        merged = coalesce_segments(items)
        if not any(isinstance(s, Text) and any(t in s.text for t in RESERVED_TOKENS) for s in merged):
            return items


def random_conversation(rng: random.Random) -> Conversation:
    """A valid conversation ending in an assistant turn.

    Uses 0-3 images (user turns), 0-2 bboxes (assistant answers) and 1-4
    calls per tool-using assistant turn.
    """
    with_functions = rng.random() < 0.75
    functions = None
    if with_functions:
        names = rng.sample([f"fn_{c}" for c in "abcdefgh"], rng.randint(1, 4))
        functions = tuple(random_function(rng, n) for n in names)
    system = random_text(rng) if rng.random() < 0.5 else None

    images_left = rng.randint(0, 3)
    bboxes_left = rng.randint(0, 2)
    n_exchanges = rng.randint(1, 3)
    turns: list = []
    for ex in range(n_exchanges):
        last = ex == n_exchanges - 1
        n_img = images_left if last else rng.randint(0, images_left)
        images_left -= n_img
        turns.append(UserTurn(tuple(_segments(rng, n_img, 0))))
        use_tool = with_functions and rng.random() < 0.5
        if use_tool:
            calls = tuple(
                FunctionCall(rng.choice(functions).name, {f"a{i}": random_value(rng) for i in range(rng.randint(0, 3))})
                for _ in range(rng.randint(1, 4))
            )
            turns.append(AssistantTurn(Decision.USE_TOOL, calls=calls))
            if last and rng.random() < 0.5:
                break
            turns.append(IpythonTurn(tuple(random_value(rng) for _ in calls)))
        n_box = bboxes_left if last else rng.randint(0, bboxes_left)
        bboxes_left -= n_box
        decision = Decision.ANSWER if with_functions else None
        turns.append(AssistantTurn(decision, tuple(_segments(rng, 0, n_box))))
    return Conversation(tuple(turns), system, functions)


class StubServer:
    """Threaded HTTP server answering completion requests with ``handler``.

    ``handler(body) -> (status, payload, headers)``; the server records the
    peak number of requests being handled at once.
    """

    def __init__(self, handler: Callable[[dict], tuple], delay: float = 0.0):
        self.handler = handler
        self.delay = delay
        self.requests: list[dict] = []
        self.in_flight = 0
        self.peak = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("content-length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with stub._lock:
                    stub.requests.append(body)
                    stub.in_flight += 1
                    stub.peak = max(stub.peak, stub.in_flight)
                try:
                    if stub.delay:
                        threading.Event().wait(stub.delay)
                    status, payload, headers = stub.handler(body)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1
                data = json.dumps(payload, ensure_ascii=False).encode("utf-8")
                self.send_response(status)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(data)))
                for k, v in (headers or {}).items():
                    self.send_header(k, v)
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


_AST_NAMES = ["get_weather", "calc.area", "convert_currency", "find_route"]


def _ast_value(rng: random.Random):
    return rng.choice([
        rng.randint(-5, 5), rng.choice([0.5, 2.0, 3.25, -1.0]), rng.choice(["a", "Taipei", "é", "é"]),
        rng.random() < 0.5, None, [rng.randint(0, 3), "x"], {"k": rng.randint(0, 2)},
    ])


def _confuse(rng: random.Random, value):
    """A value that may or may not match ``value`` under the matching rules."""
    choice = rng.randrange(8)
    if choice == 0 and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if choice == 1 and isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    if choice == 2 and isinstance(value, bool):
        return int(value)
    if choice == 3 and isinstance(value, float):
        return value * (1 + rng.choice([1e-9, 1e-3]))
    if choice == 4 and isinstance(value, str):
        return unicodedata.normalize("NFD", value)
    if choice == 5:
        return _ast_value(rng)
    return value


def random_ast_case(rng: random.Random, max_calls: int = 4):
    """Random (calls, specs, parallel) with near-miss perturbations.

    ``calls`` is ``[(name, args)]`` and ``specs`` is ``[(name, acceptable, optional)]``.
    """
    n = rng.randint(1, max_calls)
    specs = []
    for _ in range(n):
        name = rng.choice(_AST_NAMES)
        acceptable, optional = {}, set()
        for i in range(rng.randint(0, 3)):
            arg = f"arg{i}"
            acceptable[arg] = [_ast_value(rng) for _ in range(rng.randint(1, 2))]
            if rng.random() < 0.3:
                optional.add(arg)
        specs.append((name, acceptable, optional))
    calls = []
    for name, acceptable, optional in specs:
        args = {}
        for arg, options in acceptable.items():
            if arg in optional and rng.random() < 0.4:
                continue
            args[arg] = _confuse(rng, rng.choice(options)) if rng.random() < 0.3 else rng.choice(options)
        if rng.random() < 0.05:
            args["extra"] = 1
        if rng.random() < 0.05:
            name = rng.choice(_AST_NAMES)
        calls.append((name, args))
    if rng.random() < 0.05 and len(calls) > 1:
        calls.pop()
    if rng.random() < 0.5:
        rng.shuffle(calls)
    return calls, specs, rng.random() < 0.5
