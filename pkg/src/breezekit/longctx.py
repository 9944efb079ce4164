"""Passkey retrieval: instance generation across position bins and per-bin scoring."""

from __future__ import annotations

import json
import math
import random
import re
import unicodedata
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

DEFAULT_BINS = 16
DEFAULT_DIGITS = 6
DEFAULT_PER_BIN = 20
LENGTH_TOLERANCE = 0.02

INSTRUCTION = (
    "There is an important piece of information hidden inside a lot of irrelevant text. "
    "Find it and memorize it. "
)
PASSKEY_SENTENCE = "The pass key is {passkey}. Remember it. "
QUESTION = "What is the pass key? The pass key is"

FILLER_SENTENCES = (
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
    "The river keeps flowing past the old mill.",
    "Clouds drift slowly over the quiet hills.",
    "A bird sings somewhere in the distance.",
)


class LongContextError(ValueError):
    pass


class BinTooNarrow(LongContextError):
    pass


class OutOfRange(LongContextError):
    pass


class MissingResponse(LongContextError):
    def __init__(self, instance_id: str):
        self.instance_id = instance_id
        super().__init__(f"no response for instance {instance_id!r}")


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


def _is_cjk(ch: str) -> bool:
    return unicodedata.east_asian_width(ch) in ("W", "F")


class ApproxTokenCounter:
    """Four ASCII characters per token, one token per wide (CJK) character.

    Other non-wide characters count as a quarter token like ASCII. Counts of a
    concatenation differ from the sum of the parts by at most one.
    """

    def count(self, text: str) -> int:
        if text.isascii():
            return -(-len(text) // 4)
        wide = sum(1 for ch in text if ord(ch) > 0x7F and _is_cjk(ch))
        return wide + math.ceil((len(text) - wide) / 4)


def bin_of(position_tokens: int, context_tokens: int, n_bins: int = DEFAULT_BINS) -> int:
    if not 0 <= position_tokens < context_tokens:
        raise OutOfRange(f"position {position_tokens} outside [0, {context_tokens})")
    return position_tokens * n_bins // context_tokens


def bin_bounds(bin_index: int, context_tokens: int, n_bins: int = DEFAULT_BINS) -> tuple[int, int]:
    """Half-open token range ``[lo, hi)`` whose positions fall in ``bin_index``."""
    lo = -(-bin_index * context_tokens // n_bins)
    hi = -(-(bin_index + 1) * context_tokens // n_bins)
    return lo, hi


def _fmt_tokens(n: float) -> str:
    if n and n % 1000 == 0:
        return f"{int(n // 1000)}k"
    return str(int(n)) if float(n).is_integer() else f"{n:g}"


def bin_label(bin_index: int, context_tokens: int, n_bins: int = DEFAULT_BINS) -> str:
    width = context_tokens / n_bins
    lo, hi = bin_index * width, (bin_index + 1) * width
    return f"Bin {bin_index} ({_fmt_tokens(lo)}-{_fmt_tokens(hi)})"


@dataclass(frozen=True)
class PasskeyConfig:
    context_tokens: int
    bin_index: int
    n_bins: int = DEFAULT_BINS
    passkey_digits: int = DEFAULT_DIGITS
    seed: int | str = 0


@dataclass(frozen=True)
class PasskeyInstance:
    id: str
    prompt: str
    passkey: str
    position_tokens: int
    context_tokens: int
    bin_index: int
    n_bins: int = DEFAULT_BINS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PasskeyInstance":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def _filler(rng: random.Random, min_chars: int) -> str:
    order = list(FILLER_SENTENCES)
    rng.shuffle(order)
    parts: list[str] = []
    size = 0
    i = 0
    while size < min_chars:
        s = order[i % len(order)] + " "
        parts.append(s)
        size += len(s)
        i += 1
    return "".join(parts)


def _cut_points(text: str) -> list[int]:
    """Offsets right after each space: cutting there never splits a word."""
    return [0] + [m.end() for m in re.finditer(" ", text)]


def _largest_cut(cuts: Sequence[int], fits) -> int:
    """Largest index into ``cuts`` whose prefix satisfies the monotone ``fits``."""
    lo, hi = 0, len(cuts) - 1
    if not fits(cuts[lo]):
        return -1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(cuts[mid]):
            lo = mid
        else:
            hi = mid - 1
    return lo


def generate_passkey_instance(
    cfg: PasskeyConfig, counter: TokenCounter | None = None, instance_id: str | None = None
) -> PasskeyInstance:
    """Build one passkey prompt with the key placed inside ``cfg.bin_index``.

    The layout is instruction, filler, passkey sentence, filler, question. The
    position is drawn uniformly (seeded) among the token offsets of the bin
    that leave room for the instruction before and the passkey sentence and
    question after.

    Raises:
        BinTooNarrow: no offset in the bin can host the passkey sentence.
    """
    counter = counter or ApproxTokenCounter()
    C, n_bins = cfg.context_tokens, cfg.n_bins
    if not 0 <= cfg.bin_index < n_bins:
        raise OutOfRange(f"bin {cfg.bin_index} outside [0, {n_bins})")
    if cfg.passkey_digits < 1:
        raise ValueError("passkey needs at least one digit")
    rng = random.Random(f"passkey:{cfg.seed}:{C}:{n_bins}:{cfg.bin_index}")
    passkey = "".join(rng.choice("0123456789") for _ in range(cfg.passkey_digits))
    sentence = PASSKEY_SENTENCE.format(passkey=passkey)

    head = counter.count(INSTRUCTION)
    tail = counter.count(sentence + QUESTION)
    bin_lo, bin_hi = bin_bounds(cfg.bin_index, C, n_bins)
    lo = max(bin_lo, head)
    hi = min(bin_hi, C - tail + 1)
    if lo >= hi:
        raise BinTooNarrow(
            f"bin {cfg.bin_index} [{bin_lo}, {bin_hi}) cannot host the passkey: "
            f"instruction needs {head} tokens before, sentence and question need {tail} after"
        )
    target = rng.randrange(lo, hi)

    filler = _filler(rng, 4 * C + 64)
    cuts = _cut_points(filler)

    # filler before the passkey: the prefix count must land in [lo, hi), closest to target
    i = _largest_cut(cuts, lambda c: counter.count(INSTRUCTION + filler[:c]) <= target)
    candidates = [j for j in (i, i + 1) if 0 <= j < len(cuts)]
    best = None
    for j in candidates:
        pos = counter.count(INSTRUCTION + filler[: cuts[j]])
        if lo <= pos < hi and (best is None or abs(pos - target) < abs(best[1] - target)):
            best = (j, pos)
    if best is None:
        raise BinTooNarrow(f"bin {cfg.bin_index}: no word boundary lands inside [{lo}, {hi})")
    j, position = best
    before = INSTRUCTION + filler[: cuts[j]]

    # filler after the passkey: continue the same stream and stop once the total reaches C
    rest = filler[cuts[j]:]
    rest_cuts = _cut_points(rest)
    k = max(0, _largest_cut(rest_cuts, lambda c: counter.count(before + sentence + rest[:c] + QUESTION) <= C))
    prompt = before + sentence + rest[: rest_cuts[k]] + QUESTION

    if prompt.count(passkey) != 1:
        raise LongContextError(f"passkey {passkey} collides with surrounding text")
    return PasskeyInstance(
        id=instance_id or f"passkey-{C}-b{cfg.bin_index:02d}-s{cfg.seed}",
        prompt=prompt,
        passkey=passkey,
        position_tokens=position,
        context_tokens=C,
        bin_index=bin_of(position, C, n_bins),
        n_bins=n_bins,
    )


def generate_suite(
    context_tokens: int,
    n_bins: int = DEFAULT_BINS,
    per_bin: int = DEFAULT_PER_BIN,
    passkey_digits: int = DEFAULT_DIGITS,
    seed: int = 0,
    counter: TokenCounter | None = None,
) -> list[PasskeyInstance]:
    counter = counter or ApproxTokenCounter()
    out = []
    for b in range(n_bins):
        for t in range(per_bin):
            cfg = PasskeyConfig(context_tokens, b, n_bins, passkey_digits, seed=f"{seed}:{t}")
            out.append(generate_passkey_instance(cfg, counter, f"passkey-{context_tokens}-b{b:02d}-t{t:03d}"))
    return out


def retrieved(passkey: str, response: str) -> bool:
    """True iff ``passkey`` appears in ``response`` as a whole digit run."""
    return re.search(rf"(?<!\d){re.escape(passkey)}(?!\d)", response) is not None


@dataclass
class BinReport:
    context_tokens: int
    n_bins: int
    correct: list = field(default_factory=list)
    counts: list = field(default_factory=list)

    @property
    def accuracies(self) -> list[float | None]:
        return [100 * c / n if n else None for c, n in zip(self.correct, self.counts)]

    @property
    def labels(self) -> list[str]:
        return [bin_label(b, self.context_tokens, self.n_bins) for b in range(self.n_bins)]

    def to_dict(self) -> dict:
        return {
            "context_tokens": self.context_tokens,
            "n_bins": self.n_bins,
            "bins": [
                {"bin": b, "label": label, "correct": c, "count": n, "accuracy": acc}
                for b, (label, c, n, acc) in enumerate(
                    zip(self.labels, self.correct, self.counts, self.accuracies)
                )
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self, label: str = "model") -> str:
        header = ["Model"] + self.labels
        row = [label] + ["-" if a is None else f"{a:g}" for a in self.accuracies]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in (header, row)) + "\n"


def score_retrieval(instances: Iterable[PasskeyInstance], responses: Mapping[str, str]) -> BinReport:
    instances = list(instances)
    if not instances:
        raise LongContextError("no instances to score")
    C, n_bins = instances[0].context_tokens, instances[0].n_bins
    if any(i.context_tokens != C or i.n_bins != n_bins for i in instances):
        raise LongContextError("instances mix different context lengths or bin counts")
    report = BinReport(C, n_bins, [0] * n_bins, [0] * n_bins)
    for inst in instances:
        if inst.id not in responses:
            raise MissingResponse(inst.id)
        report.counts[inst.bin_index] += 1
        report.correct[inst.bin_index] += int(retrieved(inst.passkey, responses[inst.id]))
    return report
