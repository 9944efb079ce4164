"""Derivation of non-function-call examples and balanced, ratio-mixed sampling."""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

from .codec import Decision, FunctionCall, FunctionDescription

NF_PROVENANCE = "non_function_call"


class SynthError(ValueError):
    pass


class NotAFunctionCallExample(SynthError):
    pass


class NoRemainingFunctions(SynthError):
    pass


class InsufficientPool(SynthError):
    def __init__(self, detail: str, language: str | None = None):
        self.language = language
        super().__init__(detail)


@dataclass(frozen=True)
class FCExample:
    functions: tuple
    query: str
    decision: Decision
    calls: tuple = ()
    answer: str | None = None
    language: str = "en"
    function_type: str = ""
    id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "calls", tuple(self.calls))
        if self.decision is Decision.USE_TOOL:
            if not self.calls:
                raise ValueError("a UseTool example needs at least one call")
            names = {f.name for f in self.functions}
            missing = [c.name for c in self.calls if c.name not in names]
            if missing:
                raise ValueError(f"called functions not offered: {missing}")
        elif self.calls:
            raise ValueError("an Answer example cannot carry calls")

    @property
    def called_names(self) -> set[str]:
        return {c.name for c in self.calls}

    def to_dict(self) -> dict:
        label: dict = {"decision": self.decision.value}
        if self.decision is Decision.USE_TOOL:
            label["calls"] = [c.to_dict() for c in self.calls]
        else:
            label["text"] = self.answer
        out: dict = {}
        if self.id is not None:
            out["id"] = self.id
        out.update(
            functions=[f.to_dict() for f in self.functions],
            query=self.query,
            label=label,
            language=self.language,
            function_type=self.function_type,
        )
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FCExample":
        label = data["label"]
        decision = Decision(label["decision"])
        calls = tuple(FunctionCall(c["name"], c.get("arguments", {})) for c in label.get("calls", []))
        return cls(
            functions=tuple(FunctionDescription.from_dict(f) for f in data["functions"]),
            query=data["query"],
            decision=decision,
            calls=calls,
            answer=label.get("text"),
            language=data.get("language", "en"),
            function_type=data.get("function_type", ""),
            id=data.get("id"),
            meta=dict(data.get("meta", {})),
        )


def derive_non_function_call(ex: FCExample) -> FCExample:
    """Turn a function-call example into one where no offered function applies.

    Every called function is dropped from the offered list; the query is kept
    and the label becomes a direct answer whose text is left empty for
    downstream labeling.
    """
    if ex.decision is not Decision.USE_TOOL:
        raise NotAFunctionCallExample(f"example {ex.id!r} is not a function-call example")
    called = ex.called_names
    remaining = tuple(f for f in ex.functions if f.name not in called)
    if not remaining:
        raise NoRemainingFunctions(f"example {ex.id!r}: removing {sorted(called)} leaves no functions")
    meta = dict(ex.meta)
    meta["derived"] = NF_PROVENANCE
    meta["removed_functions"] = sorted(called)
    if ex.id is not None:
        meta["source_id"] = ex.id
    return replace(
        ex,
        functions=remaining,
        decision=Decision.ANSWER,
        calls=(),
        answer="",
        id=None if ex.id is None else f"{ex.id}-nf",
        meta=meta,
    )


def balanced_quotas(supply: Mapping[str, int], k: int, order: Sequence[str]) -> dict[str, int]:
    """Hand out ``k`` slots one at a time, cycling through ``order`` and
    skipping types whose supply is used up."""
    if k > sum(supply.values()):
        raise InsufficientPool(f"asked for {k} examples from a pool of {sum(supply.values())}")
    quotas = {t: 0 for t in order}
    remaining = k
    while remaining:
        for t in order:
            if remaining and quotas[t] < supply[t]:
                quotas[t] += 1
                remaining -= 1
    return quotas


def balanced_sample(pool: Sequence[FCExample], k: int, seed: int | str) -> list[FCExample]:
    """Draw ``k`` examples spreading them as evenly as possible over function types."""
    if k < 0:
        raise ValueError("k must be non-negative")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, ex in enumerate(pool):
        groups[ex.function_type].append(i)
    rng = random.Random(seed)
    order = sorted(groups)
    rng.shuffle(order)
    quotas = balanced_quotas({t: len(v) for t, v in groups.items()}, k, order)
    picked: list[int] = []
    for t in order:
        picked.extend(rng.sample(groups[t], quotas[t]))
    rng.shuffle(picked)
    return [pool[i] for i in picked]


def apportion(k: int, weights: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment of ``k`` by ``weights``.

    Ties in the remainder go to the larger weight, then to the earlier name.
    """
    if any(w <= 0 for w in weights.values()):
        raise ValueError("weights must be positive")
    # via str so 0.1 means one tenth, not its binary approximation
    exact_w = {lang: Fraction(str(w)) for lang, w in weights.items()}
    total = sum(exact_w.values())
    exact = {lang: k * w / total for lang, w in exact_w.items()}
    counts = {lang: int(v) for lang, v in exact.items()}
    left = k - sum(counts.values())
    ranked = sorted(weights, key=lambda lang: (-(exact[lang] - counts[lang]), -weights[lang], lang))
    for lang in ranked[:left]:
        counts[lang] += 1
    return counts


def mix_by_ratio(
    pools: Mapping[str, Sequence[FCExample]],
    ratio: Mapping[str, float],
    k: int,
    seed: int | str,
) -> list[FCExample]:
    counts = apportion(k, ratio)
    out: list[FCExample] = []
    for lang in sorted(counts):
        pool = pools.get(lang, ())
        if counts[lang] > len(pool):
            raise InsufficientPool(
                f"language {lang!r} needs {counts[lang]} examples but has {len(pool)}", language=lang
            )
        out.extend(balanced_sample(pool, counts[lang], f"{seed}:{lang}"))
    return out
