"""Function-calling metrics: AST accuracy, executable accuracy, relevance detection."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping, Sequence

from .codec import (
    ANSWER,
    PYTHON_TAG,
    USE_TOOL,
    AssistantOutput,
    Conversation,
    Decision,
    FunctionDescription,
    Text,
    UserTurn,
    parse_assistant_lenient,
    render_prompt,
    serialize_calls,
)
from .grammar import (
    AnswerSpec,
    CallExpr,
    ProblemType,
    ast_match,
    calls_from_outputs,
    canonical_value,
    find_assignment,
    values_match,
)

log = logging.getLogger(__name__)

CATEGORY_ORDER = (
    ProblemType.SIMPLE,
    ProblemType.MULTIPLE,
    ProblemType.PARALLEL,
    ProblemType.PARALLEL_MULTIPLE,
)


class EvalError(Exception):
    pass


class RelevanceInstance(EvalError):
    pass


class MissingOutput(EvalError):
    def __init__(self, instance_id: str):
        self.instance_id = instance_id
        super().__init__(f"no output for instance {instance_id!r}")


class EmptyRun(EvalError):
    pass


class UnknownFunction(EvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"function {name!r} is not in the registry")


class ExecutionFault(EvalError):
    def __init__(self, name: str, detail: str):
        self.name = name
        self.detail = detail
        super().__init__(f"{name} failed: {detail}")


@dataclass(frozen=True)
class EvalInstance:
    id: str
    functions: tuple
    query: str
    target: tuple = ()
    expected_results: list | None = None
    problem_type: ProblemType | None = None
    system_text: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "functions", tuple(self.functions))
        object.__setattr__(self, "target", tuple(self.target))

    @property
    def is_relevance(self) -> bool:
        return not self.target

    @property
    def is_executable(self) -> bool:
        return bool(self.target) and self.expected_results is not None

    def conversation(self) -> Conversation:
        return Conversation(
            (UserTurn((Text(self.query),)),),
            system_text=self.system_text,
            functions=self.functions or None,
        )

    def prompt(self) -> str:
        return render_prompt(self.conversation(), append_generation_header=True)

    def to_dict(self) -> dict:
        out: dict = {
            "id": self.id,
            "functions": [f.to_dict() for f in self.functions],
            "query": self.query,
            "target": [t.to_dict() for t in self.target],
        }
        if self.expected_results is not None:
            out["expected_results"] = self.expected_results
        if self.problem_type is not None:
            out["problem_type"] = self.problem_type.value
        if self.system_text is not None:
            out["system"] = self.system_text
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EvalInstance":
        ptype = data.get("problem_type")
        return cls(
            id=str(data["id"]),
            functions=tuple(FunctionDescription.from_dict(f) for f in data.get("functions", [])),
            query=data.get("query", ""),
            target=tuple(AnswerSpec.from_dict(t) for t in data.get("target", [])),
            expected_results=data.get("expected_results"),
            problem_type=ProblemType(ptype) if ptype else None,
            system_text=data.get("system"),
        )


def classify(instance: EvalInstance) -> ProblemType:
    """Category from (#provided functions) x (#expected calls)."""
    if instance.is_relevance:
        raise RelevanceInstance(f"instance {instance.id!r} has no target calls")
    many_functions = len(instance.functions) > 1
    many_calls = len(instance.target) > 1
    if many_calls:
        return ProblemType.PARALLEL_MULTIPLE if many_functions else ProblemType.PARALLEL
    return ProblemType.MULTIPLE if many_functions else ProblemType.SIMPLE


def category_of(instance: EvalInstance) -> ProblemType:
    return instance.problem_type or classify(instance)


def canonical_output(instance: EvalInstance) -> str:
    """The generation a perfect model would produce for ``instance``."""
    if instance.is_relevance:
        return ANSWER
    calls = [spec.canonical_call().to_function_call() for spec in instance.target]
    return USE_TOOL + PYTHON_TAG + serialize_calls(calls)


# ---------------------------------------------------------------------------
# Counters


@dataclass
class Cell:
    correct: int = 0
    total: int = 0

    @property
    def fraction(self) -> Fraction:
        if not self.total:
            raise EmptyRun("empty cell")
        return Fraction(self.correct, self.total)

    @property
    def percent(self) -> float:
        return float(100 * self.fraction)

    def add(self, ok: bool) -> None:
        self.total += 1
        self.correct += int(ok)


@dataclass
class CategoryScores:
    cells: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def record(self, ptype: ProblemType, instance_id: str, ok: bool, reason: str = "") -> None:
        self.cells.setdefault(ptype, Cell()).add(ok)
        if not ok:
            self.failures[instance_id] = reason

    @property
    def pooled(self) -> Cell:
        return Cell(sum(c.correct for c in self.cells.values()), sum(c.total for c in self.cells.values()))

    def accuracy(self, ptype: ProblemType) -> float:
        return self.cells[ptype].percent


def _output_for(outputs: Mapping[str, AssistantOutput], instance: EvalInstance) -> AssistantOutput:
    try:
        return outputs[instance.id]
    except KeyError:
        raise MissingOutput(instance.id) from None


def score_ast(instances: Iterable[EvalInstance], outputs: Mapping[str, AssistantOutput]) -> CategoryScores:
    """An instance counts as correct iff the decision is UseTool and the calls
    structurally match the target specs."""
    scores = CategoryScores()
    for inst in instances:
        out = _output_for(outputs, inst)
        ptype = category_of(inst)
        if out.decision is not Decision.USE_TOOL:
            scores.record(ptype, inst.id, False, out.error or "no tool call")
            continue
        ok = ast_match(calls_from_outputs(out.calls), list(inst.target), ptype)
        scores.record(ptype, inst.id, ok, "" if ok else "calls do not match target")
    return scores


def execute_call(registry: Mapping[str, Callable], call: CallExpr) -> Any:
    try:
        fn = registry[call.name]
    except KeyError:
        raise UnknownFunction(call.name) from None
    try:
        return fn(**call.arguments)
    except Exception as exc:
        raise ExecutionFault(call.name, f"{type(exc).__name__}: {exc}") from exc


def _normalize_result(value: Any) -> Any:
    if isinstance(value, tuple):
        value = list(value)
    return canonical_value(value)


def results_match(actual: Sequence[Any], expected: Sequence[Any], ordered: bool) -> bool:
    """Compare call results as a sequence (ordered) or a multiset."""
    if len(actual) != len(expected):
        return False
    actual = [_normalize_result(v) for v in actual]
    expected = [_normalize_result(v) for v in expected]
    if ordered:
        return all(values_match(a, e) for a, e in zip(actual, expected))
    return find_assignment(len(actual), lambda i, j: values_match(actual[i], expected[j])) is not None


def _exec_one(inst: EvalInstance, out: AssistantOutput, registry: Mapping[str, Callable]) -> tuple[bool, str]:
    if out.decision is not Decision.USE_TOOL:
        return False, out.error or "no tool call"
    try:
        results = [execute_call(registry, c) for c in calls_from_outputs(out.calls)]
    except (UnknownFunction, ExecutionFault) as exc:
        return False, str(exc)
    ok = results_match(results, inst.expected_results or [], ordered=not category_of(inst).is_parallel)
    return ok, "" if ok else f"results {results!r} != expected {inst.expected_results!r}"


def score_exec(
    instances: Iterable[EvalInstance],
    outputs: Mapping[str, AssistantOutput],
    registry: Mapping[str, Callable],
    max_workers: int = 1,
) -> CategoryScores:
    """Execute each candidate call against ``registry`` and compare results.

    Unknown functions and exceptions raised by registry functions mark the
    instance incorrect; the run continues.
    """
    instances = list(instances)
    pairs = [(inst, _output_for(outputs, inst)) for inst in instances]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            verdicts = list(pool.map(lambda p: _exec_one(p[0], p[1], registry), pairs))
    else:
        verdicts = [_exec_one(inst, out, registry) for inst, out in pairs]
    scores = CategoryScores()
    for (inst, _), (ok, reason) in zip(pairs, verdicts):
        scores.record(category_of(inst), inst.id, ok, reason)
    return scores


def score_relevance(instances: Iterable[EvalInstance], outputs: Mapping[str, AssistantOutput]) -> Cell:
    cell = Cell()
    for inst in instances:
        if not inst.is_relevance:
            raise ValueError(f"instance {inst.id!r} has target calls; not a relevance instance")
        out = _output_for(outputs, inst)
        cell.add(not out.emitted_call)
    return cell


# ---------------------------------------------------------------------------
# Report


def display_percent(value: Fraction) -> int:
    """Whole-percent display value of a ratio, rounding half up."""
    exact = Decimal(value.numerator * 100) / Decimal(value.denominator)
    return int(exact.quantize(Decimal(1), ROUND_HALF_UP))


@dataclass
class EvalReport:
    ast: dict = field(default_factory=dict)
    exec: dict = field(default_factory=dict)
    relevance: Cell | None = None
    failures: dict = field(default_factory=dict)

    def all_cells(self) -> list[Cell]:
        cells = list(self.ast.values()) + list(self.exec.values())
        if self.relevance is not None:
            cells.append(self.relevance)
        return cells

    @property
    def overall(self) -> Cell:
        cells = self.all_cells()
        return Cell(sum(c.correct for c in cells), sum(c.total for c in cells))

    @property
    def overall_fraction(self) -> Fraction:
        return self.overall.fraction * 100

    def to_dict(self) -> dict:
        def cells(d: dict) -> dict:
            return {
                p.value: {"correct": c.correct, "total": c.total, "accuracy": c.percent}
                for p, c in sorted(d.items(), key=lambda kv: CATEGORY_ORDER.index(kv[0]))
            }

        overall = self.overall
        out = {
            "overall": {
                "correct": overall.correct,
                "total": overall.total,
                "accuracy": overall.percent,
                "display": display_percent(overall.fraction),
            },
            "ast": cells(self.ast),
            "exec": cells(self.exec),
            "relevance": None,
            "failures": dict(sorted(self.failures.items())),
        }
        if self.relevance is not None:
            out["relevance"] = {
                "correct": self.relevance.correct,
                "total": self.relevance.total,
                "accuracy": self.relevance.percent,
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        def cells(d: dict) -> dict:
            return {ProblemType(k): Cell(v["correct"], v["total"]) for k, v in d.items()}

        rel = data.get("relevance")
        return cls(
            ast=cells(data.get("ast", {})),
            exec=cells(data.get("exec", {})),
            relevance=Cell(rel["correct"], rel["total"]) if rel else None,
            failures=dict(data.get("failures", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=False) + "\n"

    def table(self, label: str = "model") -> str:
        """Text table with the leaderboard column order:
        Overall | AST S. M. P. P.M. | Exec S. M. P. P.M. | Relevance."""

        def fmt(cell: Cell | None) -> str:
            return "-" if cell is None or not cell.total else str(display_percent(cell.fraction))

        header1 = ["", "Overall", "AST Accuracy", "", "", "", "Executable Accuracy", "", "", "", "Relevance"]
        header2 = ["", "Accuracy"] + [p.short for p in CATEGORY_ORDER] * 2 + ["Detection"]
        row = [label, fmt(self.overall)]
        row += [fmt(self.ast.get(p)) for p in CATEGORY_ORDER]
        row += [fmt(self.exec.get(p)) for p in CATEGORY_ORDER]
        row.append(fmt(self.relevance))
        widths = [max(len(r[i]) for r in (header1, header2, row)) for i in range(len(row))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in (header1, header2, row)]
        return "\n".join(lines) + "\n"


def aggregate_report(
    ast: CategoryScores | None = None,
    exec: CategoryScores | None = None,
    relevance: Cell | None = None,
) -> EvalReport:
    report = EvalReport(
        ast=dict(ast.cells) if ast else {},
        exec=dict(exec.cells) if exec else {},
        relevance=relevance if relevance is not None and relevance.total else None,
    )
    for scores in (ast, exec):
        if scores:
            report.failures.update(scores.failures)
    if not report.overall.total:
        raise EmptyRun("nothing was scored")
    return report


def evaluate(
    instances: Sequence[EvalInstance],
    outputs: Mapping[str, AssistantOutput],
    registry: Mapping[str, Callable] | None = None,
    max_workers: int = 1,
) -> EvalReport:
    """Route each instance to exactly one scorer and build the report.

    Instances with ``expected_results`` are executable; those without a target
    are relevance instances; the rest are scored structurally.
    """
    ast_set = [i for i in instances if not i.is_relevance and not i.is_executable]
    exec_set = [i for i in instances if i.is_executable]
    rel_set = [i for i in instances if i.is_relevance]
    for inst in instances:
        _output_for(outputs, inst)
    if exec_set and registry is None:
        raise EvalError(f"{len(exec_set)} executable instances but no function registry")
    ast = score_ast(ast_set, outputs) if ast_set else None
    exe = score_exec(exec_set, outputs, registry or {}, max_workers) if exec_set else None
    rel = score_relevance(rel_set, outputs) if rel_set else None
    report = aggregate_report(ast, exe, rel)
    if rel is not None:
        for inst in rel_set:
            if outputs[inst.id].emitted_call:
                report.failures[inst.id] = "called a function on an irrelevant query"
    return report


def parse_outputs(raw: Mapping[str, str], instances: Sequence[EvalInstance]) -> dict[str, AssistantOutput]:
    """Parse raw generations; unparseable ones are kept with ``error`` set."""
    by_id = {i.id: i for i in instances}
    out = {}
    for iid, text in raw.items():
        inst = by_id.get(iid)
        functions_present = bool(inst.functions) if inst is not None else True
        out[iid] = parse_assistant_lenient(text, functions_present)
    return out


def load_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def load_instances(path) -> list[EvalInstance]:
    return [EvalInstance.from_dict(row) for row in load_jsonl(path)]


def load_raw_outputs(path) -> dict[str, str]:
    """Read ``{"id": ..., "output": raw_generation}`` lines."""
    return {str(row["id"]): row["output"] for row in load_jsonl(path)}
