"""Command-line entry point.

Exit codes: 0 success, 2 input/validation errors, 3 endpoint errors,
4 scoring anomalies.
"""

from __future__ import annotations

import argparse
import importlib
import importlib.util
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .client import CompletionClient, EndpointConfig
from .codec import (
    CodecError,
    conversation_from_dict,
    conversation_to_dict,
    output_to_dict,
    parse_assistant,
    parse_prompt,
    render_prompt,
    validate_conversation,
)
from .data_synth import FCExample, InsufficientPool, SynthError, balanced_sample, derive_non_function_call, mix_by_ratio
from .fc_eval import EvalError, evaluate, load_instances, load_jsonl, load_raw_outputs, parse_outputs
from .grammar import MatchLimitExceeded
from .longctx import LongContextError, PasskeyInstance, generate_suite, score_retrieval

log = logging.getLogger("breezekit")

EXIT_INPUT = 2
EXIT_ENDPOINT = 3
EXIT_SCORING = 4

MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        self.code = code
        super().__init__(message)


# ---------------------------------------------------------------------------
# helpers


def _read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _read_jsonl(path: str) -> list[dict]:
    try:
        return load_jsonl(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _out_dir(args: argparse.Namespace) -> Path:
    if not args.out_dir:
        raise CliError(f"{args.command} requires --out-dir")
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, args: argparse.Namespace, inputs: dict, outputs: list[str], extra: dict | None = None) -> Path:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command") and not callable(v)}
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", None),
        "config": config,
        "seed": args.seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_registry(spec: str) -> tuple[dict[str, Callable], bool]:
    """Load ``REGISTRY`` (and optional ``SERIAL``) from a ``.py`` file or module path."""
    try:
        if spec.endswith(".py"):
            mod_spec = importlib.util.spec_from_file_location("breezekit_registry", spec)
            if mod_spec is None or mod_spec.loader is None:
                raise ImportError(f"cannot load {spec}")
            module = importlib.util.module_from_spec(mod_spec)
            mod_spec.loader.exec_module(module)
        else:
            module = importlib.import_module(spec)
    except (ImportError, OSError, SyntaxError) as exc:
        raise CliError(f"cannot load registry {spec}: {exc}") from None
    registry = getattr(module, "REGISTRY", None)
    if not isinstance(registry, dict):
        raise CliError(f"registry {spec} does not define a REGISTRY dict")
    return registry, bool(getattr(module, "SERIAL", False))


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(args: argparse.Namespace) -> int:
    try:
        conv = conversation_from_dict(_read_json(args.conversation))
    except CodecError as exc:
        raise CliError(str(exc)) from None
    violations = validate_conversation(conv)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return EXIT_INPUT
    prompt = render_prompt(conv, append_generation_header=args.generation_header)
    if args.out_dir:
        out = _out_dir(args)
        (out / "prompt.txt").write_bytes(prompt.encode("utf-8"))
        write_manifest(out, args, {"conversation": args.conversation}, ["prompt.txt"])
    else:
        sys.stdout.buffer.write(prompt.encode("utf-8"))
        sys.stdout.flush()
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        conv = conversation_from_dict(_read_json(args.conversation))
    except CodecError as exc:
        raise CliError(str(exc)) from None
    violations = validate_conversation(conv)
    for v in violations:
        print(v, file=sys.stderr)
    if not violations and not args.quiet:
        print("ok")
    return EXIT_INPUT if violations else 0


def cmd_parse(args: argparse.Namespace) -> int:
    try:
        with open(args.input, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc}") from None
    try:
        if args.prompt:
            conv, open_header = parse_prompt(raw)
            result = conversation_to_dict(conv)
            result["generation_header"] = open_header
        else:
            result = output_to_dict(parse_assistant(raw, args.functions_present))
    except CodecError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, ensure_ascii=False, indent=2))
    return 0


def cmd_eval_fc(args: argparse.Namespace) -> int:
    try:
        instances = load_instances(args.instances)
    except (OSError, ValueError, KeyError, CodecError) as exc:
        raise CliError(f"cannot load instances from {args.instances}: {exc}") from None
    ids = [i.id for i in instances]
    if len(set(ids)) != len(ids):
        raise CliError("instance ids are not unique")

    out = _out_dir(args)
    outputs_written = []
    if args.endpoint:
        cfg = EndpointConfig(
            base_url=args.endpoint,
            path=args.endpoint_path,
            max_retries=args.max_retries,
            max_in_flight=args.max_in_flight,
            timeout=args.timeout,
            max_new_tokens=args.max_new_tokens,
        )
        try:
            prompts = [inst.prompt() for inst in instances]
        except CodecError as exc:
            raise CliError(f"cannot render instance prompts: {exc}") from None
        with CompletionClient(cfg) as client:
            results = client.run_batch(prompts)
        failed = [(inst.id, r.error) for inst, r in zip(instances, results) if not r.ok]
        raw = {inst.id: r.completion.text for inst, r in zip(instances, results) if r.ok}
        _write_jsonl(out / "outputs.jsonl", ({"id": i, "output": raw[i]} for i in ids if i in raw))
        outputs_written.append("outputs.jsonl")
        if failed:
            for iid, err in failed:
                print(f"endpoint error for {iid}: {err}", file=sys.stderr)
            write_manifest(out, args, {"instances": args.instances}, outputs_written, {"endpoint_failures": len(failed)})
            return EXIT_ENDPOINT
    elif args.outputs:
        try:
            raw = load_raw_outputs(args.outputs)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load outputs from {args.outputs}: {exc}") from None
    else:
        raise CliError("eval-fc needs --outputs or --endpoint")

    missing = [i for i in ids if i not in raw]
    if missing:
        raise CliError(f"missing output for instance {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))

    registry, serial = (None, True)
    if args.registry:
        registry, serial = load_registry(args.registry)
    parsed = parse_outputs(raw, instances)
    try:
        report = evaluate(instances, parsed, registry, max_workers=1 if serial else args.workers)
    except MatchLimitExceeded as exc:
        print(f"scoring anomaly: {exc}", file=sys.stderr)
        return EXIT_SCORING
    except EvalError as exc:
        print(f"scoring anomaly: {exc}", file=sys.stderr)
        return EXIT_SCORING

    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = report.table(args.label)
    (out / "table.txt").write_text(table, encoding="utf-8")
    outputs_written += ["report.json", "table.txt"]
    inputs = {"instances": args.instances}
    if args.outputs:
        inputs["outputs"] = args.outputs
    if args.registry:
        inputs["registry"] = args.registry
    write_manifest(out, args, inputs, outputs_written)
    if not args.quiet:
        print(table, end="")
    return 0


def _load_examples(path: str) -> list[FCExample]:
    try:
        return [FCExample.from_dict(row) for row in _read_jsonl(path)]
    except (KeyError, ValueError, CodecError) as exc:
        raise CliError(f"bad example in {path}: {exc}") from None


def cmd_gen_nf(args: argparse.Namespace) -> int:
    examples = _load_examples(args.input)
    out = _out_dir(args)
    derived, skipped = [], []
    for n, ex in enumerate(examples):
        try:
            derived.append(derive_non_function_call(ex))
        except SynthError as exc:
            skipped.append({"line": n + 1, "id": ex.id, "reason": f"{type(exc).__name__}: {exc}"})
    _write_jsonl(out / "nf.jsonl", (d.to_dict() for d in derived))
    write_manifest(out, args, {"input": args.input}, ["nf.jsonl"], {"derived": len(derived), "skipped": skipped})
    if not args.quiet:
        print(f"derived {len(derived)} examples, skipped {len(skipped)}", file=sys.stderr)
    return 0


def _parse_ratio(text: str) -> dict[str, float]:
    ratio = {}
    for part in text.split(","):
        lang, sep, weight = part.partition("=")
        if not sep:
            raise CliError(f"bad ratio entry {part!r}; expected lang=weight")
        try:
            ratio[lang.strip()] = float(weight)
        except ValueError:
            raise CliError(f"bad weight in {part!r}") from None
    return ratio


def cmd_sample(args: argparse.Namespace) -> int:
    pool = _load_examples(args.input)
    out = _out_dir(args)
    try:
        if args.ratio:
            pools: dict[str, list[FCExample]] = {}
            for ex in pool:
                pools.setdefault(ex.language, []).append(ex)
            picked = mix_by_ratio(pools, _parse_ratio(args.ratio), args.k, args.seed)
        else:
            picked = balanced_sample(pool, args.k, args.seed)
    except InsufficientPool as exc:
        raise CliError(str(exc)) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _write_jsonl(out / "sample.jsonl", (p.to_dict() for p in picked))
    write_manifest(out, args, {"input": args.input}, ["sample.jsonl"])
    return 0


def cmd_gen_passkey(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    try:
        instances = generate_suite(args.context, args.bins, args.per_bin, args.digits, args.seed)
    except LongContextError as exc:
        raise CliError(str(exc)) from None
    _write_jsonl(out / "instances.jsonl", (i.to_dict() for i in instances))
    write_manifest(out, args, {}, ["instances.jsonl"], {"instances": len(instances)})
    return 0


def cmd_score_passkey(args: argparse.Namespace) -> int:
    try:
        instances = [PasskeyInstance.from_dict(r) for r in _read_jsonl(args.instances)]
        responses = {str(r["id"]): r["response"] for r in _read_jsonl(args.responses)}
    except (KeyError, TypeError) as exc:
        raise CliError(f"bad passkey input: {exc}") from None
    out = _out_dir(args)
    try:
        report = score_retrieval(instances, responses)
    except LongContextError as exc:
        raise CliError(str(exc)) from None
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = report.table(args.label)
    (out / "table.txt").write_text(table, encoding="utf-8")
    write_manifest(out, args, {"instances": args.instances, "responses": args.responses}, ["report.json", "table.txt"])
    if not args.quiet:
        print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for outputs and the run manifest")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="breezekit", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render a conversation JSON into a prompt")
    p.add_argument("conversation")
    p.add_argument("--generation-header", action="store_true", help="end with an open assistant header")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("validate", parents=[common], help="report conversation rule breaches")
    p.add_argument("conversation")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("parse", parents=[common], help="parse an assistant generation (or a whole prompt)")
    p.add_argument("input")
    p.add_argument("--functions-present", action="store_true", help="expect a leading decision token")
    p.add_argument("--prompt", action="store_true", help="input is a full rendered prompt")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval-fc", parents=[common], help="score function-calling outputs")
    p.add_argument("--instances", required=True)
    p.add_argument("--outputs", help='JSONL of {"id", "output"} raw generations')
    p.add_argument("--endpoint", help="base URL of a text-completion endpoint")
    p.add_argument("--endpoint-path", default="/completions")
    p.add_argument("--registry", help="python file or module defining REGISTRY for executable scoring")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--max-new-tokens", type=int, default=512)
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--workers", type=int, default=1, help="parallel executable scoring unless the registry is SERIAL")
    p.add_argument("--label", default="model", help="row label in the table")
    p.set_defaults(func=cmd_eval_fc)

    p = sub.add_parser("gen-nf", parents=[common], help="derive non-function-call examples")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_gen_nf)

    p = sub.add_parser("sample", parents=[common], help="balanced / ratio-mixed sampling")
    p.add_argument("--input", required=True)
    p.add_argument("-k", "--k", type=int, required=True)
    p.add_argument("--ratio", help="language weights, e.g. en=9,zh-tw=1")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gen-passkey", parents=[common], help="generate passkey retrieval instances")
    p.add_argument("--context", type=int, required=True, help="target context length in tokens")
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--per-bin", type=int, default=20)
    p.add_argument("--digits", type=int, default=6)
    p.set_defaults(func=cmd_gen_passkey)

    p = sub.add_parser("score-passkey", parents=[common], help="score passkey responses per bin")
    p.add_argument("--instances", required=True)
    p.add_argument("--responses", required=True, help='JSONL of {"id", "response"}')
    p.add_argument("--label", default="model")
    p.set_defaults(func=cmd_score_passkey)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", 0), ("out_dir", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
