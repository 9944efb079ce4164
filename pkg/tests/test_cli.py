import json
import subprocess
import sys

import pytest

from breezekit.cli import main
from breezekit.codec import Decision, FunctionCall, FunctionDescription
from breezekit.data_synth import FCExample
from breezekit.fc_eval import canonical_output, load_instances
from helpers import FIXTURES

GOLDEN = sorted((FIXTURES / "golden").glob("*.json"))
FC = FIXTURES / "fc"


def read_jsonl(path):
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


@pytest.mark.parametrize("golden", GOLDEN[:3], ids=lambda p: p.stem)
def test_render_stdout_matches_golden(golden):
    header = json.loads(golden.read_text(encoding="utf-8")).get("generation_header", False)
    argv = [sys.executable, "-m", "breezekit", "render", str(golden)] + (["--generation-header"] if header else [])
    proc = subprocess.run(argv, capture_output=True, check=True)
    assert proc.stdout == golden.with_suffix(".txt").read_bytes()


def test_render_to_out_dir(tmp_path):
    golden = GOLDEN[0]
    header = json.loads(golden.read_text(encoding="utf-8")).get("generation_header", False)
    argv = ["render", str(golden), "--out-dir", str(tmp_path)] + (["--generation-header"] if header else [])
    assert main(argv) == 0
    assert (tmp_path / "prompt.txt").read_bytes() == golden.with_suffix(".txt").read_bytes()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "render" and manifest["outputs"] == ["prompt.txt"]
    assert {"argv", "config", "seed", "inputs", "tool_version", "timestamp"} <= set(manifest)


def test_validate_invalid_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"turns": [{"role": "assistant", "content": "hi"}]}))
    assert main(["validate", str(bad)]) == 2
    assert "FirstTurnNotUser" in capsys.readouterr().err
    assert main(["render", str(bad)]) == 2


def test_validate_ok(capsys):
    assert main(["validate", str(GOLDEN[0])]) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_parse_generation(tmp_path, capsys):
    gen = tmp_path / "gen.txt"
    gen.write_text('<|use_tool|><|python_tag|>[{"name":"f","arguments":{"a":1}}]')
    assert main(["parse", str(gen), "--functions-present"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["decision"] == "use_tool" and out["calls"] == [{"name": "f", "arguments": {"a": 1}}]
    gen.write_text("<|use_tool|><|python_tag|>[oops")
    assert main(["parse", str(gen), "--functions-present"]) == 2


def test_parse_prompt(capsys):
    txt = GOLDEN[-1].with_suffix(".txt")
    assert main(["parse", str(txt), "--prompt"]) == 0
    assert json.loads(capsys.readouterr().out)["turns"]


def canonical_outputs(path):
    instances = load_instances(FC / "e2e_instances.jsonl")
    write_jsonl(path, [{"id": i.id, "output": canonical_output(i)} for i in instances])


def test_eval_fc_from_outputs(tmp_path):
    outputs = tmp_path / "outputs.jsonl"
    canonical_outputs(outputs)
    out = tmp_path / "run"
    argv = ["eval-fc", "--instances", str(FC / "e2e_instances.jsonl"), "--outputs", str(outputs),
            "--registry", str(FC / "registry.py"), "--out-dir", str(out), "--quiet"]
    assert main(argv) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["overall"]["display"] == 100
    assert (out / "table.txt").exists() and (out / "manifest.json").exists()


def test_eval_fc_missing_output(tmp_path, capsys):
    outputs = tmp_path / "outputs.jsonl"
    canonical_outputs(outputs)
    rows = read_jsonl(outputs)
    write_jsonl(outputs, rows[1:])
    argv = ["eval-fc", "--instances", str(FC / "e2e_instances.jsonl"), "--outputs", str(outputs),
            "--registry", str(FC / "registry.py"), "--out-dir", str(tmp_path / "run")]
    assert main(argv) == 2
    assert f"missing output for instance {rows[0]['id']}" in capsys.readouterr().err


def test_eval_fc_executable_without_registry_is_scoring_anomaly(tmp_path):
    outputs = tmp_path / "outputs.jsonl"
    canonical_outputs(outputs)
    argv = ["eval-fc", "--instances", str(FC / "e2e_instances.jsonl"), "--outputs", str(outputs),
            "--out-dir", str(tmp_path / "run")]
    assert main(argv) == 4


def test_eval_fc_endpoint_down(tmp_path):
    argv = ["eval-fc", "--instances", str(FC / "e2e_instances.jsonl"), "--endpoint", "http://127.0.0.1:9",
            "--max-retries", "0", "--timeout", "2", "--out-dir", str(tmp_path / "run"), "--quiet"]
    assert main(argv) == 3


def examples():
    fns = [FunctionDescription(n, n) for n in ("A", "B", "C")]
    rows = []
    for i in range(12):
        called = fns[i % 3].name
        offered = fns if i % 4 else fns[i % 3:i % 3 + 1]
        rows.append(FCExample(tuple(offered), f"q{i}", Decision.USE_TOOL, (FunctionCall(called, {}),),
                              language="zh-tw" if i % 3 == 0 else "en", function_type=f"t{i % 2}", id=f"e{i}"))
    return rows


def test_gen_nf(tmp_path):
    src = tmp_path / "in.jsonl"
    write_jsonl(src, [e.to_dict() for e in examples()])
    out = tmp_path / "run"
    assert main(["gen-nf", "--input", str(src), "--out-dir", str(out), "--quiet"]) == 0
    rows = read_jsonl(out / "nf.jsonl")
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(rows) + len(manifest["skipped"]) == 12 and manifest["skipped"]
    sources = {e.id: e for e in examples()}
    for row in rows:
        src_ex = sources[row["meta"]["source_id"]]
        names = {f["name"] for f in row["functions"]}
        assert not names & src_ex.called_names
        assert row["label"] == {"decision": "answer", "text": ""}


def test_sample_with_ratio(tmp_path):
    src = tmp_path / "in.jsonl"
    write_jsonl(src, [e.to_dict() for e in examples()])
    out = tmp_path / "run"
    assert main(["sample", "--input", str(src), "-k", "6", "--ratio", "en=2,zh-tw=1", "--out-dir", str(out), "--seed", "3"]) == 0
    langs = [r["language"] for r in read_jsonl(out / "sample.jsonl")]
    assert sorted(langs) == ["en"] * 4 + ["zh-tw"] * 2
    assert main(["sample", "--input", str(src), "-k", "99", "--out-dir", str(out)]) == 2


def test_passkey_round_trip_and_reruns(tmp_path):
    runs = []
    for n in range(2):
        out = tmp_path / f"gen{n}"
        assert main(["gen-passkey", "--context", "1280", "--bins", "16", "--per-bin", "5", "--seed", "7", "--out-dir", str(out)]) == 0
        runs.append((out / "instances.jsonl").read_bytes())
    assert runs[0] == runs[1]
    instances = read_jsonl(tmp_path / "gen0" / "instances.jsonl")
    assert len(instances) == 80
    responses = tmp_path / "responses.jsonl"
    write_jsonl(responses, [{"id": i["id"], "response": f" {i['passkey']}."} for i in instances])
    out = tmp_path / "score"
    assert main(["score-passkey", "--instances", str(tmp_path / "gen0" / "instances.jsonl"),
                 "--responses", str(responses), "--out-dir", str(out), "--quiet"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [b["accuracy"] for b in report["bins"]] == [100.0] * 16


def test_commands_needing_out_dir(capsys):
    assert main(["gen-passkey", "--context", "1280"]) == 2
    assert "--out-dir" in capsys.readouterr().err
