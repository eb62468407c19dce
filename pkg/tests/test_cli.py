import hashlib
import subprocess
import sys

import pytest

from iotshield.cli import build_parser, main
from iotshield.evalkit import parse_report

from conftest import run_pipeline, tree_bytes


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli") / "run")


def test_synth_same_seed_identical_trees(tmp_path, monkeypatch):
    trees = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(["synth", "--out", "dir", "--seed", "7"]) == 0
        trees.append(tree_bytes(tmp_path / name))
    assert set(trees[0]) == {"dir/flows.csv", "dir/telemetry.csv", "dir/scenario_meta.txt", "dir/run_meta.txt"}
    assert trees[0] == trees[1]


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--out", "x", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    assert main(["train"]) == 1
    assert "--features" in capsys.readouterr().err


def test_no_subcommand():
    assert main([]) == 1


def test_bad_flow_file_is_data_error(tmp_path, capsys):
    (tmp_path / "flows.csv").write_text("timestamp,src_device\n1.0,a\n")
    assert main(["extract", "--flows", str(tmp_path / "flows.csv"), "--out", str(tmp_path / "f")]) == 2
    assert "missing column" in capsys.readouterr().err


def test_corrupt_model_is_data_error(tmp_path, pipeline):
    (tmp_path / "m.bin").write_bytes(b"CDNA\x01\x00garbage")
    argv = ["predict", "--model", str(tmp_path / "m.bin"), "--features", str(pipeline / "features/test.csv")]
    assert main(argv) == 2


def test_invalid_flag_value_is_usage_error(pipeline, tmp_path):
    argv = ["detect", "--forest", str(pipeline / "quantized.bin"), "--ae", str(pipeline / "ae.bin"),
            "--features", str(pipeline / "features/test.csv"), "--out", str(tmp_path / "d"),
            "--rf-threshold", "1.5"]
    assert main(argv) == 1


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and "synth" in a.choices)
    expected = {"synth", "extract", "train", "prune", "quantize", "ae-train", "detect", "evaluate", "bench",
                "predict", "ae-score"}
    assert set(sub.choices) == expected
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text
            assert action.help, f"{name}: {action.dest} has no help text"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "iotshield", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout


class TestPipeline:
    def test_report_has_accuracy(self, pipeline):
        meta, results = parse_report(pipeline / "report.txt")
        assert [r.name for r in results] == ["detector", "float", "quantized"]
        assert all(r.accuracy is not None and 0.9 < r.accuracy <= 1.0 for r in results)

    def test_every_stage_writes_run_meta(self, pipeline):
        metas = sorted(str(p.relative_to(pipeline)) for p in pipeline.rglob("*run_meta.txt"))
        assert metas == ["ae.run_meta.txt", "detect/run_meta.txt", "features/run_meta.txt",
                         "forest.run_meta.txt", "pruned.run_meta.txt", "quantized.run_meta.txt",
                         "report.run_meta.txt", "synth/run_meta.txt"]
        for path in metas:
            lines = dict(line.split("=", 1) for line in (pipeline / path).read_text().splitlines())
            assert lines["seed"] == "42"
            assert len(lines["config_fingerprint"]) == 16
            assert "package_version" in lines

    def test_predict_and_ae_score(self, pipeline, tmp_path, capsys):
        features = str(pipeline / "features/test.csv")
        assert main(["predict", "--model", str(pipeline / "quantized.bin"), "--features", features]) == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert len(rows) == 1801
        assert main(["ae-score", "--model", str(pipeline / "ae.bin"), "--features", features,
                     "--out", str(tmp_path / "s.csv")]) == 0
        assert len((tmp_path / "s.csv").read_text().splitlines()) == 1801
        assert (tmp_path / "s.run_meta.txt").exists()

    def test_bench(self, pipeline, tmp_path):
        out = tmp_path / "bench.txt"
        assert main(["bench", "--forest", str(pipeline / "pruned.bin"), "--quantized",
                     str(pipeline / "quantized.bin"), "--features", str(pipeline / "features/test.csv"),
                     "--repetitions", "3", "--limit", "200", "--out", str(out)]) == 0
        _, results = parse_report(out)
        assert {r.name for r in results} == {"float", "quantized"}
        assert all(r.latency_p50_us > 0 for r in results)
        sizes = {r.name: (r.model_size_bytes, r.quantized_size_bytes) for r in results}
        assert sizes["float"][0] == (pipeline / "pruned.bin").stat().st_size

    def test_inputs_not_mutated(self, pipeline, tmp_path):
        inputs = [pipeline / "pruned.bin", pipeline / "features/validation.csv"]
        before = [hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs]
        assert main(["prune", "--model", str(inputs[0]), "--validation", str(inputs[1]),
                     "--out", str(tmp_path / "again.bin")]) == 0
        assert [hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs] == before

    def test_flows_input_for_detect(self, pipeline, tmp_path):
        argv = ["detect", "--forest", str(pipeline / "pruned.bin"), "--ae", str(pipeline / "ae.bin"),
                "--flows", str(pipeline / "synth/flows.csv"), "--telemetry", str(pipeline / "synth/telemetry.csv"),
                "--out", str(tmp_path / "d")]
        assert main(argv) == 0
        assert (tmp_path / "d/trace.csv").read_text().count("\n") == 12001
