import json
import subprocess
import sys

import pytest

from cotlora.cli import main
from cotlora.core import parse_examples


def _lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").split("\n") if line.strip()]


@pytest.fixture
def golden_path(fixtures_dir):
    return fixtures_dir / "golden_24.jsonl"


@pytest.fixture
def ten_path(tmp_path, golden_path):
    path = tmp_path / "ten.jsonl"
    path.write_text("".join(golden_path.read_text(encoding="utf-8").splitlines(keepends=True)[:10]), encoding="utf-8")
    return path


class TestPreprocess:
    def test_fixture_languages(self, tmp_path, golden_path, fixtures_dir):
        out = tmp_path / "pre"
        code = main([
            "preprocess", "--input", str(golden_path), "--out-dir", str(out),
            "--languages", str(fixtures_dir / "languages.csv"),
        ])
        assert code == 0
        rows = parse_examples((out / "preprocessed.jsonl").read_text(encoding="utf-8"))
        assert len(rows) == 24
        assert all(r.query.translated_text for r in rows)
        assert {r.query.language.name for r in rows} == {"English", "Spanish", "French", "Arabic"}
        es = next(r for r in rows if r.query.raw_text == "zapatos rojos")
        assert es.query.translated_text == "red shoes"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "preprocess" and manifest["seed"] == 0
        assert set(manifest["inputs"]) == {"input", "languages"}
        assert len(manifest["inputs"]["input"]["sha256"]) == 64

    def test_stub_dictionary(self, tmp_path, fixtures_dir):
        src = tmp_path / "in.jsonl"
        src.write_text('{"id": "x", "query": "camisa", "language": "es", "category": "Clothing"}\n', encoding="utf-8")
        out = tmp_path / "o"
        assert main(["preprocess", "--input", str(src), "--out-dir", str(out),
                     "--dictionary", str(fixtures_dir / "stub_dictionary.json")]) == 0
        (row,) = parse_examples((out / "preprocessed.jsonl").read_text(encoding="utf-8"))
        assert row.query.translated_text == "shirt"
        assert "dictionary" in json.loads((out / "manifest.json").read_text())["inputs"]

    def test_unknown_language_names_row(self, tmp_path, capsys):
        src = tmp_path / "bad.jsonl"
        rows = [
            {"id": "a", "query": "red shoes", "language": "en", "category": "Shoes"},
            {"id": "b", "query": "zapatos", "language": "es", "category": "Shoes"},
            {"id": "c", "query": "???", "language": "xx", "category": "Shoes"},
        ]
        src.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        assert main(["preprocess", "--input", str(src), "--out-dir", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "row 3" in err and "unknown language code 'xx'" in err

    def test_empty_input(self, tmp_path):
        src = tmp_path / "empty.jsonl"
        src.write_text("", encoding="utf-8")
        out = tmp_path / "o"
        assert main(["preprocess", "--input", str(src), "--out-dir", str(out)]) == 0
        assert (out / "preprocessed.jsonl").read_text() == ""

    def test_csv_input(self, tmp_path):
        src = tmp_path / "in.csv"
        src.write_text('id,query,language,category,label\r\nq1,zapatos rojos,es,Shoes > Women,1\r\n', encoding="utf-8")
        out = tmp_path / "o"
        assert main(["preprocess", "--input", str(src), "--out-dir", str(out)]) == 0
        (row,) = parse_examples((out / "preprocessed.jsonl").read_text(encoding="utf-8"))
        assert row.query.translated_text == "red shoes"

    def test_malformed_row_is_runtime_error(self, tmp_path, capsys):
        src = tmp_path / "bad.jsonl"
        src.write_text('{"id": "a", "query": "x", "language": "en", "category": "C", "label": 2}\n', encoding="utf-8")
        assert main(["preprocess", "--input", str(src), "--out-dir", str(tmp_path)]) == 1
        assert "invalid label at line 1" in capsys.readouterr().err


class TestBuildDataset:
    @pytest.mark.parametrize("mode, count", [("staged", 40), ("fused", 10)])
    def test_record_counts(self, tmp_path, ten_path, mode, count):
        out = tmp_path / mode
        assert main(["build-dataset", "--input", str(ten_path), "--mode", mode, "--out-dir", str(out)]) == 0
        assert len(_lines(out / "dataset.jsonl")) == count
        assert json.loads((out / "manifest.json").read_text())["config"]["mode"] == mode

    def test_rerun_is_byte_identical(self, tmp_path, ten_path):
        for name in ("a", "b"):
            assert main(["build-dataset", "--input", str(ten_path), "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()

    def test_unlabeled_input(self, tmp_path):
        src = tmp_path / "u.jsonl"
        src.write_text('{"id": "u", "query": "red shoes", "language": "en", "category": "Shoes"}\n', encoding="utf-8")
        assert main(["build-dataset", "--input", str(src), "--out-dir", str(tmp_path)]) == 1


class TestTrain:
    def test_defaults_produce_artifacts(self, tmp_path, ten_path):
        data_dir, run = tmp_path / "data", tmp_path / "run"
        assert main(["build-dataset", "--input", str(ten_path), "--out-dir", str(data_dir)]) == 0
        assert main(["train", "--dataset", str(data_dir / "dataset.jsonl"), "--out-dir", str(run)]) == 0
        for name in ("adapter.ckpt", "base_model.ckpt", "tokenizer.json", "train_report.json", "manifest.json"):
            assert (run / name).exists(), name
        report = json.loads((run / "train_report.json").read_text())
        assert report["steps"] == 3  # ceil(ceil(40/8)/2)
        assert report["lora"] == {"rank": 24, "alpha": 32.0, "dropout": 0.1, "targets": [
            "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"]}
        assert report["seed"] == 0

    def test_bad_hyperparameter_is_config_error(self, tmp_path, ten_path):
        data_dir = tmp_path / "data"
        main(["build-dataset", "--input", str(ten_path), "--out-dir", str(data_dir)])
        code = main(["train", "--dataset", str(data_dir / "dataset.jsonl"), "--batch-size", "0", "--out-dir", str(tmp_path)])
        assert code == 2


class TestInferEval:
    def test_round_trip_and_mismatch(self, tmp_path, golden_path, capsys):
        out = tmp_path / "inf"
        assert main(["infer", "--input", str(golden_path), "--out-dir", str(out)]) == 0
        preds = _lines(out / "predictions.jsonl")
        assert len(preds) == 24 and all("trace" in p for p in preds)
        throughput = json.loads((out / "throughput.json").read_text())
        assert throughput["total_samples"] == 24
        assert main(["eval", "--predictions", str(out / "predictions.jsonl"), "--gold", str(golden_path),
                     "--out-dir", str(out)]) == 0
        assert json.loads((out / "eval_report.json").read_text())["accuracy"] == 1.0

        partial = tmp_path / "partial.jsonl"
        partial.write_text("".join(json.dumps(p) + "\n" for p in preds[:-2]), encoding="utf-8")
        capsys.readouterr()
        assert main(["eval", "--predictions", str(partial), "--gold", str(golden_path), "--out-dir", str(out)]) == 1
        err = capsys.readouterr().err
        assert "missing predictions for" in err and preds[-1]["id"] in err and preds[-2]["id"] in err

    def test_toy_backend_needs_model_dir(self, tmp_path, golden_path):
        assert main(["infer", "--input", str(golden_path), "--backend", "toy", "--out-dir", str(tmp_path)]) == 2


class TestExitCodesAndConfig:
    def test_missing_input_file(self, tmp_path):
        assert main(["preprocess", "--input", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path)]) == 2

    def test_argparse_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--mode", "sideways"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 2

    def test_bad_config_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json", encoding="utf-8")
        assert main(["bench", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 7, "bench": {"n": 12, "batch_size": 4}}), encoding="utf-8")
        out = tmp_path / "a"
        assert main(["bench", "--config", str(cfg), "--out-dir", str(out)]) == 0
        report = json.loads((out / "bench_report.json").read_text())
        assert (report["total_samples"], report["batch_size"], report["seed"]) == (12, 4, 7)
        out = tmp_path / "b"
        assert main(["bench", "--config", str(cfg), "--n", "5", "--seed", "3", "--out-dir", str(out)]) == 0
        report = json.loads((out / "bench_report.json").read_text())
        assert (report["total_samples"], report["batch_size"], report["seed"]) == (5, 4, 3)
        assert json.loads((out / "manifest.json").read_text())["seed"] == 3

    def test_console_script_version(self):
        out = subprocess.run([sys.executable, "-m", "cotlora.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("cotlora ")
