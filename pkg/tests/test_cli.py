"""End-to-end checks of the ``ctxseg`` command line on tiny settings."""

import csv
import hashlib
import json

import pytest

from ctxseg.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_config_text, UsageError
from ctxseg.evaluation import PUBLISHED_RANK_SUMS, MetricsTable, parse_markdown, rank_table, report_csv

GEN = ["gen-data", "--slides", "8", "--size", "1024", "--stride", "128", "--seed", "5"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(GEN + ["--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "runA"
    argv = ["train", "--arch", "A", "--data", str(dataset), "--out", str(out), "--width", "0.0625"]
    argv += ["--max-epochs", "1", "--seeds", "1", "2", "--learning-rate", "0.00031", "--batch-size", "16"]
    assert main(argv) == EXIT_OK
    return out


def test_gen_data_is_byte_identical(dataset, tmp_path):
    again = tmp_path / "data"
    assert main(GEN + ["--out", str(again)]) == EXIT_OK
    assert tree_digest(again) == tree_digest(dataset)


def test_gen_data_label_rows_match_manifest(dataset):
    with open(dataset / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    manifest = json.loads((dataset.parent / "data.run.json").read_text())
    assert len(rows) == manifest["groups"] > 0
    assert sum(manifest["class_counts"]) == len(rows)
    assert "finished_at" in manifest


def test_train_missing_data_is_usage_error(tmp_path, capsys):
    code = main(["train", "--arch", "A", "--out", str(tmp_path / "x")])
    assert code == EXIT_USAGE
    assert "--data" in capsys.readouterr().err


def test_train_unknown_arch(dataset, tmp_path):
    assert main(["train", "--arch", "Z", "--data", str(dataset), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_train_missing_dataset_is_runtime_error(tmp_path):
    code = main(["train", "--arch", "A", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x")])
    assert code == EXIT_RUNTIME


def test_train_manifest_records_override(trained):
    manifest = json.loads((trained.parent / "runA.run.json").read_text())
    assert manifest["config_source"]["learning_rate"] == "0.00031"
    assert manifest["config"]["learning_rate"] == pytest.approx(0.00031)
    assert manifest["config"]["seeds"] == [1, 2]
    assert len(list(trained.glob("*.cseg"))) == 2


def test_train_writes_counts(trained):
    info = json.loads((trained / "test_counts.json").read_text())
    assert info["arch"] == "A" and len(info["test_counts"]) == 2


def test_report_from_runs(trained, tmp_path):
    out = tmp_path / "report.md"
    assert main(["report", "--runs", str(trained), "--out", str(out)]) == EXIT_OK
    table, _ = parse_markdown(out.read_text())
    assert table.methods == ("A",)
    assert out.with_suffix(".csv").exists()


def test_report_from_published_csv(tmp_path, capsys):
    src = tmp_path / "published.csv"
    table = MetricsTable.published()
    src.write_text(report_csv(table, rank_table(table)))
    out = tmp_path / "report.md"
    assert main(["report", "--from-csv", str(src), "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    expected = ", ".join(f"{m}={s}" for m, s in zip(table.methods, PUBLISHED_RANK_SUMS["Breast"]))
    assert f"rank-sum (Breast): {expected}" in printed
    parsed, _ = parse_markdown(out.read_text())
    assert parsed.f1 == table.f1


def test_report_needs_a_source(tmp_path):
    assert main(["report", "--out", str(tmp_path / "r.md")]) == EXIT_USAGE


def test_segment_writes_png_and_sidecar(trained, tmp_path):
    ckpt = sorted(trained.glob("*.cseg"))[0]
    out = tmp_path / "seg.png"
    argv = ["segment", "--checkpoint", str(ckpt), "--size", "1024", "--stride", "128", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert out.exists() and out.with_suffix(".csv").exists()


def test_time_command(tmp_path):
    out = tmp_path / "t.json"
    argv = ["time", "--archs", "A", "--width", "0.0625", "--groups", "4"]
    argv += ["--set", "size=1024", "--set", "stride=128", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert set(json.loads(out.read_text())) == {"A"}


def test_verify_params_suite_passes(capsys):
    assert main(["verify", "--suite", "params"]) == EXIT_OK
    assert "[FAIL]" not in capsys.readouterr().out


def test_verify_bad_suite():
    assert main(["verify", "--suite", "nothing"]) == EXIT_USAGE


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nslides = 2\nsize = 1024\nstride = 512\n")
    out = tmp_path / "d"
    assert main(["gen-data", "--config", str(cfg), "--set", "stride=256", "--slides", "1", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "d.run.json").read_text())
    assert manifest["config"]["slides"] == 1
    assert manifest["config"]["stride"] == 256
    assert manifest["config"]["size"] == 1024


def test_bad_config_values(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("slides = many\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert main(["gen-data", "--set", "colour=red", "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert main(["train", "--arch", "A", "--data", "x", "--out", "y", "--seeds", "1", "1"]) == EXIT_USAGE


def test_parse_config_text_errors():
    assert parse_config_text("seed = 3  # trailing\n\n") == {"seed": "3"}
    for text in ("seed 3", "nope = 1", "seed ="):
        with pytest.raises(UsageError):
            parse_config_text(text)
