import csv
import json
import xml.etree.ElementTree as ET

import pytest

from icestack.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from icestack.dataset import SCHEMA, load_dataset
from icestack.models import load_checkpoint


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["synth", "--n", "12", "--seed", "0", "--n-nodes", "16", "--out", str(path)]) == EXIT_OK
    return path


def _train(data, out, *extra):
    return main(["train", "--data", str(data), "--hidden", "8", "--epochs", "2", "--out", str(out), *extra])


def _without_timing(path):
    doc = json.loads(path.read_text())
    doc.pop("timing")
    return doc


def test_synth_default_size(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["synth", "--n", "50", "--seed", "0", "--out", str(path)]) == EXIT_OK
    assert json.loads(path.read_text().splitlines()[0])["schema"] == SCHEMA
    assert len(load_dataset(path)) == 50


def test_synth_is_byte_stable(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        main(["synth", "--n", "3", "--seed", "4", "--n-nodes", "8", "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_checkpoint_and_report(tmp_path, data):
    out = tmp_path / "m.ckpt.json"
    assert _train(data, out, "--arch", "multibranch") == EXIT_OK
    report = json.loads((tmp_path / "m.ckpt.report.json").read_text())
    assert report["schema"] == "icestack-report/v1"
    assert len(report["history"]) == 2
    assert len(report["timing"]["epoch_seconds"]) == 2
    assert load_checkpoint(out).arch == "multibranch"


@pytest.mark.parametrize("arch", ["gcn-lstm", "sage-lstm"])
def test_train_determinism_modulo_timing(tmp_path, data, arch):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    _train(data, a, "--arch", arch, "--seed", "3")
    _train(data, b, "--arch", arch, "--seed", "3")
    assert a.read_bytes() == b.read_bytes()
    assert _without_timing(tmp_path / "a.report.json") == _without_timing(tmp_path / "b.report.json")


def test_eval_matches_report(tmp_path, data, capsys):
    out = tmp_path / "m.json"
    _train(data, out)
    report = json.loads((tmp_path / "m.report.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out), "--data", str(data)]) == EXIT_OK
    value = float(capsys.readouterr().out.split("RMSE")[1].split()[0])
    assert value == pytest.approx(report["test_rmse_final"], abs=1e-6)
    assert main(["eval", "--checkpoint", str(out), "--data", str(data), "--split", "all"]) == EXIT_OK


def test_compare_table(tmp_path, data, capsys):
    out = tmp_path / "t.csv"
    argv = ["compare", "--data", str(data), "--hidden", "4", "--epochs", "1", "--trials", "1", "--out", str(out)]
    assert main(argv) == EXIT_OK
    text = capsys.readouterr().out
    assert "Multi-branch" in text
    rows = list(csv.DictReader(ln for ln in out.read_text().splitlines() if not ln.startswith("#")))
    assert [r["model"] for r in rows] == ["GCN-LSTM", "GraphSAGE-LSTM", "Multi-branch(SAGE+TempConv)"]
    assert all(float(r["rmse_std"]) == 0.0 for r in rows)
    first = [(r["rmse_mean"], r["rmse_std"]) for r in rows]
    main(argv)
    rows = list(csv.DictReader(ln for ln in out.read_text().splitlines() if not ln.startswith("#")))
    assert [(r["rmse_mean"], r["rmse_std"]) for r in rows] == first


def test_plot_outputs(tmp_path, data):
    ckpt = tmp_path / "m.json"
    _train(data, ckpt)
    rid = load_dataset(data)[0].id
    svg = tmp_path / "p.svg"
    assert main(["plot", "--checkpoint", str(ckpt), "--data", str(data), "--record-id", rid,
                 "--out", str(svg)]) == EXIT_OK
    root = ET.fromstring(svg.read_text())
    assert root.tag.endswith("svg")
    text = svg.read_text()
    assert "http://" not in text.replace("http://www.w3.org/2000/svg", "")
    assert "#2ca02c" in text and "#d62728" in text
    lines = svg.with_suffix(".csv").read_text().splitlines()
    assert lines[0] == "# schema=icestack-plot/v1"
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 20 * 16
    # input layers have no prediction
    assert all((r["pred_depth"] == "") == (int(r["layer"]) < 5) for r in rows)
    assert {int(r["node"]) for r in rows} == set(range(16))


def test_usage_errors(tmp_path, data):
    assert main([]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(data), "--arch", "transformer"])
    assert exc.value.code == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing.jsonl")]) == EXIT_USAGE
    assert main(["train", "--data", str(data), "--hidden", "7"]) == EXIT_USAGE
    assert main(["synth", "--n", "3", "--out", str(tmp_path / "nope" / "d.jsonl")]) == EXIT_USAGE


def test_data_errors(tmp_path, data):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema": "icestack/v1"}\n{not json\n')
    assert main(["train", "--data", str(bad), "--epochs", "1"]) == EXIT_DATA
    ckpt = tmp_path / "m.json"
    _train(data, ckpt)
    assert main(["plot", "--checkpoint", str(ckpt), "--data", str(data), "--record-id", "no-such",
                 "--out", str(tmp_path / "p.svg")]) == EXIT_DATA
    broken = tmp_path / "broken.json"
    broken.write_text("{}")
    assert main(["eval", "--checkpoint", str(broken), "--data", str(data)]) == EXIT_DATA


def test_divergence_exit_code(tmp_path, data):
    assert _train(data, tmp_path / "m.json", "--lr", "1e200") == EXIT_DIVERGED
