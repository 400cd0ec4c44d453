import json

import pytest

from replaycl.cli import OUTPUT_ENV, main
from replaycl.config import load_config, parse_config, ConfigError
from replaycl.engine import strip_timing
from replaycl.experiment import BENCH_COLUMNS, read_bench_csv, write_bench_csv

TINY = """\
seeds = [0]
output_dir = "{out}"

[dataset]
num_classes = 4
clips_per_class = 10
seconds = 0.5

[stream]
tasks = 2
classes_per_task = 2

[training]
epochs = 3

[buffer]
capacity = 6

[[methods]]
name = "finetune"

[[methods]]
name = "random"

[[methods]]
name = "uncertainty"
family = "noise"
K = 2

[[methods]]
name = "uncertainty++"
K = 2
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY.format(out=tmp_path / "out"))
    return p


def test_bundled_config_parses():
    cfg = load_config("src/replaycl/configs/synthetic.toml")
    assert cfg.capacity == 50 and cfg.classes_per_task == 2 and len(cfg.methods) == 7
    assert [m.display for m in cfg.methods][4:] == ["uncertainty-shift", "uncertainty-noise", "uncertainty++"]


def test_presets():
    assert parse_config('preset = "esc50"').capacity == 100
    cfg = parse_config('preset = "dcase"')
    assert (cfg.capacity, cfg.classes_per_task) == (500, 2)


def test_unknown_key_exits_2_with_line(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("seeds = [0]\n\n[training]\nepochs = 3\nepohcs = 4\n")
    assert main(["run", str(p)]) == 2
    err = capsys.readouterr().err
    assert f"{p}:5" in err and "epohcs" in err


def test_wrong_type_names_line():
    with pytest.raises(ConfigError) as exc:
        parse_config('[[methods]]\nname = "random"\nK = "four"\n')
    assert exc.value.line == 3


def test_missing_dataset_csv_names_key(tmp_path, capsys):
    p = tmp_path / "m.toml"
    p.write_text('[dataset]\nkind = "manifest"\ncsv = "nowhere/esc50.csv"\n')
    assert main(["run", str(p)]) == 2
    err = capsys.readouterr().err
    assert "dataset.csv" in err and ":3" in err


def test_duplicate_labels_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config('[[methods]]\nname = "random"\n[[methods]]\nname = "random"\n')


def test_run_seed_override_is_deterministic(tiny, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(tiny), "--seed", "7", "--out", str(out_a)]) == 0
    assert main(["run", str(tiny), "--seed", "7", "--out", str(out_b)]) == 0
    a = json.loads((out_a / "results.json").read_text())
    b = json.loads((out_b / "results.json").read_text())
    assert a["seeds"] == [7]
    assert strip_timing(a) == strip_timing(b)
    assert (out_a / "results.csv").exists()
    assert "uncertainty++" in capsys.readouterr().out


def test_env_var_sets_output_dir(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["run", str(tiny)]) == 0
    assert (tmp_path / "env" / "results.json").exists()


def test_bench_mua(tiny, tmp_path):
    out = tmp_path / "bench"
    assert main(["bench-mua", str(tiny), "--K", "2", "4", "--repeats", "1", "--out", str(out)]) == 0
    rows = read_bench_csv(out / "bench_mua.csv")
    assert [(r["method"], r["K"]) for r in rows] == [
        ("uncertainty-noise", 2), ("uncertainty-noise", 4), ("uncertainty++", 2), ("uncertainty++", 4)]
    pp = [r for r in rows if r["method"] == "uncertainty++"]
    assert pp[0]["backbone_passes"] == pp[1]["backbone_passes"] == pp[0]["candidates"]
    wave = [r for r in rows if r["method"] == "uncertainty-noise"]
    assert [r["backbone_passes"] for r in wave] == [r["K"] * r["candidates"] for r in wave]


def test_bench_needs_two_uncertainty_methods(tmp_path):
    p = tmp_path / "one.toml"
    p.write_text('[[methods]]\nname = "random"\n')
    assert main(["bench-mua", str(p)]) == 2


def test_bench_csv_round_trip(tmp_path):
    rows = [{"method": "uncertainty++", "K": 4, "candidates": 200, "avg_seconds": 0.1 + 0.2,
             "backbone_passes": 200, "head_passes": 800}]
    write_bench_csv(rows, tmp_path / "b.csv")
    assert read_bench_csv(tmp_path / "b.csv") == rows
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == ",".join(BENCH_COLUMNS)


def results_doc(accs, label="finetune"):
    runs = [{"seed": i, "acc": a, "bwt": -0.5, "avg_mua_seconds": 0.0, "R": [[1.0, None], [0.0, a]]}
            for i, a in enumerate(accs)]
    return {"method_order": [label], "methods": {label: {"K": None, "runs": runs}}}


def test_report_single_finetune(tmp_path, capsys):
    (tmp_path / "results.json").write_text(json.dumps(results_doc([0.5])))
    assert main(["report", str(tmp_path)]) == 0
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "Method,K,ACC,BWT,AvgTime"
    assert lines[1:] == ["finetune,,0.500,-0.500,0.0000"]
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ["Method", "K", "ACC", "BWT", "AvgTime"]


def test_report_mean_and_std(tmp_path):
    (tmp_path / "results.json").write_text(json.dumps(results_doc([0.4, 0.6])))
    assert main(["report", str(tmp_path / "results.json"), "--out", str(tmp_path / "r")]) == 0
    row = (tmp_path / "r" / "report.csv").read_text().splitlines()[1]
    assert "0.500 ± 0.100" in row
    curves = (tmp_path / "r" / "accuracy_curves.csv").read_text().splitlines()
    assert curves[0] == "method,seed,task,acc_seen" and len(curves) == 5


def test_report_corrupt_json(tmp_path, capsys):
    (tmp_path / "results.json").write_text("{not json")
    assert main(["report", str(tmp_path)]) == 1
    assert "results.json" in capsys.readouterr().err


def test_report_on_real_run(tiny, tmp_path):
    assert main(["run", str(tiny), "--out", str(tmp_path / "res")]) == 0
    assert main(["report", str(tmp_path / "res")]) == 0
    rows = (tmp_path / "res" / "report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["finetune", "random", "uncertainty-noise", "uncertainty++"]


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("max relative error") == 3 and "PASS" in out


def test_gen_synth(tmp_path):
    assert main(["gen-synth", str(tmp_path / "syn"), "--classes", "2", "--clips", "3", "--seconds", "0.1"]) == 0
    lines = (tmp_path / "syn" / "manifest.csv").read_text().splitlines()
    assert lines[0] == "filename,target,category,fold" and len(lines) == 7
    assert len(list((tmp_path / "syn" / "audio").glob("*.wav"))) == 6
