import json

import pytest

from madapt.adapters import count_learnable
from madapt.cli import main
from madapt.io import RunConfig
from madapt.model import ModalitySubset
from madapt.report import RESULT_COLUMNS, emit_report, load_rows, sort_results
from madapt.errors import ContractError

TINY = {
    "task": {"n_train": 96, "n_val": 0, "n_test": 48},
    "model": {"embed_dim": 8, "encoder_depth": 1},
    "pretrain": {"epochs": 2, "warmup_epochs": 1},
    "adapt_train": {"epochs": 2, "warmup_epochs": 1},
}


def write_config(tmp_path, **over):
    cfg = {**TINY, "workdir": str(tmp_path / "run"), **over}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data, pretrain, dedicated and adapt for every subset and kind."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["pretrain", "--config", cfg]) == 0
    assert main(["dedicated", "--config", cfg, "--all-subsets"]) == 0
    assert main(["adapt", "--config", cfg, "--all-subsets", "--kind", "all"]) == 0
    return tmp, cfg


def test_params_matches_count(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["params", "--config", cfg, "--kind", "scale_shift", "--subset", "0"]) == 0
    out = capsys.readouterr().out.strip()
    spec = RunConfig.load(cfg).model_spec()
    count, ratio = count_learnable(spec, ModalitySubset.of([0], 3), "scale_shift")
    assert f"count={count} " in out
    assert f"ratio={ratio!r} " in out


def test_adapt_all_subsets_makes_six_banks(pipeline):
    tmp, _ = pipeline
    banks = sorted(p.name for p in (tmp / "run" / "banks" / "scale_shift").iterdir())
    assert banks == [f"S{m}.mmad" for m in range(1, 7)]
    assert len(list((tmp / "run" / "banks").iterdir())) == 6


def test_eval_four_rows(pipeline, capsys):
    tmp, cfg = pipeline
    out = tmp / "e4"
    argv = ["eval", "--config", cfg, "--arms", "pretrained,duplication,dedicated,adapted",
            "--subset", "0", "--kind", "scale_shift", "--out", str(out)]
    assert main(argv) == 0
    columns, rows = load_rows(out.with_suffix(".json"))
    assert columns == RESULT_COLUMNS
    assert [r["arm"] for r in rows] == ["pretrained", "duplication", "dedicated", "adapted"]
    lines = out.with_suffix(".csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0] == ",".join(RESULT_COLUMNS)


def test_eval_all_kinds_and_report(pipeline):
    tmp, cfg = pipeline
    assert main(["eval", "--config", cfg, "--kind", "all", "--arms", "pretrained,adapted"]) == 0
    assert main(["report", "--config", cfg]) == 0
    _, rows = load_rows(tmp / "run" / "reports" / "report.json")
    assert len(rows) == 6 * (1 + 6)
    assert {r["kind"] for r in rows if r["arm"] == "adapted"} == {
        "scale_shift", "scale_only", "shift_only", "bitfit", "lora", "norm_tune"}


def test_cossim(pipeline):
    tmp, cfg = pipeline
    assert main(["cossim", "--config", cfg, "--subset", "1,2"]) == 0
    lines = (tmp / "run" / "reports" / "cossim.csv").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_missing_input_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["pretrain", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "missing dataset" in err and len(err.strip().splitlines()) == 1


def test_usage_errors_exit_2(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["params", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["params", "--config", cfg, "--subset", "0", "--all-subsets"]) == 2
    assert main(["params", "--config", cfg, "--kind", "prompt", "--subset", "0"]) == 2
    assert main(["params", "--config", cfg, "--subset", "7"]) == 2
    assert main(["frobnicate", "--config", cfg]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown": 1}))
    assert main(["params", "--config", str(bad), "--subset", "0"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    data = tmp_path / "run" / "dataset.mmad"
    buf = bytearray(data.read_bytes())
    buf[-1] ^= 1
    data.write_bytes(bytes(buf))
    assert main(["pretrain", "--config", cfg]) == 1
    assert "checksum" in capsys.readouterr().err


def test_seed_env_override(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("MADAPT_SEED", "7")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a.mmad")]) == 0
    a = capsys.readouterr().out
    assert main(["gen-data", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b.mmad")]) == 0
    b = capsys.readouterr().out
    assert a.split("checksum=")[1] == b.split("checksum=")[1]
    monkeypatch.delenv("MADAPT_SEED")
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "c.mmad")]) == 0
    assert capsys.readouterr().out.split("checksum=")[1] != a.split("checksum=")[1]


def test_inputs_not_mutated(pipeline):
    tmp, cfg = pipeline
    theta = tmp / "run" / "theta.mmad"
    before = theta.read_bytes()
    assert main(["adapt", "--config", cfg, "--subset", "0", "--out", str(tmp / "x.mmad")]) == 0
    assert theta.read_bytes() == before
    assert (tmp / "x.mmad").is_file()


class TestReport:
    ROW = {"subset": "0", "subset_mask": 1, "arm": "pretrained", "kind": "none",
           "accuracy": 0.123456, "macro_f1": 0.5, "mean_per_class_accuracy": 0.25,
           "learnable": 0, "ratio": 0.0}

    def test_single_row(self, tmp_path):
        csv_path, json_path = emit_report([self.ROW], tmp_path / "r")
        lines = csv_path.read_text().split("\n")
        assert lines[1] == "0,1,pretrained,none,0.1235,0.5000,0.2500,0,0.0000"
        assert len([l for l in lines if l]) == 2
        assert json.loads(json_path.read_text())["rows"][0]["accuracy"] == 0.123456

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            emit_report([], tmp_path / "r")

    def test_sort_order(self):
        rows = [
            {**self.ROW, "subset_mask": 2, "arm": "adapted", "kind": "lora"},
            {**self.ROW, "subset_mask": 1, "arm": "adapted", "kind": "lora"},
            {**self.ROW, "subset_mask": 1, "arm": "adapted", "kind": "scale_shift"},
            {**self.ROW, "subset_mask": 1, "arm": "dedicated"},
        ]
        got = [(r["subset_mask"], r["arm"], r["kind"]) for r in sort_results(rows)]
        assert got == [(1, "dedicated", "none"), (1, "adapted", "scale_shift"),
                       (1, "adapted", "lora"), (2, "adapted", "lora")]
