import json

import numpy as np
import pytest

from deconfrec.cli import main
from deconfrec.config import from_dict
from deconfrec.pipeline import StageError, run_experiment

TINY = {
    "dataset": {"kind": "synthetic", "seq_len": 8, "test_negatives": 20,
                "synth": {"users_per_group": [40, 20, 10], "activeness_ranges": [[3, 6], [8, 14],
                                                                                  [18, 30]],
                          "n_items": 50, "shared_dim": 2, "group_dim": 2}},
    "grouping": {"n": 3},
    "model": {"arch": "target-attention", "d": 4, "h": 6},
    "train": {"batch_size": 96, "epochs_stage1": 2, "epochs_stage2": 1},
    "eval": {"k": [5, 10], "baseline": True},
}


def tiny(tmp_path, **over):
    raw = json.loads(json.dumps(TINY))
    raw["output_dir"] = str(tmp_path / "run")
    raw.update(over)
    return from_dict(raw)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    return run_experiment(tiny(tmp)), tmp


def test_outputs(finished):
    res, _ = finished
    out = res.out_dir
    for name in ("report.json", "report.txt", "group_level.csv", "user_level.csv",
                 "training_curves.csv", "config.yaml", "manifest.json", "groups.csv",
                 "figures/group_auc.png", "figures/training_curves.png",
                 "checkpoints/ga_pn.npz", "data/train.csv", "data/meta.json"):
        assert (out / name).is_file(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "complete" and "report.json" in man["files"]
    rep = json.loads((out / "report.json").read_text())
    assert set(rep["variants"]) == {"ga+pn", "ga", "base"}
    assert len(rep["variants"]["ga+pn"]["groups"]) == 3
    assert rep["metadata"]["config"]["seed"] == rep["metadata"]["seed"] == 0
    text = (out / "report.txt").read_text()
    assert "Group-level AUC" in text and "User-level performance" in text


def test_report_byte_identical(finished, tmp_path):
    res, tmp = finished
    again = run_experiment(tiny(tmp))
    assert (again.out_dir / "report.json").read_bytes() == (res.out_dir / "report.json").read_bytes()


def test_stepwise_matches_run(finished, tmp_path):
    res, _ = finished
    cfg = tiny(tmp_path)
    cfg.dump(tmp_path / "c.yaml")
    for step in ("ingest", "group", "train-stage1", "train-stage2", "evaluate"):
        assert main([step, "-c", str(tmp_path / "c.yaml")]) == 0
    a = json.loads((res.out_dir / "report.json").read_text())
    b = json.loads((tmp_path / "run" / "report.json").read_text())
    assert a["variants"] == b["variants"]
    assert a["metadata"]["config_hash"] == b["metadata"]["config_hash"]


def test_failure_marks_manifest(tmp_path, monkeypatch):
    import deconfrec.pipeline as pl

    def boom(*a, **k):
        raise FloatingPointError("exploded")

    monkeypatch.setattr(pl, "train_stage2", boom)
    with pytest.raises(StageError, match="train-stage2"):
        run_experiment(tiny(tmp_path))
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "train-stage2"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "-c", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {kind: file, path: /no/such/file, format: csv}\n")
    assert main(["run", "-c", str(bad)]) == 2
    assert "dataset.path" in capsys.readouterr().err
    garbage = tmp_path / "g.csv"
    garbage.write_text("u,i,t\nu1,a,notanumber\n")
    cfgf = tmp_path / "g.yaml"
    cfgf.write_text(f"output_dir: {tmp_path / 'o'}\n"
                    f"dataset: {{kind: file, path: {garbage}, format: csv}}\n")
    assert main(["ingest", "-c", str(cfgf)]) == 3
    assert main(["evaluate", "-o", str(tmp_path / "nothing")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["verify", "nonsense"])
    assert exc.value.code == 2


def test_cli_verify_and_generate(tmp_path, capsys):
    assert main(["verify", "aggregation", "metrics"]) == 0
    assert "all checks passed" in capsys.readouterr().out
    cfgf = tmp_path / "c.yaml"
    cfgf.write_text(json.dumps(TINY))
    out = tmp_path / "synth.csv"
    assert main(["generate-synth", "-c", str(cfgf), "--seed", "3", "--out", str(out)]) == 0
    assert out.read_text().startswith("user,item,timestamp,label")


def test_cli_verify_failure_code(monkeypatch):
    import deconfrec.cli as cli
    from deconfrec.verify import Check
    monkeypatch.setitem(cli.SUITES, "metrics", lambda: [Check("x", False)])
    assert main(["verify", "metrics"]) == 5


def test_print_defaults(capsys):
    assert main(["run", "--print-defaults", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("seed: 4")


def test_file_dataset_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["user,item,timestamp"]
    for u in range(30):
        for t in range(3 + u % 7):
            lines.append(f"u{u},i{rng.integers(60)},{t}")
    (tmp_path / "log.csv").write_text("\n".join(lines) + "\n")
    cfg = tiny(tmp_path, dataset={"kind": "file", "path": str(tmp_path / "log.csv"),
                                  "format": "csv", "seq_len": 5, "test_negatives": 10})
    cfg.eval.baseline = False
    res = run_experiment(cfg, write_files=False)
    assert set(res.report["variants"]) == {"ga+pn", "ga"}
