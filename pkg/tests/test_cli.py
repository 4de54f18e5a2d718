import csv
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from dfl import harness
from dfl.cli import main
from dfl.data import synth_biased

SMALL = ["--m", "200", "--trials", "4", "--synth-n", "400", "--synth-p", "6"]


def read_rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.reader(fh))


def small_cfg(**kw):
    base = dict(m=200, trials=4, synth_n=400, synth_p=6)
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_config_precedence(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("m: 300\nrho: 0.5\nlambda: 2.0\n")
    from dfl.cli import build_parser, resolve_config
    args = build_parser().parse_args(["run", "--config", str(path), "--rho", "0.01"])
    cfg = resolve_config(args)
    assert (cfg.m, cfg.rho, cfg.lam, cfg.trials) == (300, 0.01, 2.0, 50)


def test_unknown_and_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rhoo: 0.1\n")
    assert main(["run", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    with pytest.raises(ValueError):
        harness.ExperimentConfig(learner="svm")
    with pytest.raises(ValueError):
        harness.ExperimentConfig(train_frac=1.0)
    assert main(["run", "--rho", "-1", "--out-dir", str(tmp_path)]) == 2


def test_run_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", *SMALL, "--out-dir", str(a)]) == 0
    assert main(["run", *SMALL, "--out-dir", str(b)]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    rows = read_rows(a / "results.csv")
    assert rows[0] == harness.CSV_COLUMNS
    assert len(rows) == 4 + 2


def test_summary_recomputable(tmp_path):
    main(["run", *SMALL, "--out-dir", str(tmp_path)])
    rows = read_rows(tmp_path / "results.csv")
    body, summary = rows[1:-1], rows[-1]
    for col, name in enumerate(harness.CSV_COLUMNS[2:8], start=2):
        vals = np.array([float(r[col]) for r in body])
        mean, std = (float(x) for x in summary[col].split("±"))
        assert abs(mean - np.mean(vals)) <= 5e-5 + 1e-12
        assert abs(std - np.std(vals, ddof=1)) <= 5e-5 + 1e-12
    # per-trial values are written at full precision, so the in-memory summary is exact
    res = harness.run(small_cfg())
    for col, name in enumerate(harness._METRIC_FIELDS, start=2):
        vals = [float(r[col]) for r in body]
        assert math.isclose(res.summary[name][0], float(np.mean(vals)), rel_tol=0, abs_tol=1e-12)


def test_failed_trials_are_counted(tmp_path):
    assert main(["run", *SMALL, "--rho", "0", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "results.csv")
    assert all(r[-1].startswith("failed") and r[1] == "0" for r in rows[1:-1])
    assert rows[-1][-1] == "ok=0 failed=4"


def test_single_point_sweep_matches_run():
    cfg = small_cfg(rho=0.01)
    ds = harness.load_dataset(cfg)
    sweep = harness.sweep_rho(cfg, [0.01], ds)
    res = harness.run(cfg, ds)
    rho, sp, err, k, ok, failed = sweep.rows[0]
    assert sp == res.summary["sp"][0] and err == res.summary["classifier_error"][0]
    assert k == np.mean([t.k for t in res.trials]) and ok == 4 and failed == 0


def test_k_monotone_in_rho():
    cfg = small_cfg()
    sweep = harness.sweep_rho(cfg, [0.001, 0.005, 0.02, 0.1])
    ks = [row[3] for row in sweep.rows]
    assert all(b >= a for a, b in zip(ks, ks[1:]))


def test_sweep_cli_writes_grid(tmp_path):
    assert main(["sweep-rho", *SMALL, "--grid", "0.005,0.05", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "sweep_rho.csv")
    assert rows[0] == harness.SWEEP_COLUMNS and [float(r[0]) for r in rows[1:]] == [0.005, 0.05]
    assert main(["sweep-rho", *SMALL, "--grid", ",", "--out-dir", str(tmp_path)]) == 2


def test_cov_sign_rows_and_constant(tmp_path):
    assert main(["cov-sign", *SMALL, "--n-trials", "3", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "cov_sign.csv")
    assert rows[0] == ["trial", "cov_fs"] and len(rows) == 4
    ds = synth_biased(400, 6, 1.0, 0)
    assert harness.constant_cov(ds.n, ds.sensitive) == 0.0


def test_cov_sign_mostly_positive_on_biased_data():
    res = harness.cov_sign_diagnostic(harness.ExperimentConfig(m=500, trials=20, rho=0.01))
    assert res.fraction_positive >= 0.8


def test_validate_theory_exit_codes(tmp_path, capsys):
    ok = main(["validate-theory", "lemma2", "--set", "lemma2.trials=100", "--out-dir", str(tmp_path)])
    assert ok == 0
    assert {f.suffix for f in tmp_path.glob("lemma2*")} == {".csv", ".txt"}
    assert main(["validate-theory", "lemma2", "--set", "lemma2.trials=100",
                 "--set", "lemma2.tol=-1"]) == 1
    assert "VALIDATION FAILED" in capsys.readouterr().out
    assert main(["validate-theory", "lemma2", "--set", "trials=3"]) == 2


def test_memory_tp_matches_in_process():
    a = harness.run(small_cfg())
    b = harness.run(small_cfg(tp="memory"))
    assert a.to_csv() == b.to_csv()


def test_manifest_records_inputs(tmp_path):
    conf = tmp_path / "exp.yaml"
    conf.write_text("m: 200\ntrials: 2\nsynth_n: 400\nsynth_p: 6\n")
    main(["run", "--config", str(conf), "--out-dir", str(tmp_path)])
    text = (tmp_path / "run-manifest.txt").read_text()
    assert "command: run" in text and "  m: 200" in text
    assert f"{conf}: {harness.blob_hash(conf.read_bytes())}" in text
    assert harness.blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


@pytest.mark.parametrize("learner", ["dfkrr", "dfgr", "dfpca", "baseline-logistic", "baseline-pca"])
def test_other_learners_run(learner):
    res = harness.run(small_cfg(learner=learner, trials=2, rho=0.05, m=100, q=3))
    assert len(res.succeeded) == 2
    for t in res.succeeded:
        assert 0 <= t.metrics.sp <= 1


def test_workers_preserve_order():
    assert harness.run(small_cfg(workers=2)).to_csv() == harness.run(small_cfg()).to_csv()


def test_dfrr_fairer_than_ridge():
    cfg = harness.ExperimentConfig(m=1000, synth_n=2000, lam=1.0, rho=0.002, trials=50)
    ds = harness.load_dataset(cfg)
    fair = harness.run(cfg, ds)
    ridge = harness.run(harness.ExperimentConfig(**{**cfg.as_dict(), "learner": "baseline-ridge"}), ds)
    assert fair.n_failed == 0
    wins = int(np.sum(fair.column("sp") < ridge.column("sp")))
    assert wins >= 45


def test_serve_tp_subprocess_matches_in_process(tmp_path):
    env = dict(os.environ)
    proc = subprocess.Popen([sys.executable, "-m", "dfl", "serve-tp", *SMALL, "--bind", "127.0.0.1:0",
                             "--max-sessions", "4"], stdout=subprocess.PIPE, text=True, env=env)
    try:
        line = proc.stdout.readline()
        addr = line.split("listening on ")[1].split()[0]
        env["DFL_TP_ADDR"] = addr
        out = subprocess.run([sys.executable, "-m", "dfl", "run", *SMALL, "--tp-addr", "remote",
                              "--out-dir", str(tmp_path)], env=env, capture_output=True, text=True,
                             timeout=120)
        assert out.returncode == 0, out.stderr
        assert proc.wait(timeout=30) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
    assert (tmp_path / "results.csv").read_text() == harness.run(small_cfg()).to_csv()
