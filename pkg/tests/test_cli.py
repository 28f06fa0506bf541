import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from smoelab import cli, gradcheck
from smoelab.probes import read_geometry_csv

TINY = """\
# small run for command-line tests
vocab = 32
d_model = 16
layers = 2
experts = 4
top_k = 2
d_ff = 16
batch_seqs = 4
seq_len = 16
clusters = 4
steps = 6
warmup = 2
eval_batches = 1
checkpoint_every = 3
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY, encoding="utf-8")
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_writes_metrics_and_manifest(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", config, "--out", out) == 0
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("step,loss,ppl,lr,maxvio_mean,maxvio_l0,maxvio_l1")
    manifest = json.loads((out / "manifest.json").read_text())
    paths = {e["path"] for e in manifest["files"]}
    assert {"metrics.csv", "maxvio.csv", "eval.csv", "config.txt", "checkpoints/final.ckpt"} <= paths
    for e in manifest["files"]:
        assert e["sha256"] == cli.sha256_file(out / e["path"])
    assert manifest["seed"] == 0 and manifest["overrides"] == {}
    assert not (out / cli.LOCK_NAME).exists()
    assert "metrics.csv sha256" in capsys.readouterr().out


def test_train_same_seed_same_metrics_digest(config, tmp_path):
    digests = []
    for name in ("a", "b"):
        assert run("train", "--config", config, "--out", tmp_path / name, "--seed", 3, "--variant", "kmeans") == 0
        m = json.loads((tmp_path / name / "manifest.json").read_text())
        assert m["overrides"] == {"seed": 3, "variant": "kmeans"}
        digests.append({e["path"]: e["sha256"] for e in m["files"]})
    assert digests[0] == digests[1]


def test_train_rerun_is_byte_identical(config, tmp_path):
    out = tmp_path / "run"
    run("train", "--config", config, "--out", out)
    first = {p: (out / p).read_bytes() for p in ("metrics.csv", "maxvio.csv", "eval.csv", "geometry_layer0.csv")}
    run("train", "--config", config, "--out", out)
    for p, data in first.items():
        assert (out / p).read_bytes() == data


def test_train_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("experts = 4\nfoo=1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o") != 0
    err = capsys.readouterr().err
    assert "foo" in err and "line 2" in err


def test_train_missing_config_and_out(config, tmp_path, monkeypatch, capsys):
    assert run("train", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "o") == 2
    monkeypatch.delenv(cli.OUT_ROOT_ENV, raising=False)
    assert run("train", "--config", config) == 2
    assert cli.OUT_ROOT_ENV in capsys.readouterr().err


def test_train_default_out_root(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
    assert run("train", "--config", config, "--steps", 2) == 0
    assert (tmp_path / "root" / "tiny-loss_free-s0" / "metrics.csv").exists()


def test_train_respects_lock(config, tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123\n")
    assert run("train", "--config", config, "--out", out) == 2
    assert "locked" in capsys.readouterr().err
    assert not (out / "metrics.csv").exists()


def test_train_resume(config, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run("train", "--config", config, "--out", full)
    run("train", "--config", config, "--out", part)
    assert run("train", "--config", config, "--out", part, "--resume", part / "checkpoints/step000003.ckpt") == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_gradcheck_default_passes(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    for g in gradcheck.GROUPS:
        assert any(line.split()[1:2] == [g] for line in out.splitlines()), g
    errs = [float(tok.split("=")[1]) for tok in out.split() if tok.startswith("max_rel_err=")]
    assert errs and max(errs) <= 2e-3


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = gradcheck.backward_pass

    def corrupted(model, fwd):
        grads = real(model, fwd)
        for k in grads:
            if k.endswith("w_up"):
                grads[k] = grads[k] * 1.05
        return grads

    monkeypatch.setattr(gradcheck, "backward_pass", corrupted)
    assert run("gradcheck", "--variant", "none") == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "w_up" in out and "analytic=" in out


def test_probe_geometry_on_untrained_checkpoint(config, tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--config", config, "--out", out, "--steps", 0)
    capsys.readouterr()
    assert run("probe", "geometry", "--checkpoint", out / "checkpoints/final.ckpt", "--config", out / "config.txt",
               "--out", tmp_path / "probe") == 0
    text = capsys.readouterr().out
    assert "layer 0: mu=" in text and "layer 1: mu=" in text
    for l in (0, 1):
        mu, mat = read_geometry_csv(tmp_path / "probe" / f"geometry_layer{l}.csv")
        np.testing.assert_allclose(mat, mat.T, atol=1e-6)
        np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-6)


def test_probe_coupling_reports_zero_unselected(config, tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--config", config, "--out", out)
    capsys.readouterr()
    assert run("probe", "coupling", "--checkpoint", out / "checkpoints/final.ckpt", "--config", config,
               "--out", tmp_path / "probe", "--tokens", 32) == 0
    text = capsys.readouterr().out
    assert "unselected rows with nonzero gradient: 0" in text
    with open(tmp_path / "probe" / "coupling.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and min(float(r["abs_cos"]) for r in rows) >= 1 - 1e-5


def test_probe_correlation_insufficient(tmp_path, capsys):
    config = tmp_path / "small.cfg"
    config.write_text(TINY.replace("batch_seqs = 4", "batch_seqs = 1").replace("steps = 6", "steps = 0"))
    out = tmp_path / "run"
    run("train", "--config", config, "--out", out)
    capsys.readouterr()
    assert run("probe", "correlation", "--checkpoint", out / "checkpoints/final.ckpt", "--config", out / "config.txt",
               "--out", tmp_path / "probe", "--permutations", 200) == 0
    text = capsys.readouterr().out
    assert "status=insufficient" in text
    assert (tmp_path / "probe" / "correlation_pairs.csv").exists()


def test_probe_digest_mismatch(config, tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--config", config, "--out", out, "--steps", 0)
    other = tmp_path / "other.cfg"
    other.write_text(TINY.replace("experts = 4", "experts = 4\nseed = 7"))
    capsys.readouterr()
    assert run("probe", "geometry", "--checkpoint", out / "checkpoints/final.ckpt", "--config", other,
               "--out", tmp_path / "probe") == 2
    assert "digest" in capsys.readouterr().err


def _fake_run(path, variant, maxvio):
    path.mkdir()
    (path / "config.txt").write_text(f"variant = {variant}\n")
    with open(path / "metrics.csv", "w") as fh:
        fh.write("step,loss,ppl,lr,maxvio_mean,maxvio_l0,aux_loss,z_loss,seq_aux_loss\n")
        for s, m in enumerate(maxvio, start=1):
            fh.write(f"{s},1.0,2.718,0.001,{m},{m},,,\n")


def test_report_single_run_projection(tmp_path, capsys):
    _fake_run(tmp_path / "r1", "none", [1.0, 3.0, 5.0, 7.0])
    assert run("report", tmp_path / "r1", "--out", tmp_path / "rep", "--window", 2) == 0
    with open(tmp_path / "rep" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["step"] for r in rows] == ["1", "2", "3", "4"]
    assert [r["maxvio_mean"] for r in rows] == ["1.0", "3.0", "5.0", "7.0"]
    assert [float(r["maxvio_mean_rolling"]) for r in rows] == [1.0, 2.0, 4.0, 6.0]
    assert all(r["variant"] == "none" and r["run"] == "r1" for r in rows)


def test_report_four_variants(tmp_path, capsys):
    runs = []
    for v in ("aux_loss", "loss_free", "kmeans", "none"):
        _fake_run(tmp_path / v, v, [0.5] * 300)
        runs.append(tmp_path / v)
    assert run("report", *runs, "--out", tmp_path / "rep") == 0
    table = (tmp_path / "rep" / "summary.txt").read_text().splitlines()
    assert len(table) == 2 + 4
    assert "maxvio_roll200" in table[0]
    assert capsys.readouterr().out.splitlines() == table


def test_report_missing_metrics(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty", "--out", tmp_path / "rep") == 2
    assert "empty" in capsys.readouterr().err


def test_rolling_mean():
    assert cli.rolling_mean([1, 2, 3, 4, 5], 3) == [1.0, 1.5, 2.0, 3.0, 4.0]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "smoelab", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "smoelab" in res.stdout
