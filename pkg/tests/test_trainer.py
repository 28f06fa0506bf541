import math

import numpy as np
import pytest

from smoelab.balancing import load_fractions
from smoelab.probes import maxvio
from smoelab.trainer import (
    CheckpointError,
    ConfigError,
    DataStream,
    IncompatibleCheckpoint,
    Model,
    ModelConfig,
    NonFiniteLoss,
    OptimizerState,
    adamw_step,
    backward_pass,
    checkpoint_load,
    checkpoint_save,
    forward_pass,
    lr_at,
    parse_config,
    segment_purity,
    synth_data_gen,
    train_loop,
)
from smoelab.trainer.checkpoint import MAGIC, load_arrays, save_arrays
from smoelab.trainer.model import rmsnorm, rmsnorm_backward
from smoelab.trainer.train import metrics_header
from smoelab.numerics import Rng

SMALL = dict(vocab=32, d_model=16, layers=2, experts=4, top_k=2, d_ff=16, batch_seqs=4, seq_len=16,
             clusters=4, warmup=5, eval_batches=1, checkpoint_every=0)


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


# --- data -----------------------------------------------------------------

def test_synth_data_deterministic():
    a, la = synth_data_gen(Rng(5), 8, 256, 64, 4)
    b, lb = synth_data_gen(Rng(5), 8, 256, 64, 4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    c, _ = synth_data_gen(Rng(6), 8, 256, 64, 4)
    assert not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() < 256


def test_synth_data_single_cluster():
    toks, labels = synth_data_gen(Rng(1), 1, 16, 200, 3, noise=0.0)
    assert np.all(labels == 0)
    assert toks.min() >= 0 and toks.max() < 16


def test_synth_data_purity():
    toks, labels = synth_data_gen(Rng(2), 8, 256, 512, 16)
    assert segment_purity(toks, labels, 8, 256) >= 0.95
    # segments are long under the default stickiness
    switches = np.count_nonzero(np.diff(labels, axis=1))
    assert switches / labels[:, 1:].size < 0.05


def test_synth_data_rejects_too_many_clusters():
    with pytest.raises(ValueError):
        synth_data_gen(Rng(0), 10, 5, 8)


def test_data_stream_batches_depend_only_on_step():
    ds = DataStream("synthetic_clustered", 3, 64, 16, 4, clusters=4)
    a = ds.batch(7)
    ds2 = DataStream("synthetic_clustered", 3, 64, 16, 4, clusters=4)
    ds2.batch(1)
    np.testing.assert_array_equal(a, ds2.batch(7))
    assert a.shape == (4, 17)
    assert not np.array_equal(ds.batch(7, "eval"), a)


def test_text_stream(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_text("the quick brown fox jumps over the lazy dog. " * 40, encoding="utf-8")
    ds = DataStream("text_file", 0, 256, 16, 3, path=str(p))
    b = ds.batch(2)
    assert b.shape == (3, 17)
    raw = p.read_bytes()
    assert bytes(b[0].astype(np.uint8)) in raw
    short = tmp_path / "short.txt"
    short.write_text("abc")
    with pytest.raises(ValueError):
        DataStream("text_file", 0, 256, 16, 3, path=str(short))


# --- config ---------------------------------------------------------------

def test_parse_config_roundtrip_and_comments():
    cfg = parse_config("# comment\nexperts = 4  # inline\ntop_k=1\nvariant = kmeans\nlr_peak = 2e-3\n")
    assert (cfg.experts, cfg.top_k, cfg.variant, cfg.lr_peak) == (4, 1, "kmeans", 2e-3)
    again = parse_config(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()


def test_parse_config_errors_name_key_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("experts = 4\nfoo=1\n")
    assert exc.value.line == 2 and exc.value.key == "foo"
    assert "foo" in str(exc.value) and "line 2" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        parse_config("experts = 2\ntop_k = 3\n")
    assert exc.value.key == "top_k" and exc.value.line == 2
    with pytest.raises(ConfigError):
        parse_config("experts = four\n")
    with pytest.raises(ConfigError):
        parse_config("variant = sigmoid\n")
    with pytest.raises(ConfigError):
        parse_config("experts\n")
    with pytest.raises(ConfigError):
        parse_config("seed = 1\nseed = 2\n")


def test_config_overrides_and_probe_layers():
    cfg = parse_config("seed = 1\n", {"seed": 9, "variant": "none"})
    assert cfg.seed == 9 and cfg.variant == "none"
    assert ModelConfig(layers=9).probe_layer_ids() == [0, 4, 8]
    assert ModelConfig(layers=1).probe_layer_ids() == [0]
    assert ModelConfig(layers=4, probe_layers="3, 1").probe_layer_ids() == [1, 3]
    with pytest.raises(ConfigError):
        ModelConfig(layers=2, probe_layers="5").probe_layer_ids()


# --- model ----------------------------------------------------------------

def test_rmsnorm_backward_matches_finite_differences():
    rng = Rng(0)
    h = rng.normal((3, 5), 1.0, np.float64)
    u = rng.child("u").normal((3, 5), 1.0, np.float64)
    y, r = rmsnorm(h)
    g = rmsnorm_backward(u, h, r)
    eps = 1e-6
    num = np.zeros_like(h)
    for idx in np.ndindex(h.shape):
        hp, hm = h.copy(), h.copy()
        hp[idx] += eps
        hm[idx] -= eps
        num[idx] = (np.sum(u * rmsnorm(hp)[0]) - np.sum(u * rmsnorm(hm)[0])) / (2 * eps)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-8)


def test_untrained_loss_near_log_vocab():
    cfg = small_cfg(vocab=256, d_model=64, experts=8, d_ff=128)
    model = Model.init(cfg)
    toks = Rng(0).integers(0, 256, (4, 65))
    loss = forward_pass(model, toks).loss
    assert abs(loss - math.log(256)) <= 0.1 * math.log(256)


def test_single_token_vocab_has_zero_loss():
    model = Model.init(small_cfg(vocab=1, clusters=1))
    fwd = forward_pass(model, np.zeros((2, 9), dtype=np.int64))
    assert fwd.loss == pytest.approx(0.0, abs=1e-6)


def test_forward_is_bitwise_stable():
    cfg = small_cfg()
    toks = DataStream.from_config(cfg).batch(1)
    a = forward_pass(Model.init(cfg), toks)
    b = forward_pass(Model.init(cfg), toks)
    assert a.loss == b.loss and a.total == b.total


def test_forward_rejects_bad_tokens():
    model = Model.init(small_cfg())
    with pytest.raises(ValueError):
        forward_pass(model, np.full((1, 4), 32))


def test_non_finite_loss_raises():
    model = Model.init(small_cfg())
    model.head[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss):
        forward_pass(model, DataStream.from_config(model.config).batch(1))


@pytest.mark.parametrize("variant", ["aux_loss", "loss_free_seq_aux"])
def test_zero_coefficient_is_bit_identical(variant):
    cfg = small_cfg(variant=variant, lambda_aux=0.0, lambda_z=0.0, lambda_seq=0.0)
    model = Model.init(cfg)
    toks = DataStream.from_config(cfg).batch(1)
    with_terms = forward_pass(model, toks)
    without = forward_pass(model, toks, terms={})
    assert with_terms.aux  # the terms were computed
    assert with_terms.total == without.total
    ga, gb = backward_pass(model, with_terms), backward_pass(model, without)
    for k in ga:
        assert np.array_equal(ga[k], gb[k]), k


def test_kmeans_router_gets_no_gradient_and_fewer_params():
    learned = Model.init(small_cfg(variant="loss_free"))
    km = Model.init(small_cfg(variant="kmeans"))
    cfg = km.config
    assert learned.n_learnable() - km.n_learnable() == cfg.layers * cfg.experts * cfg.d_model
    grads = backward_pass(km, forward_pass(km, DataStream.from_config(cfg).batch(1)))
    assert not any("router" in k or "centroid" in k for k in grads)
    assert not any("centroid" in k for k in OptimizerState.for_params(km.learnable()).m)
    assert set(km.running_state()) == {f"layer{l}.centroid.{s}" for l in range(cfg.layers) for s in ("c", "bias")}


@pytest.mark.parametrize("variant", ["none", "kmeans", "aux_loss"])
def test_expert_evaluations_equal_k_tokens_layers(variant):
    cfg = small_cfg(variant=variant)
    fwd = forward_pass(Model.init(cfg), DataStream.from_config(cfg).batch(1))
    assert fwd.expert_evals == cfg.top_k * cfg.batch_seqs * cfg.seq_len * cfg.layers


# --- optimizer ------------------------------------------------------------

def test_adamw_zero_grad_is_pure_decay():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st = OptimizerState.for_params(p)
    adamw_step(st, p, {"w": np.zeros(3)}, lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.5))


def test_adamw_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-3])
    p = {"w": np.zeros(3)}
    st = OptimizerState.for_params(p)
    adamw_step(st, p, {"w": g.copy()}, lr=0.01, eps=1e-8)
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st.step == 1


def test_adamw_zero_lr_is_identity():
    p = {"w": np.array([1.0, 2.0])}
    st = OptimizerState.for_params(p)
    adamw_step(st, p, {"w": np.array([5.0, -1.0])}, lr=0.0, weight_decay=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_adamw_name_mismatch():
    st = OptimizerState.for_params({"a": np.zeros(1)})
    with pytest.raises(KeyError):
        adamw_step(st, {"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.1)


def test_lr_schedule():
    assert lr_at(1, 1e-3, 1e-4, 100, 5000) == pytest.approx(1e-5)
    assert lr_at(100, 1e-3, 1e-4, 100, 5000) == pytest.approx(1e-3)
    assert lr_at(5000, 1e-3, 1e-4, 100, 5000) == pytest.approx(1e-4)
    mid = lr_at(2550, 1e-3, 1e-4, 100, 5000)
    assert mid == pytest.approx(0.5 * (1e-3 + 1e-4))
    vals = [lr_at(s, 1e-3, 1e-4, 100, 5000) for s in range(100, 5001, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# --- checkpoints ----------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    for variant in ("loss_free", "kmeans"):
        cfg = small_cfg(variant=variant)
        model = Model.init(cfg)
        opt = OptimizerState.for_params(model.learnable())
        for name, arr in model.running_state().items():
            arr[...] = Rng(1).child(name).normal(arr.shape, 1.0, arr.dtype)
        opt.m = {k: v + 1 for k, v in model.learnable().items()}
        opt.v = {k: v * v for k, v in model.learnable().items()}
        opt.step = 17
        path = tmp_path / f"{variant}.ckpt"
        checkpoint_save(path, model, opt, 42, cfg.digest())
        other = Model.init(cfg.replace(seed=99))
        opt2 = OptimizerState.for_params(other.learnable())
        assert checkpoint_load(path, other, opt2, cfg.digest()) == 42
        for k, v in {**model.learnable(), **model.running_state()}.items():
            got = {**other.learnable(), **other.running_state()}[k]
            assert got.dtype == v.dtype and np.array_equal(got, v), k
        assert opt2.step == 17
        for k in opt.m:
            assert np.array_equal(opt2.m[k], opt.m[k]) and np.array_equal(opt2.v[k], opt.v[k])


def test_checkpoint_truncated_or_corrupt(tmp_path):
    cfg = small_cfg()
    model = Model.init(cfg)
    path = tmp_path / "a.ckpt"
    checkpoint_save(path, model, OptimizerState.for_params(model.learnable()), 1, cfg.digest())
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    target = Model.init(cfg.replace(seed=5))
    before = {k: v.copy() for k, v in target.learnable().items()}
    for cut in (4, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "t.ckpt", target)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "f.ckpt", target)
    for k, v in target.learnable().items():
        assert np.array_equal(v, before[k])


def test_checkpoint_incompatible(tmp_path):
    cfg = small_cfg()
    model = Model.init(cfg)
    path = tmp_path / "a.ckpt"
    checkpoint_save(path, model, OptimizerState.for_params(model.learnable()), 1, cfg.digest())
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint_load(path, model, digest=cfg.replace(seed=1).digest())
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint_load(path, Model.init(small_cfg(variant="kmeans")))
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint_load(path, Model.init(small_cfg(experts=8)))


def test_save_arrays_rejects_unsupported_dtype(tmp_path):
    with pytest.raises((CheckpointError, TypeError, ValueError)):
        save_arrays(tmp_path / "x.ckpt", {"a": np.zeros(2, dtype=np.complex64)}, b"\0" * 32)
    save_arrays(tmp_path / "y.ckpt", {"a": np.arange(3, dtype=np.int32)}, b"\1" * 32)
    digest, arrs = load_arrays(tmp_path / "y.ckpt")
    assert digest == b"\1" * 32 and arrs["a"].tolist() == [0, 1, 2]


# --- training loop ----------------------------------------------------------

def test_train_loop_metrics_and_artifacts(tmp_path):
    cfg = small_cfg(steps=6, checkpoint_every=3, variant="aux_loss")
    res = train_loop(cfg, tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(metrics_header(2))
    assert lines[0] == "step,loss,ppl,lr,maxvio_mean,maxvio_l0,maxvio_l1,aux_loss,z_loss,seq_aux_loss"
    assert len(lines) == 7
    row = lines[1].split(",")
    assert math.exp(float(row[1])) == pytest.approx(float(row[2]))
    assert row[7] and row[8] and row[9] == ""
    for ln in lines[1:]:
        vals = ln.split(",")
        assert float(vals[4]) >= 0
    for name in ("maxvio.csv", "eval.csv", "config.txt", "geometry_layer0.csv", "geometry_layer1.csv",
                 "checkpoints/step000003.ckpt", "checkpoints/step000006.ckpt", "checkpoints/final.ckpt"):
        assert (tmp_path / "run" / name).exists(), name
    assert all(p.exists() for p in res.files)


def test_logged_maxvio_matches_probe(tmp_path):
    cfg = small_cfg(steps=3)
    train_loop(cfg, tmp_path)
    row = (tmp_path / "metrics.csv").read_text().splitlines()[1].split(",")
    model = Model.init(cfg)
    fwd = forward_pass(model, DataStream.from_config(cfg).batch(1))
    expect = [maxvio(load_fractions(d.selected, cfg.experts, cfg.top_k)) for d in fwd.decisions]
    assert [float(v) for v in row[5:7]] == expect


def test_train_loop_deterministic(tmp_path):
    cfg = small_cfg(steps=8, variant="kmeans")
    train_loop(cfg, tmp_path / "a")
    train_loop(cfg, tmp_path / "b")
    for name in ("metrics.csv", "maxvio.csv", "eval.csv", "geometry_layer0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a/checkpoints/final.ckpt").read_bytes() == (tmp_path / "b/checkpoints/final.ckpt").read_bytes()


@pytest.mark.parametrize("variant", ["loss_free", "kmeans", "aux_loss"])
def test_resume_equals_uninterrupted(tmp_path, variant):
    cfg = small_cfg(steps=10, checkpoint_every=4, variant=variant)
    train_loop(cfg, tmp_path / "full")
    part = tmp_path / "part"
    train_loop(cfg, part)
    # rewind: drop the later rows by resuming from the midpoint checkpoint
    train_loop(cfg, part, resume=part / "checkpoints" / "step000004.ckpt")
    for name in ("metrics.csv", "maxvio.csv", "eval.csv", "checkpoints/final.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (part / name).read_bytes(), name


def test_resume_from_fresh_directory(tmp_path):
    cfg = small_cfg(steps=6, checkpoint_every=3)
    train_loop(cfg, tmp_path / "full")
    res = train_loop(cfg, tmp_path / "resumed", resume=tmp_path / "full/checkpoints/step000003.ckpt")
    full = (tmp_path / "full/metrics.csv").read_text().splitlines()
    got = (tmp_path / "resumed/metrics.csv").read_text().splitlines()
    assert got == [full[0]] + full[4:]
    assert res.final_loss == float(full[-1].split(",")[1])


def test_resume_rejects_other_config(tmp_path):
    cfg = small_cfg(steps=3, checkpoint_every=3)
    train_loop(cfg, tmp_path / "a")
    with pytest.raises(IncompatibleCheckpoint):
        train_loop(cfg.replace(seed=4), tmp_path / "b", resume=tmp_path / "a/checkpoints/final.ckpt")


def test_training_reduces_loss(tmp_path):
    cfg = ModelConfig(steps=500, checkpoint_every=0, eval_batches=1)
    train_loop(cfg, tmp_path)
    rows = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
    first, last = float(rows[0].split(",")[1]), float(rows[-1].split(",")[1])
    assert last <= 0.8 * first
