"""Acceptance suite: one test per criterion, summarised at the end of the run.

The end-to-end criteria (5, 7, 10) share one pretrained toy backbone built
with the default settings; building it is part of the timed pipeline.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL_PLAN
from oracles import auc_pairs, confusion, conv3d_loops, mode_product_loops, tucker_param_count
from gltpeft import autodiff as ad
from gltpeft import checkpoint
from gltpeft import tensor as T
from gltpeft.adapters import StageGate, TuckerAdapter, init_adapter, logit
from gltpeft.backbone import Policy, apply_glt, build_network, configure, state, to_classifier
from gltpeft.cli import run
from gltpeft.harness.data import gen_dataset
from gltpeft.harness.gradcheck import network_grad_check
from gltpeft.harness.metrics import compute_metrics
from gltpeft.harness.training import AdaptConfig, PretrainConfig, adapt, adapt_dataset, prepare, pretrain, sweep

ADAPTED = ("down2", "down3", "down4", "bottleneck")


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# --- shared end-to-end pipeline --------------------------------------------


@pytest.fixture(scope="module")
def pipeline():
    t0 = time.perf_counter()
    pre = pretrain(PretrainConfig())
    cfg = AdaptConfig()
    ds = adapt_dataset(cfg)
    cache = {}
    results = {}
    for method in ("head-only", "light-head", "glt"):
        results[method] = adapt(AdaptConfig(method=method), pre.net, ds, cache).report
    return {"pre": pre, "dataset": ds, "results": results, "seconds": time.perf_counter() - t0}


# --- 1 ----------------------------------------------------------------------


def _single_layer_error(rng):
    gate = StageGate("s", 0.6)
    a = init_adapter("s.conv", 6, 4, 3, 0.5, gate, rng.standard_normal((6, 4, 3, 3, 3)), 1)
    a.core[...] = 0.3 * rng.standard_normal(a.core.shape)
    gate.raw[...] = 0.4
    ps = ad.ParamSet()
    for name, v in a.tensors().items():
        ps.add(name, v)
    ps.add(gate.param_name, gate.raw)
    x = rng.standard_normal((2, 4, 6, 6, 6))
    y = np.array([1.0, 0.0])
    head = rng.standard_normal((1, 6))

    def loss():
        h = ad.conv3d(x, a.effective_weight_node(ad.Context()), 1, 1)
        logits = ad.dense(ad.global_avg_pool(h), ad.constant(head), ad.constant(np.zeros(1)))
        return ad.bce_with_logits(ad.reshape(logits, (2,)), y)

    return ad.finite_diff_check(loss, ps, eps=1e-5, max_coords=None)


def _toy_network():
    net = to_classifier(build_network(head_kind="segmentation", seed=13), seed=14)
    apply_glt(net, ADAPTED, 0.0625, 0.6, seed=15)
    # move off the zero-core start so every factor has a non-trivial gradient
    rng = np.random.default_rng(16)
    values = net.param_set().values
    for name in sorted(net.trainable_names()):
        if name.endswith(".tucker.core"):
            values[name][...] = 0.05 * rng.standard_normal(values[name].shape)
        if name.endswith(".gate.raw"):
            values[name][...] = rng.normal(0.4, 0.3)
    ds = gen_dataset(10, (0.4, 0.3, 0.3), seed=2, difficulty=0.0)
    return net, ds.volumes[:2], np.array([1.0, 0.0])


@criterion(1, "gradient correctness (finite differences)")
def test_criterion_1_gradients(record_property):
    t0 = time.perf_counter()
    single = _single_layer_error(np.random.default_rng(0))
    net, x, y = _toy_network()
    stats = {}
    full = network_grad_check(net, x, y, 1e-4, max_coords=64, stats=stats)
    seconds = time.perf_counter() - t0
    record_property("single_layer", f"{single:.2e}")
    record_property("network", f"{full:.2e}")
    record_property("coords", f"{stats['checked']} checked, {len(stats['kinks'])} skipped at relu kinks")
    record_property("seconds", f"{seconds:.1f}")
    assert single < 1e-4
    assert full < 1e-4
    assert len(stats["kinks"]) < 0.05 * (stats["checked"] + len(stats["kinks"]))
    assert seconds < 60


# --- 2 ----------------------------------------------------------------------


@criterion(2, "algebraic oracles (mode product, conv3d, unfold/fold)")
def test_criterion_2_algebra(record_property):
    rng = np.random.default_rng(2)
    worst_mp = worst_conv = 0.0
    for _ in range(60):
        ndim = int(rng.integers(2, 6))
        shape = tuple(int(s) for s in rng.integers(1, 5, size=ndim))
        mode = int(rng.integers(ndim))
        t = rng.standard_normal(shape)
        m = rng.standard_normal((int(rng.integers(1, 5)), shape[mode]))
        worst_mp = max(worst_mp, np.max(np.abs(T.mode_product(t, m, mode) - mode_product_loops(t, m, mode))))
    for _ in range(60):
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        size = int(rng.integers(k, 7))
        x = rng.standard_normal((c_in, size, size, size))
        w = rng.standard_normal((c_out, c_in, k, k, k))
        worst_conv = max(worst_conv, np.max(np.abs(T.conv3d(x, w, stride, padding) - conv3d_loops(x, w, stride, padding))))
    exact = True
    for _ in range(60):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 6))))
        t = rng.standard_normal(shape)
        mode = int(rng.integers(len(shape)))
        m = rng.standard_normal(T.unfold(t, mode).shape)
        exact &= np.array_equal(T.fold(T.unfold(t, mode), mode, shape), t)
        exact &= np.array_equal(T.unfold(T.fold(m, mode, shape), mode), m)
    record_property("mode_product", f"{worst_mp:.1e}")
    record_property("conv3d", f"{worst_conv:.1e}")
    record_property("fold/unfold exact", exact)
    assert worst_mp <= 1e-12 and worst_conv <= 1e-12 and exact


# --- 3 ----------------------------------------------------------------------


def _pinned(base, core, u_out, u_in, g):
    return TuckerAdapter("s.conv", base, core, u_out, u_in, g)


@criterion(3, "update-rule identities")
def test_criterion_3_update_rule(record_property):
    rng = np.random.default_rng(3)
    base = rng.standard_normal((8, 6, 3, 3, 3))
    core = rng.standard_normal((3, 2, 3, 3, 3))
    u_out, u_in = rng.standard_normal((8, 3)), rng.standard_normal((6, 2))
    delta = _pinned(base, core, u_out, u_in, 0.0).delta_weight()
    add = np.max(np.abs(_pinned(base, core, u_out, u_in, 0.0).effective_weight() - (base + delta)))
    mul = np.max(np.abs(_pinned(base, core, u_out, u_in, 1.0).effective_weight() - (base + base * delta)))
    w = {g: _pinned(base, core, u_out, u_in, g).effective_weight() for g in (0.0, 0.5, 1.0)}
    mid = np.max(np.abs(w[0.5] - 0.5 * (w[0.0] + w[1.0])))

    # first-order branch vs exact exponential, halving the delta
    gate = StageGate("s", 0.6)
    errs = []
    for scale in (1.0, 0.5):
        c = core * 0.1 * scale / np.max(np.abs(delta))
        a = TuckerAdapter("s.conv", base, c, u_out, u_in, gate)
        assert np.max(np.abs(a.delta_weight())) <= 0.1 + 1e-15
        errs.append(np.max(np.abs(a.effective_weight() - a.effective_weight_exact())))
    ratio = errs[0] / errs[1]
    record_property("g=0", f"{add:.1e}")
    record_property("g=1", f"{mul:.1e}")
    record_property("midpoint", f"{mid:.1e}")
    record_property("halving ratio", f"{ratio:.3f}")
    assert add <= 1e-14 and mul <= 1e-14 and mid <= 1e-13
    assert 3.5 <= ratio <= 4.5


# --- 4 ----------------------------------------------------------------------


def _round_half_up_rank(c, ratio):
    r = int(c * ratio + 0.5)
    return min(c, max(1, r))


@criterion(4, "parameter accounting")
def test_criterion_4_parameter_count(record_property):
    rng = np.random.default_rng(4)
    for i in range(25):
        c_out, c_in = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        k = int(rng.choice([1, 3, 5]))
        ratio = float(rng.uniform(0.01, 1.0))
        a = init_adapter("s.conv", c_out, c_in, k, ratio, StageGate("s"), np.zeros((c_out, c_in, k, k, k)), i)
        r_out, r_in = _round_half_up_rank(c_out, ratio), _round_half_up_rank(c_in, ratio)
        assert a.trainable_param_count() == tucker_param_count(c_out, c_in, k, r_out, r_in)
    net = configure(to_classifier(build_network(head_kind="segmentation", seed=1), seed=2), Policy(stages=ADAPTED))
    params = net.parameters()
    enumerated = sum(1 for n in net.trainable_names() for _ in np.ndindex(params[n].shape))
    assert net.trainable_count() == enumerated
    fraction = net.trainable_count() / net.full_finetune_count()
    record_property("trainable", f"{net.trainable_count()} of {net.full_finetune_count()} ({fraction:.2%})")
    assert fraction < 0.05


# --- 5 ----------------------------------------------------------------------


@criterion(5, "freeze and zero-init contracts")
def test_criterion_5_freeze_and_zero_init(pipeline, record_property):
    pre = pipeline["pre"].net
    cfg = AdaptConfig(n_subjects=50, split=(0.4, 0.3, 0.3), epochs=10, batch_size=2)
    ds = adapt_dataset(cfg)
    steps = math.ceil(len(ds.split("train")) / cfg.batch_size) * cfg.epochs
    ref = prepare(cfg, pre)
    res = adapt(cfg, pre, ds)
    trainable = set(res.net.trainable_names())
    after, before = res.net.parameters(), ref.parameters()
    frozen = [n for n in after if n not in trainable]
    identical = all(np.array_equal(after[n], before[n]) for n in frozen)
    moved = any(not np.array_equal(after[n], before[n]) for n in trainable)

    x = ds.volumes[:8]
    step0 = np.max(np.abs(prepare(cfg, pre).forward_classify(x) - to_classifier(pre, cfg.seed).forward_classify(x)))
    record_property("steps", steps)
    record_property("frozen tensors", len(frozen))
    record_property("step-0 logit diff", f"{step0:.1e}")
    assert steps == 100
    assert identical and moved
    assert step0 <= 1e-12


# --- 6 ----------------------------------------------------------------------


@criterion(6, "metrics against pair counting")
def test_criterion_6_metrics(record_property):
    rng = np.random.default_rng(6)
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(1, 13))
        labels = rng.integers(0, 2, size=n)
        # coarse grid on half the trials to force ties, including at the threshold
        scores = rng.integers(0, 9, size=n) / 8 if trial % 2 else rng.uniform(size=n)
        m = compute_metrics(scores, labels)
        tp, tn, fp, fn = confusion(scores.tolist(), labels.tolist())
        assert (m.tp, m.tn, m.fp, m.fn) == (tp, tn, fp, fn)
        assert m.acc == (tp + tn) / n
        assert m.sen == (tp / (tp + fn) if tp + fn else None)
        assert m.spe == (tn / (tn + fp) if tn + fp else None)
        assert m.f1 == (2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else None)
        ref = auc_pairs(scores.tolist(), labels.tolist())
        if ref is None:
            assert m.auc is None
        else:
            worst = max(worst, abs(m.auc - ref))
    record_property("auc max diff", f"{worst:.1e}")
    assert worst <= 1e-12


# --- 7 ----------------------------------------------------------------------


@criterion(7, "desk-scale transfer ordering")
def test_criterion_7_transfer_ordering(pipeline, record_property):
    auc = {m: r.test.auc for m, r in pipeline["results"].items()}
    for m, a in auc.items():
        record_property(m, f"{a:.4f}")
    record_property("seconds", f"{pipeline['seconds']:.0f}")
    ds = pipeline["dataset"]
    assert len(ds) >= 300 and ds.size == 32
    assert auc["head-only"] < auc["light-head"] <= auc["glt"]
    assert auc["glt"] >= 0.90
    assert pipeline["seconds"] < 30 * 60


# --- 8 ----------------------------------------------------------------------


def _constant_pair(tmp_path, gates, consts, a=0.5, b=-0.25, d=0.02):
    base = build_network(SMALL_PLAN, "classification", seed=8)
    enc = base.encoder_params()
    for layer, c in consts.items():
        enc[f"{layer}.weight"][...] = c
    model = build_network(SMALL_PLAN, "classification", seed=8)
    menc = model.encoder_params()
    for layer, c in consts.items():
        menc[f"{layer}.weight"][...] = c
    configure(model, Policy(stages=ADAPTED, ratio=0.01))
    for stage, g in gates.items():
        model.gates[stage].raw[...] = logit(g)
    expected = {}
    for layer, c in consts.items():
        adapter = model.adapters[layer]
        adapter.u_out[...] = a
        adapter.u_in[...] = b
        adapter.core[...] = d
        r_out, r_in = adapter.ranks
        g = gates[layer.split(".")[0]]
        # every kernel entry changes by delta * ((1 - g) + g * c)
        delta = a * b * d * r_out * r_in
        expected[layer] = abs(delta * ((1 - g) + g * c)) / abs(c)
    checkpoint.save(tmp_path / "base.ckpt", state(base))
    checkpoint.save(tmp_path / "model.ckpt", state(model))
    return expected


@criterion(8, "diagnose against hand-computed magnitudes")
def test_criterion_8_diagnose(tmp_path, record_property):
    gates = {"down2": 0.2, "down3": 0.4, "down4": 0.6, "bottleneck": 0.8}
    layers = [f"{s}.conv_{w}" for s in ADAPTED for w in "ab"]
    consts = {layer: 0.1 * (i + 1) * (-1) ** i for i, layer in enumerate(layers)}
    expected = _constant_pair(tmp_path, gates, consts)
    assert run(["diagnose", "--model", str(tmp_path / "model.ckpt"), "--base", str(tmp_path / "base.ckpt"), "-o", str(tmp_path / "d")]) == 0
    got = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    worst = max(abs(got["layers"][k] - v) for k, v in expected.items())
    assert set(got["layers"]) == set(expected)
    assert abs(got["mean"] - sum(expected.values()) / len(expected)) <= 1e-12

    fresh = configure(build_network(SMALL_PLAN, "classification", seed=8), Policy(stages=ADAPTED))
    checkpoint.save(tmp_path / "fresh.ckpt", state(fresh))
    checkpoint.save(tmp_path / "fresh_base.ckpt", state(build_network(SMALL_PLAN, "classification", seed=8)))
    assert run(["diagnose", "--model", str(tmp_path / "fresh.ckpt"), "--base", str(tmp_path / "fresh_base.ckpt"), "-o", str(tmp_path / "f")]) == 0
    zero = json.loads((tmp_path / "f" / "diagnose.json").read_text())
    record_property("max diff", f"{worst:.1e}")
    record_property("fresh mean", zero["mean"])
    assert worst <= 1e-12
    assert all(v == 0.0 for v in zero["layers"].values()) and zero["mean"] == 0.0


# --- 9 ----------------------------------------------------------------------


def _cli_pipeline(root):
    plan = ",".join(map(str, SMALL_PLAN))
    data, pre = root / "data", root / "pre"
    steps = [
        ["gen-data", "-o", str(data), "--n-subjects", "24", "--split", "0.5,0.25,0.25", "--difficulty", "0.1"],
        ["pretrain", "-o", str(pre), "--epochs", "1", "--n-volumes", "10", "--channel-plan", plan],
        ["adapt", "-o", str(root / "adapt"), "--checkpoint", str(pre / "pretrained.ckpt"), "--dataset", str(data / "data.ckpt"), "--epochs", "2"],
        ["sweep", "-o", str(root / "sweep"), "--checkpoint", str(pre / "pretrained.ckpt"), "--dataset", str(data / "data.ckpt"),
         "--epochs", "1", "--ratios", "0.5,0.25,0.125", "--gates", "0.2,0.4,0.6,0.8"],
        ["diagnose", "-o", str(root / "diag"), "--model", str(root / "adapt" / "model.ckpt"), "--base", str(pre / "pretrained.ckpt")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv


@criterion(9, "bit-identical reruns")
def test_criterion_9_reproducible(tmp_path, monkeypatch, record_property):
    outputs = []
    for name in ("one", "two"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        _cli_pipeline(Path("run"))
        files = sorted(p for p in Path("run").rglob("*") if p.is_file())
        outputs.append({str(p): p.read_bytes() for p in files})
    record_property("files compared", len(outputs[0]))
    assert any(k.endswith(".ckpt") for k in outputs[0]) and any(k.endswith("metrics.json") for k in outputs[0])
    assert outputs[0].keys() == outputs[1].keys()
    differing = [k for k in outputs[0] if outputs[0][k] != outputs[1][k]]
    assert not differing, differing


# --- 10 ---------------------------------------------------------------------


@criterion(10, "rank/gate sweep")
def test_criterion_10_sweep(pipeline, record_property):
    ratios, gates = (0.125, 0.0625, 0.03125), (0.2, 0.4, 0.6, 0.8)
    cfg = AdaptConfig(n_subjects=100, epochs=3)
    res = sweep(cfg, pipeline["pre"].net, ratios, gates)
    assert len(res.val_auc) == 12 and all(v is not None for v in res.val_auc.values())
    assert all(res.best_auc >= v for v in res.val_auc.values())
    r, g = res.best
    record_property("argmax", f"ratio {r}, gate {g}, val auc {res.best_auc:.4f}")
    assert r in ratios and g in gates
