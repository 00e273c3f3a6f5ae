"""The nine acceptance criteria, one test each. Every test records a single
PASS/FAIL line, printed in the terminal summary and to stdout."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdstage import cli
from pdstage import data as D
from pdstage import layers as L
from pdstage.evaluation import ABLATION_ORDER, compute_metrics, cross_validate
from pdstage.model import ModelConfig, HybridModel, apply_ablation
from pdstage.numerics import Tensor, gradcheck, reduce, selu
from pdstage.training import NadamState, TrainConfig, cross_entropy, fit, nadam_step

from conftest import ACCEPTANCE_LINES, conv1d_loop, make_roster


def record(number, ok, detail, status=None):
    line = f"criterion {number}: {status or ('PASS' if ok else 'FAIL')} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _weighted_sum(out):
    return reduce("sum", out * np.sin(np.arange(out.size) + 0.5).reshape(out.shape))


def _t(shape, rng, grad=True):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


# ----------------------------------------------------------------------------
# 1. gradient suite


def _layer_cases(rng):
    x4 = _t((2, 3, 2, 10), rng)
    conv = L.Conv1dLayer(2, 3, 3, rng, streams=3)
    conv.bias.data[...] = rng.normal(size=conv.bias.shape)
    x3 = _t((2, 3, 11), rng)
    dense = L.Dense(4, 5, rng, streams=3)
    dense.bias.data[...] = rng.normal(size=dense.bias.shape)
    xd = _t((2, 3, 2, 4), rng)
    xs = _t((3, 5), rng)
    ln = L.LayerNorm(6, streams=3)
    ln.gain.data[...] = rng.normal(size=ln.gain.shape)
    ln.offset.data[...] = rng.normal(size=ln.offset.shape)
    xl = _t((2, 3, 4, 6), rng)
    block = L.AttentionBlock(4, 2, rng, streams=3)
    for p in block.parameters().values():
        p.data[...] += 0.1 * rng.normal(size=p.shape)
    xa = _t((2, 3, 5, 4), rng)
    pe = L.PositionalEncoding(5, 4)
    xp = _t((2, 5, 4), rng)
    xdrop = _t((4, 6), rng)
    return {
        "conv1d": (lambda: conv(x4), [x4, conv.kernel, conv.bias]),
        "conv1d stride 2": (lambda: L.conv1d(x4, conv.kernel, conv.bias, 2), [x4, conv.kernel]),
        "maxpool": (lambda: L.maxpool1d(x3, 2, 2), [x3]),
        "dense": (lambda: dense(xd), [xd, dense.weight, dense.bias]),
        "selu": (lambda: selu(xs), [xs]),
        "softmax": (lambda: L.softmax(xs, axis=-1), [xs]),
        "layer norm": (lambda: ln(xl), [xl, ln.gain, ln.offset]),
        "attention block": (lambda: block(xa), [xa] + list(block.parameters().values())),
        "positional encoding": (lambda: pe(xp), [xp]),
        "global average pool": (lambda: L.global_average_pool(xl), [xl]),
        "dropout (fixed mask)": (lambda: L.dropout(xdrop, 0.3, True, L.counter_rng(4)), [xdrop]),
    }


TOY = ModelConfig(sensor_count=3, segment_length=20)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = {}
    for name, (fn, params) in _layer_cases(rng).items():
        errors[name] = gradcheck(lambda: _weighted_sum(fn()), params, step=1e-5)
    x = rng.normal(size=(2, 3, 20))
    y = np.array([1, 3])
    for variant in ABLATION_ORDER:
        model = HybridModel(apply_ablation(TOY, variant), seed=1)
        params = model.parameters()
        for p in params.values():  # move biases off zero so they are exercised
            if not p.data.any():
                p.data[...] = 0.1 * rng.normal(size=p.shape)
        errors[f"model {variant}"] = gradcheck(
            lambda: cross_entropy(model(Tensor(x), training=False), y), list(params.values()),
            step=1e-5, max_entries=12, rng=np.random.default_rng(7))
    elapsed = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-4 and elapsed < 60
    record(1, ok, f"{len(errors)} checks, worst rel. error {errors[worst_name]:.2e} ({worst_name}), "
                  f"{elapsed:.1f}s")
    assert ok, errors


# ----------------------------------------------------------------------------
# 2. convolution oracle


def test_criterion_2_convolution_oracle():
    rng = np.random.default_rng(99)
    mismatches = 0
    for case in range(200):
        batch, cin, cout = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        width, stride = rng.integers(1, 6), rng.integers(1, 4)
        length = rng.integers(width, 40)
        x = rng.normal(size=(batch, cin, length)) * rng.choice([1e-3, 1.0, 1e3])
        w = rng.normal(size=(cout, cin, width))
        b = rng.normal(size=cout)
        layer = L.Conv1dLayer(cin, cout, width, rng, stride=stride)
        layer.kernel.data[...] = w
        layer.bias.data[...] = b
        got = L.conv1d_forward(layer, Tensor(x)).data
        want = conv1d_loop(x, w, b, stride)
        if got.shape != want.shape or got.tobytes() != want.tobytes():
            mismatches += 1
    ok = mismatches == 0
    record(2, ok, f"200 random cases, {mismatches} not bit-identical to the loop oracle")
    assert ok


# ----------------------------------------------------------------------------
# 3. shape chain


def test_criterion_3_shape_chain():
    cfg = ModelConfig()
    model = HybridModel(cfg, seed=0)
    x = Tensor(np.random.default_rng(3).normal(size=(5, 18, 100)))
    h = Tensor(x.data.reshape(5, 18, 1, 100))
    for i, conv in enumerate(model.convs):
        h = selu(conv(h))
        if i % 2:
            h = L.maxpool1d(h, 2, 2)
    tokens = model.reduced_tokens(x)
    probs = model(x).data
    row_err = float(np.abs(probs.sum(axis=1) - 1).max())
    ok = (h.shape == (5, 18, 16, 22) and tokens.shape == (5, 18, 10) and probs.shape == (5, 4)
          and row_err <= 1e-9)
    record(3, ok, f"conv stream {h.shape[2]}ch x {h.shape[3]}, tokens {tokens.shape[1:]}, "
                  f"output {probs.shape}, max |row sum - 1| {row_err:.1e}")
    assert ok


# ----------------------------------------------------------------------------
# 4. optimizer oracle


def test_criterion_4_optimizer_oracle():
    # independent scalar Nadam, written directly from the update equations
    lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
    theta, m, v, want = 1.5, 0.0, 0.0, []
    for t in range(1, 11):
        g = theta  # d/dtheta of theta^2 / 2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        step = (b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        theta -= lr * step
        want.append(theta)

    p = Tensor(np.array([1.5]), requires_grad=True)
    state = NadamState()
    got = []
    for _ in range(10):
        p.grad = p.data.copy()
        nadam_step(state, {"theta": p})
        got.append(p.data[0])
    worst = max(abs(a - b) for a, b in zip(got, want))
    ok = worst <= 1e-12
    record(4, ok, f"10 steps, max deviation {worst:.1e}")
    assert ok


# ----------------------------------------------------------------------------
# 5. metric fidelity


def test_criterion_5_metric_fidelity():
    cm = np.array([[5, 1, 0, 0], [2, 6, 1, 0], [0, 1, 7, 2], [1, 0, 0, 3]])
    report = compute_metrics(cm)
    exact = True
    for c, m in enumerate(report.per_class):
        tp, fp, fn = cm[c, c], cm[:, c].sum() - cm[c, c], cm[c].sum() - cm[c, c]
        pr, re = tp / (tp + fp), tp / (tp + fn)
        exact &= (m.precision, m.recall, m.f1) == (pr, re, 2 * pr * re / (pr + re))
    exact &= report.accuracy == np.trace(cm) / cm.sum()
    healthy = compute_metrics([[372, 28], [93, 7]]).per_class[0]  # Pr 0.80, Re 0.93
    reference_row = (healthy.precision, healthy.recall) == (0.8, 0.93) and round(healthy.f1, 2) == 0.86
    ok = bool(exact and reference_row)
    record(5, ok, f"hand-built matrix exact: {bool(exact)}; Pr 0.80 / Re 0.93 -> F1 {healthy.f1:.4f}")
    assert ok


# ----------------------------------------------------------------------------
# 6. preprocessing properties

_PROPERTY_SETTINGS = settings(max_examples=60, deadline=None,
                              suppress_health_check=[HealthCheck.function_scoped_fixture])


@_PROPERTY_SETTINGS
@given(arrays(np.float64, (4, 30), elements=st.floats(-1e4, 1e4)))
def _normalize_idempotent(values):
    rec = D.WalkRecord("GaCo01", "Ga", "control", "01", np.arange(30.0), np.tile(values, (5, 1))[:18])
    once = D.normalize(D.impute_missing(rec)[0])
    twice = D.normalize(once)
    np.testing.assert_allclose(twice.channels, once.channels, atol=1e-9, rtol=0)


@_PROPERTY_SETTINGS
@given(st.integers(10, 60), st.integers(0, 40), st.integers(0, 2**32 - 1))
def _folds_disjoint_and_balanced(n_control, extra_pd, seed):
    rng = np.random.default_rng(seed)
    labels = {f"GaCo{i:03d}": 0 for i in range(n_control)}
    labels.update({f"GaPt{i:03d}": int(rng.integers(1, 4)) for i in range(10 + extra_pd)})
    plan = D.stratified_folds(labels, k=10, seed=seed)
    flat = [s for f in plan.folds for s in f]
    assert sorted(flat) == sorted(labels) and len(flat) == len(set(flat))
    n_pd = len(labels) - n_control
    for t in plan.tallies:
        # each fold within one subject of its proportional share, per cohort
        assert abs(t[0] - n_control / 10) < 1
        assert abs(sum(t[1:]) - n_pd / 10) < 1


@_PROPERTY_SETTINGS
@given(st.sampled_from([100, 149, 150, 1000]) | st.integers(100, 1200))
def _segment_counts(length):
    rec = D.WalkRecord("GaCo01", "Ga", "control", "01", np.arange(float(length)),
                       np.random.default_rng(length).normal(size=(18, length)))
    segs = D.segment_walk(D.preprocess(rec)[0])
    assert len(segs) == (length - 100) // 50 + 1
    assert all(s.start_offset + 100 <= length for s in segs)


def test_criterion_6_preprocessing_properties():
    fixed = {L_: len(D.segment_walk(D.preprocess(D.WalkRecord(
        "GaCo01", "Ga", "control", "01", np.arange(float(L_)), np.ones((18, L_))))[0]))
        for L_ in (100, 149, 150, 1000)}
    failures = []
    if fixed != {100: 1, 149: 1, 150: 2, 1000: 19}:
        failures.append(f"segment counts {fixed}")
    for prop in (_segment_counts, _normalize_idempotent, _folds_disjoint_and_balanced):
        try:
            prop()
        except AssertionError as exc:
            failures.append(f"{prop.__name__}: {exc}")
    ok = not failures
    record(6, ok, f"segment counts {fixed}; idempotence, disjoint/balanced folds property-tested"
           + ("" if ok else f"; failures: {failures}"))
    assert ok, failures


# ----------------------------------------------------------------------------
# 7. overfit smoke test


def test_criterion_7_overfit_smoke():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 20)
    x = rng.normal(size=(80, 18, 100)) + 1.0 * y[:, None, None]
    model = HybridModel(ModelConfig(), seed=0)
    start = time.perf_counter()
    history = fit(model, (x, y), None, TrainConfig(max_epochs=30, patience=30))
    elapsed = time.perf_counter() - start
    accs = history.column("train_acc")
    hit = next((r.epoch for r in history.epochs if r.train_acc >= 0.95), None)
    ok = hit is not None and elapsed < 300
    record(7, ok, f"80 segments, best train acc {max(accs):.3f}, >= 0.95 first at epoch {hit}, "
                  f"{elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 8. full reproduction (needs the public dataset)

PHYSIONET_DIR = os.environ.get("PDSTAGE_PHYSIONET_DIR")
PHYSIONET_DEMOGRAPHICS = os.environ.get("PDSTAGE_PHYSIONET_DEMOGRAPHICS") or (
    str(Path(PHYSIONET_DIR) / "demographics.txt") if PHYSIONET_DIR else None)


@pytest.mark.slow
def test_criterion_8_full_reproduction():
    if not PHYSIONET_DIR or not Path(PHYSIONET_DIR).is_dir():
        record(8, True, "dataset not on disk; set PDSTAGE_PHYSIONET_DIR to run it", status="SKIP")
        pytest.skip("Physionet gait dataset not available")
    dataset = D.build_dataset(PHYSIONET_DIR, PHYSIONET_DEMOGRAPHICS)
    workers = int(os.environ.get("PDSTAGE_WORKERS", "1"))
    acc = {}
    for variant in ABLATION_ORDER:
        result = cross_validate(dataset, apply_ablation(ModelConfig(), variant), TrainConfig(),
                                k=10, seed=0, workers=workers)
        acc[variant] = result.walk.accuracy
    ordered = all(acc["full"] > acc[v] > acc["D"] for v in ("A", "B", "C"))
    in_band = abs(acc["full"] - 0.88) <= 0.05
    ok = ordered and in_band
    record(8, ok, "walk accuracy " + ", ".join(f"{v} {a:.3f}" for v, a in acc.items())
           + f"; band {in_band}, ordering {ordered}")
    assert ok


# ----------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(tmp_path):
    data_dir, demo = make_roster(tmp_path / "walks", n_control=3, n_pd=3, length=260)
    common = [f"--data_dir={data_dir}", f"--demographics={demo}", "--cv.k=2", "--cv.seed=11",
              "--train.max_epochs=2", "--train.batch_size=8", "--verbosity=warning",
              "--model.conv_filters=[[2,4],[4,4]]", "--model.reduced_dim=4"]
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["crossval", f"--output_dir={out}", *common]) == 0
        runs.append(out)
    reports = sorted(p.name for p in runs[0].iterdir() if not p.name.endswith("_config.yaml"))
    differing = [n for n in reports if (runs[0] / n).read_bytes() != (runs[1] / n).read_bytes()]
    ok = not differing and "walk_report.csv" in reports
    record(9, ok, f"{len(reports)} report files compared, {len(differing)} differ")
    assert ok, differing
