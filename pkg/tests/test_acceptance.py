"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing criterion is still reported with its measured value.
The end-to-end experiment tests are marked ``slow``; deselect them with
``-m "not slow"``.
"""

import json
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from acceptance_log import record
from nprdetect.cli import REPRO_THRESHOLDS, build_parser, main
from nprdetect.metrics import average_precision
from nprdetect.nn import AdamState, DetectorModel, adam_step, backward, bce_loss
from nprdetect.nn.optim import DEFAULT_LR
from nprdetect.nn.train import DEFAULT_BATCH_SIZE, TrainConfig
from nprdetect.npr import ALL_GRIDSPECS, GridSpec, extract_npr
from oracles import adam_reference, ap_oracle, central_differences, npr_oracle

# Lowest value over seeds 1337, 1 and 2 at the default repro settings, minus 5:
# val acc 99.0, bilinear acc 72.5, bilinear AP 99.46, pixel gap 24.5.
# The check uses whichever of this and the fixed floor is stricter.
CALIBRATED_FLOORS = {
    "in_source_val_acc": 94.0,
    "unseen_acc": 67.5,
    "unseen_ap": 94.46,
    "baseline_gap": 19.5,
}


def _floor(key):
    return max(REPRO_THRESHOLDS[key], CALIBRATED_FLOORS[key])


# --- 1. NPR oracle equivalence ---------------------------------------------

def test_c1_npr_matches_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    images = mismatches = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(3, 15, 2))
        c = int(rng.choice([1, 3]))
        img = rng.random((h, w, c), dtype=np.float32)
        for grid in ALL_GRIDSPECS:
            got = extract_npr(img, grid).data
            want = npr_oracle(img, grid.l, grid.pivot)
            if got.shape != want.shape or got.tobytes() != want.tobytes():
                mismatches += 1
        images += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5.0
    record(1, "NPR oracle equivalence", ok,
           f"{images} images x {len(ALL_GRIDSPECS)} grids, {mismatches} mismatches, {elapsed:.2f} s")
    assert ok


# --- 2. algebraic invariants -------------------------------------------------

def _lattice_images():
    # a 1/4096 lattice keeps every f32 sum and difference exact
    return st.tuples(st.integers(3, 13), st.integers(3, 13), st.sampled_from([1, 3])).flatmap(
        lambda shp: hnp.arrays(np.int32, shp, elements=st.integers(0, 2048)).map(
            lambda a: (a / 4096.0).astype(np.float32)))


@settings(max_examples=150, deadline=None)
@given(img=_lattice_images(), grid=st.sampled_from(ALL_GRIDSPECS), c=st.integers(-512, 1024),
       k=st.integers(0, 6), a=st.floats(0.01, 1.0))
def _invariants(img, grid, c, k, a):
    base = extract_npr(img, grid).data
    shifted = img + np.float32(c / 4096.0)
    if shifted.min() >= 0 and shifted.max() <= 1:
        assert extract_npr(shifted, grid).data.tobytes() == base.tobytes(), "shift"
    scale = np.float32(2.0 ** -k)
    assert extract_npr(scale * img, grid).data.tobytes() == (scale * base).tobytes(), "scale 2^-k"
    # an arbitrary factor rounds a*x once per pixel, so only agreement to f32 resolution is possible
    a = np.float32(a)
    assert np.max(np.abs(extract_npr(a * img, grid).data - a * base)) <= 2e-7, "scale arbitrary"
    up = np.repeat(np.repeat(img, grid.l, axis=0), grid.l, axis=1)
    assert not np.any(extract_npr(up, grid).data), "nearest upsample"
    h, w, ch = base.shape
    tiles = base.reshape(h // grid.l, grid.l, w // grid.l, grid.l, ch).transpose(0, 2, 4, 1, 3)
    tiles = tiles.reshape(h // grid.l, w // grid.l, ch, grid.n)
    if grid.pivot == "avg":
        assert np.all(np.abs(tiles.astype(np.float64).sum(axis=-1)) <= 1e-6), "avg sums"
    elif grid.pivot == "max":
        assert np.all(tiles <= 0) and np.all(np.any(tiles == 0, axis=-1)), "max pivot"
    else:
        assert not np.any(tiles[..., grid.pivot - 1]), "index pivot"


def test_c2_npr_invariants():
    try:
        _invariants()
        ok, detail = True, "shift, scale (exact for 2^-k, <= 2e-7 otherwise), nearest zeros, pivot zeros, avg sums"
    except AssertionError as exc:
        ok, detail = False, f"violated: {exc}"
    record(2, "NPR algebraic invariants", ok, detail)
    assert ok, detail


# --- 3. gradient correctness -------------------------------------------------

def test_c3_full_gradient_check():
    model = DetectorModel.initialize(21)
    rng = np.random.default_rng(22)
    for name, p in model.parameters().items():
        if name.endswith("bias") or name.startswith("head"):
            p[...] = rng.uniform(-0.3, 0.3, p.shape)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    y = np.array([0, 1])
    start = time.perf_counter()
    shadow = model.astype(np.float64)
    x64 = x.astype(np.float64)
    fd = central_differences(lambda: bce_loss(shadow.forward(x64)[:, 0], y)[0], shadow.parameters(), 1e-6)
    grads = {"f32": backward(model, x, y), "f64": backward(shadow, x64, y)}
    worst = {}
    for mode, analytic in grads.items():
        errs = []
        for name, (idx, g) in fd.items():
            a = analytic[name].reshape(-1)[idx].astype(np.float64)
            errs.append(np.linalg.norm(a - g) / max(np.linalg.norm(a), np.linalg.norm(g), 1e-30))
        worst[mode] = max(errs)
    elapsed = time.perf_counter() - start
    n = sum(p.size for p in model.parameters().values())
    ok = worst["f32"] < 1e-2 and worst["f64"] < 1e-4 and elapsed < 60.0
    record(3, "gradient check, every parameter", ok,
           f"{n} entries, worst rel err f32 {worst['f32']:.2e}, f64 {worst['f64']:.2e}, {elapsed:.1f} s")
    assert ok


# --- 4. optimizer --------------------------------------------------------------

def test_c4_adam_trajectory():
    p = {"x": np.array([1.0])}
    state = AdamState.for_params(p)
    ours = []
    for _ in range(200):
        adam_step(p, {"x": 2 * p["x"]}, state)
        ours.append(float(p["x"][0]))
    ref = adam_reference(lambda v: 2 * v, 1.0, 200)
    dev = max(abs(a - b) for a, b in zip(ours, ref))
    ok = dev <= 1e-6
    record(4, "Adam trajectory on x^2, 200 steps", ok, f"max deviation {dev:.2e}")
    assert ok


# --- 5. metrics ----------------------------------------------------------------

def test_c5_average_precision():
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 61))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 6, n) / 6.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(average_precision(scores, labels) - ap_oracle(scores, labels)))
    perfect = average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    alternating = average_precision([0.4, 0.3, 0.2, 0.1], [1, 0, 1, 0])
    ok = worst <= 1e-9 and perfect == 100.0 and abs(alternating - 83.33) <= 0.01
    record(5, "average precision", ok,
           f"1000 sets max |diff| {worst:.1e}, perfect {perfect:.2f}, [1,0,1,0] {alternating:.4f}")
    assert ok


# --- 6 and 7. end-to-end experiment ------------------------------------------------

def _run_repro(out):
    start = time.perf_counter()
    code = main(["repro", "--seed", "1337", "--out", str(out)])
    return code, time.perf_counter() - start


@pytest.fixture(scope="module")
def repro_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("repro")
    first = _run_repro(base / "a")
    return base, first


@pytest.mark.slow
def test_c6_cross_generator_experiment(repro_runs):
    base, (code, elapsed) = repro_runs
    assert code == 0
    result = json.loads((base / "a" / "acceptance.json").read_text())
    # checks are listed in the order of the keys below
    keys = ["in_source_val_acc", "unseen_acc", "unseen_ap", "baseline_gap"]
    parts, ok = [], True
    for key, value in zip(keys, (c["value"] for c in result["checks"])):
        floor = _floor(key)
        ok &= value >= floor
        parts.append(f"{key} {value:.2f} (>= {floor:.2f})")
    # the 10 minute budget is stated for 8 cores; on smaller machines it is only reported
    cores = os.cpu_count() or 1
    if cores >= 8:
        ok &= elapsed < 600
        parts.append(f"{elapsed:.0f} s on {cores} cores (< 600)")
    else:
        parts.append(f"{elapsed:.0f} s on {cores} core(s), time limit not checked below 8 cores")
    record(6, "cross-generator experiment, seed 1337", ok, ", ".join(parts))
    assert ok


@pytest.mark.slow
def test_c7_repro_is_deterministic(repro_runs):
    base, _ = repro_runs
    code, _ = _run_repro(base / "b")
    assert code == 0
    names = ["train-npr/model.nprm", "train-pixels/model.nprm", "train-npr/history.csv",
             "train-pixels/history.csv", "eval-npr/report.json", "eval-npr/report.csv",
             "eval-pixels/report.json", "eval-pixels/report.csv", "acceptance.json", "acceptance.txt"]
    differing = [n for n in names if (base / "a" / n).read_bytes() != (base / "b" / n).read_bytes()]
    ok = not differing
    record(7, "repro determinism", ok,
           f"{len(names)} checkpoints and reports compared" + (f", differing: {differing}" if differing else ""))
    assert ok


# --- 8. defaults -----------------------------------------------------------------

def test_c8_default_configuration():
    parser = build_parser()
    snapshot = {
        "grid": GridSpec(),
        "train_cli": vars(parser.parse_args(["train"])),
        "extract_cli": vars(parser.parse_args(["extract"])),
        "train_config": TrainConfig(),
    }
    ok = (
        snapshot["grid"] == GridSpec(2, 1)
        and (snapshot["train_cli"]["l"], snapshot["train_cli"]["pivot"]) == (2, "index:1")
        and (snapshot["extract_cli"]["l"], snapshot["extract_cli"]["pivot"]) == (2, "index:1")
        and (snapshot["train_cli"]["lr"], snapshot["train_cli"]["batch_size"]) == (2e-4, 32)
        and (snapshot["train_config"].lr, snapshot["train_config"].batch_size) == (2e-4, 32)
        and (DEFAULT_LR, DEFAULT_BATCH_SIZE) == (2e-4, 32)
    )
    record(8, "default configuration", ok, "l=2, pivot index 1, lr=2e-4, batch 32")
    assert ok
