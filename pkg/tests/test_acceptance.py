"""Acceptance gate.

One test per shipped guarantee; each prints a single [PASS]/[FAIL] line with
the measured values (visible with -s, or in the captured output on failure).
The three dataset-scale guarantees run against permuted MNIST when
MNIST_DATA_DIR points at the four IDX files; the unconditional twin tests
drive the same code paths on 64-step digit-pixel sequences.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from lmuformer import datasets, streaming
from lmuformer.blocks import (LMUBlockConfig, PatchEmbedConfig,
                              PatchEmbedLayerSpec, patch_embed_delay)
from lmuformer.efficiency import (EnergyModel, LayerCount, OpCountReport,
                                  count_flops, estimate_energy)
from lmuformer.lmu import (LMUConfig, build_matrices, lmu_scan_parallel,
                           lmu_scan_sequential)
from lmuformer.model import (BlockPairConfig, ModelConfig, build, count_params,
                             psmnist_config, sc_config)
from lmuformer.numerics import RngSpec, precision
from lmuformer.spiking import LIFConfig, LIFState, lif_step_lambda, lif_step_tau
from lmuformer.streaming import StreamSession, prefix_reaching, prefix_sweep
from lmuformer.training import OptimConfig, evaluate, finite_diff_check, train

from test_efficiency import full_config, walk_model
from test_training import fd_config

_IDX_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _mnist_files():
    root = os.environ.get("MNIST_DATA_DIR")
    if not root:
        return None
    paths = [os.path.join(root, n) for n in _IDX_NAMES]
    return paths if all(os.path.exists(p) for p in paths) else None


def _line(n: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# ------------------------------------------------------------------ fixtures


@pytest.fixture(scope="module")
def digits():
    tr, va, te = datasets.digits_sequences(seed=0)
    return {"train": tr.stack(), "val": va.stack(), "test": te.stack()}


@pytest.fixture(scope="module")
def digits_twin(digits):
    """Non-spiking psMNIST-shape model trained on the digit-pixel twin task."""
    model = build(psmnist_config(False, channels=24, order=24, theta=64.0),
                  RngSpec(0))
    train(model, digits["train"], OptimConfig(lr=1e-3), epochs=10,
          batch_size=32, rng=RngSpec(1), val_data=digits["val"])
    return model


@pytest.fixture(scope="module")
def mnist_sets():
    paths = _mnist_files()
    if paths is None:
        pytest.skip("MNIST_DATA_DIR with the four IDX files is not set; "
                    "the digits twin tests cover the same code paths")
    tr, va, _ = datasets.psmnist_splits(*paths)
    return tr.subset(np.arange(10_000)).stack(), va.stack()


@pytest.fixture(scope="module")
def mnist_model(mnist_sets):
    """Non-spiking psMNIST model, 10k-image / 10-epoch protocol."""
    train_data, val_data = mnist_sets
    model = build(psmnist_config(), RngSpec(0))
    train(model, train_data, OptimConfig(lr=1e-4), epochs=10, batch_size=100,
          rng=RngSpec(1), val_data=val_data)
    return model


# ----------------------------------------------------------------- criteria


def test_criterion_1_parallel_sequential_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst32 = worst64 = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 65))
        T = int(rng.integers(8, 513))
        heads = int(rng.integers(1, 5))
        mats = build_matrices(
            LMUConfig(d, float(rng.uniform(max(d, 4), 512)), "zoh"))
        u64 = rng.standard_normal((T, heads))
        with precision("float32"):
            u = u64.astype(np.float32)
            worst32 = max(worst32, float(np.max(np.abs(
                lmu_scan_parallel(u, mats) - lmu_scan_sequential(u, mats)))))
        with precision("float64"):
            worst64 = max(worst64, float(np.max(np.abs(
                lmu_scan_parallel(u64, mats) - lmu_scan_sequential(u64, mats)))))
    dt = time.time() - t0
    _line(1, worst32 <= 1e-6 and worst64 <= 1e-11 and dt < 30,
          f"FFT vs sequential memory scan, 100 instances (d<=64, T<=512): "
          f"max err {worst32:.2e} f32 (tol 1e-6), {worst64:.2e} f64 "
          f"(tol 1e-11), {dt:.1f}s (< 30s)")


def test_criterion_2_streaming_batch_equivalence():
    t0 = time.time()
    worst = 0.0
    bitwise = True
    for spiking in (False, True):
        model = build(sc_config(spiking=spiking, width=8, order=4,
                                num_pairs=1, theta=16.0), RngSpec(11))
        rng = np.random.default_rng(17 + int(spiking))
        for _ in range(50):
            T = int(rng.integers(12, 97))
            x = rng.standard_normal((T, 1)).astype(np.float32)
            got = streaming.stream_logits(model, x)
            if spiking:
                bitwise = bitwise and np.array_equal(
                    got, model.forward_stepwise(x))
            batch = model.forward(x[None], mode="eval").data[0]
            worst = max(worst, float(np.max(np.abs(got - batch))))
    dt = time.time() - t0
    _line(2, worst <= 1e-6 and bitwise and dt < 60,
          f"push_sample vs batch forward, 100 random sequences: max dev "
          f"{worst:.2e} (tol 1e-6), spiking eval bitwise={bitwise}, "
          f"{dt:.1f}s (< 60s)")


def test_criterion_3_embedding_delay_is_nine():
    cfg = sc_config()
    layers = cfg.patch_embed.layers
    shape_ok = (len(layers) == 4
                and all(l.kernel == 3 and l.lookahead == 2 for l in layers))
    delay = patch_embed_delay(cfg.patch_embed)
    model = build(cfg, RngSpec(0))
    session = StreamSession(model)
    first = None
    for i in range(delay + 3):
        if session.push_sample(np.zeros(1, dtype=np.float32)) is not None:
            first = i + 1  # samples consumed before the first output
            break
    _line(3, shape_ok and delay == 9 and first == 9,
          f"default 4-layer K=3 lookahead-2 embedding: computed delay "
          f"{delay}, first streaming emission after {first} samples "
          f"(both must be 9)")


def test_criterion_4_gradient_correctness():
    t0 = time.time()
    with precision("float64"):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(4, 12, 2))
        y = rng.integers(0, 3, size=4)
        model = build(fd_config(), RngSpec(4))
        n_params = count_params(model)
        err_dense = finite_diff_check(model, (X, y), eps=1e-5, n_coords=80,
                                      rng=np.random.default_rng(5))
        spiking = build(fd_config(spiking=True), RngSpec(7))
        err_spike = finite_diff_check(spiking, (X, y), eps=1e-5, n_coords=80,
                                      rng=np.random.default_rng(8),
                                      smooth=True)
    dt = time.time() - t0
    _line(4, n_params <= 2000 and err_dense <= 1e-4 and err_spike <= 1e-3
          and dt < 300,
          f"finite differences vs tape on a {n_params}-param model: max rel "
          f"err {err_dense:.2e} non-spiking (tol 1e-4), {err_spike:.2e} "
          f"smoothed spiking (tol 1e-3), {dt:.0f}s (< 300s)")


def test_criterion_5_digits_twin_nonspiking(digits, digits_twin):
    acc = evaluate(digits_twin, *digits["val"])
    _line(5, acc >= 0.85,
          f"64-step digits twin, non-spiking, 10 epochs: val acc {acc:.4f} "
          f"(bar 0.85, chance 0.10)")


def test_criterion_5_digits_twin_spiking(digits):
    base = psmnist_config(True, channels=24, order=24, theta=64.0)
    cfg = dataclasses.replace(
        base, lif=dataclasses.replace(base.lif, v_th=0.5))
    model = build(cfg, RngSpec(0))
    train(model, digits["train"], OptimConfig(lr=2e-3), epochs=20,
          batch_size=32, rng=RngSpec(1), val_data=digits["val"])
    acc = evaluate(model, *digits["val"])
    _line(5, acc >= 0.82,
          f"64-step digits twin, spiking, 20 epochs: val acc {acc:.4f} "
          f"(bar 0.82, chance 0.10)")


def test_criterion_5_psmnist_nonspiking(mnist_sets, mnist_model):
    _, (Xva, yva) = mnist_sets
    acc = evaluate(mnist_model, Xva, yva)
    _line(5, acc >= 0.90,
          f"psMNIST 10k/10-epoch protocol, non-spiking: val acc {acc:.4f} "
          f"(bar 0.90)")


def test_criterion_5_psmnist_spiking(mnist_sets):
    train_data, (Xva, yva) = mnist_sets
    t0 = time.time()
    model = build(psmnist_config(spiking=True), RngSpec(0))
    train(model, train_data, OptimConfig(lr=1e-4), epochs=10, batch_size=100,
          rng=RngSpec(1), val_data=(Xva, yva))
    acc = evaluate(model, Xva, yva)
    dt = time.time() - t0
    _line(5, acc >= 0.85 and dt < 7200,
          f"psMNIST 10k/10-epoch protocol, spiking: val acc {acc:.4f} "
          f"(bar 0.85), {dt / 60:.0f} min (< 120)")


def test_criterion_5_psmnist_full_protocol():
    """Optional long test: full 50k/50-epoch run, target >=97% non-spiking."""
    paths = _mnist_files()
    if paths is None or not os.environ.get("LMUFORMER_RUN_LONG_TESTS"):
        pytest.skip("long test; needs MNIST_DATA_DIR and "
                    "LMUFORMER_RUN_LONG_TESTS=1")
    tr, va, _ = datasets.psmnist_splits(*paths)
    model = build(psmnist_config(), RngSpec(0))
    train(model, tr.stack(), OptimConfig(lr=1e-4), epochs=50, batch_size=100,
          rng=RngSpec(1), val_data=va.stack())
    acc = evaluate(model, *va.stack())
    _line(5, acc >= 0.97,
          f"psMNIST full 50k/50-epoch protocol: val acc {acc:.4f} (bar 0.97)")


def _curve_checks(model, X, y, grid, full_len):
    rows = prefix_sweep(model, X, y, grid)
    ref = evaluate(model, X, y)
    full_exact = rows[-1]["accuracy"] == ref
    lastq = [r for r in rows if r["prefix_len"] >= (full_len * 3) // 4]
    worst_dip = max(lastq[i]["accuracy"] - lastq[i + 1]["accuracy"]
                    for i in range(len(lastq) - 1))
    p99 = prefix_reaching(rows, 0.99)
    return rows, full_exact, worst_dip, p99


def test_criterion_6_digits_twin_prefix_curve(digits, digits_twin):
    Xva, yva = digits["val"]
    Xte, yte = digits["test"]
    X = np.concatenate([Xva, Xte])
    y = np.concatenate([yva, yte])
    grid = sorted(set(range(0, 65, 4)) | {58, 61, 62, 63})
    rows, full_exact, worst_dip, p99 = _curve_checks(digits_twin, X, y,
                                                     grid, 64)
    _line(6, full_exact and worst_dip <= 0.003 and p99 < 64,
          f"digits twin prefix curve: full-prefix acc "
          f"{rows[-1]['accuracy']:.4f} equals eval acc ({full_exact}), worst "
          f"last-quartile dip {100 * worst_dip:.2f} pts (<= 0.3), 99% of "
          f"full accuracy at prefix {p99} < 64")


def test_criterion_6_psmnist_prefix_curve(mnist_sets, mnist_model):
    _, (Xva, yva) = mnist_sets
    X, y = Xva[:1000], yva[:1000]  # streaming sweep cost grows with N*T
    grid = sorted({784 * k // 16 for k in range(17)} | {776, 780, 782, 783})
    rows, full_exact, worst_dip, p99 = _curve_checks(mnist_model, X, y,
                                                     grid, 784)
    _line(6, full_exact and worst_dip <= 0.003 and p99 < 784,
          f"psMNIST prefix curve (1000 samples): full-prefix acc "
          f"{rows[-1]['accuracy']:.4f} equals eval acc ({full_exact}), worst "
          f"last-quartile dip {100 * worst_dip:.2f} pts (<= 0.3), 99% of "
          f"full accuracy at prefix {p99} < 784")


def test_criterion_7_energy_and_op_count_oracles():
    em = EnergyModel()
    hand = OpCountReport([
        LayerCount("enc", "conv", 10),
        LayerCount("enc.sn", "lif", 0, comparison_ops=20),
        LayerCount("deep", "conv", 100, sparsity=0.5),
    ], seq_len=10)
    hand_ok = estimate_energy(hand, em, spiking=True) == 261.0
    ratio_ok = em.e_ac / em.e_mac == 1.8 / 13.32
    walk_ok = True
    for cfg, T in ((full_config(), 23),
                   (full_config(spiking=True, strides=(1, 2)), 17),
                   (full_config(spiking=False, mixer=False, variant="naive",
                                strides=(1, 1)), 31)):
        model = build(cfg, RngSpec(1))
        report = count_flops(model, T)
        macs, comps = walk_model(model, T)
        walk_ok = (walk_ok and report.total_macs == macs
                   and report.total_comparisons == comps)
    _line(7, hand_ok and ratio_ok and walk_ok,
          f"hand-computed 261.0 pJ reproduced exactly ({hand_ok}), unit-"
          f"density accumulate/MAC energy ratio exact ({ratio_ok}), "
          f"count_flops matches the independent structural counter on three "
          f"models ({walk_ok})")


def test_criterion_8_lif_semantics():
    # fire-and-reset: strong input spikes immediately, potential == v_reset
    cfg = LIFConfig(tau=1.0, v_th=1.0, v_reset=0.0)
    s, st = lif_step_tau(LIFState.zeros((1,), cfg), np.array([2.0]), cfg)
    v1 = s[0] == 1.0 and st.u_v[0] == 0.0
    # subthreshold integration: U_H = 0.4 + (1.0 - 0.4)/2 = 0.7, no spike
    cfg = LIFConfig(tau=2.0, v_th=1.0, v_reset=0.0)
    s, st = lif_step_tau(LIFState(np.array([0.4]), np.array([0.0])),
                         np.array([1.0]), cfg)
    v2 = s[0] == 0.0 and abs(st.u_v[0] - 0.7) <= 1e-7
    # leaky accumulation to a spike: 0.8 then 0.5*0.8 + 0.8 = 1.2 >= v_th
    cfg = LIFConfig(lam=0.5, v_th=1.0, formulation="lambda_form")
    st = LIFState.zeros((1,), cfg)
    s1, st = lif_step_lambda(st, np.array([0.8]), cfg)
    s2, st = lif_step_lambda(st, np.array([0.8]), cfg)
    v3 = (s1[0] == 0.0 and s2[0] == 1.0
          and abs(st.u_v[0] - 1.2) <= 1e-7)
    # reset invariant over 1e5 random neuron-steps
    cfg = LIFConfig(tau=2.0, v_th=1.0, v_reset=0.25)
    rng = np.random.default_rng(31)
    state = LIFState.zeros((1000,), cfg)
    reset_ok, fired = True, 0
    for _ in range(100):
        s, state = lif_step_tau(state, rng.normal(1.0, 2.0, size=1000), cfg)
        hit = s == 1.0
        fired += int(hit.sum())
        reset_ok = reset_ok and bool(np.all(state.u_v[hit] == np.float32(0.25)))
    _line(8, v1 and v2 and v3 and reset_ok and fired > 10_000,
          f"hand vectors (fire/reset {v1}, subthreshold {v2}, leaky "
          f"accumulation {v3}); potential == v_reset after each of {fired} "
          f"spikes across 100k neuron-steps ({reset_ok})")


def _naive_pair(in_channels=None):
    return BlockPairConfig(lmu=LMUBlockConfig(
        channels=24, order=24, theta=64.0, variant="naive",
        in_channels=in_channels))


def test_criterion_9_digits_twin_ablation(digits):
    naive_cfg = ModelConfig(input_channels=1, num_classes=10,
                            patch_embed=None, blocks=(_naive_pair(1),),
                            pooling="last")
    embed_cfg = ModelConfig(
        input_channels=1, num_classes=10,
        patch_embed=PatchEmbedConfig(layers=(
            PatchEmbedLayerSpec(1, 24, kernel=1, stride=1, lookahead=0),)),
        blocks=(_naive_pair(),), pooling="last")
    accs = {}
    for tag, cfg in (("naive", naive_cfg), ("embed", embed_cfg)):
        model = build(cfg, RngSpec(0))
        train(model, digits["train"], OptimConfig(lr=1e-3), epochs=10,
              batch_size=32, rng=RngSpec(1), val_data=digits["val"])
        accs[tag] = evaluate(model, *digits["val"])
    delta = 100 * (accs["embed"] - accs["naive"])
    _line(9, delta >= 2.0,
          f"digits twin ablation: naive LMU {accs['naive']:.4f} -> with conv "
          f"embedding {accs['embed']:.4f}, +{delta:.2f} pts (bar +2)")


def test_criterion_9_psmnist_ablation(mnist_sets):
    train_data, (Xva, yva) = mnist_sets

    def naive_pair(in_channels=None):
        return BlockPairConfig(lmu=LMUBlockConfig(
            channels=40, order=48, theta=784.0, variant="naive",
            in_channels=in_channels))

    naive_cfg = ModelConfig(input_channels=1, num_classes=10,
                            patch_embed=None, blocks=(naive_pair(1),),
                            pooling="last")
    embed_cfg = ModelConfig(
        input_channels=1, num_classes=10,
        patch_embed=PatchEmbedConfig(layers=(
            PatchEmbedLayerSpec(1, 40, kernel=1, stride=1, lookahead=0),)),
        blocks=(naive_pair(),), pooling="last")
    accs = {}
    for tag, cfg in (("naive", naive_cfg), ("embed", embed_cfg)):
        model = build(cfg, RngSpec(0))
        train(model, train_data, OptimConfig(lr=1e-4), epochs=10,
              batch_size=100, rng=RngSpec(1), val_data=(Xva, yva))
        accs[tag] = evaluate(model, Xva, yva)
    delta = 100 * (accs["embed"] - accs["naive"])
    _line(9, delta >= 2.0,
          f"psMNIST ablation: naive LMU {accs['naive']:.4f} -> with conv "
          f"embedding {accs['embed']:.4f}, +{delta:.2f} pts (bar +2)")
