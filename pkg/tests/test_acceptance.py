"""Release gates, one test per gate, exercised through public entry points.

Run `pytest tests/test_acceptance.py -v` for one pass/fail line per gate.
Unit-level coverage lives in the other test modules; everything here is
end to end. The last gate needs a C compiler and skips without one; the
MNIST gate needs real data (MICROBNN_MNIST_DIR) and skips without it.
No other gate touches a compiler or the filesystem beyond tmp_path.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from microbnn.bitops import BitTensor
from microbnn.codegen import CodegenOptions, generate
from microbnn.dataio import load_idx, synth_images, synth_separable
from microbnn.inference import (TempArena, Trace, fused_conv_pool_forward,
                                network_forward)
from microbnn.memory import bnn_temp_bytes, ebnn_temp_bytes, memory_report
from microbnn.model import (FusedConv, FusedConvPool, InputSpec, Network,
                            network_shapes, serialize)
from microbnn.presets import PRESETS, convpool_1, mlp_1
from microbnn.reference import reference_forward
from microbnn.screening import (DeviceProfile, cost_metrics, mnist_space,
                                results_table, screen)
from microbnn.trainer import TrainConfig, evaluate, train
from netgen import coverage_stats, random_input, random_network
from test_codegen import compile_c, needs_cc, run_exe
from test_model import _bits, _bn

_POPULATION: list = []


def population():
    """1000 seeded (network, input) pairs, generated once per run."""
    if not _POPULATION:
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            net = random_network(rng)
            _POPULATION.append((net, random_input(rng, net)))
    return _POPULATION


def test_fused_inference_matches_reference_on_1000_networks():
    """Fused forward equals the unfused oracle bit for bit, in under 60 s."""
    start = time.perf_counter()
    for net, x in population():
        fused = network_forward(net, x, record_intermediates=True)
        oracle = reference_forward(net, x)
        assert fused.label == oracle.label
        assert np.array_equal(fused.scores, oracle.scores)
        assert len(fused.intermediates) == len(oracle.intermediates)
        for ours, ref in zip(fused.intermediates, oracle.intermediates):
            assert ours == ref
    elapsed = time.perf_counter() - start

    stats = coverage_stats([net for net, _ in population()])
    assert stats["depths"] == {1, 2, 3}
    assert stats["strides"] == {1, 2, 3}
    assert min(stats["fc"], stats["conv"], stats["convpool"]) > 0
    assert stats["overlapped"] > 0 and stats["neg_gamma"] > 0
    assert stats["real"] > 0 and stats["binary"] > 0
    assert elapsed < 60.0


def test_memory_model_anchors():
    """One 3x3x3 filter costs 22 B; its float plane would cost 8112 B; the
    arena a forward pass runs in measures exactly 2T + 4; packing wastes
    at most 7 bits per row."""
    conv = Network(InputSpec("real", 3, 28, 28),
                   [FusedConv(1, 3, 3, 1, _bits(1, 3, 9), _bn(1))])
    report = memory_report(conv)
    assert report.param_bytes_per_block[0] == 22
    assert bnn_temp_bytes(conv) == 8112

    for net, x in population()[:50]:
        arena = TempArena.for_network(net)
        network_forward(net, x, arena=arena)
        assert arena.size_bytes == 2 * ebnn_temp_bytes(net) + 4

    nets = [net for net, _ in population()] + [make() for make in PRESETS.values()]
    assert all(w <= 7 for net in nets
               for w in memory_report(net).waste_bits_per_row)


def test_fused_convpool_trace_is_845_operations():
    """3x3 conv + 2/2 max pool over 28x28: 676 window convolutions feed
    169 stored outputs, 845 operations in all."""
    block = FusedConvPool(1, 1, 3, 1, 2, 2, _bits(1, 1, 9), _bn(1))
    out = BitTensor.zeros(1, 13, 13)
    trace = Trace()
    fused_conv_pool_forward(_bits(1, 28, 28, seed=5), block, out, trace=trace)
    assert trace.convolutions == 676
    assert trace.stores == 169
    assert trace.total == 845


def test_binary_temporaries_shrink_32x():
    """Per block, bit-packed temporaries take at most 1/32 of the float
    plane plus row-alignment slack; on the 15 KB presets the whole
    working set 2T stays within 3% of M."""
    for net, _ in population():
        report = memory_report(net)
        for (c, h, w), ebnn in zip(network_shapes(net),
                                   report.temp_bytes_per_block):
            assert ebnn <= (4 * c * h * w) / 32 + h * c

    for name in ("mlp-1", "mlp-2", "convpool-2"):
        report = memory_report(PRESETS[name]())
        assert report.M <= 15360
        assert 2 * report.T / report.M <= 0.03


MNIST_DIR = os.environ.get("MICROBNN_MNIST_DIR", "")


@pytest.mark.skipif(not MNIST_DIR, reason="MICROBNN_MNIST_DIR not set; "
                    "point it at the four MNIST IDX files to run this gate")
def test_mnist_mlp1_reaches_88_percent():
    """The 15 KB MLP preset trains to >= 88% test accuracy in under 30
    minutes of wall clock."""
    d = Path(MNIST_DIR)
    train_set = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    test_set = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    arch = mlp_1()
    assert memory_report(arch).M <= 15360

    start = time.perf_counter()
    result = train(arch, train_set, TrainConfig(budget_bytes=15360))
    accuracy = evaluate(result.net, test_set).accuracy
    elapsed = time.perf_counter() - start
    assert accuracy >= 0.88
    assert elapsed < 30 * 60


def test_compression_ratio_anchor_values():
    """Sending one label instead of a 784 B or 3072 B sample compresses
    784x and 3072x."""
    device = DeviceProfile()
    assert cost_metrics(device, 784, 1, measured_ms=1.0).cr == 784.0
    assert cost_metrics(device, 3072, 1, measured_ms=1.0).cr == 3072.0


def test_fixed_seed_runs_are_byte_identical():
    """Same seed, same bytes: trained model files and screening tables."""
    data = synth_images(120, seed=9)
    cfg = TrainConfig(epochs=2, batch_size=30, seed=9, eval_split=0.0)
    first = serialize(train(mlp_1(hidden=16), data, cfg).net)
    second = serialize(train(mlp_1(hidden=16), data, cfg).net)
    assert first == second

    space = mnist_space("mlp-1", budget_bytes=1500)
    tables = [results_table(screen(space, data, cfg, top_k=2))
              for _ in range(2)]
    assert tables[0] == tables[1]


def _trained_toy_models(count=20):
    """Small nets of every variant, genuinely trained on synthetic data."""
    models = []
    for i in range(count):
        rng = np.random.default_rng(1000 + i)
        cfg = TrainConfig(epochs=4, batch_size=30, seed=i, eval_split=0.0)
        if i % 3 == 0:
            arch = convpool_1(filters=2 + i % 3, stride=2)
            data = synth_images(60, seed=i)
        elif i % 3 == 1:
            arch = mlp_1(hidden=int(rng.integers(6, 17)))
            data = synth_images(60, seed=i)
        else:
            dim, classes = int(rng.choice([12, 16, 24])), int(rng.choice([2, 3]))
            arch = mlp_1(hidden=int(rng.integers(6, 17)),
                         input_spec=InputSpec("real", 1, 1, dim), classes=classes)
            data = synth_separable(dim, classes, 90, seed=i)
        models.append(train(arch, data, cfg).net)
    return models


@needs_cc
def test_generated_c_matches_library_on_20_trained_models(tmp_path):
    """For 20 trained models the compiled program reproduces the library's
    labels and per-block bits on 10 embedded vectors, and generation is
    byte-stable."""
    for i, net in enumerate(_trained_toy_models()):
        rng = np.random.default_rng(5000 + i)
        opts = CodegenOptions(test_vectors=tuple(random_input(rng, net)
                                                 for _ in range(10)))
        code = generate(net, opts)
        again = generate(net, opts)
        assert (code.header_text, code.source_text) \
            == (again.header_text, again.source_text)

        work = tmp_path / f"m{i}"
        work.mkdir()
        code.write(work)
        exe = compile_c(work, [work / code.source_name],
                        defines=["EBNN_SELF_TEST"])
        status, out = run_exe(exe)
        assert status == 0, out
        assert out.count("PASS") == 10 and "FAIL" not in out
