"""Acceptance suite: one test per release criterion, each printing a verdict
line. Run with `pytest tests/test_acceptance.py -v -s`. The pre-training
criterion is the long pole (three 500-step runs on the bundled corpus).
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from gbst import tensor as T
from gbst.bytes_data import encode, load_corpus
from gbst.cli import bundled_corpus_path, main
from gbst.flops import benchmark_steps, count_flops
from gbst.gradcheck import DEFAULT_TOLERANCE, REQUIRED_GROUPS, run_suite
from gbst.model import ModelState, StackConfig, load_checkpoint, save_checkpoint
from gbst.reference import run_oracle_suite
from gbst.subword import (
    GbstConfig,
    enumerate_blocks,
    gbst_forward,
    init_gbst_params,
    score_blocks,
)
from gbst.tensor import Parameter, Tensor, no_grad, reset_tape
from gbst.train import TrainConfig, evaluate, make_batch, train_loop

DESK_STACK = StackConfig()
DESK_GBST = GbstConfig(embedding_dim=DESK_STACK.d_model)


def report(n, name, detail):
    print(f"[acceptance {n}] {name}: PASS ({detail})")


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


def test_criterion_1_oracle_equivalence():
    worst, failures = run_oracle_suite(n_instances=1000, seed=0, tolerance=1e-10)
    assert failures == 0
    assert worst < 1e-10
    report(1, "oracle equivalence", f"1000 instances, worst abs diff {worst:.2e}")


def test_criterion_2_gradient_suite():
    merged, ok = run_suite(seeds=range(10), tolerance=DEFAULT_TOLERANCE)
    assert ok, merged
    for group in REQUIRED_GROUPS:
        assert group in merged
    worst = max(merged.values())
    report(2, "gradient suite", f"10 seeds, {len(merged)} groups, worst rel err {worst:.2e}")


def test_criterion_3_normalization_and_shape_laws():
    rng = np.random.default_rng(0)
    # score normalization, raw softmax weights and calibrated weights
    cfg = GbstConfig(embedding_dim=8, max_block_size=4, downsample_rate=2,
                     conv_kernel_size=5, enable_calibration=True)
    params = init_gbst_params(cfg, rng)
    with no_grad():
        out = gbst_forward(Tensor(rng.normal(size=(33, 8))), cfg, params)
    npt.assert_allclose(out.scores.weights.data.sum(axis=1), 1.0, atol=1e-9)
    npt.assert_allclose(out.scores.calibrated.data.sum(axis=1), 1.0, atol=1e-9)

    # length law over every rate and every admissible length
    for rate in (1, 2, 3, 4):
        lcfg = GbstConfig(embedding_dim=4, max_block_size=3, downsample_rate=rate,
                          conv_kernel_size=None)
        lparams = init_gbst_params(lcfg, rng)
        for n in range(rate, 65):
            with no_grad():
                o = gbst_forward(Tensor(rng.normal(size=(n, 4))), lcfg, lparams)
            assert o.downsampled.shape[0] == n // rate

    # replication constancy inside every fully covered block
    ccfg = GbstConfig(embedding_dim=4, max_block_size=4, downsample_rate=2,
                      conv_kernel_size=None)
    x = Tensor(rng.normal(size=(22, 4)))
    sets = enumerate_blocks(x, ccfg)
    scores = score_blocks(sets, Parameter("s", rng.normal(size=(4, 1))))
    for c, cand in enumerate(sets):
        b = cand.block_size
        for j in range(22 // b):
            rows = cand.realigned.data[j * b : (j + 1) * b]
            vals = scores.raw.data[j * b : (j + 1) * b, c]
            assert (rows == rows[0]).all() and (vals == vals[0]).all()
    report(3, "normalization and shape laws", "rows sum to 1, lengths floor(L/d_s), blocks constant")


def test_criterion_4_permutation_pair():
    rng = np.random.default_rng(1)
    d, b = 4, 4
    # without conv: transposing the leading pair of an aligned block leaves
    # the affected stream's pooled row bit-identical
    plain = GbstConfig(embedding_dim=d, max_block_size=b, downsample_rate=2,
                       conv_kernel_size=None)
    x = rng.normal(size=(16, d))
    swapped = x.copy()
    swapped[[4, 5]] = swapped[[5, 4]]  # inside the second aligned 4-block
    pooled_a = next(s for s in enumerate_blocks(Tensor(x), plain) if s.block_size == b)
    pooled_b = next(s for s in enumerate_blocks(Tensor(swapped), plain) if s.block_size == b)
    diff = np.abs(pooled_a.pooled.data[1] - pooled_b.pooled.data[1]).max()
    assert diff == 0.0

    # with conv (k=5): some intra-block transposition moves the output
    conv = GbstConfig(embedding_dim=d, max_block_size=b, downsample_rate=2,
                      conv_kernel_size=5)
    params = init_gbst_params(conv, np.random.default_rng(2))
    found = False
    trials = 0
    for trial in range(100):
        trials += 1
        y = rng.normal(size=(16, d))
        j = int(rng.integers(0, 4))
        z = y.copy()
        i = 4 * j + int(rng.integers(0, 3))
        z[[i, i + 1]] = z[[i + 1, i]]
        with no_grad():
            out_y = gbst_forward(Tensor(y), conv, params)
            out_z = gbst_forward(Tensor(z), conv, params)
        if np.abs(out_y.downsampled.data - out_z.downsampled.data).max() > 1e-6:
            found = True
            break
    assert found
    report(4, "permutation pair", f"exact invariance without conv; conv hit in {trials} trial(s)")


def test_criterion_5_toy_pretraining():
    docs = load_corpus(bundled_corpus_path())
    cfg = TrainConfig()  # default desk training config: 500 steps, batch 8
    assert cfg.steps == 500 and cfg.batch_size == 8

    untrained = ModelState(DESK_STACK, DESK_GBST, seed=123)
    held_out = make_batch(docs, cfg, np.random.default_rng(999))
    base = evaluate(untrained, held_out)["nats_per_byte"]
    assert abs(base - math.log(256)) < 0.2

    ratios = []
    for seed in (0, 1, 2):
        state = ModelState(DESK_STACK, DESK_GBST, seed=seed)
        run_cfg = TrainConfig(seed=seed)
        records = train_loop(state, docs, run_cfg)
        e50, e500 = records[49].ema, records[499].ema
        ratios.append(e500 / e50)
        assert e500 <= 0.5 * e50, f"seed {seed}: ema@500={e500:.3f} ema@50={e50:.3f}"
    report(5, "toy pre-training",
           f"untrained {base:.3f} nats/byte; ema ratios " + ", ".join(f"{r:.3f}" for r in ratios))


def test_criterion_6_freezing():
    docs = load_corpus(bundled_corpus_path())
    state = ModelState(DESK_STACK, DESK_GBST, seed=4)
    gbst_before = {p.name: p.data.tobytes() for p in state.gbst_parameters()}
    tf_before = {p.name: p.data.tobytes() for p in state.transformer_parameters()}
    cfg = TrainConfig(steps=100, seed=4, freeze_gbst=True, window_len=64)
    train_loop(state, docs, cfg)
    for p in state.gbst_parameters():
        assert p.data.tobytes() == gbst_before[p.name], p.name
    changed = sum(
        1 for p in state.transformer_parameters() if p.data.tobytes() != tf_before[p.name]
    )
    fraction = changed / len(state.transformer_parameters())
    assert fraction >= 0.99
    report(6, "freezing", f"gbst bit-identical over 100 steps; {fraction:.0%} of transformer tensors changed")


def test_criterion_7_compute_claim_ratios():
    # (a) analytic FLOP ratio at L=1024, same stack
    identity = count_flops(StackConfig(frontend="identity"), None, 1024)
    down2 = count_flops(DESK_STACK, DESK_GBST, 1024)
    ratio = identity.flops_forward / down2.flops_forward
    assert 1.5 <= ratio <= 2.5

    # (b) measured steps/s strictly increase with downsampling at L=1024
    # (positional tables sized for the undownsampled byte length)
    bench_cfg = TrainConfig(batch_size=1, window_len=1024)
    speeds = {}
    runs = [("identity", None), ("gbst2", 2), ("gbst3", 3)]
    # prime once so the first measured row is not penalized by cold start
    benchmark_steps(ModelState(DESK_STACK, DESK_GBST, seed=0), bench_cfg, 10, 256)
    for name, rate in runs:
        if rate is None:
            state = ModelState(
                StackConfig(frontend="identity", max_positions=1024), None, seed=0
            )
        else:
            stack = StackConfig(max_positions=1024)
            g = GbstConfig(embedding_dim=stack.d_model, downsample_rate=rate)
            state = ModelState(stack, g, seed=0)
        speeds[name] = benchmark_steps(state, bench_cfg, 10, 1024).steps_per_second
    assert speeds["gbst2"] > speeds["identity"]
    assert speeds["gbst3"] > speeds["gbst2"]
    report(7, "compute-claim ratios",
           f"flops ratio {ratio:.2f}; steps/s identity={speeds['identity']:.2f} "
           f"d_s=2={speeds['gbst2']:.2f} d_s=3={speeds['gbst3']:.2f}")


def test_criterion_8_score_viz_mechanics(tmp_path, capsys):
    state = ModelState(DESK_STACK, DESK_GBST, seed=7)
    state["gbst.scorer"].data[:] = 0.0  # zero-initialized block scorer
    ckpt = tmp_path / "viz.gbst"
    save_checkpoint(state, str(ckpt))
    code = main([
        "score-viz", "--checkpoint", str(ckpt),
        "--text", "on subword tokenization", "--out", str(tmp_path),
    ])
    capsys.readouterr()
    assert code == 0
    rows = (tmp_path / "scores.tsv").read_text().strip().split("\n")
    matrix = np.array([[float(v) for v in row.split("\t")[1:]] for row in rows])
    assert matrix.shape == (4, 23)
    npt.assert_allclose(matrix.sum(axis=0), 1.0, atol=1e-6)
    npt.assert_allclose(matrix, 0.25, atol=1e-12)  # uniform under a zero scorer
    report(8, "score visualization", "4x23 column-stochastic matrix, uniform 0.25 at zero scorer")


def test_criterion_9_determinism(tmp_path):
    cfg_text = (
        "embedding_dim = 32\nheads = 2\nhead_dim = 16\nffn_dim = 64\n"
        "encoder_layers = 1\ndecoder_layers = 1\nwindow_len = 64\n"
        "batch_size = 2\nsteps = 20\nseed = 11\n"
    )
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(cfg_text)
    out = tmp_path / "out"
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == 0
    metrics = (out / "metrics.log").read_bytes()
    ckpt = (out / "checkpoint.gbst").read_bytes()
    resolved = (out / "config.resolved.txt").read_bytes()
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "metrics.log").read_bytes() == metrics
    assert (out / "checkpoint.gbst").read_bytes() == ckpt
    assert (out / "config.resolved.txt").read_bytes() == resolved
    report(9, "determinism", "metrics, checkpoint, and resolved config byte-identical on re-run")
