"""Span-corruption training loop with Adam/SGD, LR schedules, and freezing.

One optimizer step at a time, single tape, deterministic per seed: batches
are drawn from a generator seeded once per run, examples are processed in
order, and gradient accumulation order is fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bytes_data import ByteSequence, SpanCorruptionExample, corrupt_spans, format_example
from .errors import ConfigError, NonFiniteError, ShapeError
from .model import BOS_ID, ModelState, decode_stack, encode_input, example_loss, greedy_decode
from .tensor import Parameter, backward, no_grad, reset_tape

EMA_WINDOW = 100


class TrainingAborted(RuntimeError):
    """Raised when a step produced NaN/Inf; carries the offending batch."""

    def __init__(self, message: str, batch: list[SpanCorruptionExample]):
        super().__init__(message)
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 500
    learning_rate: float = 0.1
    schedule: str = "inverse_sqrt"
    warmup: int = 100
    seed: int = 0
    freeze_gbst: bool = False
    optimizer: str = "adam"
    grad_clip: float = 1.0
    corruption_rate: float = 0.15
    mean_span: float = 20.0
    window_len: int = 128
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate / math.sqrt(max(step, cfg.warmup))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: list[Parameter], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in params:
            if p.frozen or p.grad is None:
                continue
            m = self.m.setdefault(p.name, np.zeros_like(p.data))
            v = self.v.setdefault(p.name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (p.grad - m)
            v += (1.0 - self.beta2) * (p.grad * p.grad - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Sgd:
    def step(self, params: list[Parameter], lr: float) -> None:
        for p in params:
            if p.frozen or p.grad is None:
                continue
            p.data -= lr * p.grad


def make_optimizer(cfg: TrainConfig):
    return Adam() if cfg.optimizer == "adam" else Sgd()


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None and not p.frozen:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None and not p.frozen:
                np.multiply(p.grad, scale, out=p.grad)
    return norm


def sample_example(
    docs: list[ByteSequence], cfg: TrainConfig, rng: np.random.Generator
) -> SpanCorruptionExample:
    """Random window of a random document, span-corrupted with a derived seed."""
    doc = docs[int(rng.integers(len(docs)))]
    ids = doc.ids
    if len(ids) > cfg.window_len:
        start = int(rng.integers(len(ids) - cfg.window_len + 1))
        ids = ids[start : start + cfg.window_len]
    seed = int(rng.integers(2 ** 31))
    return corrupt_spans(
        ByteSequence(list(ids)),
        corruption_rate=cfg.corruption_rate,
        mean_span=cfg.mean_span,
        rng_seed=seed,
    )


def make_batch(
    docs: list[ByteSequence], cfg: TrainConfig, rng: np.random.Generator
) -> list[SpanCorruptionExample]:
    return [sample_example(docs, cfg, rng) for _ in range(cfg.batch_size)]


def train_step(
    state: ModelState, batch: list[SpanCorruptionExample], cfg: TrainConfig, opt
) -> float:
    """One optimizer step on the mean per-token cross entropy of the batch."""
    if not batch:
        raise ShapeError("batch must be non-empty")
    reset_tape()
    state.zero_grads()
    if cfg.freeze_gbst:
        state.set_gbst_frozen(True)
    lr = learning_rate_at(cfg, state.step + 1)
    try:
        total = None
        tokens = 0
        for ex in batch:
            ce = example_loss(state, ex, reduction="sum")
            total = ce if total is None else T.add(total, ce)
            tokens += len(ex.decoder_target.ids)
        loss = T.mul(total, 1.0 / tokens)
        backward(loss)
    except NonFiniteError as err:
        raise TrainingAborted(f"non-finite value during step {state.step + 1}: {err}", batch)
    clip_gradients(state.parameters(), cfg.grad_clip)
    opt.step(state.parameters(), lr)
    state.step += 1
    return float(loss.data)


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    ema: float


def train_loop(
    state: ModelState,
    docs: list[ByteSequence],
    cfg: TrainConfig,
    log_fn=None,
    checkpoint_fn=None,
) -> list[StepRecord]:
    """Run cfg.steps optimizer steps; emits `step<TAB>loss<TAB>lr` records."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    records: list[StepRecord] = []
    ema = None
    for _ in range(cfg.steps):
        batch = make_batch(docs, cfg, rng)
        lr = learning_rate_at(cfg, state.step + 1)
        loss = train_step(state, batch, cfg, opt)
        ema = loss if ema is None else ema + (loss - ema) / EMA_WINDOW
        rec = StepRecord(step=state.step, loss=loss, lr=lr, ema=ema)
        records.append(rec)
        if log_fn is not None:
            log_fn(f"{rec.step}\t{rec.loss:.10g}\t{rec.lr:.10g}")
        if checkpoint_fn is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
            checkpoint_fn(state)
    return records


def dump_batch(batch: list[SpanCorruptionExample], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in batch:
            fh.write(format_example(ex) + "\n")


def evaluate(state: ModelState, dataset: list[SpanCorruptionExample]) -> dict[str, float]:
    """Deterministic held-out metrics: teacher-forced nats per target byte and
    the fraction of examples whose greedy decode matches the target exactly."""
    if not dataset:
        raise ValueError("evaluate requires a non-empty dataset")
    total_ce = 0.0
    total_tokens = 0
    hits = 0
    with no_grad():
        for ex in dataset:
            tgt = ex.decoder_target.ids
            memory, _ = encode_input(state, ex.encoder_input.ids)
            logits = decode_stack(state, memory, [BOS_ID] + list(tgt[:-1]))
            ce = T.cross_entropy_with_logits(logits, tgt, reduction="sum")
            total_ce += float(ce.data)
            total_tokens += len(tgt)
            gen = greedy_decode(
                state, memory, max_len=len(tgt) + 8, stop_after_spans=ex.span_count
            )
            if gen.ids == list(tgt):
                hits += 1
    return {
        "nats_per_byte": total_ce / total_tokens,
        "exact_span_match_rate": hits / len(dataset),
    }
