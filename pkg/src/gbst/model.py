"""Encoder-decoder transformer over downsampled latent subwords.

Pre-norm residual blocks with GELU feed-forward layers and learned absolute
positional embeddings. The byte embedding table is shared between the
encoder frontend and the decoder input; the output projection is separate.
The frontend is either the soft tokenization layer ("gbst") or a plain byte
embedding ("identity", the undownsampled baseline).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .bytes_data import VOCAB_SIZE, ByteSequence, SpanCorruptionExample, is_sentinel, sentinel_id
from .errors import ConfigError, ShapeError
from .subword import GbstConfig, GbstOutput, GbstParams, gbst_forward
from .tensor import Parameter, Tensor, no_grad

BOS_ID = sentinel_id(0)  # 255 doubles as the decoder start token
ATTN_MASK_VALUE = -1e9  # large finite negative; exp() underflows to exactly 0.0

CHECKPOINT_MAGIC = b"GBSTCKPT1\n"


@dataclass
class StackConfig:
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    frontend: str = "gbst"
    max_positions: int = 512

    def __post_init__(self):
        if self.frontend not in ("gbst", "identity"):
            raise ConfigError(f"frontend must be 'gbst' or 'identity', got {self.frontend!r}")
        for name in ("d_model", "heads", "head_dim", "ffn_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")


def parameter_shapes(stack: StackConfig, gbst: GbstConfig | None) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in creation order. Single source of
    truth for model construction, checkpointing, and parameter counting."""
    d, h, hd, f = stack.d_model, stack.heads, stack.head_dim, stack.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {}
    shapes["embedding"] = (VOCAB_SIZE, d)
    shapes["pos_enc"] = (stack.max_positions, d)
    shapes["pos_dec"] = (stack.max_positions, d)
    if stack.frontend == "gbst":
        if gbst is None:
            raise ConfigError("gbst frontend needs a GbstConfig")
        if gbst.embedding_dim != d:
            raise ConfigError(
                f"gbst embedding_dim {gbst.embedding_dim} must equal d_model {d}"
            )
        if gbst.conv_kernel_size is not None:
            shapes["gbst.conv_filters"] = (gbst.conv_kernel_size, d, d)
            shapes["gbst.conv_bias"] = (d,)
        shapes["gbst.scorer"] = (d, 1)

    def attn(prefix: str):
        shapes[f"{prefix}.wq"] = (d, h * hd)
        shapes[f"{prefix}.wk"] = (d, h * hd)
        shapes[f"{prefix}.wv"] = (d, h * hd)
        shapes[f"{prefix}.wo"] = (h * hd, d)

    def ln(prefix: str):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix: str):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(stack.encoder_layers):
        ln(f"enc{i}.ln1")
        attn(f"enc{i}.attn")
        ln(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    for i in range(stack.decoder_layers):
        ln(f"dec{i}.ln1")
        attn(f"dec{i}.self")
        ln(f"dec{i}.ln2")
        attn(f"dec{i}.cross")
        ln(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    shapes["out_proj"] = (d, VOCAB_SIZE)
    return shapes


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
        return np.zeros(shape)
    if name == "embedding":
        return rng.normal(0.0, 1.0, size=shape)
    if name.startswith("pos_"):
        return rng.normal(0.0, 0.02, size=shape)
    if name == "out_proj":
        # near-uniform logits at init: untrained loss sits at ln(vocab)
        return rng.normal(0.0, 0.01, size=shape)
    fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
    return rng.normal(0.0, fan_in ** -0.5, size=shape)


class ModelState:
    """All parameters plus the step counter."""

    def __init__(
        self,
        stack: StackConfig,
        gbst: GbstConfig | None = None,
        seed: int = 0,
        run_config: dict | None = None,
    ):
        self.stack = stack
        self.gbst = gbst
        self.run_config = run_config or {}
        self.step = 0
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        for name, shape in parameter_shapes(stack, gbst).items():
            self.params[name] = Parameter(name, _init_value(name, shape, rng))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def gbst_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("gbst.")]

    def transformer_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("gbst.")]

    def set_gbst_frozen(self, flag: bool) -> None:
        for p in self.gbst_parameters():
            p.frozen = flag

    def gbst_param_view(self) -> GbstParams:
        if self.stack.frontend != "gbst":
            raise ConfigError("model has no gbst frontend")
        return GbstParams(
            scorer=self.params["gbst.scorer"],
            conv_filters=self.params.get("gbst.conv_filters"),
            conv_bias=self.params.get("gbst.conv_bias"),
        )

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.tensor.grad = None


def _attention(
    x_q: Tensor,
    x_kv: Tensor,
    state: ModelState,
    prefix: str,
    mask: Tensor | None = None,
    collect: list | None = None,
) -> Tensor:
    stack = state.stack
    h, hd = stack.heads, stack.head_dim
    q = T.matmul(x_q, state[f"{prefix}.wq"].tensor)
    k = T.matmul(x_kv, state[f"{prefix}.wk"].tensor)
    v = T.matmul(x_kv, state[f"{prefix}.wv"].tensor)
    scale = 1.0 / math.sqrt(hd)
    outs = []
    for i in range(h):
        qs = T.slice_cols(q, i * hd, (i + 1) * hd)
        ks = T.slice_cols(k, i * hd, (i + 1) * hd)
        vs = T.slice_cols(v, i * hd, (i + 1) * hd)
        scores = T.mul(T.matmul(qs, T.transpose_2d(ks)), scale)
        if mask is not None:
            scores = T.add(scores, mask)
        probs = T.softmax_last_axis(scores)
        if collect is not None:
            collect.append(probs.data)
        outs.append(T.matmul(probs, vs))
    merged = outs[0] if h == 1 else T.concat_last_axis(outs)
    return T.matmul(merged, state[f"{prefix}.wo"].tensor)


def _ffn(x: Tensor, state: ModelState, prefix: str) -> Tensor:
    hidden = T.gelu(T.add(T.matmul(x, state[f"{prefix}.w1"].tensor), state[f"{prefix}.b1"].tensor))
    return T.add(T.matmul(hidden, state[f"{prefix}.w2"].tensor), state[f"{prefix}.b2"].tensor)


def _ln(x: Tensor, state: ModelState, prefix: str) -> Tensor:
    return T.layer_norm(x, state[f"{prefix}.gain"].tensor, state[f"{prefix}.bias"].tensor)


def _positions(state: ModelState, table: str, length: int) -> Tensor:
    if length > state.stack.max_positions:
        raise ShapeError(
            f"sequence length {length} exceeds max_positions {state.stack.max_positions}"
        )
    return T.slice_rows(state[table].tensor, 0, length)


def causal_mask(n: int) -> Tensor:
    m = np.triu(np.full((n, n), ATTN_MASK_VALUE), k=1)
    return T.constant(m)


def encode_stack(state: ModelState, x: Tensor, collect_attn: list | None = None) -> Tensor:
    """Self-attention + FFN stack over an already-embedded sequence.
    A zero-layer stack reduces to input plus positional embedding."""
    n = x.shape[0]
    if n < 1:
        raise ShapeError("encoder input must be non-empty")
    x = T.add(x, _positions(state, "pos_enc", n))
    for i in range(state.stack.encoder_layers):
        normed = _ln(x, state, f"enc{i}.ln1")
        x = T.add(x, _attention(normed, normed, state, f"enc{i}.attn", collect=collect_attn))
        x = T.add(x, _ffn(_ln(x, state, f"enc{i}.ln2"), state, f"enc{i}.ffn"))
    return x


def run_frontend(state: ModelState, ids: list[int]) -> tuple[Tensor, GbstOutput | None]:
    """Embed encoder bytes and apply the configured frontend."""
    if not ids:
        raise ShapeError("encoder byte sequence is empty")
    x = T.embedding_gather(state["embedding"].tensor, ids)
    if state.stack.frontend == "identity":
        return x, None
    out = gbst_forward(x, state.gbst, state.gbst_param_view())
    return out.downsampled, out


def encode_input(state: ModelState, ids: list[int]) -> tuple[Tensor, GbstOutput | None]:
    """Frontend plus encoder stack; returns (memory, frontend diagnostics)."""
    x, front = run_frontend(state, ids)
    return encode_stack(state, x), front


def decode_stack(
    state: ModelState,
    memory: Tensor,
    dec_input_ids: list[int],
    collect_attn: list | None = None,
) -> Tensor:
    """Teacher-forced decoder: causal self-attention, cross-attention to the
    encoder memory, FFN; returns logits over all 256 byte ids per position."""
    if not dec_input_ids:
        raise ShapeError("decoder prefix must be non-empty")
    if memory.shape[0] < 1:
        raise ShapeError("decoder requires a non-empty encoder memory")
    n = len(dec_input_ids)
    x = T.embedding_gather(state["embedding"].tensor, dec_input_ids)
    x = T.add(x, _positions(state, "pos_dec", n))
    mask = causal_mask(n)
    for i in range(state.stack.decoder_layers):
        normed = _ln(x, state, f"dec{i}.ln1")
        x = T.add(x, _attention(normed, normed, state, f"dec{i}.self", mask=mask, collect=collect_attn))
        x = T.add(x, _attention(_ln(x, state, f"dec{i}.ln2"), memory, state, f"dec{i}.cross", collect=collect_attn))
        x = T.add(x, _ffn(_ln(x, state, f"dec{i}.ln3"), state, f"dec{i}.ffn"))
    return T.matmul(x, state["out_proj"].tensor)


def sequence_loss(
    state: ModelState, enc_ids: list[int], target_ids: list[int], reduction: str = "mean"
) -> Tensor:
    """Teacher-forced cross entropy of a target given encoder bytes."""
    if not target_ids:
        raise ShapeError("target must be non-empty")
    memory, _ = encode_input(state, enc_ids)
    dec_in = [BOS_ID] + list(target_ids[:-1])
    logits = decode_stack(state, memory, dec_in)
    return T.cross_entropy_with_logits(logits, target_ids, reduction=reduction)


def example_loss(state: ModelState, example: SpanCorruptionExample, reduction: str = "mean") -> Tensor:
    return sequence_loss(
        state, example.encoder_input.ids, example.decoder_target.ids, reduction=reduction
    )


def greedy_decode(
    state: ModelState,
    memory: Tensor,
    max_len: int,
    stop_after_spans: int | None = None,
) -> ByteSequence:
    """Argmax decoding from the BOS sentinel.

    The terminal sentinel is structurally indistinguishable from a span
    delimiter, so when the caller knows the span count the decode stops at
    the (span_count + 1)-th sentinel emitted; otherwise it runs to max_len.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    out: list[int] = []
    sentinels_seen = 0
    with no_grad():
        prefix = [BOS_ID]
        for _ in range(max_len):
            logits = decode_stack(state, memory, prefix)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            prefix.append(nxt)
            if is_sentinel(nxt):
                sentinels_seen += 1
                if stop_after_spans is not None and sentinels_seen >= stop_after_spans + 1:
                    break
    return ByteSequence(out)


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------


def save_checkpoint(state: ModelState, path: str) -> None:
    """Self-describing container: magic line, JSON header with configs and
    parameter shapes, then raw little-endian float64 blobs in header order."""
    header = {
        "version": 1,
        "step": state.step,
        "stack": asdict(state.stack),
        "gbst": asdict(state.gbst) if state.gbst is not None else None,
        "run_config": state.run_config,
        "params": [
            {"name": n, "shape": list(p.data.shape)} for n, p in state.params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"{len(blob)}\n".encode("ascii"))
        fh.write(blob)
        for p in state.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint (bad magic)")
        header_len = int(fh.readline().strip())
        header = json.loads(fh.read(header_len).decode("utf-8"))
        stack = StackConfig(**header["stack"])
        gbst = GbstConfig(**header["gbst"]) if header["gbst"] is not None else None
        state = ModelState(stack, gbst, seed=0, run_config=header.get("run_config") or {})
        state.step = int(header["step"])
        for meta in header["params"]:
            name, shape = meta["name"], tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ConfigError(f"{path} truncated while reading {name}")
            if name not in state.params:
                raise ConfigError(f"{path} has unknown parameter {name}")
            if state.params[name].data.shape != shape:
                raise ConfigError(f"{path}: shape mismatch for {name}")
            state.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return state
