"""The attention seq2seq model with optional scratchpad write or coverage.

Per output step (input feeding moves the recurrent update ahead of the read):

1. update the decoder stack from ``[embed(prev token); previous attentional state]``
2. attend over the current memory version
3. combine context and state, project to the vocabulary
4. (scratchpad only) write the memory
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, attend, combine
from .cells import CellState, EncoderOutputs, decoder_stack_step, encode, init_decoder_state
from .config import ModelConfig, config_hash
from .coverage import CoverageState, attend_with_coverage, coverage_loss, coverage_update
from .losses import label_smoothed_nll, masked_mean
from .memory import ScratchpadMemory, WriteRecord, write
from .rng import Rng
from .tensor import Tensor


class ModelParameters:
    """Named learnable tensors of one model, in canonical (sorted) order."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        self.config = config
        self.tensors = {name: tensors[name] for name in sorted(tensors)}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParameters:
        return ModelParameters(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.items()},
        )

    def frozen(self) -> ModelParameters:
        """Gradient-free snapshot sharing no buffers with ``self``."""
        return ModelParameters(
            self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.items()}
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.src_vocab_size < 1 or cfg.tgt_vocab_size < 1:
        raise ValueError("model config needs src_vocab_size and tgt_vocab_size")
    gates = 3 if cfg.cell == "gru" else 4
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (cfg.src_vocab_size, cfg.emb_dim),
        "tgt_embed": (cfg.tgt_vocab_size, cfg.emb_dim),
    }
    directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    d_in = cfg.emb_dim
    for layer in range(cfg.enc_layers):
        for direction in directions:
            pre = f"enc.l{layer}.{direction}."
            shapes[pre + "w_x"] = (d_in, gates * cfg.hidden)
            shapes[pre + "w_h"] = (cfg.hidden, gates * cfg.hidden)
            shapes[pre + "b"] = (gates * cfg.hidden,)
        d_in = cfg.enc_width
    d_enc, d_dec = cfg.enc_width, cfg.dec_hidden
    shapes["bridge.w"] = (d_enc, d_dec)
    shapes["bridge.b"] = (d_dec,)
    d_in = cfg.emb_dim + (d_dec if cfg.input_feed else 0)
    for layer in range(cfg.dec_layers):
        pre = f"dec.l{layer}."
        shapes[pre + "w_x"] = (d_in, gates * d_dec)
        shapes[pre + "w_h"] = (d_dec, gates * d_dec)
        shapes[pre + "b"] = (gates * d_dec,)
        if layer > 0 and cfg.residual:
            shapes[pre + "ln.gain"] = (d_dec,)
            shapes[pre + "ln.bias"] = (d_dec,)
        d_in = d_dec
    if cfg.score == "general":
        shapes["attn.w_general"] = (d_dec, d_enc)
    else:
        shapes["attn.w2"] = (d_dec + d_enc, cfg.mlp_score_hidden)
        shapes["attn.w1"] = (cfg.mlp_score_hidden, 1)
    shapes["combine.w"] = (d_enc + d_dec, d_dec)
    shapes["out.w"] = (d_dec, cfg.tgt_vocab_size)
    shapes["out.b"] = (cfg.tgt_vocab_size,)
    if cfg.scratchpad:
        h = cfg.mlp_width
        shapes["pad.gate.w_query"] = (d_dec + d_enc, h)
        shapes["pad.gate.w_memory"] = (d_enc, h)
        shapes["pad.gate.b"] = (h,)
        shapes["pad.gate.w_out"] = (h, 1)
        shapes["pad.gate.b_out"] = (1,)
        shapes["pad.update.w1"] = (d_dec + d_enc, h)
        shapes["pad.update.b1"] = (h,)
        shapes["pad.update.w2"] = (h, d_enc)
        shapes["pad.update.b2"] = (d_enc,)
    if cfg.coverage:
        shapes["coverage.w"] = ()
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 0, scheme: str = "uniform") -> ModelParameters:
    """Uniform(-init_scale, init_scale) per tensor, each from its own named stream.

    Drawing per name means a tensor's initial value does not depend on which
    other tensors the configuration includes.
    """
    root = Rng(seed, ("init",))
    tensors = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("ln.gain"):
            data = np.ones(shape)
        elif name.endswith("ln.bias") or scheme == "zeros":
            data = np.zeros(shape)
        elif scheme == "uniform":
            data = root.child(name).uniform(-cfg.init_scale, cfg.init_scale, shape)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParameters(cfg, tensors)


@dataclass
class DecoderState:
    layers: list[CellState]
    feed: Tensor  # attentional state of the previous step
    step: int = 0
    coverage: Optional[CoverageState] = None

    @property
    def top(self) -> Tensor:
        return self.layers[-1].hidden


@dataclass
class StepTrace:
    attention: AttentionRecord
    logits: Tensor
    log_probs: np.ndarray  # (B, V)
    write: Optional[WriteRecord] = None
    coverage_penalty: Optional[Tensor] = None  # (B,)
    attentional_state: Optional[Tensor] = None

    @property
    def distribution(self) -> np.ndarray:
        return self.attention.distribution.data


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def start(
    source,
    params: ModelParameters,
    source_mask: np.ndarray | None = None,
    rng: Rng | None = None,
    training: bool = False,
) -> tuple[DecoderState, ScratchpadMemory, EncoderOutputs]:
    """Encode and build the initial decoder state and memory version 0."""
    cfg = params.config
    enc = encode(source, params.tensors, cfg, source_mask, rng.child("enc") if rng else None, training)
    layers = init_decoder_state(enc, params.tensors, cfg)
    batch, n = enc.mask.shape
    feed = Tensor(np.zeros((batch, cfg.dec_hidden)))
    coverage = CoverageState.initial(batch, n) if cfg.coverage else None
    memory = ScratchpadMemory(enc.states, enc.mask, 0)
    return DecoderState(layers, feed, 0, coverage), memory, enc


def decode_step(
    state: DecoderState,
    memory: ScratchpadMemory,
    prev_tokens,
    params: ModelParameters,
    rng: Rng | None = None,
    training: bool = False,
) -> tuple[DecoderState, ScratchpadMemory, StepTrace]:
    cfg = params.config
    p = params.tensors
    ids = np.asarray(prev_tokens, dtype=np.intp).reshape(-1)
    emb = T.embedding_lookup(p["tgt_embed"], ids)
    x = T.concat([emb, state.feed], axis=-1) if cfg.input_feed else emb
    step_rng = rng.child("dec", state.step) if rng else None
    top, layers = decoder_stack_step(x, state.layers, p, cfg, step_rng, training)

    if cfg.coverage:
        rec = attend_with_coverage(top, memory.states, memory.mask, state.coverage, p, cfg)
    else:
        rec = attend(top, memory.states, memory.mask, p, cfg)
    att = combine(top, rec.context, p["combine.w"])
    logits = T.linear(att, p["out.w"], p["out.b"])

    coverage = penalty = None
    if cfg.coverage:
        penalty = coverage_loss(state.coverage.coverage, rec.distribution)
        coverage = coverage_update(state.coverage, rec.distribution)

    record = None
    if cfg.scratchpad:
        s_next = att if cfg.write_state == "attentional" else top
        memory, record = write(
            memory, s_next, rec.context, p, cfg.pin_gates, cfg.check_memory_range
        )
    trace = StepTrace(rec, logits, _log_softmax_np(logits.data), record, penalty, att)
    return DecoderState(layers, att, state.step + 1, coverage), memory, trace


@dataclass
class ForwardResult:
    loss: Tensor
    nll: Tensor
    coverage_loss: Optional[Tensor]
    traces: list[StepTrace] = field(default_factory=list)
    fed_tokens: Optional[np.ndarray] = None


def forward_teacher_forced(
    source,
    target,
    params: ModelParameters,
    rng: Rng | None = None,
    teacher_forcing: float = 1.0,
    label_smoothing: float = 0.0,
    source_mask: np.ndarray | None = None,
    target_mask: np.ndarray | None = None,
    training: bool = False,
) -> ForwardResult:
    """Run the decoder over ``target`` (B, T) and return the mean token loss.

    At each step the fed token is the gold previous token with probability
    ``teacher_forcing`` (one coin per sequence per step) and the model's own
    argmax otherwise. ``target`` already ends in the end-of-sequence id.
    """
    cfg = params.config
    tgt = np.asarray(target, dtype=np.intp)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    if tgt.shape[1] == 0:
        raise ValueError("empty target sequence")
    if target_mask is None:
        target_mask = np.ones(tgt.shape, dtype=bool)
    state, memory, _ = start(source, params, source_mask, rng, training)
    batch, steps = tgt.shape
    prev = np.full(batch, cfg.bos_id, dtype=np.intp)
    fed = np.empty_like(tgt)
    traces: list[StepTrace] = []
    for i in range(steps):
        fed[:, i] = prev
        state, memory, trace = decode_step(state, memory, prev, params, rng, training)
        traces.append(trace)
        gold = tgt[:, i]
        if teacher_forcing >= 1.0:
            prev = gold
        else:
            if rng is None:
                raise ValueError("teacher forcing below 1 needs a random stream")
            coin = rng.child("teacher", i).random(batch) < teacher_forcing
            prev = np.where(coin, gold, trace.log_probs.argmax(axis=-1))
    logits = T.stack([t.logits for t in traces], axis=1)
    nll = label_smoothed_nll(logits, tgt, label_smoothing, target_mask)
    loss, cov_loss = nll, None
    if cfg.coverage:
        penalties = T.stack([t.coverage_penalty for t in traces], axis=1)
        cov_loss = masked_mean(penalties, target_mask)
        if cfg.coverage_lambda:
            loss = T.add(nll, T.scale(cov_loss, cfg.coverage_lambda))
    return ForwardResult(loss, nll, cov_loss, traces, fed)
