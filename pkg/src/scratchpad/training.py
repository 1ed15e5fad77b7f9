"""Adam, gradient clipping, plateau LR decay, checkpoint averaging and the loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (
    CheckpointError,
    decode_arrays,
    encode_arrays,
    load_checkpoint,
    save_checkpoint,
)
from .config import ModelConfig, RunConfig, TrainingConfig, config_hash, to_dict
from .data import (
    ParallelCorpus,
    Vocabulary,
    build_vocab,
    encode_corpus,
    make_batch,
    make_task,
    token_batches,
)
from .losses import label_smoothed_nll  # noqa: F401  (re-exported)
from .model import ModelParameters, forward_teacher_forced, init_parameters
from .rng import Rng
from .tensor import NonFiniteError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ModelParameters, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0, lr, beta1, beta2, eps,
        )


def adam_step(
    params: ModelParameters,
    grads: Mapping[str, np.ndarray],
    opt: OptimizerState,
    lr: float | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``opt``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name!r} is not finite at step {opt.step + 1}")
    lr = opt.lr if lr is None else lr
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient of {name!r} has shape {g.shape}, parameter {p.shape}")
        m = opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float = 2.0) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def lr_plateau_decay(val_losses: Sequence[float], lr: float, factor: float = 0.7) -> float:
    """Multiply ``lr`` by ``factor`` when the newest loss did not beat the previous one."""
    if len(val_losses) >= 2 and val_losses[-1] >= val_losses[-2]:
        return lr * factor
    return lr


def average_parameters(items: Sequence[ModelParameters]) -> ModelParameters:
    if not items:
        raise ValueError("nothing to average")
    names = items[0].names()
    for other in items[1:]:
        if other.names() != names:
            diff = sorted(set(names) ^ set(other.names()))
            raise CheckpointError(f"checkpoints have different tensors: {diff}")
        for n in names:
            if other[n].shape != items[0][n].shape:
                raise CheckpointError(f"tensor {n!r} has mismatched shapes")
    k = len(items)
    averaged = {}
    for n in names:
        # mean as an offset from the first item, so identical inputs come back bit-exact
        base = items[0][n].data
        offset = np.zeros_like(base)
        for other in items[1:]:
            offset = offset + (other[n].data - base)
        averaged[n] = T.Tensor(base + offset / k, requires_grad=True, name=n)
    return ModelParameters(items[0].config, averaged)


def average_checkpoints(paths: Sequence[str | Path]) -> ModelParameters:
    """Elementwise mean of the named tensors of several checkpoints."""
    return average_parameters([load_checkpoint(p) for p in paths])


# ---------------------------------------------------------------------------
# training loop


def resolve_model_config(model_cfg: ModelConfig, vocab: Vocabulary) -> ModelConfig:
    return dataclasses.replace(
        model_cfg,
        src_vocab_size=model_cfg.src_vocab_size or len(vocab),
        tgt_vocab_size=model_cfg.tgt_vocab_size or len(vocab),
    )


def gradients(params: ModelParameters) -> dict[str, np.ndarray]:
    return {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()
    }


def validation_loss(
    params: ModelParameters,
    examples,
    batch_tokens: int,
    label_smoothing: float,
) -> float:
    """Token-weighted mean of the smoothed NLL under full teacher forcing."""
    total = 0.0
    count = 0
    with T.no_grad():
        for idx in token_batches(examples, batch_tokens):
            b = make_batch(examples, idx)
            res = forward_teacher_forced(
                b.src, b.tgt, params, None, 1.0, label_smoothing, b.src_mask, b.tgt_mask
            )
            n = b.n_target_tokens
            total += res.nll.item() * n
            count += n
    return total / count


@dataclass
class TrainResult:
    params: ModelParameters
    final_params: ModelParameters
    vocab: Vocabulary
    history: list[dict] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    run_dir: Path | None = None
    grad_norms: list[float] = field(default_factory=list)


class MetricLog:
    """Append-only JSON-lines metric log (optionally in memory only)."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def load(self, upto_epoch: int) -> None:
        kept = []
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                if rec["epoch"] <= upto_epoch:
                    kept.append(rec)
            self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept), encoding="utf-8")
        self.records = kept


def _save_train_state(path: Path, params: ModelParameters, opt: OptimizerState, meta: dict) -> None:
    arrays = {}
    for k in params.names():
        arrays["m/" + k] = opt.m[k]
        arrays["v/" + k] = opt.v[k]
    header = {
        "kind": "train_state",
        "config_hash": params.config_hash,
        "meta": dict(meta, opt_step=opt.step, lr=opt.lr),
    }
    path.write_bytes(encode_arrays(arrays, header))


def _load_train_state(path: Path, params: ModelParameters, tcfg: TrainingConfig):
    header, arrays = decode_arrays(path.read_bytes())
    if header.get("config_hash") != params.config_hash:
        raise CheckpointError("training state belongs to a different model config")
    meta = header["meta"]
    opt = OptimizerState(
        {k: arrays["m/" + k].copy() for k in params.names()},
        {k: arrays["v/" + k].copy() for k in params.names()},
        meta["opt_step"], meta["lr"], tcfg.beta1, tcfg.beta2, tcfg.adam_eps,
    )
    return opt, meta


def train(
    cfg: RunConfig,
    corpora: dict[str, ParallelCorpus] | None = None,
    run_dir: str | Path | None = None,
    resume: bool = False,
    eval_every: int = 0,
    on_eval: Callable[[int, float, ModelParameters], None] | None = None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Train one model; deterministic given ``cfg.seed``.

    With ``run_dir`` the run writes ``metrics.jsonl``, one checkpoint per epoch,
    the optimiser state needed to resume, and ``final.ckpt`` (the mean of the
    last ``average_last`` epoch checkpoints). ``eval_every`` adds mid-epoch
    validation records every that many steps and passes them to ``on_eval``.
    ``max_epochs`` stops early (used to simulate interrupted runs).
    """
    tcfg = cfg.training
    corpora = corpora or make_task(cfg.task, cfg.seed)
    vocab = build_vocab(corpora["train"])
    model_cfg = resolve_model_config(cfg.model, vocab)
    params = init_parameters(model_cfg, cfg.seed)
    train_ex = encode_corpus(corpora["train"], vocab)
    valid_ex = encode_corpus(corpora["valid"], vocab)
    root = Rng(cfg.seed, ("train",))

    out = Path(run_dir) if run_dir is not None else None
    ckpt_dir = None
    if out is not None:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out / "vocab.json").write_text(json.dumps(vocab.to_list()), encoding="utf-8")
    log = MetricLog(out / "metrics.jsonl" if out is not None else None)
    meta_base = {"vocab": vocab.to_list(), "seed": cfg.seed}

    opt = OptimizerState.create(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    val_losses: list[float] = []
    first_epoch = 1
    bad_epochs = 0
    if resume and ckpt_dir is not None and (ckpt_dir / "train_state.bin").exists():
        state_path = ckpt_dir / "train_state.bin"
        opt_meta = decode_arrays(state_path.read_bytes())[0]["meta"]
        done = opt_meta["epoch"]
        params = load_checkpoint(ckpt_dir / f"epoch_{done:03d}.ckpt", model_cfg)
        opt, opt_meta = _load_train_state(state_path, params, tcfg)
        val_losses = list(opt_meta["val_losses"])
        bad_epochs = opt_meta["bad_epochs"]
        first_epoch = done + 1
        log.load(done)
    elif out is not None:
        log.path.write_text("", encoding="utf-8")
        for stale in ckpt_dir.glob("*.ckpt"):
            stale.unlink()

    epoch_ckpts: list[Path] = []
    snapshots: list[ModelParameters] = []
    grad_norms: list[float] = []
    started = time.perf_counter()
    last_epoch = tcfg.epochs if max_epochs is None else min(max_epochs, tcfg.epochs)

    def stamp():
        return round(time.perf_counter() - started, 3) if tcfg.log_wall_time else None

    for epoch in range(first_epoch, last_epoch + 1):
        batches = token_batches(train_ex, tcfg.batch_tokens, root.child("batches", epoch))
        loss_sum = 0.0
        tok_sum = 0
        for idx in batches:
            b = make_batch(train_ex, idx)
            step_no = opt.step + 1
            params.zero_grad()
            res = forward_teacher_forced(
                b.src, b.tgt, params, root.child("step", step_no), tcfg.teacher_forcing,
                tcfg.label_smoothing, b.src_mask, b.tgt_mask, training=True,
            )
            loss = res.loss.item()
            if not math.isfinite(loss):
                raise NonFiniteError(f"training loss is {loss} at step {step_no}")
            T.backward(res.loss)
            grads = gradients(params)
            norm = global_norm(grads)
            grads = clip_grad_norm(grads, tcfg.clip_norm)
            clipped = global_norm(grads)
            grad_norms.append(clipped)
            adam_step(params, grads, opt)
            loss_sum += loss * b.n_target_tokens
            tok_sum += b.n_target_tokens
            log.write({
                "kind": "step", "epoch": epoch, "step": opt.step, "train_loss": loss,
                "val_loss": None, "lr": opt.lr, "grad_norm": norm, "clipped_norm": clipped,
                "wall_time": stamp(),
            })
            if eval_every and opt.step % eval_every == 0:
                vl = validation_loss(params, valid_ex, tcfg.batch_tokens, tcfg.label_smoothing)
                log.write({
                    "kind": "eval", "epoch": epoch, "step": opt.step, "train_loss": None,
                    "val_loss": vl, "lr": opt.lr, "wall_time": stamp(),
                })
                if on_eval is not None:
                    on_eval(opt.step, vl, params)
        val = validation_loss(params, valid_ex, tcfg.batch_tokens, tcfg.label_smoothing)
        improved = not val_losses or val < val_losses[-1]
        val_losses.append(val)
        log.write({
            "kind": "epoch", "epoch": epoch, "step": opt.step, "train_loss": loss_sum / tok_sum,
            "val_loss": val, "lr": opt.lr, "wall_time": stamp(),
        })
        opt.lr = lr_plateau_decay(val_losses, opt.lr, tcfg.lr_decay)
        bad_epochs = 0 if improved else bad_epochs + 1
        if ckpt_dir is not None:
            path = ckpt_dir / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(params, path, dict(meta_base, epoch=epoch))
            _save_train_state(
                ckpt_dir / "train_state.bin", params, opt,
                {"epoch": epoch, "val_losses": val_losses, "bad_epochs": bad_epochs},
            )
        else:
            snapshots.append(params.frozen())
        if tcfg.early_stopping_patience and bad_epochs >= tcfg.early_stopping_patience:
            break

    if ckpt_dir is not None:
        done_epochs = sorted(ckpt_dir.glob("epoch_*.ckpt"))
        epoch_ckpts = done_epochs[-tcfg.average_last:]
        final = average_checkpoints(epoch_ckpts)
        save_checkpoint(final, ckpt_dir / "final.ckpt", dict(meta_base, averaged=[p.name for p in epoch_ckpts]))
    else:
        final = average_parameters(snapshots[-tcfg.average_last:])
    return TrainResult(params, final, vocab, log.records, val_losses, out, grad_norms)
