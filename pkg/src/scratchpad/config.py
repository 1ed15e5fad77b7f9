"""Run configuration: dataclasses, validation, YAML round-trip and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigError(ValueError):
    """Raised with one line per offending field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class TaskConfig:
    kind: str = "copy"  # copy | reverse | dedup | tsv
    vocab_size: int = 20
    min_len: int = 4
    max_len: int = 12
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    repeat_prob: float = 0.5  # dedup only
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None


@dataclass
class ModelConfig:
    cell: str = "gru"  # gru | lstm
    src_vocab_size: int = 0  # filled from the vocabulary when 0
    tgt_vocab_size: int = 0
    emb_dim: int = 32
    hidden: int = 64  # per encoder direction
    dec_hidden: int = 64
    enc_layers: int = 1
    dec_layers: int = 1
    bidirectional: bool = True
    score: str = "general"  # general | mlp
    mlp_score_hidden: int = 64
    mlp_score_tanh: bool = False
    input_feed: bool = True
    residual: bool = False
    dropout: float = 0.0
    scratchpad: bool = True
    pin_gates: bool = False
    write_state: str = "attentional"  # attentional | recurrent
    scratch_hidden: int = 0  # 0 -> dec_hidden
    coverage: bool = False
    coverage_lambda: float = 1.0
    init_scale: float = 0.08
    check_memory_range: bool = True
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    @property
    def enc_width(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    @property
    def mlp_width(self) -> int:
        return self.scratch_hidden or self.dec_hidden


@dataclass
class TrainingConfig:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 2.0
    label_smoothing: float = 0.1
    lr_decay: float = 0.7
    teacher_forcing: float = 0.5
    epochs: int = 15
    batch_tokens: int = 256
    average_last: int = 5
    early_stopping_patience: int = 0  # 0 disables
    log_wall_time: bool = False


@dataclass
class DecodeConfig:
    beam: int = 4
    max_len: int = 40


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)


_SECTIONS = {
    "task": TaskConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "decode": DecodeConfig,
}


def _coerce(value: Any, annotation: str, where: str, problems: list[str]):
    ann = annotation.replace("Optional[", "").rstrip("]")
    optional = annotation.startswith("Optional[")
    if value is None:
        if optional:
            return None
        problems.append(f"{where}: must not be null")
        return value
    if ann == "bool":
        if not isinstance(value, bool):
            problems.append(f"{where}: expected a boolean, got {value!r}")
        return value
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
        return value
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    if ann == "str":
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(cls, raw: Any, where: str, problems: list[str]):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"{where}.{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name in raw:
            kwargs[name] = _coerce(raw[name], str(f.type), f"{where}.{name}", problems)
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping"])
    for key in raw:
        if key not in _SECTIONS and key not in ("seed", "output_dir"):
            problems.append(f"{key}: unknown field")
    for key in ("seed", "output_dir"):
        if key not in raw:
            problems.append(f"{key}: missing required field")
    seed = _coerce(raw.get("seed", 0), "int", "seed", problems)
    output_dir = _coerce(raw.get("output_dir", ""), "str", "output_dir", problems)
    sections = {
        name: _build_section(cls, raw.get(name), name, problems)
        for name, cls in _SECTIONS.items()
    }
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(seed=seed, output_dir=output_dir, **sections)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig, check_paths: bool = True) -> None:
    p: list[str] = []
    t, m, tr, d = cfg.task, cfg.model, cfg.training, cfg.decode
    if t.kind not in ("copy", "reverse", "dedup", "tsv"):
        p.append(f"task.kind: unknown task {t.kind!r}")
    if t.kind == "tsv":
        for name in ("train_path", "valid_path", "test_path"):
            path = getattr(t, name)
            if not path:
                p.append(f"task.{name}: required for tsv tasks")
            elif check_paths and not Path(path).is_file():
                p.append(f"task.{name}: no such file {path!r}")
    else:
        if t.vocab_size < 2:
            p.append("task.vocab_size: must be >= 2")
        if not 1 <= t.min_len <= t.max_len:
            p.append("task.min_len/max_len: need 1 <= min_len <= max_len")
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(t, name) < 1:
                p.append(f"task.{name}: must be >= 1")
        if not 0.0 <= t.repeat_prob < 1.0:
            p.append("task.repeat_prob: must be in [0, 1)")
    if m.cell not in ("gru", "lstm"):
        p.append(f"model.cell: unknown cell {m.cell!r}")
    if m.score not in ("general", "mlp"):
        p.append(f"model.score: unknown score function {m.score!r}")
    if m.write_state not in ("attentional", "recurrent"):
        p.append(f"model.write_state: unknown choice {m.write_state!r}")
    for name in ("emb_dim", "hidden", "dec_hidden", "enc_layers", "dec_layers", "mlp_score_hidden"):
        if getattr(m, name) < 1:
            p.append(f"model.{name}: must be >= 1")
    if m.scratch_hidden < 0:
        p.append("model.scratch_hidden: must be >= 0")
    if m.scratchpad and m.coverage:
        p.append("model.scratchpad/coverage: at most one of them may be enabled")
    if not 0.0 <= m.dropout < 1.0:
        p.append("model.dropout: must be in [0, 1)")
    if m.coverage_lambda < 0:
        p.append("model.coverage_lambda: must be >= 0")
    if m.init_scale < 0:
        p.append("model.init_scale: must be >= 0")
    if tr.lr <= 0:
        p.append("training.lr: must be > 0")
    for name in ("beta1", "beta2"):
        if not 0.0 <= getattr(tr, name) < 1.0:
            p.append(f"training.{name}: must be in [0, 1)")
    if tr.adam_eps <= 0:
        p.append("training.adam_eps: must be > 0")
    if tr.clip_norm <= 0:
        p.append("training.clip_norm: must be > 0")
    if not 0.0 <= tr.label_smoothing <= 1.0:
        p.append("training.label_smoothing: must be in [0, 1]")
    if not 0.0 < tr.lr_decay <= 1.0:
        p.append("training.lr_decay: must be in (0, 1]")
    if not 0.0 <= tr.teacher_forcing <= 1.0:
        p.append("training.teacher_forcing: must be in [0, 1]")
    if tr.epochs < 1:
        p.append("training.epochs: must be >= 1")
    if tr.batch_tokens < 1:
        p.append("training.batch_tokens: must be >= 1")
    if tr.average_last < 1:
        p.append("training.average_last: must be >= 1")
    if tr.early_stopping_patience < 0:
        p.append("training.early_stopping_patience: must be >= 0")
    if d.beam < 1:
        p.append("decode.beam: must be >= 1")
    if d.max_len < 1:
        p.append("decode.max_len: must be >= 1")
    if not cfg.output_dir:
        p.append("output_dir: must be a non-empty path")
    if p:
        raise ConfigError(p)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    apply_overrides(raw, overrides or [])
    return from_dict(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> None:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"{item}: override must look like key=value"])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{key}: {part} is not a section"])
        node[parts[-1]] = yaml.safe_load(value)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump(cfg), encoding="utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(model_cfg: ModelConfig) -> str:
    return hashlib.sha256(canonical_json(to_dict(model_cfg)).encode()).hexdigest()


def model_config_from_dict(raw: dict) -> ModelConfig:
    problems: list[str] = []
    cfg = _build_section(ModelConfig, raw, "model", problems)
    if problems:
        raise ConfigError(problems)
    return cfg
