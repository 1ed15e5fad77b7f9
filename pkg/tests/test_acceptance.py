"""Acceptance gate: one PASS/FAIL line per criterion.

Run on its own with ``python3 tests/test_acceptance.py`` or as part of
``pytest``. The empirical criteria (6-8) train real models and take several
minutes on one CPU core.
"""

from __future__ import annotations

import dataclasses
import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from scratchpad import tensor as T
from scratchpad.checkpoint import save_checkpoint
from scratchpad.cli import main as cli_main
from scratchpad.config import DecodeConfig, ModelConfig, RunConfig, TaskConfig, TrainingConfig
from scratchpad.data import encode_corpus, make_task
from scratchpad.decoding import beam_decode, greedy_decode, sequence_log_prob
from scratchpad.evaluation import decode_corpus, score
from scratchpad.memory import ScratchpadMemory, write
from scratchpad.metrics import attention_entropy, corpus_bleu, rouge_l
from scratchpad.model import forward_teacher_forced, init_parameters
from scratchpad.training import average_checkpoints, lr_plateau_decay, train

sys.path.insert(0, str(Path(__file__).parent))
from oracles import gradcheck, project, tiny_config  # noqa: E402

SEEDS = (0, 1, 2)


def report(capsys, number: int, ok: bool, what: str, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {what} ({detail})"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _primitive_cases():
    g = np.random.default_rng(0)

    def leaf(*shape, low=None):
        data = g.uniform(0.5, 2.0, shape) if low else g.normal(size=shape)
        return T.tensor(data, requires_grad=True)

    a, b, pos = leaf(2, 3), leaf(2, 3), leaf(2, 3, low=True)
    w, bias, s0 = leaf(3, 4), leaf(4), leaf()
    table, gain = leaf(5, 3), leaf(3)
    mask = np.array([[True, False, True], [True, True, True]])
    return {
        "add": (lambda: project(T.add(a, b)), [a, b]),
        "sub": (lambda: project(T.sub(a, b)), [a, b]),
        "mul": (lambda: project(T.mul(a, b)), [a, b]),
        "scalar_mul": (lambda: project(T.mul(a, s0)), [a, s0]),
        "scale": (lambda: project(T.scale(a, 0.3)), [a]),
        "tanh": (lambda: project(T.tanh(a)), [a]),
        "sigmoid": (lambda: project(T.sigmoid(a)), [a]),
        "exp": (lambda: project(T.exp(a)), [a]),
        "log": (lambda: project(T.log(pos)), [pos]),
        "minimum": (lambda: project(T.minimum(a, b)), [a, b]),
        "matmul": (lambda: project(T.matmul(a, w)), [a, w]),
        "linear": (lambda: project(T.linear(a, w, bias)), [a, w, bias]),
        "softmax": (lambda: project(T.softmax(a, mask)), [a]),
        "log_softmax": (lambda: project(T.log_softmax(a)), [a]),
        "layer_norm": (lambda: project(T.layer_norm(a, gain, gain)), [a, gain]),
        "concat": (lambda: project(T.concat([a, b], axis=-1)), [a, b]),
        "stack": (lambda: project(T.stack([a, b], axis=1)), [a, b]),
        "slice": (lambda: project(T.slice_last(a, 1, 3)), [a]),
        "reshape": (lambda: project(T.reshape(a, (3, 2))), [a]),
        "expand": (lambda: project(T.expand(a, 1, 4)), [a]),
        "sum": (lambda: project(T.tensor_sum(a, axis=0)), [a]),
        "take_rows": (lambda: project(T.take_rows(table, np.array([0, 4, 0]))), [table]),
        "pick": (lambda: project(T.pick(a, np.array([2, 0]))), [a]),
        "embedding": (lambda: project(T.embedding_lookup(table, np.array([[1, 1], [3, 0]]))), [table]),
    }


def test_criterion_01_gradient_fidelity(capsys):
    start = time.perf_counter()
    errors = {name: gradcheck(fn, xs) for name, (fn, xs) in _primitive_cases().items()}
    params = init_parameters(tiny_config(), 0)
    src, tgt = np.array([[4, 5, 6, 7, 3]]), np.array([[5, 6, 2]])
    errors["model_loss"] = gradcheck(
        lambda: forward_teacher_forced(src, tgt, params, label_smoothing=0.1).loss, list(params.values())
    )
    worst = max(errors, key=errors.get)
    elapsed = time.perf_counter() - start
    ok = errors[worst] < 1e-4 and elapsed < 60
    report(capsys, 1, ok, "gradient fidelity",
           f"{len(errors)} checks, max rel err {errors[worst]:.2e} at {worst}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. scratchpad invariants


def test_criterion_02_scratchpad_invariants(capsys):
    g = np.random.default_rng(2024)
    violations = steps = 0
    for m in range(20):
        cfg = tiny_config(emb_dim=8, hidden=8, dec_hidden=16, init_scale=float(g.uniform(0.08, 1.0)))
        p = init_parameters(cfg, m).tensors
        mem = ScratchpadMemory(T.tensor(g.uniform(-1, 1, (2, 6, 16))), np.ones((2, 6), bool))
        for _ in range(50):
            s = T.tensor(np.tanh(g.normal(scale=2.0, size=(2, 16))))
            c = T.tensor(g.uniform(-1, 1, (2, 16)))
            new, rec = write(mem, s, c, p, check_range=False)
            old, upd, out = mem.states.data, rec.update[:, None, :], new.states.data
            bad = (
                np.sum(np.abs(out) > 1)
                + np.sum((rec.gates <= 0) | (rec.gates >= 1))
                + np.sum(np.abs(rec.update) > 1)
                + np.sum((out < np.minimum(old, upd)) | (out > np.maximum(old, upd)))
            )
            violations += int(bad)
            steps += 1
            mem = new
    report(capsys, 2, violations == 0 and steps == 1000, "scratchpad invariants",
           f"{steps} write steps, {violations} violations")


# ---------------------------------------------------------------------------
# 3. baseline reduction


def _toy_run(seed=0, epochs=5, **model) -> RunConfig:
    return RunConfig(
        seed=seed, output_dir="unused",
        task=TaskConfig(kind="reverse", vocab_size=8, min_len=3, max_len=6, n_train=120, n_valid=20, n_test=20),
        model=ModelConfig(emb_dim=8, hidden=8, dec_hidden=16, **model),
        training=TrainingConfig(epochs=epochs, batch_tokens=60, average_last=2),
    )


def test_criterion_03_pinned_gates_equal_vanilla(capsys):
    pinned = train(_toy_run(pin_gates=True))
    vanilla = train(_toy_run(scratchpad=False))
    loss_keys = ("kind", "epoch", "step", "train_loss", "val_loss", "lr", "grad_norm")
    same_log = [{k: r.get(k) for k in loss_keys} for r in pinned.history] == [
        {k: r.get(k) for k in loss_keys} for r in vanilla.history
    ]
    test = make_task(_toy_run().task, 0)["test"]
    out_p = [greedy_decode(s, pinned.final_params, 12).tokens for s, _ in encode_corpus(test, pinned.vocab)]
    out_v = [greedy_decode(s, vanilla.final_params, 12).tokens for s, _ in encode_corpus(test, vanilla.vocab)]
    shared = all(np.array_equal(pinned.final_params[n].data, vanilla.final_params[n].data)
                 for n in vanilla.final_params.names())
    n_steps = sum(r["kind"] == "step" for r in pinned.history)
    report(capsys, 3, same_log and out_p == out_v and shared, "pinned gates reduce to vanilla",
           f"{n_steps} steps, log identical={same_log}, outputs identical={out_p == out_v}, "
           f"shared params identical={shared}")


# ---------------------------------------------------------------------------
# 4. beam oracle


def test_criterion_04_beam_oracle(capsys):
    def toy(seed):
        return init_parameters(tiny_config(src_vocab_size=3, tgt_vocab_size=3, init_scale=1.5,
                                           scratchpad=seed % 2 == 0), seed)

    params = toy(0)
    src = [0, 1, 2, 1]
    got = [tuple(h.tokens) for h in beam_decode(src, params, beam=9, max_len=2, eos_id=None).nbest]
    want = sorted(itertools.product(range(3), repeat=2),
                  key=lambda q: (-sequence_log_prob(src, q, params) / 2, -sequence_log_prob(src, q, params), q))
    agree = 0
    for seed in range(100):
        p = toy(seed)
        s = list(np.random.default_rng(seed).integers(0, 3, size=4))
        agree += beam_decode(s, p, beam=1, max_len=6).tokens == greedy_decode(s, p, max_len=6).tokens
    report(capsys, 4, got == want and agree == 100, "beam oracle",
           f"beam=9 ranking exact={got == want}, beam=1 vs greedy {agree}/100")


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_criterion_05_metric_oracles(capsys):
    hyps = ["the cat sat on the mat".split(), "a b c d e".split()]
    refs = ["the cat is on the mat".split(), "a b c d e f".split()]
    bleu_err = abs(corpus_bleu(hyps, refs) - np.exp(1 - 12 / 11) * (16 / 99) ** 0.25)
    rouge_err = max(abs(rouge_l(hyps[0], refs[0]) - 5 / 6), abs(rouge_l(hyps[1], refs[1]) - 10 / 11))
    ent_err = abs(attention_entropy([0.5, 0.25, 0.25]) - 1.5 * np.log(2))
    ok = bleu_err <= 1e-9 and rouge_err <= 1e-9 and ent_err <= 1e-12
    report(capsys, 5, ok, "metric oracles",
           f"BLEU err {bleu_err:.1e}, ROUGE-L err {rouge_err:.1e}, entropy err {ent_err:.1e}")


# ---------------------------------------------------------------------------
# 6. convergence


def _task_run(kind: str, seed: int = 0, scratchpad: bool = True) -> RunConfig:
    # GRU, 64 units per encoder direction and in the decoder, one layer each
    return RunConfig(seed=seed, output_dir="unused", task=TaskConfig(kind=kind),
                     model=ModelConfig(scratchpad=scratchpad), training=TrainingConfig(epochs=15))


def token_accuracy(params, vocab, corpus) -> float:
    hit = total = 0
    for src, gold in encode_corpus(corpus, vocab):
        out = greedy_decode(src, params, max_len=len(gold) + 5).tokens
        total += len(gold)
        hit += sum(i < len(out) and out[i] == g for i, g in enumerate(gold))
    return hit / total


@pytest.mark.parametrize("kind", ["copy", "reverse"])
def test_criterion_06_convergence(kind, capsys):
    start = time.perf_counter()
    cfg = _task_run(kind)
    res = train(cfg)
    acc = token_accuracy(res.final_params, res.vocab, make_task(cfg.task, cfg.seed)["test"])
    elapsed = time.perf_counter() - start
    report(capsys, 6, acc >= 0.99 and elapsed < 600, f"{kind} task convergence",
           f"token accuracy {acc:.4f} after 15 epochs, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7 and 8. dedup comparisons


@dataclasses.dataclass
class DedupRun:
    seed: int
    scratchpad: bool
    snapshots: list  # (step, val_loss, params)
    final: object
    vocab: object


@pytest.fixture(scope="module")
def dedup_runs():
    runs = {}
    for seed in SEEDS:
        for sp in (True, False):
            snaps = []
            cfg = _task_run("dedup", seed, sp)
            res = train(cfg, eval_every=32,
                        on_eval=lambda step, vl, p, snaps=snaps: snaps.append((step, vl, p.frozen())))
            runs[seed, sp] = DedupRun(seed, sp, snaps, res.final_params, res.vocab)
    test = make_task(_task_run("dedup").task, 0)["test"]
    return runs, test


def _matched(a: DedupRun, b: DedupRun):
    """Snapshots of two runs at (nearly) the same validation loss.

    The target is the lower loss both runs reach; each run contributes the
    snapshot closest to it.
    """
    target = max(min(s[1] for s in a.snapshots), min(s[1] for s in b.snapshots))
    pick = lambda run: min(run.snapshots, key=lambda s: (abs(s[1] - target), s[0]))  # noqa: E731
    return pick(a), pick(b)


def test_criterion_07_entropy_direction(dedup_runs, capsys):
    runs, test = dedup_runs
    wins, details, matched = 0, [], True
    for seed in SEEDS:
        sp, va = _matched(runs[seed, True], runs[seed, False])
        gap = abs(sp[1] - va[1]) / max(sp[1], va[1])
        matched &= gap <= 0.05
        beam = DecodeConfig().beam
        e_sp = score(decode_corpus(sp[2], runs[seed, True].vocab, test, beam), runs[seed, True].vocab)["mean_entropy"]
        e_va = score(decode_corpus(va[2], runs[seed, False].vocab, test, beam), runs[seed, False].vocab)["mean_entropy"]
        wins += e_sp < e_va
        details.append(f"seed {seed}: {e_sp:.3f} vs {e_va:.3f} at val {sp[1]:.3f}/{va[1]:.3f}")
    report(capsys, 7, wins >= 2 and matched, "entropy direction on dedup",
           f"scratchpad lower in {wins}/3; " + "; ".join(details))


def test_criterion_08_repetition_direction(dedup_runs, capsys):
    runs, test = dedup_runs
    rates = {True: [], False: []}
    for seed in SEEDS:
        for sp in (True, False):
            run = runs[seed, sp]
            out = decode_corpus(run.final, run.vocab, test, DecodeConfig().beam)
            rates[sp].append(score(out, run.vocab)["repetition_rate"])
    m_sp, m_va = float(np.mean(rates[True])), float(np.mean(rates[False]))
    per_seed = ", ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(rates[True], rates[False]))
    report(capsys, 8, m_sp <= m_va, "repetition direction on dedup",
           f"mean {m_sp:.4f} vs {m_va:.4f}; per seed {per_seed}")


# ---------------------------------------------------------------------------
# 9. training-procedure contracts


def test_criterion_09_training_contracts(tmp_path, capsys):
    import json

    # a large init makes most raw gradients exceed the clip threshold
    cfg = dataclasses.replace(_toy_run(epochs=3, init_scale=2.0),
                              training=TrainingConfig(epochs=3, batch_tokens=60, lr=0.05))
    train(cfg, run_dir=tmp_path / "run")
    steps = [json.loads(line) for line in (tmp_path / "run/metrics.jsonl").read_text().splitlines()]
    norms = [r["clipped_norm"] for r in steps if r["kind"] == "step"]
    raw = [r["grad_norm"] for r in steps if r["kind"] == "step"]
    clipped = sum(r > 2.0 for r in raw)
    clip_ok = max(norms) <= 2.0 + 1e-9 and clipped > 0

    losses = [3.0, 2.5, 2.6, 2.6, 2.0, 2.4, 1.0]
    lr, decay_ok = 0.002, True
    for k in range(1, len(losses) + 1):
        new = lr_plateau_decay(losses[:k], lr, 0.7)
        expected = lr * 0.7 if k >= 2 and losses[k - 1] >= losses[k - 2] else lr
        decay_ok &= new == expected
        lr = new

    params = init_parameters(tiny_config(), 0)
    paths = [tmp_path / f"same{i}.ckpt" for i in range(5)]
    for p in paths:
        save_checkpoint(params, p)
    avg = average_checkpoints(paths)
    avg_ok = all(np.array_equal(avg[n].data, params[n].data) for n in params.names())
    report(capsys, 9, clip_ok and decay_ok and avg_ok, "training contracts",
           f"max post-clip norm {max(norms):.6f} over {len(norms)} steps ({clipped} clipped), "
           f"decay exact={decay_ok}, averaging identity={avg_ok}")


# ---------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_determinism(tmp_path, capsys):
    def pipeline(name):
        raw = {
            "seed": 7, "output_dir": str(tmp_path / name),
            "task": {"kind": "dedup", "n_train": 200, "n_valid": 40, "n_test": 30},
            "model": {"emb_dim": 16, "hidden": 16, "dec_hidden": 32},
            "training": {"epochs": 3, "average_last": 2},
        }
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(yaml.safe_dump(raw))
        ckpt = str(tmp_path / name / "checkpoints" / "final.ckpt")
        codes = [cli_main(["train", str(cfg)]), cli_main(["evaluate", ckpt]), cli_main(["analyze", ckpt])]
        return codes, tmp_path / name

    codes_a, a = pipeline("a")
    codes_b, b = pipeline("b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "config.resolved.yaml")
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    kinds = {f.suffix for f in files}
    ok = codes_a == codes_b == [0, 0, 0] and not differing and {".ckpt", ".jsonl", ".csv"} <= kinds
    report(capsys, 10, ok, "determinism",
           f"{len(files)} files compared, {len(differing)} differ" + (f": {differing[:3]}" if differing else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
