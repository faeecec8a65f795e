"""Finite-difference suite over every primitive and every loss mode.

Runs on a tiny 64-bit model (``d_model=16``) so the whole suite stays well
under a couple of minutes on one CPU core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderWeights
from .objectives import overall_loss, p_info_loss, s_info_for_batch, task_loss, switches_for
from .prompts import (PromptBank, freeze_task_artifacts, new_head, new_p_prompt, new_s_prompt, new_w1,
                      snapshot_s_prompt)

TINY_ENCODER = EncoderConfig(d_model=16, n_layers=2, n_heads=2, d_ffn=32, vocab_size=50, max_len=24)


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_err: float
    passed: bool
    failures: list[str] = field(default_factory=list)


@dataclass
class SuiteResult:
    cases: list[CaseResult]
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    def lines(self) -> list[str]:
        out = []
        for c in self.cases:
            flag = "ok  " if c.passed else "FAIL"
            out.append(f"{flag} seed={c.seed} {c.name:<28} max_rel_err={c.max_rel_err:.3e}")
            out.extend(f"     {f}" for f in c.failures[:5])
        return out


Case = tuple[str, Callable[[], Tensor], list[Tensor]]


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> list[Case]:
    """Scalar probes ``sum(w * op(x))`` so every output entry gets a distinct weight."""
    cases: list[Case] = []

    def probe(out: Tensor, w: np.ndarray) -> Tensor:
        return (out * Tensor(w)).sum()

    def add_case(name, build, params):
        out_shape = build().shape
        w = rng.normal(size=out_shape)
        cases.append((name, lambda: probe(build(), w), params))

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    add_case("add", lambda: a + b, [a, b])
    row = _param(rng, 4)
    add_case("add[broadcast]", lambda: a + row, [a, row])
    add_case("sub", lambda: a - b, [a, b])
    add_case("mul", lambda: a * b, [a, b])
    add_case("div_scalar", lambda: a / 3.0, [a])
    x = _param(rng, 5, 3, scale=2.0)
    add_case("gelu", lambda: ad.gelu(x), [x])
    add_case("dropout", lambda: ad.dropout(x, 0.3, np.random.default_rng(5)), [x])
    add_case("reshape", lambda: a.reshape(2, 6), [a])
    add_case("transpose", lambda: a.transpose(), [a])
    t3 = _param(rng, 2, 3, 4)
    add_case("transpose[3d]", lambda: t3.transpose(0, 2, 1), [t3])
    add_case("broadcast_to", lambda: ad.broadcast_to(row, (3, 4)), [row])
    add_case("concat", lambda: ad.concat([a, b], axis=0), [a, b])
    add_case("getitem", lambda: a[1:, ::2], [a])
    table = _param(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    add_case("take_rows", lambda: ad.take_rows(table, ids), [table])
    add_case("sum[axis]", lambda: a.sum(axis=0, keepdims=True), [a])
    add_case("mean", lambda: a.mean(axis=1), [a])
    m1, m2 = _param(rng, 3, 4), _param(rng, 4, 2)
    add_case("matmul", lambda: m1 @ m2, [m1, m2])
    add_case("matmul[3d@2d]", lambda: t3 @ m2, [t3, m2])
    t4 = _param(rng, 2, 4, 3)
    add_case("matmul[batched]", lambda: t3 @ t4, [t3, t4])
    s = _param(rng, 2, 3)
    add_case("softmax_rows", lambda: ad.softmax_rows(s), [s])
    sm = _param(rng, 2, 3, 3)
    mask = np.array([[0.0, 0.0, -1e30]])
    add_case("softmax_rows[masked]", lambda: ad.softmax_rows(sm, mask), [sm])
    ln_x, g, bb = _param(rng, 2, 4), _param(rng, 4), _param(rng, 4)
    add_case("layer_norm", lambda: ad.layer_norm(ln_x, g, bb), [ln_x, g, bb])
    v = _param(rng, 3, 5)
    add_case("l2_normalize", lambda: ad.l2_normalize(v), [v])
    add_case("log_softmax_rows", lambda: ad.log_softmax_rows(s), [s])
    logits = _param(rng, 4, 3)
    labels = [0, 2, 1, 2]
    cases.append(("cross_entropy_mean", lambda: ad.cross_entropy_mean(logits, labels), [logits]))
    return cases


def _toy_batch(rng, n=4, vocab=50, max_len=5):
    return [(list(rng.integers(1, vocab, size=int(rng.integers(2, max_len + 1)))), i % 2) for i in range(n)]


def _bank_with_history(weights, cfg: TrainConfig, rng, mode: str) -> tuple[PromptBank, str]:
    """Bank where ``t1`` is completed and ``t2`` is the active task."""
    bank = PromptBank.create(weights.config.d_model)
    for tid in ("t1", "t2"):
        bank.register_task(tid)
        if mode in ("per_task_prompt", "progprompt", "infocomp"):
            new_p_prompt(bank, tid, cfg.p_len, weights, rng)
        if mode in ("shared_prompt", "infocomp") and bank.s_prompt is None:
            new_s_prompt(bank, cfg.s_len, weights, rng)
        new_head(bank, tid, ["a", "b"], rng)
        if mode == "infocomp":
            new_w1(bank, tid, rng)
        # perturb away from the embedding rows so gradients are generic
        for t in bank.named_tensors().values():
            if t.requires_grad and t is not bank.w_q:
                t.data += rng.normal(0.0, 0.1, size=t.shape)
        if tid == "t1":
            freeze_task_artifacts(bank, tid)
            snapshot_s_prompt(bank)
    if bank.w_q is not None:
        bank.w_q.data += rng.normal(0.0, 0.05, size=bank.w_q.shape)
    return bank, "t2"


def loss_cases(seed: int, encoder: EncoderConfig = TINY_ENCODER) -> list[Case]:
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(p_len=4, s_len=2, encoder=encoder, seed=seed)
    cases: list[Case] = []
    batch = _toy_batch(rng, vocab=encoder.vocab_size)

    for mode in ("finetune", "shared_prompt", "per_task_prompt", "progprompt", "infocomp"):
        weights = EncoderWeights.init(encoder, seed=seed)
        bank, tid = _bank_with_history(weights, cfg, rng, mode)
        if mode == "finetune":
            weights.set_trainable(True)
        sw = switches_for(mode, bank, tid, cfg)
        params = [t for t in bank.named_tensors().values() if t.requires_grad]
        params += [t for t in weights.parameters() if t.requires_grad]
        cases.append((f"task_loss[{mode}]",
                      lambda m=mode, b=bank, w=weights, s=sw: task_loss(batch, m, b, w, tid, s), params))

    weights = EncoderWeights.init(encoder, seed=seed)
    bank, tid = _bank_with_history(weights, cfg, rng, "infocomp")
    head, p, w1 = bank.heads[tid], bank.p_prompts[tid], bank.w1[tid]
    for form in ("raw", "cosine"):
        cases.append((f"p_info[{form}]", lambda f=form: p_info_loss(head, p, w1, form=f),
                      [head.weight, head.bias, p, w1]))
    ids = [x for x, _ in batch]
    cases.append(("s_info", lambda: s_info_for_batch(ids, bank, weights),
                  [bank.s_prompt, bank.w_q]))
    live = [t for t in bank.named_tensors().values() if t.requires_grad]
    for form in ("raw", "cosine"):
        c = cfg.replace(p_info_form=form)
        cases.append((f"overall[infocomp,{form}]", lambda c=c: overall_loss(batch, bank, weights, c, tid).tensor,
                      live))
    return cases


def run_gradcheck(seeds=(0, 1, 2), tol: float = 1e-4, h: float = 1e-4, max_entries: int = 24,
                  encoder: EncoderConfig = TINY_ENCODER, oracle_dtype=np.longdouble) -> SuiteResult:
    t0 = time.perf_counter()
    results: list[CaseResult] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, params in primitive_cases(rng) + loss_cases(seed, encoder):
            rep = finite_difference_check(f, params, h=h, tol=tol, max_entries=max_entries,
                                          rng=np.random.default_rng(seed), oracle_dtype=oracle_dtype)
            results.append(CaseResult(name, seed, rep.worst, rep.passed, rep.failures))
    return SuiteResult(results, tol, time.perf_counter() - t0)
