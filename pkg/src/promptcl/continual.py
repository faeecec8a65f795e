"""Task-sequential training: per-task optimisation, boundary protocol, warmup."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import TaskSequence, TaskSpec
from .encoder import EncoderWeights, encode, represent, save_weights
from .metrics import forgetting, taskwise_curve
from .objectives import LossBreakdown, overall_loss, predict, switches_for
from .optim import AdamState, adam_step
from .prompts import (PromptBank, freeze_task_artifacts, new_head, new_p_prompt, new_s_prompt,
                      new_w1, snapshot_s_prompt)

REPORT_SCHEMA_VERSION = 1


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator per (seed, tag...) so streams never interfere."""
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        words.extend(tag.encode() if isinstance(tag, str) else [int(tag) & 0xFFFFFFFF])
    return np.random.default_rng(np.random.SeedSequence(words))


class RunLog:
    """JSON-lines event stream; kept in memory and optionally mirrored to a file."""

    def __init__(self, path=None, verbose: bool = False):
        self.events: list[dict] = []
        self.verbose = verbose
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None

    def emit(self, **event) -> None:
        self.events.append(event)
        if self._fh is not None:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class DataAccess:
    """Hands out task splits and records every read for the rehearsal audit."""

    def __init__(self, sequence: TaskSequence):
        self._tasks = {t.task_id: t for t in sequence.tasks}
        self.log: list[tuple[str, str, str, str]] = []  # (phase, active task, read task, split)

    def read(self, phase: str, active: str, task_id: str, split: str):
        self.log.append((phase, active, task_id, split))
        return getattr(self._tasks[task_id], split)

    def training_reads(self, active: str) -> set[str]:
        return {r for phase, a, r, _ in self.log if phase == "train" and a == active}


@dataclass
class TaskResult:
    task_id: str
    best_val_acc: float
    epochs_used: int
    best_epoch: int
    stopped_early: bool
    steps: int
    final_loss: dict
    boundary_events: list[str] = field(default_factory=list)


def trainable_tensors(mode: str, bank: PromptBank, weights: EncoderWeights, task_id: str, cfg) -> list[Tensor]:
    sw = switches_for(mode, bank, task_id, cfg)
    out: list[Tensor] = []
    if mode == "finetune":
        out.extend(weights.parameters())
    if sw.use_p:
        out.append(bank.p_prompts[task_id])
    if sw.use_s and bank.s_prompt is not None and bank.s_prompt.requires_grad:
        out.append(bank.s_prompt)
    out.extend(bank.heads[task_id].parameters())
    if sw.p_info:
        out.append(bank.w1[task_id])
    if sw.s_info:
        out.append(bank.w_q)
    return [t for t in out if t.requires_grad]


def accuracy(batch, mode, bank, weights, task_id, cfg) -> float:
    if not batch:
        return float("nan")
    preds = predict([x for x, _ in batch], mode, bank, weights, task_id, cfg)
    labels = np.array([y for _, y in batch])
    return float((preds == labels).mean())


def prepare_task(spec: TaskSpec, bank: PromptBank, weights: EncoderWeights, cfg: TrainConfig) -> None:
    mode = cfg.mode
    bank.register_task(spec.task_id)
    seed = cfg.seed
    if mode in ("per_task_prompt", "progprompt") or (mode == "infocomp" and not cfg.no_p_prompt):
        new_p_prompt(bank, spec.task_id, cfg.p_len, weights, derive_rng(seed, "p_prompt", spec.task_id))
    if (mode == "shared_prompt" or (mode == "infocomp" and not cfg.no_s_prompt)) and bank.s_prompt is None:
        new_s_prompt(bank, cfg.s_len, weights, derive_rng(seed, "s_prompt"))
    new_head(bank, spec.task_id, spec.labels, derive_rng(seed, "head", spec.task_id))
    sw = switches_for(mode, bank, spec.task_id, cfg)
    if sw.p_info:
        new_w1(bank, spec.task_id, derive_rng(seed, "w1", spec.task_id))
    weights.config.check_prompt_budget(bank.prompt_rows(mode, spec.task_id))
    if mode == "finetune":
        weights.set_trainable(True)


def run_task(spec: TaskSpec, bank: PromptBank, weights: EncoderWeights, cfg: TrainConfig,
             access: DataAccess | None = None, log: RunLog | None = None,
             adam: AdamState | None = None) -> TaskResult:
    """Train one task, restore its best-validation parameters, then freeze and snapshot."""
    log = log or RunLog()
    access = access or DataAccess(TaskSequence("single", [spec]))
    mode, tid = cfg.mode, spec.task_id
    if tid not in bank.order:
        prepare_task(spec, bank, weights, cfg)
    train = access.read("train", tid, tid, "train")
    if not train:
        raise ValueError(f"task {tid} has an empty training split")
    val = access.read("train", tid, tid, "val")
    room = weights.config.max_len - bank.prompt_rows(mode, tid) - 1
    dropped = sum(max(0, len(x) - room) for x, _ in train)
    if dropped:
        log.emit(task=tid, split="train", metric="truncated_text_tokens", value=dropped)

    adam = adam if adam is not None else AdamState()
    params = trainable_tensors(mode, bank, weights, tid, cfg)
    shuffle_rng = derive_rng(cfg.seed, "shuffle", tid)
    drop_rng = derive_rng(cfg.seed, "dropout", tid) if weights.config.dropout > 0 else None

    best_acc, best_epoch, bad = -1.0, 0, 0
    best_state = [p.data.copy() for p in params]
    steps, epoch, stopped_early = 0, 0, False
    last: LossBreakdown | None = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            ad.current_graph().clear()
            last = overall_loss(batch, bank, weights, cfg, tid, rng=drop_rng)
            if not np.isfinite(last.total):
                raise DivergenceError(f"task {tid} epoch {epoch} step {steps}: non-finite loss {last.as_dict()}")
            ad.backward_all(last.tensor)
            adam_step(adam, params, cfg.learning_rate)
            steps += 1
            if log.verbose:
                log.emit(task=tid, epoch=epoch, split="train", step=steps, metric="loss", **last.as_dict())
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        acc = accuracy(val, mode, bank, weights, tid, cfg) if val else -float(last.total)
        log.emit(task=tid, epoch=epoch, split="val", metric="accuracy" if val else "neg_loss",
                 value=acc, **last.as_dict())
        if acc > best_acc:
            best_acc, best_epoch, bad = acc, epoch, 0
            best_state = [p.data.copy() for p in params]
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped_early = True
                break

    events = []
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    events.append("restore_best")
    freeze_task_artifacts(bank, tid)
    if mode == "finetune":
        weights.set_trainable(False)
    events.append("freeze")
    if bank.s_prompt is not None:
        snapshot_s_prompt(bank)
        if cfg.freeze_s_after_first:
            bank.s_prompt.requires_grad = False
            bank.s_prompt.grad = None
        events.append("snapshot_s")
    log.emit(task=tid, epoch=epoch, split="boundary", metric="best_val", value=best_acc, events=events)
    return TaskResult(tid, best_acc, epoch, best_epoch, stopped_early, steps,
                      last.as_dict() if last else {}, events)


@dataclass
class RunReport:
    schema_version: int
    config_hash: str
    seed: int
    order_id: str
    mode: str
    variant: str
    task_ids: list[str]
    acc: list[list[float]]
    final_average: float
    taskwise: list[float]
    forgetting: list[float]
    best_val: list[float]
    epochs: list[int]
    config: dict
    wall_clock: list[float] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "wall_clock"}
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        version = d.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"report schema version {version!r} != supported {REPORT_SCHEMA_VERSION}")
        fields = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**fields)


def variant_name(cfg: TrainConfig) -> str:
    flags = [n for n in ("no_p_prompt", "no_s_prompt", "no_p_info", "no_s_info", "freeze_s_after_first")
             if getattr(cfg, n)]
    return cfg.mode + ("+" + "+".join(flags) if flags else "")


def run_sequence(sequence: TaskSequence, cfg: TrainConfig, weights: EncoderWeights | None = None,
                 log: RunLog | None = None, checkpoint_dir=None,
                 access: DataAccess | None = None) -> RunReport:
    """Train every task in order and evaluate all seen tasks after each boundary."""
    if not sequence.tasks:
        raise ValueError("empty task sequence")
    log = log or RunLog()
    weights = weights if weights is not None else EncoderWeights.init(cfg.encoder, seed=cfg.seed)
    weights.set_trainable(False)
    bank = PromptBank.create(weights.config.d_model)
    access = access or DataAccess(sequence)
    adam = AdamState()
    acc: list[list[float]] = []
    results, clocks = [], []
    for k, spec in enumerate(sequence.tasks):
        t0 = time.perf_counter()
        res = run_task(spec, bank, weights, cfg, access, log, adam)
        row = []
        for seen in sequence.tasks[:k + 1]:
            test = access.read("eval", spec.task_id, seen.task_id, "test")
            row.append(accuracy(test, cfg.mode, bank, weights, seen.task_id, cfg))
        acc.append(row)
        clocks.append(time.perf_counter() - t0)
        results.append(res)
        log.emit(task=spec.task_id, split="test", metric="accuracy_row", value=row)
        if checkpoint_dir is not None:
            save_run_checkpoint(Path(checkpoint_dir) / f"boundary_{k + 1}_{spec.task_id}.npz",
                                weights, bank, adam, cfg)
    report = RunReport(
        schema_version=REPORT_SCHEMA_VERSION,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        order_id=sequence.order_id,
        mode=cfg.mode,
        variant=variant_name(cfg),
        task_ids=[t.task_id for t in sequence.tasks],
        acc=acc,
        final_average=float(np.mean(acc[-1])),
        taskwise=[v for _, v in taskwise_curve(acc)],
        forgetting=forgetting(acc),
        best_val=[r.best_val_acc for r in results],
        epochs=[r.epochs_used for r in results],
        config=cfg.to_dict(),
        wall_clock=clocks,
    )
    return report


def save_run_checkpoint(path, weights: EncoderWeights, bank: PromptBank, adam: AdamState, cfg: TrainConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = {f"bank/{k}": v for k, v in bank.state_arrays().items()}
    names = {id(t): k for k, t in {**weights.named_tensors(), **bank.named_tensors()}.items()}
    extra.update(adam.moment_arrays(names))
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "adam_step": adam.step_count,
            "order": bank.order, "completed": bank.completed,
            "labels": {tid: h.labels for tid, h in bank.heads.items()}}
    save_weights(path, weights, extra, meta)


# -- warmup -----------------------------------------------------------------

def mlm_loss(batch_ids, weights: EncoderWeights, rng: np.random.Generator, mask_rate: float = 0.15):
    """Masked-token loss with tied, ``1/sqrt(d)``-scaled output embeddings (masked inputs are zeroed)."""
    cfg = weights.config
    width = max(len(x) for x in batch_ids)
    ids = np.zeros((len(batch_ids), width), dtype=np.int64)
    valid = np.zeros((len(batch_ids), width), dtype=bool)
    for b, x in enumerate(batch_ids):
        ids[b, :len(x)] = x
        valid[b, :len(x)] = True
    masked = (rng.random(ids.shape) < mask_rate) & valid
    if not masked.any():
        rows, cols = np.nonzero(valid)
        pick = rng.integers(len(rows))
        masked[rows[pick], cols[pick]] = True
    keep = Tensor((~masked)[..., None].astype(float))
    x = ad.take_rows(weights.tok_emb, ids) * keep
    seq = x + ad.take_rows(weights.pos_emb, np.arange(width))
    hidden = encode(seq, weights, valid)
    flat = hidden.reshape(-1, cfg.d_model)
    sel = np.flatnonzero(masked.reshape(-1))
    logits = (flat[sel] @ weights.tok_emb.transpose()) * (1.0 / np.sqrt(cfg.d_model))
    return ad.cross_entropy_mean(logits, ids.reshape(-1)[sel])


def warmup_pretrain(weights: EncoderWeights, corpus: list[list[int]], steps: int, cfg: TrainConfig,
                    log: RunLog | None = None, heldout: list[list[int]] | None = None) -> dict:
    """Masked-token pretraining of the backbone, frozen afterwards."""
    if not corpus:
        raise ValueError("warmup corpus is empty")
    history = {"heldout_before": None, "heldout_after": None}
    eval_rng_seed = cfg.seed + 1
    if heldout:
        with ad.no_grad():
            history["heldout_before"] = mlm_loss(heldout, weights, np.random.default_rng(eval_rng_seed)).item()
    if steps > 0:
        weights.set_trainable(True)
        params = weights.parameters()
        adam = AdamState()
        rng = derive_rng(cfg.seed, "warmup")
        for step in range(steps):
            idx = rng.integers(0, len(corpus), size=cfg.warmup_batch)
            batch = [corpus[i][: weights.config.max_len] for i in idx]
            ad.current_graph().clear()
            loss = mlm_loss(batch, weights, rng)
            ad.backward_all(loss)
            adam_step(adam, params, cfg.warmup_lr)
            if log is not None and (step + 1) % 100 == 0:
                log.emit(split="warmup", step=step + 1, metric="mlm_loss", value=loss.item())
    weights.set_trainable(False)
    if heldout:
        with ad.no_grad():
            history["heldout_after"] = mlm_loss(heldout, weights, np.random.default_rng(eval_rng_seed)).item()
    return history


def pooled(batch_ids, weights, prefix=None):
    with ad.no_grad():
        return represent(batch_ids, weights, prefix).pooled.data
