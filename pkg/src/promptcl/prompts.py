"""Per-task private prompts, the shared prompt and its boundary snapshot."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ClassifierHead, EncoderWeights


@dataclass
class PromptBank:
    d_model: int
    p_prompts: dict[str, Tensor] = field(default_factory=dict)
    s_prompt: Tensor | None = None
    s_snapshot: Tensor | None = None
    heads: dict[str, ClassifierHead] = field(default_factory=dict)
    w1: dict[str, Tensor] = field(default_factory=dict)
    w_q: Tensor | None = None
    order: list[str] = field(default_factory=list)
    completed: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, d_model: int) -> "PromptBank":
        w_q = Tensor(np.eye(d_model), requires_grad=True, name="w_q")
        return cls(d_model=d_model, w_q=w_q)

    def register_task(self, task_id: str) -> None:
        if task_id in self.order:
            raise ValueError(f"task {task_id!r} already registered")
        self.order.append(task_id)

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for tid, p in self.p_prompts.items():
            out[f"p_prompt.{tid}"] = p
        if self.s_prompt is not None:
            out["s_prompt"] = self.s_prompt
        if self.s_snapshot is not None:
            out["s_snapshot"] = self.s_snapshot
        for tid, head in self.heads.items():
            out[f"head.{tid}.weight"] = head.weight
            out[f"head.{tid}.bias"] = head.bias
        for tid, w in self.w1.items():
            out[f"w1.{tid}"] = w
        if self.w_q is not None:
            out["w_q"] = self.w_q
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def prompt_rows(self, mode: str, task_id: str) -> int:
        """Number of prompt rows prepended for ``task_id`` under ``mode``."""
        n = 0
        if mode in ("per_task_prompt", "infocomp") and task_id in self.p_prompts:
            n += self.p_prompts[task_id].shape[0]
        if mode in ("shared_prompt", "infocomp") and self.s_prompt is not None:
            n += self.s_prompt.shape[0]
        if mode == "progprompt":
            k = self.order.index(task_id)
            n += sum(self.p_prompts[t].shape[0] for t in self.order[:k + 1])
        return n


def sample_embedding_rows(weights: EncoderWeights, length: int, rng: np.random.Generator) -> np.ndarray:
    """Copies of ``length`` token-embedding rows drawn uniformly (CLS excluded)."""
    vocab = weights.tok_emb.shape[0]
    ids = rng.integers(1, vocab, size=length)
    return weights.tok_emb.data[ids].copy()


def new_p_prompt(bank: PromptBank, task_id: str, length: int, weights: EncoderWeights,
                 rng: np.random.Generator) -> Tensor:
    if task_id in bank.p_prompts:
        raise ValueError(f"task {task_id!r} already has a P-Prompt")
    p = Tensor(sample_embedding_rows(weights, length, rng), requires_grad=True, name=f"p_prompt.{task_id}")
    bank.p_prompts[task_id] = p
    return p


def new_s_prompt(bank: PromptBank, length: int, weights: EncoderWeights, rng: np.random.Generator) -> Tensor:
    if bank.s_prompt is not None:
        raise ValueError("the S-Prompt already exists")
    bank.s_prompt = Tensor(sample_embedding_rows(weights, length, rng), requires_grad=True, name="s_prompt")
    return bank.s_prompt


def new_head(bank: PromptBank, task_id: str, labels, rng: np.random.Generator) -> ClassifierHead:
    if task_id in bank.heads:
        raise ValueError(f"task {task_id!r} already has a head")
    head = ClassifierHead.init(task_id, len(labels), bank.d_model, rng, labels)
    bank.heads[task_id] = head
    return head


def new_w1(bank: PromptBank, task_id: str, rng: np.random.Generator) -> Tensor:
    """Per-task bilinear coupling between flattened head and flattened P-Prompt."""
    head, p = bank.heads[task_id], bank.p_prompts[task_id]
    d_h = head.weight.size + head.bias.size
    d_p = p.size
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_h * d_p), size=(d_h, d_p)), requires_grad=True,
               name=f"w1.{task_id}")
    bank.w1[task_id] = w
    return w


def snapshot_s_prompt(bank: PromptBank) -> None:
    if bank.s_prompt is None:
        return
    bank.s_snapshot = Tensor(bank.s_prompt.data.copy(), requires_grad=False, name="s_snapshot")


def freeze_task_artifacts(bank: PromptBank, task_id: str) -> None:
    if task_id not in bank.order:
        raise KeyError(f"unknown task {task_id!r}")
    tensors = []
    if task_id in bank.p_prompts:
        tensors.append(bank.p_prompts[task_id])
    if task_id in bank.heads:
        tensors.extend(bank.heads[task_id].parameters())
    if task_id in bank.w1:
        tensors.append(bank.w1[task_id])
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    if task_id not in bank.completed:
        bank.completed.append(task_id)


def progprompt_concat(bank: PromptBank, task_id: str) -> Tensor:
    """``[P_k, ..., P_1]`` for the task at position k of the registration order."""
    if task_id not in bank.order:
        raise KeyError(f"unknown task {task_id!r}")
    k = bank.order.index(task_id)
    chain = bank.order[k::-1]
    missing = [t for t in chain if t not in bank.p_prompts]
    if missing:
        raise KeyError(f"missing P-Prompt for earlier task(s) {missing}")
    return ad.concat([bank.p_prompts[t] for t in chain], axis=0)
