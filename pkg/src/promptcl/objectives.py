"""Task cross-entropy under each input construction plus the two auxiliary losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .encoder import ClassifierHead, EncoderWeights, prefix_from, represent
from .prompts import PromptBank, progprompt_concat

MODES = ("finetune", "shared_prompt", "per_task_prompt", "progprompt", "infocomp")


@dataclass(frozen=True)
class Switches:
    """Which prompt blocks and auxiliary terms are live for the current task."""

    use_p: bool
    use_s: bool
    p_info: bool
    s_info: bool


def switches_for(mode: str, bank: PromptBank, task_id: str, cfg) -> Switches:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "infocomp":
        return Switches(use_p=mode in ("per_task_prompt", "progprompt"),
                        use_s=mode == "shared_prompt", p_info=False, s_info=False)
    use_p = not cfg.no_p_prompt
    use_s = not cfg.no_s_prompt
    s_trainable = bank.s_prompt is not None and bank.s_prompt.requires_grad
    return Switches(
        use_p=use_p,
        use_s=use_s,
        p_info=use_p and not cfg.no_p_info and cfg.lambda1 > 0,
        s_info=(use_s and not cfg.no_s_info and cfg.lambda2 > 0
                and bank.s_snapshot is not None and s_trainable),
    )


def input_prefix(mode: str, bank: PromptBank, task_id: str, sw: Switches) -> Tensor | None:
    if mode == "finetune":
        return None
    if mode == "progprompt":
        return progprompt_concat(bank, task_id)
    p = bank.p_prompts[task_id] if sw.use_p else None
    s = bank.s_prompt if sw.use_s else None
    return prefix_from(p, s)


def logits_for(batch_ids, mode: str, bank: PromptBank, weights: EncoderWeights, task_id: str,
               sw: Switches, rng=None) -> Tensor:
    prefix = input_prefix(mode, bank, task_id, sw)
    enc = represent(batch_ids, weights, prefix, rng)
    head = bank.heads[task_id]
    return enc.pooled @ head.weight.transpose() + head.bias


def task_loss(batch, mode: str, bank: PromptBank, weights: EncoderWeights, task_id: str,
              sw: Switches | None = None, rng=None) -> Tensor:
    """Mean cross-entropy on ``batch`` (list of ``(token_ids, label)``)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if sw is None:
        sw = Switches(use_p=mode in ("per_task_prompt", "progprompt", "infocomp"),
                      use_s=mode in ("shared_prompt", "infocomp"), p_info=False, s_info=False)
    ids = [x for x, _ in batch]
    labels = [y for _, y in batch]
    return ad.cross_entropy_mean(logits_for(ids, mode, bank, weights, task_id, sw, rng), labels)


def p_info_loss(head: ClassifierHead, p_prompt: Tensor, w1: Tensor, form: str = "raw",
                eps: float = 1e-12) -> Tensor:
    """Negative bilinear coupling of flattened head ``h`` and flattened prompt ``p``.

    ``form="raw"`` is ``-h^T W1 p``.  ``form="cosine"`` is
    ``-normalize(h)^T normalize(W1 p)``, bounded in [-1, 1].
    """
    h = head.flat()
    p = p_prompt.reshape(-1)
    if w1.shape != (h.shape[0], p.shape[0]):
        raise DimensionError(f"w1 has shape {w1.shape}, expected {(h.shape[0], p.shape[0])}")
    if form == "raw":
        return -((h.reshape(1, -1) @ w1) @ p.reshape(-1, 1)).reshape(())
    if form == "cosine":
        wp = (w1 @ p.reshape(-1, 1)).reshape(1, -1)
        return -(ad.l2_normalize(h.reshape(1, -1), eps) * ad.l2_normalize(wp, eps)).sum()
    raise ValueError(f"unknown p_info form {form!r}")


def s_info_loss(v: Tensor, v_prev: Tensor, w_q: Tensor, eps: float = 1e-12) -> Tensor:
    """Negative cosine between ``W_q v`` and the stop-gradient target ``v_prev``.

    Accepts single vectors or ``B×d`` batches; the batch mean is returned.
    """
    if v.shape != v_prev.shape or w_q.shape != (v.shape[-1], v.shape[-1]):
        raise DimensionError(f"s_info shapes v={v.shape} v_prev={v_prev.shape} w_q={w_q.shape}")
    target = Tensor(v_prev.data)
    vb = v.reshape(1, -1) if v.ndim == 1 else v
    tb = target.reshape(1, -1) if target.ndim == 1 else target
    q = ad.l2_normalize(vb @ w_q.transpose(), eps)
    u = ad.l2_normalize(tb, eps)
    return -(q * u).sum(axis=-1).mean()


def s_info_for_batch(batch_ids, bank: PromptBank, weights: EncoderWeights, rng=None) -> Tensor:
    v = represent(batch_ids, weights, bank.s_prompt, rng).pooled
    with ad.no_grad():
        v_prev = represent(batch_ids, weights, bank.s_snapshot).pooled
    return s_info_loss(v, v_prev, bank.w_q)


@dataclass
class LossBreakdown:
    task_loss: float
    p_info: float
    s_info: float
    total: float
    lambda1: float
    lambda2: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {"task_loss": self.task_loss, "p_info": self.p_info, "s_info": self.s_info,
                "total": self.total, "lambda1": self.lambda1, "lambda2": self.lambda2}


def overall_loss(batch, bank: PromptBank, weights: EncoderWeights, cfg, task_id: str,
                 mode: str | None = None, rng=None) -> LossBreakdown:
    """Task loss plus weighted auxiliary terms; disabled terms contribute exactly zero."""
    mode = mode or cfg.mode
    sw = switches_for(mode, bank, task_id, cfg)
    ce = task_loss(batch, mode, bank, weights, task_id, sw, rng)
    total = ce
    p_val = s_val = 0.0
    if sw.p_info:
        p_term = p_info_loss(bank.heads[task_id], bank.p_prompts[task_id], bank.w1[task_id],
                             form=cfg.p_info_form)
        p_val = p_term.item()
        total = total + p_term * cfg.lambda1
    if sw.s_info:
        s_term = s_info_for_batch([x for x, _ in batch], bank, weights, rng)
        s_val = s_term.item()
        total = total + s_term * cfg.lambda2
    return LossBreakdown(
        task_loss=ce.item(), p_info=p_val, s_info=s_val, total=total.item(),
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, tensor=total,
    )


def predict(batch_ids, mode: str, bank: PromptBank, weights: EncoderWeights, task_id: str,
            cfg, chunk: int = 64) -> np.ndarray:
    """Argmax class indices, evaluated in fixed-size chunks without recording."""
    sw = switches_for(mode, bank, task_id, cfg)
    out = []
    with ad.no_grad():
        for i in range(0, len(batch_ids), chunk):
            logits = logits_for(batch_ids[i:i + chunk], mode, bank, weights, task_id, sw)
            out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
