"""Small pre-norm transformer encoder that reads prompt-prefixed sequences.

Sequence layout: ``[prefix rows ..., CLS, text tokens ...]``.  Position
embeddings are added to every slot after the prefix is prepended, so prompt
rows occupy positions ``0..L_prefix-1`` and the CLS token sits at
``L_prefix``.  The pooled representation is the final hidden row at CLS.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CLS_ID = 0


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 4096
    max_len: int = 128
    ln_eps: float = 1e-5
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")

    def check_prompt_budget(self, prefix_len: int) -> None:
        if self.max_len < prefix_len + 1:
            raise ValueError(f"max_len={self.max_len} cannot hold {prefix_len} prompt rows plus CLS")


@dataclass
class LayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor


@dataclass
class EncoderWeights:
    config: EncoderConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerWeights]
    lnf_g: Tensor
    lnf_b: Tensor

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ffn

        def mat(n_in, n_out):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))

        def vec(n, value=0.0):
            return Tensor(np.full(n, value))

        layers = []
        for _ in range(config.n_layers):
            layers.append(LayerWeights(
                ln1_g=vec(d, 1.0), ln1_b=vec(d),
                wq=mat(d, d), bq=vec(d), wk=mat(d, d), bk=vec(d),
                wv=mat(d, d), bv=vec(d), wo=mat(d, d), bo=vec(d),
                ln2_g=vec(d, 1.0), ln2_b=vec(d),
                w_ff1=mat(d, f), b_ff1=vec(f), w_ff2=mat(f, d), b_ff2=vec(d),
            ))
        weights = cls(
            config=config,
            tok_emb=Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d))),
            pos_emb=Tensor(rng.normal(0.0, 0.1, size=(config.max_len, d))),
            layers=layers,
            lnf_g=vec(d, 1.0),
            lnf_b=vec(d),
        )
        for name, t in weights.named_tensors().items():
            t.name = name
        return weights

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for key, t in vars(layer).items():
                out[f"layers.{i}.{key}"] = t
        out["lnf_g"] = self.lnf_g
        out["lnf_b"] = self.lnf_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.named_tensors().items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data[...] = arrays[k]


@dataclass
class ClassifierHead:
    task_id: str
    weight: Tensor
    bias: Tensor
    labels: list[str] = field(default_factory=list)

    @classmethod
    def init(cls, task_id: str, n_classes: int, d_model: int, rng: np.random.Generator, labels=None):
        w = Tensor(rng.normal(0.0, 0.02, size=(n_classes, d_model)), requires_grad=True,
                   name=f"head.{task_id}.weight")
        b = Tensor(np.zeros(n_classes), requires_grad=True, name=f"head.{task_id}.bias")
        return cls(task_id, w, b, list(labels) if labels is not None else [str(i) for i in range(n_classes)])

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def flat(self) -> Tensor:
        """Head parameters as one vector: weight rows then bias."""
        return ad.concat([self.weight.reshape(-1), self.bias], axis=0)


# -- sequence construction --------------------------------------------------

def prepend_prompts(p: Tensor | None, s: Tensor | None, x: Tensor) -> Tensor:
    """Concatenate ``[p, s, x]`` along the sequence axis (second to last).

    ``x`` may be ``L×d`` or ``B×L×d``; 2-D prompts are broadcast over the batch.
    """
    d = x.shape[-1]
    parts = []
    for name, t in (("p", p), ("s", s)):
        if t is None:
            continue
        if t.ndim != 2 or t.shape[-1] != d:
            raise DimensionError(f"prompt {name} has shape {t.shape}, expected (*, {d})")
        if x.ndim == 3:
            t = ad.broadcast_to(t.reshape(1, *t.shape), (x.shape[0], *t.shape))
        parts.append(t)
    if not parts:
        return x
    return ad.concat(parts + [x], axis=-2)


def prefix_from(*prompts: Tensor | None) -> Tensor | None:
    rows = [t for t in prompts if t is not None]
    if not rows:
        return None
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def fit_text(token_ids, prefix_len: int, config: EncoderConfig) -> tuple[list[int], int]:
    """Truncate text so ``prefix + CLS + text`` fits; returns (ids, n_dropped)."""
    config.check_prompt_budget(prefix_len)
    room = config.max_len - prefix_len - 1
    ids = list(token_ids)
    if len(ids) > room:
        return ids[:room], len(ids) - room
    return ids, 0


def embed_sequence(token_ids, weights: EncoderWeights, prefix: Tensor | None = None) -> Tensor:
    """Token plus position embeddings for ``[prefix, CLS, token_ids]`` (single sequence)."""
    addr, mask, _ = _batch_ids([token_ids], prefix.shape[0] if prefix is not None else 0, weights.config)
    seq = _embed(addr, weights, prefix)
    return seq.reshape(seq.shape[1:])


def _batch_ids(batch, prefix_len: int, config: EncoderConfig):
    fitted, dropped = [], 0
    for ids in batch:
        if any(i < 0 or i >= config.vocab_size for i in ids):
            bad = next(i for i in ids if i < 0 or i >= config.vocab_size)
            raise IndexError(f"token id {bad} out of range for vocab_size={config.vocab_size}")
        ids, n = fit_text(ids, prefix_len, config)
        fitted.append(ids)
        dropped += n
    width = 1 + max((len(x) for x in fitted), default=0)
    arr = np.zeros((len(fitted), width), dtype=np.int64)
    key_mask = np.zeros((len(fitted), prefix_len + width), dtype=bool)
    key_mask[:, :prefix_len] = True
    for b, ids in enumerate(fitted):
        arr[b, 0] = CLS_ID
        arr[b, 1:1 + len(ids)] = ids
        key_mask[b, prefix_len:prefix_len + 1 + len(ids)] = True
    return arr, key_mask, dropped


def _embed(ids: np.ndarray, weights: EncoderWeights, prefix: Tensor | None) -> Tensor:
    x = ad.take_rows(weights.tok_emb, ids)
    seq = prepend_prompts(prefix, None, x)
    length = seq.shape[-2]
    if length > weights.config.max_len:
        raise DimensionError(f"sequence length {length} exceeds max_len={weights.config.max_len}")
    return seq + ad.take_rows(weights.pos_emb, np.arange(length))


# -- encoder ----------------------------------------------------------------

def _attention(h: Tensor, layer: LayerWeights, n_heads: int, mask_add: np.ndarray | None) -> Tensor:
    b, length, d = h.shape
    dh = d // n_heads

    def heads(t):
        return t.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(h @ layer.wq + layer.bq)
    k = heads(h @ layer.wk + layer.bk)
    v = heads(h @ layer.wv + layer.bv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax_rows(scores, mask_add)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return ctx @ layer.wo + layer.bo


def encode(seq: Tensor, weights: EncoderWeights, key_mask: np.ndarray | None = None,
           rng: np.random.Generator | None = None) -> Tensor:
    """Run every block over ``seq`` (``L×d`` or ``B×L×d``); output has the same shape."""
    cfg = weights.config
    single = seq.ndim == 2
    if single:
        seq = seq.reshape(1, *seq.shape)
    if seq.shape[-1] != cfg.d_model:
        raise DimensionError(f"sequence width {seq.shape[-1]} != d_model {cfg.d_model}")
    if seq.shape[1] > cfg.max_len:
        raise DimensionError(f"sequence length {seq.shape[1]} exceeds max_len={cfg.max_len}")
    mask_add = None
    if key_mask is not None and not key_mask.all():
        mask_add = np.where(key_mask, 0.0, -1e30)[:, None, None, :]
    rate = cfg.dropout if rng is not None else 0.0
    h = seq
    for layer in weights.layers:
        a = _attention(ad.layer_norm(h, layer.ln1_g, layer.ln1_b, cfg.ln_eps), layer, cfg.n_heads, mask_add)
        h = h + ad.dropout(a, rate, rng)
        z = ad.layer_norm(h, layer.ln2_g, layer.ln2_b, cfg.ln_eps)
        z = ad.gelu(z @ layer.w_ff1 + layer.b_ff1) @ layer.w_ff2 + layer.b_ff2
        h = h + ad.dropout(z, rate, rng)
    h = ad.layer_norm(h, weights.lnf_g, weights.lnf_b, cfg.ln_eps)
    return h.reshape(h.shape[1:]) if single else h


def pool_representation(hidden: Tensor, cls_index: int) -> Tensor:
    length = hidden.shape[-2]
    if not 0 <= cls_index < length:
        raise IndexError(f"cls_index {cls_index} out of range for sequence length {length}")
    if hidden.ndim == 2:
        return hidden[cls_index]
    return hidden[:, cls_index, :]


def classify(v: Tensor, head: ClassifierHead) -> Tensor:
    """``weight·v + bias``; ``v`` may be ``d`` or ``B×d``."""
    if v.shape[-1] != head.weight.shape[1]:
        raise DimensionError(f"representation width {v.shape[-1]} != head width {head.weight.shape[1]}")
    if v.ndim == 1:
        return (v.reshape(1, -1) @ head.weight.transpose()).reshape(-1) + head.bias
    return v @ head.weight.transpose() + head.bias


@dataclass
class Encoded:
    pooled: Tensor
    prefix_len: int
    truncated: int


def represent(batch, weights: EncoderWeights, prefix: Tensor | None,
              rng: np.random.Generator | None = None) -> Encoded:
    """Pooled CLS representations (``B×d``) for a list of token-id lists."""
    prefix_len = prefix.shape[0] if prefix is not None else 0
    ids, key_mask, dropped = _batch_ids(batch, prefix_len, weights.config)
    seq = _embed(ids, weights, prefix)
    hidden = encode(seq, weights, key_mask, rng)
    return Encoded(pool_representation(hidden, prefix_len), prefix_len, dropped)


# -- checkpoints ------------------------------------------------------------

def save_weights(path, weights: EncoderWeights, extra: dict[str, np.ndarray] | None = None,
                 meta: dict | None = None) -> None:
    """Write an ``.npz`` with ``__config__`` (JSON), ``encoder/<name>`` tensors and any extras."""
    arrays = {f"encoder/{k}": v for k, v in weights.state_arrays().items()}
    arrays.update(extra or {})
    arrays["__config__"] = np.array(json.dumps(asdict(weights.config)))
    if meta is not None:
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> tuple[EncoderWeights, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    config = EncoderConfig(**json.loads(str(arrays.pop("__config__"))))
    weights = EncoderWeights.init(config, seed=0)
    enc = {k[len("encoder/"):]: v for k, v in arrays.items() if k.startswith("encoder/")}
    weights.load_arrays(enc)
    rest = {k: v for k, v in arrays.items() if not k.startswith("encoder/")}
    return weights, rest
