"""Desk-scale experiment recipes shared by the CLI, the scripts and the acceptance tests.

One warmup-pretrained backbone per seed serves every run of that seed; each
run gets a deep copy so the frozen backbone is never shared mutably.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TrainConfig
from .continual import RunReport, run_sequence, warmup_pretrain
from .data import make_suite, warmup_corpus
from .encoder import EncoderConfig, EncoderWeights
from .metrics import paired_t_test

DESK_ENCODER = EncoderConfig(d_model=32, n_layers=2, n_heads=2, d_ffn=64, vocab_size=4096, max_len=96)

# Prompt lengths, lambdas and batch size keep their defaults; the optimiser
# budget is scaled for a 32-wide backbone trained from scratch.
DESK = TrainConfig(
    learning_rate=1e-2,
    max_epochs=15,
    patience=5,
    warmup_steps=1500,
    warmup_lr=3e-3,
    warmup_batch=32,
    warmup_docs=4000,
    encoder=DESK_ENCODER,
)

# The warmup corpus covers the word inventories of both desk suites.
WARMUP_SUITES = ("conflict5", "transfer5")
WARMUP_TEXT_LEN = 16

# Forward transfer shows up as faster learning, so the transfer comparison is
# made in the single-pass regime.
TRANSFER_BUDGET = {"max_epochs": 1}

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("w/o P-Prompt", {"no_p_prompt": True}),
    ("w/o S-Prompt", {"no_s_prompt": True}),
    ("w/o both losses", {"no_p_info": True, "no_s_info": True}),
    ("w/o p_info", {"no_p_info": True}),
    ("w/o s_info", {"no_s_info": True}),
    ("full", {}),
]
FREEZE_S_ROW = ("S frozen after task 1", {"freeze_s_after_first": True})


def desk_corpus(seed: int, n_docs: int, vocab_size: int, suites=WARMUP_SUITES) -> list[list[int]]:
    """Equal shares of topical documents from each suite's layout."""
    share = n_docs // len(suites)
    docs: list[list[int]] = []
    for i, name in enumerate(suites):
        _, layout = make_suite(name, seed=seed, vocab_size=vocab_size)
        docs += warmup_corpus(layout, share, seed + i, vocab_size, WARMUP_TEXT_LEN)
    return docs


def pretrained_backbone(cfg: TrainConfig, seed: int, suites=WARMUP_SUITES, log=None) -> tuple[EncoderWeights, dict]:
    weights = EncoderWeights.init(cfg.encoder, seed)
    if cfg.warmup_steps <= 0:
        return weights, {"heldout_before": None, "heldout_after": None}
    corpus = desk_corpus(seed, cfg.warmup_docs, cfg.encoder.vocab_size, suites)
    history = warmup_pretrain(weights, corpus, cfg.warmup_steps, cfg.replace(seed=seed), log)
    return weights, history


def _key(suite: str, seed: int, flags: dict) -> tuple:
    return suite, seed, tuple(sorted(flags.items()))


@dataclass
class RunCache:
    """Backbones and finished runs keyed by (suite, seed, config changes)."""

    base: TrainConfig = field(default_factory=lambda: DESK)
    backbones: dict[int, EncoderWeights] = field(default_factory=dict)
    runs: dict[tuple, RunReport] = field(default_factory=dict)
    progress: object = None

    def backbone(self, seed: int) -> EncoderWeights:
        if seed not in self.backbones:
            self.backbones[seed], _ = pretrained_backbone(self.base, seed)
        return self.backbones[seed]

    def run(self, suite: str, seed: int, **changes) -> RunReport:
        key = _key(suite, seed, changes)
        if key not in self.runs:
            cfg = self.base.replace(seed=seed, **changes)
            seq, _ = make_suite(suite, seed=seed, vocab_size=cfg.encoder.vocab_size)
            rep = run_sequence(seq, cfg, weights=copy.deepcopy(self.backbone(seed)))
            self.runs[key] = rep
            if self.progress is not None:
                self.progress(f"seed={seed} {suite} {rep.variant} final={rep.final_average:.3f}")
        return self.runs[key]


@dataclass
class ForgettingResult:
    seeds: list[int]
    shared_final: list[float]
    shared_peak: list[float]
    infocomp_final: list[float]
    transfer_full: list[float]
    transfer_no_s: list[float]

    @staticmethod
    def _mean(v) -> float:
        return float(np.mean(v))

    @property
    def shared_drop(self) -> float:
        return self._mean(self.shared_peak) - self._mean(self.shared_final)

    @property
    def infocomp_gain(self) -> float:
        return self._mean(self.infocomp_final) - self._mean(self.shared_final)

    @property
    def transfer_margin(self) -> float:
        return self._mean(self.transfer_full) - self._mean(self.transfer_no_s)

    def summary(self) -> dict:
        out = {
            "seeds": self.seeds,
            "shared_final": self._mean(self.shared_final),
            "shared_peak": self._mean(self.shared_peak),
            "shared_drop": self.shared_drop,
            "infocomp_final": self._mean(self.infocomp_final),
            "infocomp_gain": self.infocomp_gain,
            "transfer_full": self._mean(self.transfer_full),
            "transfer_no_s": self._mean(self.transfer_no_s),
            "transfer_margin": self.transfer_margin,
        }
        if len(self.seeds) >= 2:
            out["transfer_ttest"] = asdict(paired_t_test(self.transfer_full, self.transfer_no_s))
        return out


def forgetting_experiment(seeds, cache: RunCache | None = None) -> ForgettingResult:
    """shared_prompt vs InfoComp on conflict5, InfoComp vs w/o S-Prompt on transfer5."""
    cache = cache or RunCache()
    out = ForgettingResult(list(seeds), [], [], [], [], [])
    for seed in seeds:
        shared = cache.run("conflict5", seed, mode="shared_prompt")
        out.shared_final.append(shared.final_average)
        out.shared_peak.append(max(shared.taskwise))
        out.infocomp_final.append(cache.run("conflict5", seed, mode="infocomp").final_average)
        out.transfer_full.append(cache.run("transfer5", seed, mode="infocomp", **TRANSFER_BUDGET).final_average)
        out.transfer_no_s.append(cache.run("transfer5", seed, mode="infocomp", no_s_prompt=True,
                                           **TRANSFER_BUDGET).final_average)
    return out


@dataclass
class AblationRow:
    name: str
    flags: dict
    finals: list[float]
    reports: list[RunReport] = field(repr=False, default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))


def ablation_table(seeds, cache: RunCache | None = None, suite: str = "conflict5",
                   include_freeze_s: bool = False) -> list[AblationRow]:
    cache = cache or RunCache()
    rows = ABLATION_ROWS + ([FREEZE_S_ROW] if include_freeze_s else [])
    table = []
    for name, flags in rows:
        reps = [cache.run(suite, seed, mode="infocomp", **flags) for seed in seeds]
        table.append(AblationRow(name, flags, [r.final_average for r in reps], reps))
    return table


def format_table(rows: list[AblationRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'variant':<{width}}  mean    per-seed"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.mean:.4f}  " + " ".join(f"{v:.3f}" for v in r.finals))
    return "\n".join(lines)
