"""Acceptance criteria 1-10, one pass/fail line per criterion.

Criteria 7 and 8 share one set of 5-seed desk runs (module-scoped cache).
"""

import json
import math
import time

import numpy as np
import pytest

from promptcl import autodiff as ad
from promptcl.autodiff import Tensor, backward_all
from promptcl.cli import main
from promptcl.config import TrainConfig
from promptcl.continual import prepare_task, run_sequence
from promptcl.data import make_suite
from promptcl.encoder import ClassifierHead, EncoderConfig, EncoderWeights, represent
from promptcl.experiment import RunCache, ablation_table, forgetting_experiment, format_table
from promptcl.gradcheck import run_gradcheck
from promptcl.metrics import paired_t_test
from promptcl.objectives import input_prefix, p_info_loss, s_info_for_batch, s_info_loss, switches_for
from promptcl.prompts import PromptBank, new_head, new_p_prompt, new_s_prompt, snapshot_s_prompt

SEEDS = (0, 1, 2, 3, 4)
SMALL_ENC = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32, vocab_size=4096, max_len=64)
SMALL = TrainConfig(p_len=4, s_len=2, learning_rate=1e-2, max_epochs=2, patience=2, encoder=SMALL_ENC)


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {label}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


def test_criterion_1_gradcheck(verdict):
    res = run_gradcheck(seeds=(0, 1, 2), tol=1e-4, h=1e-4)
    worst = max(c.max_rel_err for c in res.cases)
    failed = [f"{c.name}@{c.seed}" for c in res.cases if not c.passed]
    ok = res.passed and res.seconds < 120
    verdict("1", ok, f"{len(res.cases)} cases, failures={failed}, max_rel_err={worst:.2e}, {res.seconds:.1f}s < 120s")
    assert ok


def test_criterion_2_stop_gradient(verdict):
    weights = EncoderWeights.init(SMALL_ENC, seed=0)
    rng = np.random.default_rng(0)
    bank = PromptBank.create(16)
    new_s_prompt(bank, 3, weights, rng)
    snapshot_s_prompt(bank)
    bank.s_prompt.data += rng.normal(0, 0.1, size=bank.s_prompt.shape)
    weights.set_trainable(True)
    bank.s_snapshot.requires_grad = True
    ids = [[5, 6, 7], [8, 9]]
    backward_all(s_info_for_batch(ids, bank, weights))
    snap_zero = bank.s_snapshot.grad is None or not np.any(bank.s_snapshot.grad)
    with_branch = {k: None if t.grad is None else t.grad.copy() for k, t in weights.named_tensors().items()}
    for t in weights.parameters():
        t.grad = None
    with ad.no_grad():
        target = represent(ids, weights, bank.s_snapshot).pooled.data
    backward_all(s_info_loss(represent(ids, weights, bank.s_prompt).pooled, Tensor(target), bank.w_q))
    # any gradient the v_prev branch contributed would show up as a difference
    same = all((a is None and t.grad is None) or np.array_equal(a, t.grad)
               for a, t in zip(with_branch.values(), weights.named_tensors().values()))
    ok = snap_zero and same
    verdict("2", ok, f"grad(S')==0: {snap_zero}; backbone grads identical without the v_prev branch: {same}")
    assert ok


def test_criterion_3_freeze_invariants(verdict, tmp_path):
    seq, _ = make_suite("conflict5", seed=0, samples_per_class=40)
    weights = EncoderWeights.init(SMALL_ENC, seed=0)
    backbone0 = {k: v.tobytes() for k, v in weights.state_arrays().items()}
    run_sequence(seq, SMALL, weights=weights, checkpoint_dir=tmp_path)
    with np.load(next(tmp_path.glob("boundary_5_*.npz"))) as f:
        final = {k: f[k] for k in f.files}
    backbone_ok = all(v.tobytes() == backbone0[k] for k, v in weights.state_arrays().items())
    artifacts_ok = True
    for i, t in enumerate(seq.tasks[:-1], start=1):
        with np.load(tmp_path / f"boundary_{i}_{t.task_id}.npz") as f:
            for key in (f"bank/p_prompt.{t.task_id}", f"bank/head.{t.task_id}.weight", f"bank/head.{t.task_id}.bias"):
                artifacts_ok &= f[key].tobytes() == final[key].tobytes()
    ok = backbone_ok and artifacts_ok
    verdict("3", ok, f"backbone byte-identical: {backbone_ok}; completed P-Prompts/heads byte-identical: {artifacts_ok}")
    assert ok


def test_criterion_4_length_law(verdict):
    enc = EncoderConfig(d_model=16, n_layers=1, n_heads=2, d_ffn=32, vocab_size=4096, max_len=200)
    seq, _ = make_suite("disjoint5", seed=0, samples_per_class=20)
    rows = {}
    for mode in ("infocomp", "progprompt"):
        cfg = TrainConfig(mode=mode, encoder=enc)
        bank, weights = PromptBank.create(16), EncoderWeights.init(enc, 0)
        for k, spec in enumerate(seq.tasks, start=1):
            prepare_task(spec, bank, weights, cfg)
            if k in (1, 3, 5):
                sw = switches_for(mode, bank, spec.task_id, cfg)
                rows[(mode, k)] = input_prefix(mode, bank, spec.task_id, sw).shape[0]
    ok = all(rows[("infocomp", k)] == 35 + 5 for k in (1, 3, 5)) and \
        all(rows[("progprompt", k)] == k * 35 for k in (1, 3, 5))
    verdict("4", ok, "prefix rows " + ", ".join(f"{m}@k={k}:{v}" for (m, k), v in sorted(rows.items())))
    assert ok


def test_criterion_5_zero_forgetting(verdict):
    seq, _ = make_suite("conflict5", seed=0)
    details, ok = [], True
    for name, cfg in (("freeze_s_after_first", SMALL.replace(freeze_s_after_first=True)),
                      ("per_task_prompt", SMALL.replace(mode="per_task_prompt"))):
        acc = run_sequence(seq, cfg).acc
        n = len(acc)
        exact = all(acc[k][j] == acc[n - 1][j] for j in range(n) for k in range(j, n))
        ok &= exact
        details.append(f"{name}: bit-exact={exact}")
    verdict("5", ok, "; ".join(details))
    assert ok


def test_criterion_6_loss_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst_p = 0.0
    for _ in range(100):
        c, d, lp = (int(v) for v in rng.integers(1, 7, size=3))
        head = ClassifierHead.init("t", c, d, rng)
        head.weight.data[...] = rng.normal(size=(c, d))
        head.bias.data[...] = rng.normal(size=c)
        p = Tensor(rng.normal(size=(lp, d)))
        w1 = Tensor(rng.normal(size=(c * d + c, lp * d)))
        h, pf = head.flat().data, p.data.reshape(-1)
        brute = -sum(h[i] * w1.data[i, j] * pf[j] for i in range(h.size) for j in range(pf.size))
        worst_p = max(worst_p, abs(p_info_loss(head, p, w1).item() - brute) / abs(brute))
    worst_s = 0.0
    for _ in range(100):
        dm = int(rng.integers(2, 24))
        v, u = rng.normal(size=dm), rng.normal(size=dm)
        cos = v @ u / (np.linalg.norm(v) * np.linalg.norm(u))
        worst_s = max(worst_s, abs(s_info_loss(Tensor(v), Tensor(u), Tensor(np.eye(dm))).item() + cos) / abs(cos))
    ok = worst_p <= 1e-12 and worst_s <= 1e-12
    verdict("6", ok, f"p_info max rel err {worst_p:.2e}; s_info(W_q=I) vs -cos max rel err {worst_s:.2e}")
    assert ok


@pytest.fixture(scope="module")
def desk():
    cache = RunCache()
    t0 = time.perf_counter()
    res = forgetting_experiment(SEEDS, cache)
    return cache, res, time.perf_counter() - t0


def test_criterion_7_forgetting_experiment(verdict, desk):
    _, res, seconds = desk
    s = res.summary()
    a = res.shared_drop >= 0.15
    b = res.infocomp_gain >= 0.10
    c = res.transfer_margin > 0
    t = seconds <= 15 * 60
    verdict("7a", a, f"shared_prompt peak {s['shared_peak']:.3f} final {s['shared_final']:.3f} "
                     f"drop {res.shared_drop:.3f} >= 0.15")
    verdict("7b", b, f"InfoComp {s['infocomp_final']:.3f} - shared_prompt {s['shared_final']:.3f} = "
                     f"{res.infocomp_gain:.3f} >= 0.10")
    verdict("7c", c, f"transfer suite InfoComp {s['transfer_full']:.3f} vs w/o S-Prompt {s['transfer_no_s']:.3f}, "
                     f"margin {res.transfer_margin:+.3f} > 0")
    verdict("7 runtime", t, f"{seconds / 60:.1f} min <= 15 min")
    assert a and b and c and t


def test_criterion_8_ablation(verdict, desk):
    cache, _, _ = desk
    rows = ablation_table(SEEDS, cache, "conflict5")
    names = [r.name for r in rows]
    full = next(r for r in rows if r.name == "full")
    best = max(rows, key=lambda r: r.mean)
    structure = names == ["w/o P-Prompt", "w/o S-Prompt", "w/o both losses", "w/o p_info", "w/o s_info", "full"]
    ok = structure and all(full.mean >= r.mean for r in rows)
    verdict("8", ok, f"full {full.mean:.4f}, best row {best.name} {best.mean:.4f}; rows: "
                     + ", ".join(f"{r.name}={r.mean:.3f}" for r in rows))
    print(format_table(rows))
    assert ok


def test_criterion_9_ttest(verdict):
    res = paired_t_test([1.2, 0.8, 1.0, 1.1, 0.9], [0.0] * 5)
    same = paired_t_test([0.3, 0.4, 0.5], [0.3, 0.4, 0.5])
    const = paired_t_test([1.0] * 4, [0.0] * 4)
    ok = (abs(res.t - 14.1421) <= 1e-3 and res.df == 4 and same.t == 0.0 and not same.significant
          and math.isinf(const.t) and const.significant)
    verdict("9", ok, f"t={res.t:.4f} df={res.df}; zero-variance zero-mean t={same.t}; nonzero-mean t={const.t}")
    assert ok


def test_criterion_10_determinism(verdict, tmp_path):
    paths = []
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"p_len": 4, "s_len": 2, "learning_rate": 0.01, "max_epochs": 2, "warmup_steps": 30,
                               "encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ffn": 32,
                                           "max_len": 64}}))
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--config", str(cfg), "--order", "toy2", "--seed", "3", "--out", str(out)]) == 0
        paths.append(out / "report.json")
    ok = paths[0].read_bytes() == paths[1].read_bytes()
    verdict("10", ok, "two CLI runs with identical config+seed give byte-identical report.json")
    assert ok
