import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptcl import autodiff as ad
from promptcl.autodiff import DimensionError, Tensor, backward_all, finite_difference_check
from promptcl.encoder import (ClassifierHead, EncoderConfig, EncoderWeights, classify, embed_sequence, encode,
                              fit_text, load_weights, pool_representation, prepend_prompts, represent,
                              save_weights)

SMALL = EncoderConfig(d_model=16, n_layers=2, n_heads=2, d_ffn=32, vocab_size=60, max_len=64)


@pytest.fixture
def weights():
    return EncoderWeights.init(SMALL, seed=0)


def test_empty_text_length(weights):
    prefix = Tensor(np.zeros((7, 16)))
    assert embed_sequence([], weights, prefix).shape == (8, 16)


def test_cls_at_position_zero(weights):
    seq = embed_sequence([], weights)
    assert np.array_equal(seq.data[0], weights.tok_emb.data[0] + weights.pos_emb.data[0])


def test_seeds_change_values_not_shapes():
    a, b = EncoderWeights.init(SMALL, seed=1), EncoderWeights.init(SMALL, seed=2)
    ea, eb = embed_sequence([3, 4], a), embed_sequence([3, 4], b)
    assert ea.shape == eb.shape and not np.allclose(ea.data, eb.data)


def test_prepend_lengths():
    x = Tensor(np.zeros((40, 8)))
    out = prepend_prompts(Tensor(np.zeros((35, 8))), Tensor(np.zeros((5, 8))), x)
    assert out.shape == (80, 8)
    assert prepend_prompts(None, None, x) is x


def test_prepend_width_mismatch():
    with pytest.raises(DimensionError):
        prepend_prompts(Tensor(np.zeros((2, 4))), None, Tensor(np.zeros((3, 8))))


def test_truncation_drops_text_only():
    cfg = EncoderConfig(d_model=8, n_heads=2, d_ffn=16, vocab_size=50, max_len=10)
    ids, dropped = fit_text(list(range(1, 20)), prefix_len=4, config=cfg)
    assert len(ids) == 5 and dropped == 14 and ids == [1, 2, 3, 4, 5]
    with pytest.raises(ValueError):
        fit_text([1], prefix_len=10, config=cfg)


def test_represent_reports_truncation():
    cfg = EncoderConfig(d_model=8, n_heads=2, d_ffn=16, vocab_size=50, max_len=10)
    w = EncoderWeights.init(cfg, seed=0)
    enc = represent([list(range(1, 20))], w, Tensor(np.zeros((4, 8))))
    assert enc.truncated == 14 and enc.pooled.shape == (1, 8)


def test_encode_shape_and_padding_invariance(weights):
    # padding a shorter sequence in a batch must not change its representation
    alone = represent([[5, 6]], weights, None).pooled.data
    batched = represent([[5, 6], [1, 2, 3, 4, 5, 6, 7]], weights, None).pooled.data
    assert np.allclose(alone[0], batched[0], atol=1e-12)


def test_encode_rejects_width(weights):
    with pytest.raises(DimensionError):
        encode(Tensor(np.zeros((3, 8))), weights)


def test_prompt_gradient_fd(weights):
    rng = np.random.default_rng(0)
    prompt = Tensor(rng.normal(size=(3, 16)) * 0.5, requires_grad=True)
    w = rng.normal(size=(2, 16))
    rep = finite_difference_check(lambda: (represent([[1, 2], [3]], weights, prompt).pooled * Tensor(w)).sum(),
                                  [prompt], tol=1e-4, oracle_dtype=np.longdouble)
    assert rep.passed, rep.failures


def test_prompt_and_head_get_nonzero_grads(weights):
    rng = np.random.default_rng(0)
    weights.set_trainable(False)
    prompt = Tensor(rng.normal(size=(3, 16)), requires_grad=True)
    head = ClassifierHead.init("t", 2, 16, rng)
    logits = classify(represent([[1, 2]], weights, prompt).pooled, head)
    backward_all(ad.cross_entropy_mean(logits, [1]))
    assert np.any(prompt.grad) and np.any(head.weight.grad) and np.any(head.bias.grad)
    assert all(p.grad is None for p in weights.parameters())


def test_pool_and_classify():
    h = Tensor(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(pool_representation(h, 0).data, [0.0, 1.0])
    with pytest.raises(IndexError):
        pool_representation(h, 3)
    head = ClassifierHead.init("t", 2, 2, np.random.default_rng(0))
    head.weight.data[...] = 0.0
    head.bias.data[...] = 0.0
    assert np.array_equal(classify(Tensor([1.0, 0.0]), head).data, [0.0, 0.0])
    head.weight.data[...] = np.eye(2)
    assert np.array_equal(classify(Tensor([1.0, 0.0]), head).data, [1.0, 0.0])


def test_pool_determinism(weights):
    a = represent([[4, 5, 6]], weights, None).pooled.data
    b = represent([[4, 5, 6]], weights, None).pooled.data
    assert a.tobytes() == b.tobytes()


def test_out_of_range_token(weights):
    with pytest.raises(IndexError):
        represent([[SMALL.vocab_size]], weights, None)


def test_bad_head_count():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=3)


def test_save_load_roundtrip(tmp_path, weights):
    save_weights(tmp_path / "w.npz", weights)
    loaded, _ = load_weights(tmp_path / "w.npz")
    assert loaded.config == weights.config
    for k, v in weights.state_arrays().items():
        assert loaded.state_arrays()[k].tobytes() == v.tobytes()


@given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 10))
def test_infocomp_length_constant_property(lp, ls, lx):
    p = Tensor(np.zeros((lp, 4))) if lp else None
    s = Tensor(np.zeros((ls, 4))) if ls else None
    assert prepend_prompts(p, s, Tensor(np.zeros((lx + 1, 4)))).shape[0] == lp + ls + lx + 1
