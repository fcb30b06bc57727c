import math

import numpy as np
import pytest

from tglearn import tensor as T
from tglearn.corpus import CLS, PAD, SyntheticTgConfig, TokenBatch, build_vocab, generate_synthetic_tg
from tglearn.encoder import (EncoderConfig, EncoderModel, cls_pool, load_encoder, mean_pool,
                             mlm_pretrain_step, pretrain_mlm, save_encoder)
from tglearn.errors import CacheError, ConfigError, DependencyError, LengthError, PoolingError
from tglearn.gradcheck import grad_check
from tglearn.losses import cross_entropy_smoothed
from tglearn.nn import Linear
from tglearn.optim import AdamW
from tglearn.rng import RngState
from tglearn.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(vocab_size=12, d_model=8, num_layers=2, num_heads=2, ffn_dim=16, max_len=6, seed=1)
    base.update(kw)
    return EncoderConfig(**base)


def batch(ids, mask):
    ids, mask = np.asarray(ids), np.asarray(mask)
    return TokenBatch(ids, mask, np.arange(len(ids)))


def random_batch(b=3, L=6, vocab=12, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, vocab, size=(b, L))
    lengths = rng.integers(1, L + 1, size=b)
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(np.int64)
    ids = np.where(mask > 0, ids, PAD)
    ids[:, 0] = CLS
    return batch(ids, mask)


def reference_forward(model, ids, mask):
    """Plain numpy pre-LN transformer with the model's weights."""
    P = {k: v.astype(np.float64) for k, v in model.state_dict().items()}
    cfg = model.cfg

    def ln(x, g, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * g + b

    def lin(x, name):
        return x @ P[f"{name}.weight"].T + P[f"{name}.bias"]

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    b, L = ids.shape
    h, dh = cfg.num_heads, cfg.d_model // cfg.num_heads
    x = P["tok_emb.weight"][ids] + P["pos_emb.weight"][np.arange(L)]
    for i in range(cfg.num_layers):
        pre = f"layers.{i}"
        y = ln(x, P[f"{pre}.ln1.gain"], P[f"{pre}.ln1.bias"])
        q, k, v = (lin(y, f"{pre}.{n}").reshape(b, L, h, dh) for n in "qkv")
        out = np.zeros((b, L, h, dh))
        for bi in range(b):
            for hi in range(h):
                s = q[bi, :, hi] @ k[bi, :, hi].T / math.sqrt(dh)
                s[:, mask[bi] == 0] = -np.inf
                p = np.exp(s - s.max(1, keepdims=True))
                p /= p.sum(1, keepdims=True)
                out[bi, :, hi] = p @ v[bi, :, hi]
        x = x + lin(out.reshape(b, L, -1), f"{pre}.o")
        y = ln(x, P[f"{pre}.ln2.gain"], P[f"{pre}.ln2.bias"])
        x = x + lin(gelu(lin(y, f"{pre}.ff1")), f"{pre}.ff2")
    return ln(x, P["ln_f.gain"], P["ln_f.bias"])


def test_forward_matches_numpy_reference():
    with T.precision("float64"):
        model = EncoderModel(tiny_cfg())
    b = random_batch(seed=3)
    got = model.forward(b).data
    ref = reference_forward(model, b.input_ids, b.attention_mask)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_forward_all_pad_except_cls_is_finite():
    model = EncoderModel(tiny_cfg())
    out = model.forward(batch([[CLS, PAD, PAD]], [[1, 0, 0]])).data
    assert np.isfinite(out).all()


def test_padding_does_not_change_valid_positions():
    model = EncoderModel(tiny_cfg())
    short = model.forward(batch([[CLS, 5, 6]], [[1, 1, 1]])).data
    padded = model.forward(batch([[CLS, 5, 6, 9, 9]], [[1, 1, 1, 0, 0]])).data
    np.testing.assert_allclose(padded[:, :3], short, atol=1e-6)


def test_forward_rejects_long_input():
    model = EncoderModel(tiny_cfg())
    with pytest.raises(LengthError):
        model.forward(batch(np.full((1, 7), 5), np.ones((1, 7), int)))


def test_config_guards():
    with pytest.raises(ConfigError):
        EncoderModel(tiny_cfg(num_heads=3))
    with pytest.raises(ConfigError):
        EncoderModel(tiny_cfg(pooling="max"))


def test_eval_forward_is_pure():
    model = EncoderModel(tiny_cfg())
    b = random_batch(seed=4)
    np.testing.assert_array_equal(model.embed(b).data, model.embed(b).data)


def test_training_forward_needs_rng():
    model = EncoderModel(tiny_cfg())
    with pytest.raises(ValueError):
        model.forward(random_batch(), training=True)


# pooling

def test_mean_pool_constant():
    h = Tensor(np.full((2, 4, 3), 2.5))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]])
    np.testing.assert_allclose(mean_pool(h, mask).data, np.full((2, 3), 2.5))


def test_mean_pool_single_token():
    h = Tensor(np.random.default_rng(0).normal(size=(1, 4, 3)))
    np.testing.assert_allclose(mean_pool(h, np.array([[1, 0, 0, 0]])).data, h.data[:, 0])


def test_mean_pool_empty_row():
    with pytest.raises(PoolingError):
        mean_pool(Tensor(np.ones((1, 2, 3))), np.array([[0, 0]]))


def test_cls_pool():
    h = np.random.default_rng(1).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(cls_pool(Tensor(h)).data, h[:, 0].astype(np.float32))


# gradients

def test_encoder_classifier_gradcheck():
    with T.precision("float64"):
        model = EncoderModel(tiny_cfg(num_layers=1))
        head = Linear(8, 3, RngState(2))
    b = random_batch(b=2, seed=5)
    labels = np.array([0, 2])
    params = [p for _, p in model.named_parameters() if not _.startswith("mlm_head")] + head.parameters()

    def f(*_):
        return cross_entropy_smoothed(head(model.embed(b)), labels, 0.1)

    rep = grad_check(f, params, tolerance=1e-4, max_entries=8, rng=RngState(0))
    assert rep.passed, str(rep)


# masked LM

def tiny_graph():
    return generate_synthetic_tg(SyntheticTgConfig(num_nodes=40, words_per_doc=6, class_vocab_size=5,
                                                   shared_vocab_size=5, seed=1))


def test_mlm_tiny_rate_skips_step():
    g = tiny_graph()
    v = build_vocab(g.texts)
    model = EncoderModel(tiny_cfg(vocab_size=v.size, max_len=8))
    before = model.state_dict()
    ids, mask = g.encoded(v, 8)
    opt = AdamW(model.parameters(), lr=1e-2)
    out = mlm_pretrain_step(model, batch(ids[:2], mask[:2]), 1e-12, RngState(0), opt)
    assert out is None
    for k, val in model.state_dict().items():
        np.testing.assert_array_equal(val, before[k])


def test_mlm_loss_decreases():
    g = tiny_graph()
    v = build_vocab(g.texts)
    model = EncoderModel(tiny_cfg(vocab_size=v.size, max_len=8, d_model=16, ffn_dim=32))
    losses = pretrain_mlm(model, g, v, steps=80, batch_size=16, mask_rate=0.3, learning_rate=3e-3, seed=2)
    assert len(losses) == 80
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_mlm_deterministic():
    g = tiny_graph()
    v = build_vocab(g.texts)
    runs = []
    for _ in range(2):
        model = EncoderModel(tiny_cfg(vocab_size=v.size, max_len=8))
        pretrain_mlm(model, g, v, steps=5, batch_size=8, seed=7)
        runs.append(model.state_dict())
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = EncoderModel(tiny_cfg())
    save_encoder(tmp_path / "m.stgm", model)
    back = load_encoder(tmp_path / "m.stgm")
    for k, val in model.state_dict().items():
        np.testing.assert_array_equal(back.state_dict()[k], val)
    save_encoder(tmp_path / "again.stgm", back)
    assert (tmp_path / "m.stgm").read_bytes() == (tmp_path / "again.stgm").read_bytes()


def test_checkpoint_missing(tmp_path):
    with pytest.raises(DependencyError):
        load_encoder(tmp_path / "none.stgm")


def test_checkpoint_corrupt(tmp_path):
    save_encoder(tmp_path / "m.stgm", EncoderModel(tiny_cfg()))
    raw = bytearray((tmp_path / "m.stgm").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "m.stgm").write_bytes(bytes(raw))
    with pytest.raises(CacheError):
        load_encoder(tmp_path / "m.stgm")
