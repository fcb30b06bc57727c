import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tglearn import tensor as T
from tglearn.corpus import SyntheticTgConfig, build_vocab, generate_synthetic_tg
from tglearn.encoder import EncoderConfig, EncoderModel, load_encoder, save_encoder
from tglearn.errors import ConfigError, StateError
from tglearn.gradcheck import grad_check
from tglearn.lora import LoraConfig, LoraLinear, lora_forward, lora_layers, lora_merge, lora_wrap, merge_lora
from tglearn.nn import Linear, Parameter
from tglearn.rng import RngState
from tglearn.stage1 import ClsHead, Stage1Config, finetune_cls

from test_encoder import random_batch, tiny_cfg


def lora_layer(rank=2, alpha=4.0, seed=0, dropout=0.0):
    with T.precision("float64"):
        base = Linear(5, 3, RngState(seed))
        return LoraLinear(base, rank, alpha, dropout, RngState(seed + 1))


def test_zero_b_is_base_layer():
    layer = lora_layer()
    x = np.random.default_rng(0).normal(size=(4, 5))
    y = lora_forward(layer, T.as_tensor(x)).data
    np.testing.assert_array_equal(y, x @ layer.weight.data.T + layer.bias.data)


def test_hand_example():
    base = Linear(2, 1, RngState(0))
    base.weight.data[:] = 0
    base.bias.data[:] = 0
    layer = LoraLinear(base, 1, 1.0, 0.0, RngState(0))
    layer.lora_A.data[:] = [[1, 0]]
    layer.lora_B.data[:] = [[2]]
    np.testing.assert_allclose(lora_forward(layer, np.array([[3.0, 7.0]], dtype=np.float32)).data, [[6.0]])


def test_merge_zero_b_keeps_weight():
    layer = lora_layer()
    layer.eval()
    np.testing.assert_array_equal(lora_merge(layer).weight.data, layer.weight.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.floats(0.5, 32), st.integers(0, 10**6))
def test_merge_equivalence_property(rank, alpha, seed):
    layer = lora_layer(rank, alpha, seed)
    layer.lora_B.data[:] = np.random.default_rng(seed).normal(size=layer.lora_B.shape)
    layer.eval()
    x = np.random.default_rng(seed + 1).normal(size=(6, 5))
    y = lora_forward(layer, T.as_tensor(x)).data
    merged = lora_merge(layer)
    np.testing.assert_allclose(merged(T.as_tensor(x)).data, y, atol=1e-10)


def test_merge_requires_eval_mode():
    layer = lora_layer()
    layer.train()
    with pytest.raises(StateError):
        lora_merge(layer)


def test_lora_layer_gradcheck():
    layer = lora_layer(rank=2, alpha=8.0)
    layer.lora_B.data[:] = np.random.default_rng(3).normal(size=layer.lora_B.shape)
    x = T.Tensor(np.random.default_rng(4).normal(size=(3, 5)), dtype=np.float64)
    w = np.random.default_rng(5).normal(size=(3, 3))
    rep = grad_check(lambda A, B: T.tsum(layer(x) * w), [layer.lora_A, layer.lora_B], tolerance=1e-6)
    assert rep.passed, str(rep)


def test_wrap_identity_at_init():
    model = EncoderModel(tiny_cfg())
    b = random_batch(seed=1)
    before = model.embed(b).data
    lora_wrap(model, LoraConfig(rank=2, alpha=4, seed=3))
    np.testing.assert_array_equal(model.embed(b).data, before)


def test_wrap_targets_and_freezing():
    model = EncoderModel(tiny_cfg())
    lora_wrap(model, LoraConfig(rank=2, targets=("q", "v")))
    names = [n for n, _ in lora_layers(model)]
    assert names == ["layers.0.q", "layers.0.v", "layers.1.q", "layers.1.v"]
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    assert trainable and all(".lora_" in n for n in trainable)


def test_wrap_twice_rejected():
    model = EncoderModel(tiny_cfg())
    lora_wrap(model, LoraConfig())
    with pytest.raises(ConfigError):
        lora_wrap(model, LoraConfig())


def test_wrap_bad_config():
    with pytest.raises(ConfigError):
        lora_wrap(EncoderModel(tiny_cfg()), LoraConfig(rank=0))
    with pytest.raises(ConfigError):
        lora_wrap(EncoderModel(tiny_cfg()), LoraConfig(targets=("x",)))


def test_merged_model_matches_wrapped():
    model = EncoderModel(tiny_cfg())
    lora_wrap(model, LoraConfig(rank=2, alpha=4))
    for _, layer in lora_layers(model):
        layer.lora_B.data[:] = np.random.default_rng(0).normal(size=layer.lora_B.shape) * 0.1
    model.eval()
    b = random_batch(seed=2)
    merged = merge_lora(model)
    assert merged.lora is None
    np.testing.assert_allclose(merged.embed(b).data, model.embed(b).data, atol=1e-6)


def test_finetune_freezes_base_bitwise():
    g = generate_synthetic_tg(SyntheticTgConfig(num_nodes=60, words_per_doc=6, class_vocab_size=5,
                                                shared_vocab_size=5, seed=1))
    v = build_vocab(g.texts)
    model = EncoderModel(EncoderConfig(vocab_size=v.size, d_model=8, num_layers=1, num_heads=2,
                                       ffn_dim=16, max_len=8))
    base = copy.deepcopy(model.state_dict())
    cfg = Stage1Config(learning_rate=1e-4, lora=LoraConfig(rank=2), epochs=1, batch_size=1)
    finetune_cls(g, model, ClsHead(8, g.num_classes, 0.1, RngState(0)), cfg, v)
    adapters = dict(lora_layers(model))
    assert any(np.abs(layer.lora_B.data).max() > 0 for layer in adapters.values())
    for k, val in model.state_dict().items():
        if ".lora_" not in k:
            np.testing.assert_array_equal(val, base[k], err_msg=k)


def test_wrapped_checkpoint_round_trip(tmp_path):
    model = EncoderModel(tiny_cfg())
    lora_wrap(model, LoraConfig(rank=2, alpha=4))
    for _, layer in lora_layers(model):
        layer.lora_B.data[:] = 0.5
    save_encoder(tmp_path / "w.stgm", model)
    back = load_encoder(tmp_path / "w.stgm")
    assert back.lora == model.lora
    b = random_batch(seed=5)
    model.eval()
    np.testing.assert_array_equal(back.embed(b).data, model.embed(b).data)


def test_trainable_parameter_count():
    cfg = tiny_cfg()
    model = EncoderModel(cfg)
    lora_wrap(model, LoraConfig(rank=3, targets=("q", "v")))
    head = ClsHead(cfg.d_model, 4, 0.1, RngState(0))
    count = sum(p.data.size for p in model.trainable_parameters() + head.trainable_parameters())
    per_target = 3 * (cfg.d_model + cfg.d_model)
    head_params = cfg.d_model * 4 + 4
    assert count == cfg.num_layers * 2 * per_target + head_params
