"""
嵌入網絡測試: 初始化、前向、BatchNorm、檢查點
"""

from dataclasses import replace

import numpy as np
import pytest

from reid_forge.common.errors import ConfigError, DatasetError, ShapeError
from reid_forge.config.config_manager import LossWeights, ModelConfig
from reid_forge.core import numerics as nx
from reid_forge.core.embedding_model import (
    BN_MOMENTUM,
    embed_dataset,
    forward,
    history_path,
    init,
    load_checkpoint,
    load_history,
    save_checkpoint,
)
from reid_forge.core.loss_library import combined_loss
from reid_forge.core.numerics import Tensor2, grad_check

SMALL = ModelConfig(input_dim=5, hidden_dims=(6,), embedding_dim=4, n_classes=3, init_seed=1)


def _features(n=7, dim=5, seed=0):
    return np.random.default_rng(seed).normal(size=(n, dim))


def test_init_is_deterministic():
    a, b = init(SMALL), init(SMALL)
    for name, value in a.state().items():
        np.testing.assert_array_equal(value, b.state()[name])


def test_init_seed_changes_weights():
    a = init(SMALL)
    b = init(replace(SMALL, init_seed=2))
    assert not np.array_equal(a.params['layer0.weight'].values, b.params['layer0.weight'].values)


def test_uniform_init_bound_and_zero_bias():
    net = init(SMALL)
    weight = net.params['layer0.weight'].values
    assert weight.shape == (5, 6)
    assert np.all(np.abs(weight) <= np.sqrt(6.0 / 5))
    np.testing.assert_array_equal(net.params['embed.bias'].values, 0.0)


def test_identity_init():
    net = init(ModelConfig(input_dim=3, hidden_dims=(4,), embedding_dim=2, init_scheme='identity'))
    np.testing.assert_array_equal(net.params['layer0.weight'].values, np.eye(3, 4))
    np.testing.assert_array_equal(net.params['embed.weight'].values, np.eye(4, 2))


def test_invalid_model_config():
    with pytest.raises(ConfigError):
        init(ModelConfig(n_classes=1))


def test_forward_shapes():
    net = init(SMALL)
    emb, logits = forward(net, _features())
    assert emb.shape == (7, 4)
    assert logits.shape == (7, 3)


def test_forward_without_hidden_layers_or_batchnorm():
    net = init(ModelConfig(input_dim=5, hidden_dims=(), embedding_dim=3, batchnorm=False))
    assert 'bn.gamma' not in net.params
    assert net.buffers == {}
    emb, _ = net.forward(_features())
    expected = _features() @ net.params['embed.weight'].values
    np.testing.assert_allclose(emb.values, expected)


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        init(SMALL).forward(_features(dim=4))


def test_forward_rejects_unknown_mode():
    with pytest.raises(ValueError):
        init(SMALL).forward(_features(), mode="predict")


def test_batchnorm_train_mode_updates_running_stats():
    """運行均值按動量更新，方差使用無偏估計"""
    net = init(SMALL)
    emb, _ = net.forward(_features(), mode="train")
    np.testing.assert_allclose(emb.values.mean(axis=0), 0.0, atol=1e-9)

    mean, var = net.last_batch_mean, net.last_batch_var
    np.testing.assert_allclose(net.buffers['running_mean'], BN_MOMENTUM * mean)
    np.testing.assert_allclose(net.buffers['running_var'],
                               (1 - BN_MOMENTUM) * 1.0 + BN_MOMENTUM * var * 7 / 6)


def test_eval_mode_leaves_running_stats():
    net = init(SMALL)
    before = {k: v.copy() for k, v in net.buffers.items()}
    net.forward(_features(), mode="eval")
    for name, value in before.items():
        np.testing.assert_array_equal(net.buffers[name], value)


def test_eval_embedding_is_row_independent():
    """評估模式下每行的嵌入與批次中其他行無關"""
    net = init(SMALL)
    net.forward(_features(seed=3), mode="train")
    x = _features()
    np.testing.assert_allclose(net.embed(x)[2:3], net.embed(x[2:3]), rtol=1e-12)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_logits_grad_check_wrt_first_layer(mode):
    net = init(SMALL)
    net.forward(_features(seed=1), mode="train")
    x = Tensor2(_features())
    w = Tensor2(np.random.default_rng(4).normal(size=(7, 3)))

    def f(weight):
        net.params['layer0.weight'] = weight
        _, logits = net.forward(x, mode=mode)
        return nx.total(nx.mul(logits, w))

    assert grad_check(f, net.params['layer0.weight'].values) < 1e-5


def test_embed_dataset_alignment(tiny_dataset):
    net = init(ModelConfig(input_dim=8, hidden_dims=(4,), embedding_dim=3))
    emb = embed_dataset(net, tiny_dataset)
    assert emb.shape == (4, 3)
    np.testing.assert_allclose(emb[1], net.embed(tiny_dataset.feature_rows([1]))[0])


# ----------------------------------------------------------------------
# 檢查點

def test_checkpoint_round_trip(tmp_path):
    net = init(SMALL)
    net.forward(_features(), mode="train")
    history = [{'epoch': 1, 'lr': 0.01, 'loss': 1.5}, {'epoch': 2, 'lr': 0.005, 'loss': 1.25}]
    path = save_checkpoint(net, tmp_path / "model.ckpt", epoch=2, metrics={'mAP': 50.0},
                           history=history, class_ids=[3, 5, 8])

    loaded, info = load_checkpoint(path)
    for name, value in net.state().items():
        np.testing.assert_array_equal(loaded.state()[name], value)
    np.testing.assert_array_equal(loaded.embed(_features(seed=9)), net.embed(_features(seed=9)))
    assert info.config == SMALL
    assert info.epoch == 2
    assert info.metrics == {'mAP': 50.0}
    assert info.class_ids == [3, 5, 8]

    frame = load_history(path)
    assert history_path(path).name == "model.ckpt.history.tsv"
    assert list(frame['loss']) == [1.5, 1.25]


def test_checkpoint_header_layout(tmp_path):
    path = save_checkpoint(init(SMALL), tmp_path / "m.ckpt")
    lines = path.read_bytes().split(b"\n", 2)
    assert lines[0] == b"RFCK1"
    assert b'"blocks"' in lines[1]


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DatasetError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(init(SMALL), tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetError, match="不一致"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello\nworld\n")
    with pytest.raises(DatasetError):
        load_checkpoint(path)


def test_history_sidecar_is_bit_exact(tmp_path):
    losses = np.random.default_rng(4).random(5) / 3.0
    history = [{'epoch': e + 1, 'lr': 0.01 * (1 - 0.9 * e / 5), 'loss': float(v)} for e, v in enumerate(losses)]
    path = save_checkpoint(init(SMALL), tmp_path / "h.ckpt", history=history)
    frame = load_history(path)
    assert list(frame['loss']) == [row['loss'] for row in history]
    assert list(frame['lr']) == [row['lr'] for row in history]


@pytest.mark.parametrize("batchnorm", [False, True])
def test_backward_reaches_every_parameter(batchnorm):
    """組合損失反向傳播後每個參數的每個元素都有非零梯度"""
    config = ModelConfig(input_dim=6, hidden_dims=(16,), embedding_dim=8, n_classes=8,
                         batchnorm=batchnorm, init_seed=3)
    net = init(config)
    labels = [pid for pid in range(8) for _ in range(4)]
    features = np.random.default_rng(2).normal(size=(len(labels), 6))
    emb, logits = net.forward(features, mode="train")
    loss, _ = combined_loss(emb, logits, labels, LossWeights())
    loss.backward()
    for name, param in net.params.items():
        assert param.grad is not None, name
        if batchnorm and name == "embed.bias":
            # BatchNorm 減去批次均值，嵌入層偏置的梯度恆為零
            np.testing.assert_allclose(param.grad, 0.0, atol=1e-10)
            continue
        assert np.all(param.grad != 0.0), name
