import numpy as np
import pytest

from cfsg.autodiff import Tensor
from cfsg.classifier import (ClassifierHead, disentangle_weights, normalize_inference_weights,
                             plain_logits, predict, structured_logits)
from cfsg.errors import DimensionError, ValidationError
from cfsg.model import PartitionSpec, PooledParts, partition_channels


def make_pooled(f, p):
    t = Tensor(np.atleast_2d(f))
    return PooledParts(common=t[:, p.common], specific=t[:, p.specific],
                       confounding=t[:, p.confounding])


def test_disentangle_weights_column_slices():
    p = partition_channels(10, (5, 3, 2))
    w = np.tile(np.arange(10.0), (4, 1))
    wc, wp, wn = disentangle_weights(Tensor(w), p)
    assert np.all(wc.data[0] == np.arange(5.0))
    assert np.all(wp.data[0] == np.arange(5.0, 8.0))
    assert np.all(wn.data[0] == np.arange(8.0, 10.0))


def test_disentangle_weights_roundtrip():
    rng = np.random.default_rng(0)
    p = partition_channels(10, (5, 3, 2))
    w = rng.normal(size=(6, 10))
    wc, wp, wn = disentangle_weights(Tensor(w), p)
    assert np.array_equal(np.concatenate([wc.data, wp.data, wn.data], axis=1), w)


def test_disentangle_weights_shapes_k31_d20():
    p = partition_channels(20, (5, 3, 2))
    w = np.zeros((31, 20))
    wc, wp, wn = disentangle_weights(Tensor(w), p)
    assert wc.shape == (31, 10) and wp.shape == (31, 6) and wn.shape == (31, 4)


def test_disentangle_weights_mismatch():
    p = partition_channels(10, (5, 3, 2))
    with pytest.raises(DimensionError):
        disentangle_weights(Tensor(np.zeros((4, 9))), p)


def test_structured_logits_hand_example():
    # d=4 split (2,1,1), f=[1,2,3,4], W row: common [1,0], specific [1],
    # confounding [2], b=0.5, lam=(0.75,0.2,0.05):
    # 0.75*1 + 0.2*3 + 0.05*8 + 0.5 = 2.25
    p = PartitionSpec(4, 2, 1, 1)
    head = ClassifierHead(1, p, np.random.default_rng(0))
    head.weight.data = np.array([[1.0, 0.0, 1.0, 2.0]])
    head.bias.data = np.array([0.5])
    pooled = make_pooled([1.0, 2.0, 3.0, 4.0], p)
    value = structured_logits(pooled, head, (0.75, 0.2, 0.05)).data[0, 0]
    assert value == pytest.approx(2.25, abs=1e-12)
    # generic dot-product oracle at lam=(1,1,1)
    oracle = float(np.dot([1.0, 2.0, 3.0, 4.0], head.weight.data[0]) + 0.5)
    assert structured_logits(pooled, head, (1, 1, 1)).data[0, 0] == pytest.approx(oracle, abs=1e-12)


def test_structured_logits_zero_features_give_bias():
    p = PartitionSpec(4, 2, 1, 1)
    head = ClassifierHead(3, p, np.random.default_rng(1))
    pooled = make_pooled([0.0, 0.0, 0.0, 0.0], p)
    np.testing.assert_allclose(structured_logits(pooled, head, (1, 1, 1)).data[0],
                               head.bias.data, atol=1e-15)


def test_structured_equals_plain_at_unit_weights():
    rng = np.random.default_rng(2)
    p = partition_channels(20, (5, 3, 2))
    head = ClassifierHead(8, p, rng)
    worst = 0.0
    for _ in range(10):
        f = rng.normal(size=(100, 20))
        pooled = make_pooled(f, p)
        structured = structured_logits(pooled, head, (1.0, 1.0, 1.0)).data
        plain = plain_logits(Tensor(f), head).data
        worst = max(worst, float(np.abs(structured - plain).max()))
    assert worst <= 1e-12


def test_lambda_positive_rescaling_keeps_argmax():
    rng = np.random.default_rng(3)
    p = partition_channels(12, (5, 3, 2))
    head = ClassifierHead(5, p, rng)
    f = rng.normal(size=(50, 12))
    pooled = make_pooled(f, p)
    lam = (0.6, 0.3, 0.1)
    base = predict(structured_logits(pooled, head, lam))
    for scale in (0.2, 3.0, 17.0):
        scaled = predict(structured_logits(pooled, head, tuple(scale * v for v in lam)))
        assert np.array_equal(base, scaled)


def test_lambda_n_zero_ignores_confounding_block():
    rng = np.random.default_rng(4)
    p = partition_channels(12, (5, 3, 2))
    head = ClassifierHead(5, p, rng)
    f = rng.normal(size=(20, 12))
    lam = (0.7, 0.3, 0.0)
    base = predict(structured_logits(make_pooled(f, p), head, lam))
    perturbed = f.copy()
    perturbed[:, p.confounding] = rng.normal(size=(20, p.d_n)) * 1e6
    after = predict(structured_logits(make_pooled(perturbed, p), head, lam))
    assert np.array_equal(base, after)


def test_normalize_inference_weights():
    assert normalize_inference_weights((1, 1, 1)) == pytest.approx((1 / 3, 1 / 3, 1 / 3))
    assert normalize_inference_weights((0.75, 0.2, 0.05)) == pytest.approx((0.75, 0.2, 0.05))
    assert normalize_inference_weights((3, 1, 0)) == pytest.approx((0.75, 0.25, 0.0))
    assert sum(normalize_inference_weights((0.3, 0.2, 0.17))) == pytest.approx(1.0, abs=1e-12)


def test_normalize_inference_weights_rejects_bad_input():
    with pytest.raises(ValidationError):
        normalize_inference_weights((0.0, 0.0, 0.0))
    with pytest.raises(ValidationError):
        normalize_inference_weights((-1.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        normalize_inference_weights((1.0, 1.0))


def test_predict_argmax_and_ties():
    assert predict(np.array([0.1, 2.0, -1.0])) == 1
    assert predict(np.array([5.0, 5.0])) == 0
    assert np.array_equal(predict(np.array([[1.0, 2.0], [3.0, 0.0]])), [1, 0])


def test_predict_eq3_example_second_class():
    p = PartitionSpec(4, 2, 1, 1)
    head = ClassifierHead(2, p, np.random.default_rng(5))
    head.weight.data = np.array([[1.0, 0.0, 1.0, 2.0], [1.0, 0.0, 1.0, 2.0]])
    head.bias.data = np.array([0.5, 0.49])  # second class scores 2.24 < 2.25
    pooled = make_pooled([1.0, 2.0, 3.0, 4.0], p)
    assert predict(structured_logits(pooled, head, (0.75, 0.2, 0.05)))[0] == 0
