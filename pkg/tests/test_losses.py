import math

import numpy as np
import pytest

from cfsg import autodiff as ad
from cfsg.autodiff import Tensor, softmax
from cfsg.errors import ValidationError
from cfsg.hierarchy import build_hierarchy
from cfsg.losses import (LossBreakdown, LossCoefficients, class_part_prototypes,
                         coarse_ce_loss, common_granularity_similarity,
                         common_sibling_similarity, compute_losses,
                         disentanglement_loss, lift_matrix, one_hot,
                         prediction_alignment_loss, specific_divergence, total_loss)
from cfsg.model import StructuredFeatures, disentangle_features, partition_channels
from cfsg.network import CFSGNetwork
from cfsg.selftest import gradcheck


@pytest.fixture
def h2():
    return build_hierarchy([4, 2], [{0: 0, 1: 0, 2: 1, 3: 1}])


def uniform_probs(n, k):
    return Tensor(np.full((n, k), 1.0 / k))


def onehot_probs(labels, k):
    return Tensor(one_hot(np.asarray(labels), k))


def parts_from_array(arr, p):
    return disentangle_features(Tensor(arr), p)


def make_parts(common, specific, confounding):
    """Build StructuredFeatures from per-part (B, d_part, L) arrays."""
    return StructuredFeatures(common=Tensor(common), specific=Tensor(specific),
                              confounding=Tensor(confounding))


# -- coarse CE ---------------------------------------------------------------

def test_coarse_ce_perfect_predictions_near_zero():
    labels = np.array([0, 1, 0])
    value = coarse_ce_loss([onehot_probs(labels, 2)], [labels]).item()
    assert value <= 1e-9


def test_coarse_ce_uniform_two_levels_of_four():
    labels = np.array([0, 1, 2, 3])
    value = coarse_ce_loss([uniform_probs(4, 4), uniform_probs(4, 4)],
                           [labels, labels]).item()
    assert value == pytest.approx(2.0 * math.log(4.0), abs=1e-12)


def test_coarse_ce_no_levels_is_zero():
    assert coarse_ce_loss([], []).item() == 0.0


def test_coarse_ce_missing_level_rejected():
    with pytest.raises(ValidationError):
        coarse_ce_loss([uniform_probs(2, 2)], [])


# -- prediction alignment -----------------------------------------------------

def test_alignment_eps_one_matching_prediction_zero(h2):
    fine_labels = np.array([0, 2])
    fine_probs = onehot_probs(fine_labels, 4)
    value = prediction_alignment_loss([uniform_probs(2, 2)], fine_probs,
                                      fine_labels, h2, eps_fuse=1.0).item()
    assert abs(value) <= 1e-9


def test_alignment_eps_one_half_half_gives_ln2(h2):
    # KL degenerates to -ln(pred[label]); two fine classes at 0.5 each
    fine_labels = np.array([0])
    pred = Tensor(np.array([[0.5, 0.5, 0.0, 0.0]]))
    value = prediction_alignment_loss([uniform_probs(1, 2)], pred,
                                      fine_labels, h2, eps_fuse=1.0).item()
    assert value == pytest.approx(math.log(2.0), abs=1e-9)


def test_alignment_eps_zero_fused_equals_prediction(h2):
    # coarse prediction [0.6, 0.4] lifts to [0.3, 0.3, 0.2, 0.2]
    coarse = Tensor(np.array([[0.6, 0.4]]))
    lifted = Tensor(np.array([[0.3, 0.3, 0.2, 0.2]]))
    value = prediction_alignment_loss([coarse], lifted, np.array([0]), h2,
                                      eps_fuse=0.0).item()
    assert abs(value) <= 1e-12


def test_alignment_single_level_returns_zero():
    h1 = build_hierarchy([3], [])
    value = prediction_alignment_loss([], uniform_probs(2, 3), np.array([0, 1]), h1, 0.7)
    assert value.item() == 0.0


def test_alignment_rejects_unnormalized(h2):
    bad = Tensor(np.array([[0.5, 0.2, 0.1, 0.1]]))
    with pytest.raises(ValidationError):
        prediction_alignment_loss([uniform_probs(1, 2)], bad, np.array([0]), h2, 0.5)


def test_lift_matrix_spreads_uniformly(h2):
    lift = lift_matrix(h2, 1)
    np.testing.assert_allclose(lift, [[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])


# -- disentanglement -----------------------------------------------------------

def test_dec_orthogonal_parts_zero():
    # pooled part vectors: e1, e2, e3 in R^3 per sample
    common = np.zeros((1, 2, 3)); common[0, :, 0] = 1.0
    specific = np.zeros((1, 2, 3)); specific[0, :, 1] = 1.0
    conf = np.zeros((1, 2, 3)); conf[0, :, 2] = 1.0
    value = disentanglement_loss([make_parts(common, specific, conf)]).item()
    assert abs(value) <= 1e-9


def test_dec_identical_parts_six():
    block = np.ones((1, 2, 3))
    value = disentanglement_loss([make_parts(block, block.copy(), block.copy())]).item()
    assert value == pytest.approx(6.0, abs=1e-9)


def test_dec_pairwise_half_cosine_three():
    # three unit vectors with pairwise cosine exactly 0.5
    v = np.array([[1.0, 0.0, 0.0],
                  [0.5, math.sqrt(3) / 2, 0.0],
                  [0.5, math.sqrt(3) / 6, math.sqrt(6) / 3]])
    parts = make_parts(v[0].reshape(1, 1, 3), v[1].reshape(1, 1, 3), v[2].reshape(1, 1, 3))
    value = disentanglement_loss([parts]).item()
    assert value == pytest.approx(3.0, abs=1e-9)


def test_dec_zero_norm_part_guarded():
    zero = np.zeros((1, 2, 3))
    ones = np.ones((1, 2, 3))
    value = disentanglement_loss([make_parts(zero, ones, ones.copy())]).item()
    assert np.isfinite(value)


# -- S_cs ----------------------------------------------------------------------

def test_scs_identical_common_across_levels(h2):
    rng = np.random.default_rng(0)
    p = partition_channels(10, (5, 3, 2))
    base = rng.normal(size=(3, 10, 2))
    value = common_granularity_similarity([parts_from_array(base, p),
                                           parts_from_array(base.copy(), p)]).item()
    assert value == pytest.approx(1.0, abs=1e-9)


def test_scs_orthogonal_common_across_levels():
    p = partition_channels(8, (5, 2, 1))
    a = np.zeros((1, 8, 2)); a[0, 0, 0] = 1.0
    b = np.zeros((1, 8, 2)); b[0, 1, 0] = 1.0
    value = common_granularity_similarity([parts_from_array(a, p),
                                           parts_from_array(b, p)]).item()
    assert abs(value) <= 1e-9


def test_scs_three_levels_mean_of_pairs():
    # adjacent cosines 1 and 0 -> mean 0.5
    p = partition_channels(8, (5, 2, 1))
    a = np.zeros((1, 8, 2)); a[0, 0, 0] = 1.0
    c = np.zeros((1, 8, 2)); c[0, 1, 0] = 1.0
    value = common_granularity_similarity(
        [parts_from_array(a, p), parts_from_array(a.copy(), p), parts_from_array(c, p)]).item()
    assert value == pytest.approx(0.5, abs=1e-9)


def test_scs_single_level_zero():
    p = partition_channels(8, (5, 2, 1))
    value = common_granularity_similarity(
        [parts_from_array(np.ones((2, 8, 2)), p)]).item()
    assert value == 0.0


# -- S_cd ----------------------------------------------------------------------

def test_scd_identical_sibling_prototypes_one():
    # 2 fine classes under 1 parent, K=2, Q=1, G=2:
    # SUM(gram - I) = 2, / K / Q / (G-1) = 1.0
    h = build_hierarchy([2, 1], [{0: 0, 1: 0}])
    proto = Tensor(np.array([1.0, 2.0, 3.0]))
    protos = [{0: proto, 1: Tensor(proto.data.copy())}]
    value = common_sibling_similarity(protos, h).item()
    assert value == pytest.approx(1.0, abs=1e-9)


def test_scd_orthogonal_siblings_zero():
    h = build_hierarchy([2, 1], [{0: 0, 1: 0}])
    protos = [{0: Tensor([1.0, 0.0]), 1: Tensor([0.0, 1.0])}]
    assert abs(common_sibling_similarity(protos, h).item()) <= 1e-9


def test_scd_singleton_children_contribute_zero():
    h = build_hierarchy([2, 2], [{0: 0, 1: 1}])
    protos = [{0: Tensor([1.0, 0.0]), 1: Tensor([1.0, 0.0])}]
    assert common_sibling_similarity(protos, h).item() == 0.0


# -- S_p -----------------------------------------------------------------------

def test_sp_orthogonal_specifics_zero(h2):
    protos = [{0: Tensor([1.0, 0.0]), 1: Tensor([0.0, 1.0])},
              {0: Tensor([1.0, 0.0]), 1: Tensor([0.0, 1.0])}]
    assert abs(specific_divergence(protos, h2.class_counts).item()) <= 1e-9


def test_sp_identical_pair_normalized_value():
    # one level pair (G=2), level 0 has K=2 identical prototypes -> 2/2 = 1;
    # level 1 single class contributes 0
    h = build_hierarchy([2, 1], [{0: 0, 1: 0}])
    protos = [{0: Tensor([1.0, 1.0]), 1: Tensor([1.0, 1.0])},
              {0: Tensor([1.0, 1.0])}]
    value = specific_divergence(protos, h.class_counts).item()
    assert value == pytest.approx(1.0, abs=1e-9)


def test_sp_opposite_pair_negative_one():
    h = build_hierarchy([2, 1], [{0: 0, 1: 0}])
    protos = [{0: Tensor([1.0, 1.0]), 1: Tensor([-1.0, -1.0])},
              {0: Tensor([1.0, 1.0])}]
    value = specific_divergence(protos, h.class_counts).item()
    assert value == pytest.approx(-1.0, abs=1e-9)


# -- prototypes ----------------------------------------------------------------

def test_class_part_prototypes_matches_groupby_oracle(h2):
    rng = np.random.default_rng(1)
    p = partition_channels(10, (5, 3, 2))
    feats = rng.normal(size=(8, 10, 4))
    labels = h2.label_matrix()[rng.integers(0, 4, size=8)]
    protos = class_part_prototypes([parts_from_array(feats, p)] * 2, labels, "common")
    pooled = feats[:, :5, :].mean(axis=1)  # channel-mean of the common block
    for g in range(2):
        for k in np.unique(labels[:, g]):
            oracle = pooled[labels[:, g] == k].mean(axis=0)
            np.testing.assert_allclose(protos[g][int(k)].data, oracle, atol=1e-12)


# -- scale invariance & additivity ----------------------------------------------

def test_cosine_losses_invariant_to_positive_scaling(h2):
    rng = np.random.default_rng(2)
    p = partition_channels(10, (5, 3, 2))
    feats = rng.normal(size=(6, 10, 3))
    labels = h2.label_matrix()[rng.integers(0, 4, size=6)]

    def all_terms(arrs):
        parts = [parts_from_array(a, p) for a in arrs]
        return np.array([
            disentanglement_loss(parts).item(),
            common_granularity_similarity(parts).item(),
            common_sibling_similarity(class_part_prototypes(parts, labels, "common"), h2).item(),
            specific_divergence(class_part_prototypes(parts, labels, "specific"),
                                h2.class_counts).item(),
        ])

    base = all_terms([feats, feats * 0.5])
    scaled = all_terms([feats * 3.7, feats * 0.5 * 3.7])
    np.testing.assert_allclose(base, scaled, atol=1e-9)


def test_total_loss_additivity(h2):
    rng = np.random.default_rng(3)
    p = partition_channels(10, (5, 3, 2))
    feats = [rng.normal(size=(6, 10, 3)) for _ in range(2)]
    labels = h2.label_matrix()[rng.integers(0, 4, size=6)]
    probs = [softmax(Tensor(rng.normal(size=(6, 4)))), softmax(Tensor(rng.normal(size=(6, 2))))]
    parts = [parts_from_array(f, p) for f in feats]
    coeffs = LossCoefficients(eps_fuse=0.6, lambda_cs=0.9, lambda_cd=1.1, lambda_sp=0.7)

    breakdown = compute_losses(probs, parts, labels, h2, coeffs)
    total = total_loss(breakdown.fine_ce, breakdown.coarse_ce, breakdown.alignment,
                       breakdown.dec, breakdown.s_cs, breakdown.s_cd, breakdown.s_p, coeffs)
    assert total.item() == breakdown.total.item()  # bit-for-bit

    manual = (breakdown.fine_ce.item() + breakdown.coarse_ce.item() + breakdown.alignment.item()
              + breakdown.dec.item() - 0.9 * breakdown.s_cs.item()
              - 1.1 * breakdown.s_cd.item() + 0.7 * breakdown.s_p.item())
    assert breakdown.total.item() == pytest.approx(manual, abs=1e-12)


def test_disabled_fs_drops_structuralization_terms(h2):
    rng = np.random.default_rng(4)
    p = partition_channels(10, (5, 3, 2))
    feats = [rng.normal(size=(6, 10, 3)) for _ in range(2)]
    labels = h2.label_matrix()[rng.integers(0, 4, size=6)]
    probs = [softmax(Tensor(rng.normal(size=(6, 4)))), softmax(Tensor(rng.normal(size=(6, 2))))]
    parts = [parts_from_array(f, p) for f in feats]
    coeffs = LossCoefficients()
    off = compute_losses(probs, parts, labels, h2, coeffs, enable_fs=False)
    assert off.dec.item() == 0.0 and off.s_cs.item() == 0.0
    expected = off.fine_ce.item() + off.coarse_ce.item() + off.alignment.item()
    assert off.total.item() == pytest.approx(expected, abs=1e-15)


def test_all_zero_coefficients_isolate_dec(h2):
    # zero alignment coefficients and zero coarse influence (eps_fuse=1):
    # with perfect predictions the total collapses to the disentanglement term
    rng = np.random.default_rng(5)
    p = partition_channels(10, (5, 3, 2))
    feats = [rng.normal(size=(4, 10, 3)) for _ in range(2)]
    labels = h2.label_matrix()[np.array([0, 1, 2, 3])]
    probs = [onehot_probs(labels[:, 0], 4), onehot_probs(labels[:, 1], 2)]
    parts = [parts_from_array(f, p) for f in feats]
    coeffs = LossCoefficients(eps_fuse=1.0, lambda_cs=0.0, lambda_cd=0.0, lambda_sp=0.0)
    breakdown = compute_losses(probs, parts, labels, h2, coeffs)
    assert breakdown.total.item() == pytest.approx(breakdown.dec.item(), abs=1e-8)


def test_minimizing_scd_drives_sibling_cosines_up(h2):
    # gradient ascent on S_cd over frozen random features: monotone increase
    rng = np.random.default_rng(6)
    p = partition_channels(10, (5, 3, 2))
    feats = Tensor(rng.normal(size=(8, 10, 3)), requires_grad=True)
    labels = h2.label_matrix()[np.array([0, 0, 1, 1, 2, 2, 3, 3])]
    values = []
    for _ in range(200):
        parts = [disentangle_features(feats, p)]
        protos = class_part_prototypes(parts, labels[:, :1], "common")
        s_cd = common_sibling_similarity(protos, build_hierarchy([4, 2], [{0: 0, 1: 0, 2: 1, 3: 1}]))
        ad.backward(s_cd)
        values.append(s_cd.item())
        feats = Tensor(feats.data + 0.05 * feats.grad, requires_grad=True)
    diffs = np.diff(values)
    assert values[-1] > values[0]
    assert np.all(diffs >= -1e-9)


# -- gradient checks against finite differences ---------------------------------

def test_every_loss_term_gradient_matches_finite_differences(h2):
    rng = np.random.default_rng(7)
    p = partition_channels(9, (4, 3, 2))
    labels = h2.label_matrix()[rng.integers(0, 4, size=4)]

    feature_arrays = {f"f{g}": rng.normal(size=(4, 9, 2)) for g in range(2)}

    def _parts(t):
        return [disentangle_features(t[f"f{g}"], p) for g in range(2)]

    cases = {
        "L_c": ({"z": rng.normal(size=(4, 2))},
                lambda t: coarse_ce_loss([softmax(t["z"])], [labels[:, 1]])),
        "L_lf": ({"z0": rng.normal(size=(4, 4)), "z1": rng.normal(size=(4, 2))},
                 lambda t: prediction_alignment_loss([softmax(t["z1"])], softmax(t["z0"]),
                                                     labels[:, 0], h2, 0.7)),
        "L_dec": (feature_arrays, lambda t: disentanglement_loss(_parts(t))),
        "S_cs": (feature_arrays, lambda t: common_granularity_similarity(_parts(t))),
        "S_cd": (feature_arrays,
                 lambda t: common_sibling_similarity(
                     class_part_prototypes(_parts(t), labels, "common"), h2)),
        "S_p": (feature_arrays,
                lambda t: specific_divergence(
                    class_part_prototypes(_parts(t), labels, "specific"), h2.class_counts)),
    }
    for name, (arrays, build) in cases.items():
        err = gradcheck(build, arrays)
        assert err < 1e-4, f"{name}: relative error {err}"


def test_total_loss_gradient_through_network(h2):
    rng = np.random.default_rng(8)
    p = partition_channels(9, (4, 3, 2))
    net = CFSGNetwork(h2, p, d_in=5, d_raw=6, spatial_len=2, hidden=5,
                      dual_backbone=False, rng=rng)
    x = rng.normal(size=(4, 5))
    labels = h2.label_matrix()[rng.integers(0, 4, size=4)]
    coeffs = LossCoefficients()
    params = net.named_parameters()
    tape = ad.GradTape(params.values())

    from cfsg.autodiff import finite_difference_grad
    from cfsg.selftest import max_relative_error

    def loss_value():
        state = net.forward(x, mode="train")
        return compute_losses(state.probs, state.parts, labels, h2, coeffs).total

    loss = loss_value()
    tape.backward(loss)
    for name in ("backbone_f.w1", "gtl0.weight", "gtl1.gamma", "classifier0.weight"):
        analytic = params[name].grad.copy()
        saved = params[name].data.copy()

        def f(replacement):
            params[name].data = replacement.data
            with ad.no_grad():
                out = loss_value().item()
            params[name].data = saved
            return out

        numeric = finite_difference_grad(f, Tensor(saved))
        assert max_relative_error(analytic, numeric) < 1e-4, name
