"""Built-in invariant suite behind the `selftest` CLI command.

Covers gradient fidelity of every loss term against central finite
differences, the probability/rank-statistic invariants, the classifier
decomposition identity, sweep geometry, and sub-centroid behavior.

`perturb_term` is a fault-injection hook: it corrupts the analytic gradient
of the named loss term so the corresponding check must fail (used to prove
the suite can catch a broken gradient).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import (GradTape, Tensor, cosine_similarity, finite_difference_grad,
                       kl_divergence, softmax)
from .classifier import ClassifierHead, plain_logits, structured_logits
from .hierarchy import build_hierarchy
from .losses import (LossCoefficients, coarse_ce_loss, common_granularity_similarity,
                     common_sibling_similarity, class_part_prototypes, compute_losses,
                     disentanglement_loss, prediction_alignment_loss, specific_divergence)
from .model import PartitionSpec, PooledParts, StructuredFeatures, disentangle_features
from .network import CFSGNetwork
from .rankstats import average_ranks, spearman_rho
from .subcentroid import SubCentroidBank
from .train import simplex_grid

GRAD_TOLERANCE = 1e-4
GRAD_DRAWS = 100
FD_STEP = 1e-5

# Tiny instances keep each finite-difference sweep cheap.
_B = 3
_PARTITION = PartitionSpec(6, 3, 2, 1)
_L = 2
_HIERARCHY = build_hierarchy([4, 2], [{0: 0, 1: 0, 2: 1, 3: 1}])


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(build_loss: Callable[[dict[str, Tensor]], Tensor],
              arrays: dict[str, np.ndarray], h: float = FD_STEP,
              perturb: bool = False) -> float:
    """Worst relative error between tape gradients and central differences,
    over every input tensor of `build_loss`."""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    ad.backward(loss)
    worst = 0.0
    for name in arrays:
        # inputs the loss never touched have zero gradient by convention
        analytic = (tensors[name].grad.copy() if tensors[name].grad is not None
                    else np.zeros_like(arrays[name]))
        if perturb:
            analytic.reshape(-1)[0] += 1e-2

        def value_at(replacement: Tensor, _name=name) -> float:
            with ad.no_grad():
                alt = {k: Tensor(v) for k, v in arrays.items()}
                alt[_name] = replacement
                return build_loss(alt).item()

        numeric = finite_difference_grad(value_at, Tensor(arrays[name]), h=h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def _parts_from_tensors(tensors: dict[str, Tensor]) -> list[StructuredFeatures]:
    return [disentangle_features(tensors[f"f{g}"], _PARTITION) for g in range(_HIERARCHY.levels)]


def _feature_arrays(rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {f"f{g}": rng.normal(size=(_B, _PARTITION.d, _L)) for g in range(_HIERARCHY.levels)}


def _labels(rng: np.random.Generator) -> np.ndarray:
    fine = rng.integers(0, _HIERARCHY.num_fine, size=_B)
    return _HIERARCHY.label_matrix()[fine]


_TERM_SEEDS = {"L_c": 1001, "L_lf": 1002, "L_dec": 1003, "S_cs": 1004, "S_cd": 1005, "S_p": 1006}


def _grad_check_term(term: str, perturb_term: str | None) -> CheckResult:
    """Run GRAD_DRAWS randomized gradient checks for one loss term."""
    rng = np.random.default_rng(_TERM_SEEDS.get(term, 999))
    worst = 0.0
    for _ in range(GRAD_DRAWS):
        labels = _labels(rng)
        if term == "L_c":
            arrays = {"z1": rng.normal(size=(_B, _HIERARCHY.class_counts[1]))}

            def build(t):
                return coarse_ce_loss([softmax(t["z1"])], [labels[:, 1]])
        elif term == "L_lf":
            arrays = {"z0": rng.normal(size=(_B, _HIERARCHY.num_fine)),
                      "z1": rng.normal(size=(_B, _HIERARCHY.class_counts[1]))}

            def build(t):
                return prediction_alignment_loss([softmax(t["z1"])], softmax(t["z0"]),
                                                 labels[:, 0], _HIERARCHY, eps_fuse=0.7)
        elif term == "L_dec":
            arrays = _feature_arrays(rng)

            def build(t):
                return disentanglement_loss(_parts_from_tensors(t))
        elif term == "S_cs":
            arrays = _feature_arrays(rng)

            def build(t):
                return common_granularity_similarity(_parts_from_tensors(t))
        elif term == "S_cd":
            arrays = _feature_arrays(rng)

            def build(t):
                protos = class_part_prototypes(_parts_from_tensors(t), labels, "common")
                return common_sibling_similarity(protos, _HIERARCHY)
        elif term == "S_p":
            arrays = _feature_arrays(rng)

            def build(t):
                protos = class_part_prototypes(_parts_from_tensors(t), labels, "specific")
                return specific_divergence(protos, _HIERARCHY.class_counts)
        else:
            raise ValueError(f"unknown loss term {term!r}")
        worst = max(worst, gradcheck(build, arrays, perturb=(perturb_term == term)))
    passed = worst < GRAD_TOLERANCE
    return CheckResult(f"grad_{term}", passed,
                       f"max relative error {worst:.3e} over {GRAD_DRAWS} draws (tolerance {GRAD_TOLERANCE:g})")


def _grad_check_total(perturb_term: str | None) -> CheckResult:
    """End-to-end gradient of the weighted total through a tiny network.

    Each draw re-randomizes the data and all parameters, then runs a full
    finite-difference sweep over one parameter tensor (cycling through all
    of them across the draws).
    """
    rng = np.random.default_rng(314159)
    coeffs = LossCoefficients(eps_fuse=0.7, lambda_cs=0.8, lambda_cd=0.6, lambda_sp=0.7)
    worst = 0.0
    network = CFSGNetwork(_HIERARCHY, _PARTITION, d_in=5, d_raw=6, spatial_len=_L,
                          hidden=6, dual_backbone=False, learnable_lam=False, rng=rng)
    params = network.named_parameters()
    names = list(params)
    tape = GradTape(params.values())
    for draw in range(GRAD_DRAWS):
        x = rng.normal(size=(_B, 5))
        labels = _labels(rng)
        for p in params.values():
            p.data = rng.normal(size=p.data.shape) * 0.7

        def total_value() -> Tensor:
            state = network.forward(x, mode="train")
            return compute_losses(state.probs, state.parts, labels, _HIERARCHY, coeffs).total

        loss = total_value()
        tape.backward(loss)
        target = names[draw % len(names)]
        analytic = params[target].grad.copy()
        if perturb_term == "total":
            analytic.reshape(-1)[0] += 1e-2
        saved = params[target].data.copy()

        def value_at(replacement: Tensor) -> float:
            params[target].data = replacement.data
            with ad.no_grad():
                out = total_value().item()
            params[target].data = saved
            return out

        numeric = finite_difference_grad(value_at, Tensor(saved), h=FD_STEP)
        params[target].data = saved
        worst = max(worst, max_relative_error(analytic, numeric))
    passed = worst < GRAD_TOLERANCE
    return CheckResult("grad_total", passed,
                       f"max relative error {worst:.3e} over {GRAD_DRAWS} draws (tolerance {GRAD_TOLERANCE:g})")


def _check_softmax() -> CheckResult:
    rng = np.random.default_rng(7)
    worst_sum = 0.0
    worst_shift = 0.0
    for _ in range(200):
        z = rng.uniform(-50, 50, size=rng.integers(2, 9))
        p = softmax(Tensor(z)).data
        worst_sum = max(worst_sum, abs(p.sum() - 1.0))
        shifted = softmax(Tensor(z + rng.uniform(-10, 10))).data
        worst_shift = max(worst_shift, float(np.max(np.abs(p - shifted))))
    ok = worst_sum <= 1e-12 and worst_shift <= 1e-9
    return CheckResult("softmax_normalization", ok,
                       f"max |sum-1| {worst_sum:.2e}, max shift drift {worst_shift:.2e}")


def _check_kl_identity() -> CheckResult:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        p = rng.dirichlet(np.ones(rng.integers(2, 8)))
        worst = max(worst, abs(kl_divergence(Tensor(p), Tensor(p)).item()))
    return CheckResult("kl_identity", worst <= 1e-12, f"max KL(p,p) {worst:.2e}")


def _check_cosine_scaling() -> CheckResult:
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(100):
        a = rng.normal(size=rng.integers(2, 12))
        c = rng.uniform(0.1, 10.0)
        plus = cosine_similarity(Tensor(a), Tensor(c * a)).item()
        minus = cosine_similarity(Tensor(a), Tensor(-c * a)).item()
        worst = max(worst, abs(plus - 1.0), abs(minus + 1.0))
    return CheckResult("cosine_scaling", worst <= 1e-9, f"max deviation {worst:.2e}")


def _brute_force_spearman(x: np.ndarray, y: np.ndarray) -> float:
    def ranks(v):
        out = np.empty(v.size)
        for i, val in enumerate(v):
            less = int(np.sum(v < val))
            equal = int(np.sum(v == val))
            out[i] = less + (equal + 1) / 2.0
        return out

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def _check_spearman_oracle() -> CheckResult:
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        x = np.round(rng.normal(size=50), 1)  # rounding forces ties
        y = np.round(rng.normal(size=50), 1)
        worst = max(worst, abs(spearman_rho(x, y) - _brute_force_spearman(x, y)))
    return CheckResult("spearman_oracle", worst <= 1e-12,
                       f"max |rho - brute force| {worst:.2e} over 100 length-50 draws")


def _check_classifier_decomposition() -> CheckResult:
    rng = np.random.default_rng(19)
    p = PartitionSpec(20, 10, 6, 4)
    head = ClassifierHead(8, p, rng)
    worst = 0.0
    for _ in range(10):
        f = Tensor(rng.normal(size=(100, p.d)))
        pooled = PooledParts(common=f[:, p.common], specific=f[:, p.specific],
                             confounding=f[:, p.confounding])
        structured = structured_logits(pooled, head, (1.0, 1.0, 1.0)).data
        plain = plain_logits(f, head).data
        worst = max(worst, float(np.max(np.abs(structured - plain))))
    return CheckResult("classifier_decomposition", worst <= 1e-12,
                       f"max |structured - plain| {worst:.2e} over 1000 inputs")


def _check_sweep_geometry() -> CheckResult:
    counts = {0.05: 231, 0.5: 6, 1.0: 3}
    got = {step: len(simplex_grid(step)) for step in counts}
    ok = got == counts
    return CheckResult("sweep_geometry", ok, f"grid sizes {got}")


def _check_subcentroid_momentum() -> CheckResult:
    h = _HIERARCHY
    bank = SubCentroidBank(h, _PARTITION, momentum=0.9)
    rng = np.random.default_rng(23)
    start = {name: rng.normal(size=dim) for name, dim in
             (("common", _PARTITION.d_c), ("specific", _PARTITION.d_p), ("confounding", _PARTITION.d_n))}
    proto = {name: rng.normal(size=v.shape) for name, v in start.items()}
    bank.update(0, {0: start})
    base_gap = np.linalg.norm(start["common"] - proto["common"])
    for _ in range(10):
        bank.update(0, {0: proto})
    gap = np.linalg.norm(bank.centroids[0]["common"][0] - proto["common"])
    expected = (0.9 ** 10) * base_gap
    ok = abs(gap - expected) <= 1e-9
    return CheckResult("subcentroid_momentum", ok,
                       f"|gap - mu^10 * gap0| = {abs(gap - expected):.2e}")


def _check_lambda_invariance() -> CheckResult:
    rng = np.random.default_rng(29)
    p = PartitionSpec(12, 6, 4, 2)
    head = ClassifierHead(5, p, rng)
    ok = True
    for _ in range(20):
        f = Tensor(rng.normal(size=(16, p.d)))
        pooled = PooledParts(common=f[:, p.common], specific=f[:, p.specific],
                             confounding=f[:, p.confounding])
        lam = tuple(rng.uniform(0.05, 1.0, size=3))
        scale = rng.uniform(0.1, 7.0)
        a = np.argmax(structured_logits(pooled, head, lam).data, axis=1)
        b = np.argmax(structured_logits(pooled, head, tuple(scale * v for v in lam)).data, axis=1)
        ok = ok and bool(np.all(a == b))
    return CheckResult("lambda_scale_invariance", ok, "argmax unchanged under positive rescaling")


def _check_hierarchy_metric() -> CheckResult:
    # Rows of the four-level reference label table and their pairwise
    # similarities computed by hand from the label vectors.
    rows = {8: (8, 5, 3, 3), 9: (9, 6, 3, 3), 10: (10, 5, 3, 3), 11: (11, 7, 3, 3),
            12: (12, 8, 3, 3), 28: (28, 19, 12, 3), 29: (29, 19, 12, 3), 51: (51, 36, 19, 8)}
    h = label_table_hierarchy()
    ok = True
    detail = []
    for i, ci in rows.items():
        for j, cj in rows.items():
            expected = 4 - sum(a != b for a, b in zip(ci, cj))
            got = h.class_similarity(i, j)
            if got != expected:
                ok = False
                detail.append(f"({i},{j}): got {got}, expected {expected}")
    return CheckResult("hierarchy_metric", ok, "; ".join(detail) or "all reference pairs exact")


def label_table_hierarchy():
    """Four-level hierarchy embedding the reference label-table rows."""
    counts = [52, 37, 20, 9]
    fine_map = {8: 5, 9: 6, 10: 5, 11: 7, 12: 8, 28: 19, 29: 19, 51: 36}
    level1_map = {5: 3, 6: 3, 7: 3, 8: 3, 19: 12, 36: 19}
    level2_map = {3: 3, 12: 3, 19: 8}
    maps = [
        {c: fine_map.get(c, c % counts[1]) for c in range(counts[0])},
        {c: level1_map.get(c, c % counts[2]) for c in range(counts[1])},
        {c: level2_map.get(c, c % counts[3]) for c in range(counts[2])},
    ]
    return build_hierarchy(counts, maps)


LOSS_TERMS = ("L_c", "L_lf", "L_dec", "S_cs", "S_cd", "S_p")


def run_selftest(perturb_term: str | None = None) -> list[CheckResult]:
    """Run the whole invariant suite; `perturb_term` injects a gradient fault."""
    results = [
        _check_softmax(),
        _check_kl_identity(),
        _check_cosine_scaling(),
        _check_spearman_oracle(),
        _check_hierarchy_metric(),
        _check_classifier_decomposition(),
        _check_lambda_invariance(),
        _check_sweep_geometry(),
        _check_subcentroid_momentum(),
    ]
    for term in LOSS_TERMS:
        results.append(_grad_check_term(term, perturb_term))
    results.append(_grad_check_total(perturb_term))
    return results
