"""Deterministic mini-batch training, evaluation, inference-weight sweeps,
and JSON checkpointing.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .classifier import normalize_inference_weights, predict, structured_logits
from .errors import (CheckpointError, DivergenceError, ValidationError)
from .hierarchy import HierarchySpec
from .losses import LossCoefficients, compute_losses
from .model import PartitionSpec, partition_channels
from .network import CFSGNetwork
from .subcentroid import SubCentroidBank, batch_part_prototypes
from .synthdata import Dataset

SEED_OFFSET_INIT = 11
SEED_OFFSET_SHUFFLE = 12

CHECKPOINT_SCHEMA = 1
HISTORY_COLUMNS = ("epoch", "L_c", "L_lf", "L_dec", "S_cs", "S_cd", "S_p", "total", "fine_train_acc")


def thread_count() -> int:
    """Internal parallelism cap from CFSG_THREADS (default 1 for determinism)."""
    raw = os.environ.get("CFSG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"CFSG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"CFSG_THREADS must be >= 1, got {n}")
    return n


@dataclass(frozen=True)
class TrainConfig:
    """All training knobs; everything downstream is deterministic in `seed`."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    coeffs: LossCoefficients = field(default_factory=LossCoefficients)
    partition_ratio: tuple[float, float, float] = (5, 3, 2)
    enable_fs: bool = True
    enable_cs: bool = True
    dual_backbone: bool = True
    learnable_lam: bool = False
    subcentroid_bank: bool = False
    bank_momentum: float = 0.9
    d: int = 20
    d_raw: int = 20
    spatial_len: int = 4
    hidden: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"optimizer momentum must be in [0, 1), got {self.momentum}")


CONFIG_SCHEMA = 1
_CONFIG_COEFF_KEYS = ("eps_fuse", "lambda_cs", "lambda_cd", "lambda_sp")
_CONFIG_PLAIN_KEYS = ("epochs", "batch_size", "learning_rate", "momentum", "seed",
                      "partition_ratio", "enable_fs", "enable_cs", "dual_backbone",
                      "learnable_lam", "subcentroid_bank", "bank_momentum",
                      "d", "d_raw", "spatial_len", "hidden")


def train_config_to_dict(cfg: TrainConfig) -> dict:
    doc = {"schema": CONFIG_SCHEMA}
    for key in _CONFIG_PLAIN_KEYS:
        value = getattr(cfg, key)
        doc[key] = list(value) if isinstance(value, tuple) else value
    for key in _CONFIG_COEFF_KEYS:
        doc[key] = getattr(cfg.coeffs, key)
    return doc


def train_config_from_dict(doc: dict) -> TrainConfig:
    """Parse the documented training-config schema; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ValidationError(f"config must be a JSON object, got {type(doc).__name__}")
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ValidationError(f"unsupported config schema {doc.get('schema')!r}")
    known = set(_CONFIG_PLAIN_KEYS) | set(_CONFIG_COEFF_KEYS) | {"schema"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    plain = {k: doc[k] for k in _CONFIG_PLAIN_KEYS if k in doc}
    if "partition_ratio" in plain:
        plain["partition_ratio"] = tuple(plain["partition_ratio"])
    coeff = {k: doc[k] for k in _CONFIG_COEFF_KEYS if k in doc}
    return TrainConfig(coeffs=LossCoefficients(**coeff), **plain)


@dataclass
class Checkpoint:
    """Everything needed to reproduce evaluation outputs bit-for-bit."""

    partition: PartitionSpec
    hierarchy: HierarchySpec
    tensors: dict[str, np.ndarray]
    bank: SubCentroidBank | None
    step: int
    seed: int


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float, momentum: float):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            v = self.momentum * self.velocity[name] + p.grad
            self.velocity[name] = v
            p.data = p.data - self.learning_rate * v


def build_network(cfg: TrainConfig, hierarchy: HierarchySpec, d_in: int) -> tuple[CFSGNetwork, PartitionSpec]:
    partition = partition_channels(cfg.d, cfg.partition_ratio)
    rng = np.random.default_rng(cfg.seed + SEED_OFFSET_INIT)
    network = CFSGNetwork(hierarchy, partition, d_in,
                          d_raw=cfg.d_raw, spatial_len=cfg.spatial_len, hidden=cfg.hidden,
                          dual_backbone=cfg.dual_backbone, learnable_lam=cfg.learnable_lam,
                          rng=rng)
    return network, partition


def train(cfg: TrainConfig, dataset: Dataset) -> tuple[Checkpoint, list[dict]]:
    """Minimize the total objective with momentum SGD; returns the final
    checkpoint and one history row per epoch.

    Raises DivergenceError (carrying the finished history rows) if the loss
    ever goes non-finite.
    """
    h = dataset.hierarchy
    network, partition = build_network(cfg, h, dataset.x.shape[1])
    params = network.named_parameters()
    tape = GradTape(params.values())
    optimizer = SGD(params, cfg.learning_rate, cfg.momentum)
    bank = (SubCentroidBank(h, partition, cfg.bank_momentum)
            if cfg.subcentroid_bank else None)
    shuffle_rng = np.random.default_rng(cfg.seed + SEED_OFFSET_SHUFFLE)

    n = len(dataset)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = {k: 0.0 for k in HISTORY_COLUMNS if k not in ("epoch", "fine_train_acc")}
        correct = 0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            xb, yb = dataset.x[rows], dataset.labels[rows]
            state = network.forward(xb, mode="train", enable_cs=cfg.enable_cs)
            breakdown = compute_losses(state.probs, state.parts, yb, h,
                                       cfg.coeffs, enable_fs=cfg.enable_fs)
            total = breakdown.total.item()
            if not math.isfinite(total):
                raise DivergenceError(
                    f"non-finite total loss at step {step} (epoch {epoch})",
                    step=step, history=history)
            tape.backward(breakdown.total)
            optimizer.step()
            if bank is not None:
                for g in range(h.levels):
                    bank.update(g, batch_part_prototypes(state.pooled[g], yb[:, g]))
            row = breakdown.history_row()
            for key, value in row.items():
                sums[key] += value
            correct += int(np.sum(predict(state.logits[0]) == yb[:, 0]))
            batches += 1
            step += 1
        entry = {"epoch": epoch}
        entry.update({k: sums[k] / max(batches, 1) for k in sums})
        entry["fine_train_acc"] = correct / n if n else 0.0
        history.append(entry)

    tensors = {name: arr.copy() for name, arr in network.named_state().items()}
    ckpt = Checkpoint(partition=partition, hierarchy=h, tensors=tensors,
                      bank=bank, step=step, seed=cfg.seed)
    return ckpt, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def rebuild_network(ckpt: Checkpoint) -> CFSGNetwork:
    """Reconstruct the model purely from checkpoint tensors (shapes carry the
    architecture: dual mode, hidden width, spatial length, learnable lam)."""
    t = ckpt.tensors
    for required in ("backbone_f.w1", "backbone_f.w2", "gtl0.weight"):
        if required not in t:
            raise CheckpointError(f"checkpoint tensors missing {required!r}")
    d_in, hidden = t["backbone_f.w1"].shape
    d_raw = t["gtl0.weight"].shape[0]
    spatial_len = t["backbone_f.w2"].shape[1] // d_raw
    network = CFSGNetwork(
        ckpt.hierarchy, ckpt.partition, d_in,
        d_raw=d_raw, spatial_len=spatial_len, hidden=hidden,
        dual_backbone="backbone_c.w1" in t,
        learnable_lam="inference_lam" in t,
        rng=np.random.default_rng(0))
    network.load_state(t)
    return network


def _eval_batches(n: int, batch_size: int = 256):
    return [slice(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def evaluate(ckpt: Checkpoint, dataset: Dataset, lam=(1.0, 1.0, 1.0),
             use_subcentroid: bool = False) -> dict:
    """Accuracy report for the fine level (plus per-level diagnostics).

    Deployment uses the fine branch; coarse accuracies are reported for
    inspection only.
    """
    if tuple(ckpt.hierarchy.class_counts) != tuple(dataset.hierarchy.class_counts):
        raise ValidationError(
            f"checkpoint class counts {ckpt.hierarchy.class_counts} do not match "
            f"dataset class counts {dataset.hierarchy.class_counts}")
    lam = normalize_inference_weights(lam)
    if use_subcentroid and ckpt.bank is None:
        raise ValidationError("checkpoint has no sub-centroid bank")
    network = rebuild_network(ckpt)
    h = ckpt.hierarchy
    n = len(dataset)

    def run_batch(sl: slice) -> list[int]:
        state = network.forward(dataset.x[sl], mode="eval", lam=lam)
        counts = []
        for g in range(h.levels):
            if g == 0 and use_subcentroid:
                preds = ckpt.bank.predict(state.pooled[0], lam=lam, level=0)
            else:
                preds = predict(state.logits[g])
            counts.append(int(np.sum(preds == dataset.labels[sl, g])))
        return counts

    batches = _eval_batches(n)
    with ad.no_grad():
        workers = thread_count()
        if workers > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_batch, batches))
        else:
            results = [run_batch(sl) for sl in batches]
    per_level = [sum(r[g] for r in results) / n for g in range(h.levels)]
    return {"fine_acc": per_level[0], "per_level_acc": per_level, "lam_used": list(lam)}


def simplex_grid(step: float) -> list[tuple[float, float, float]]:
    """All (lam_c, lam_p, lam_n) with entries in step-multiples summing to 1."""
    if step <= 0:
        raise ValidationError(f"step must be positive, got {step}")
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ValidationError(f"step {step} does not divide 1 evenly")
    grid = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            k = n - i - j
            grid.append((i / n, j / n, k / n))
    return grid


def weight_sweep(ckpt: Checkpoint, dataset: Dataset, step: float = 0.05) -> dict:
    """Fine accuracy at every simplex grid point of the inference weights.

    Per-block logit contributions are computed once; each grid point then
    costs only a weighted sum.  Returns {"rows": [...], "best": row}.
    """
    grid = simplex_grid(step)
    if tuple(ckpt.hierarchy.class_counts) != tuple(dataset.hierarchy.class_counts):
        raise ValidationError("checkpoint and dataset class counts do not match")
    network = rebuild_network(ckpt)
    head = network.heads[0]
    p = ckpt.partition
    with ad.no_grad():
        contrib = {"c": [], "p": [], "n": []}
        for sl in _eval_batches(len(dataset)):
            state = network.forward(dataset.x[sl], mode="eval", lam=(1.0, 1.0, 1.0))
            pooled = state.pooled[0]
            w = head.weight.data
            contrib["c"].append(pooled.common.data @ w[:, p.common].T)
            contrib["p"].append(pooled.specific.data @ w[:, p.specific].T)
            contrib["n"].append(pooled.confounding.data @ w[:, p.confounding].T)
    logits_c = np.concatenate(contrib["c"], axis=0)
    logits_p = np.concatenate(contrib["p"], axis=0)
    logits_n = np.concatenate(contrib["n"], axis=0)
    bias = head.bias.data
    fine_labels = dataset.labels[:, 0]

    rows = []
    for lam_c, lam_p, lam_n in grid:
        logits = lam_c * logits_c + lam_p * logits_p + lam_n * logits_n + bias
        acc = float(np.mean(np.argmax(logits, axis=1) == fine_labels))
        rows.append({"lam_c": lam_c, "lam_p": lam_p, "lam_n": lam_n, "fine_acc": acc})
    best = max(rows, key=lambda r: r["fine_acc"])  # first max wins ties
    return {"rows": rows, "best": dict(best)}


# ---------------------------------------------------------------------------
# checkpoint persistence (single JSON document)
# ---------------------------------------------------------------------------

def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "partition": ckpt.partition.to_dict(),
        "hierarchy": ckpt.hierarchy.to_dict(),
        "tensors": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                    for name, arr in ckpt.tensors.items()},
        "bank": ckpt.bank.to_dict() if ckpt.bank is not None else None,
        "step": ckpt.step,
        "seed": ckpt.seed,
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    payload = json.dumps(checkpoint_to_dict(ckpt), allow_nan=False)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(payload + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"unsupported checkpoint schema {doc.get('schema') if isinstance(doc, dict) else doc!r}")
    for key in ("partition", "hierarchy", "tensors", "step", "seed"):
        if key not in doc:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    try:
        partition = PartitionSpec.from_dict(doc["partition"])
        hierarchy = HierarchySpec.from_dict(doc["hierarchy"])
        tensors = {}
        for name, entry in doc["tensors"].items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"tensor {name!r} contains non-finite values")
            tensors[name] = np.ascontiguousarray(arr)
        bank = (SubCentroidBank.from_dict(doc["bank"], hierarchy, partition)
                if doc.get("bank") is not None else None)
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return Checkpoint(partition=partition, hierarchy=hierarchy, tensors=tensors,
                      bank=bank, step=int(doc["step"]), seed=int(doc["seed"]))
