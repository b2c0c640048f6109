"""Loss terms for discovering new classes and retaining old ones.

The phase-2 objective combines five scalar terms built from full-batch
representations:

  pairwise      BCE between logistic pair similarities of novel-head logits
                and rank-statistics pseudo pair labels
  self          cross-entropy of the joint head against its own detached
                novel-head argmax, offset into the joint label space
  perturb       mean squared softmax disagreement between clean and
                noise-perturbed representations
  replay        cross-entropy of the joint head on samples drawn from old
                class prototypes (representation space, encoder bypassed)
  distill       mean per-node L2 distance to the frozen encoder's output

Weights: total = pairwise + b1*self + b2*perturb + lam*(replay + omega*distill)
with b1, b2 following a sigmoid-shaped warmup ramp from zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    """Scales and schedule knobs for the phase-2 objective."""

    alpha1: float = 0.1        # self-training amplitude
    alpha2: float = 4.0        # perturbation-consistency amplitude
    rampup_length: int = 100
    eta: float = 0.2           # perturbation step size
    lam: float = 1.0           # old-task weight
    omega_fd: float = 10.0     # distillation multiplier inside the old-task term
    top_k: int = 5             # rank statistics depth


@dataclass
class Prototypes:
    """Per-class Gaussian summary of labeled representations."""

    class_ids: np.ndarray      # (C,) int64
    mean: np.ndarray           # (C, d)
    var: np.ndarray            # (C, d) biased per-dimension variance
    counts: np.ndarray         # (C,) int64

    def to_dict(self) -> dict:
        # python float repr round-trips exactly, so JSON storage is lossless
        return {
            "class_ids": [int(c) for c in self.class_ids],
            "mean": [[float(v) for v in row] for row in self.mean],
            "var": [[float(v) for v in row] for row in self.var],
            "counts": [int(c) for c in self.counts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Prototypes":
        return cls(class_ids=np.asarray(d["class_ids"], dtype=np.int64),
                   mean=np.asarray(d["mean"], dtype=np.float64),
                   var=np.asarray(d["var"], dtype=np.float64),
                   counts=np.asarray(d["counts"], dtype=np.int64))


def _as_array(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def pairwise_similarity(novel_logits: Tensor) -> Tensor:
    """s_ij = logistic(u_i . u_j) over all ordered pairs, shape (n, n)."""
    return ad.sigmoid(ad.matmul(novel_logits, ad.transpose(novel_logits)))


def topk_pseudo_pairs(z, k: int) -> np.ndarray:
    """Pair label 1 where two rows share their top-k dimension index set.

    Ranking ties break toward the lower dimension index. Output is a dense
    symmetric 0/1 float matrix with an all-ones diagonal; it is a detached
    target, never differentiated through.
    """
    arr = _as_array(z)
    if not 1 <= k <= arr.shape[1]:
        raise ValueError(f"top_k must be in [1, {arr.shape[1]}], got {k}")
    order = np.argsort(-arr, axis=1, kind="stable")[:, :k]
    key = np.sort(order, axis=1)
    same = (key[:, None, :] == key[None, :, :]).all(axis=2)
    return same.astype(np.float64)


def pairwise_bce(s: Tensor, y_pair: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all n^2 ordered pairs, diagonal included.

    Similarities are clamped to [1e-12, 1 - 1e-12] before the logs, so
    saturated pairs contribute a finite loss and a zero gradient.
    """
    n, m = s.shape
    if n != m:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    y = np.asarray(y_pair, dtype=np.float64)
    if y.shape != (n, n):
        raise ValueError(f"pair labels {y.shape} do not match similarities {s.shape}")
    sc = ad.clamp(s, 1e-12, 1.0 - 1e-12)
    pos = ad.mul(ad.log(sc), ad.constant(y))
    neg = ad.mul(ad.log(ad.add_scalar(ad.mul_scalar(sc, -1.0), 1.0)), ad.constant(1.0 - y))
    return ad.mul_scalar(ad.sum(ad.add(pos, neg)), -1.0 / (n * n))


def assign_pseudo_labels(novel_logits, num_old: int) -> np.ndarray:
    """Joint-space pseudo labels: num_old + argmax of the novel logits.

    Argmax ties resolve to the lowest index. Detached by construction."""
    arr = _as_array(novel_logits)
    return (num_old + np.argmax(arr, axis=1)).astype(np.int64)


def self_training_loss(joint_logits: Tensor, pseudo_labels) -> Tensor:
    """Mean cross-entropy of the joint head against the pseudo labels."""
    return ad.nll_rows(ad.log_softmax_rows(joint_logits), pseudo_labels)


def perturb_representations(z: Tensor, eta: float, sigma, seed: int) -> Tensor:
    """z + eta * noise with noise ~ N(0, diag(sigma^2)), no gradient through it.

    eta == 0 or an all-zero sigma returns z itself, bitwise."""
    sig = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sig.size != z.shape[1]:
        raise ValueError(f"sigma has {sig.size} entries for {z.shape[1]} dimensions")
    if np.any(sig < 0.0):
        raise ValueError("sigma must be non-negative")
    if eta == 0.0 or not np.any(sig > 0.0):
        return z
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(z.shape) * sig
    return ad.add(z, ad.constant(eta * noise))


def perturb_consistency_loss(logits_clean: Tensor, logits_pert: Tensor) -> Tensor:
    """Mean squared difference between clean and perturbed row softmaxes.

    Equal to the per-node average of sum_k (p_k - q_k)^2 divided by the
    number of classes."""
    if logits_clean.shape != logits_pert.shape:
        raise ValueError(
            f"clean {logits_clean.shape} vs perturbed {logits_pert.shape} logits")
    return ad.mse(ad.softmax_rows(logits_clean), ad.softmax_rows(logits_pert))


def batch_sigma(z, mode: str = "empirical") -> np.ndarray:
    """Per-dimension noise scale: batch std of the representations.

    Dimensions with zero spread fall back to 1.0. mode="unit" skips the
    statistics and returns all ones."""
    arr = _as_array(z)
    if mode == "unit":
        return np.ones(arr.shape[1])
    if mode != "empirical":
        raise ValueError(f"unknown sigma mode {mode!r}")
    std = arr.std(axis=0)
    return np.where(std > 0.0, std, 1.0)


def compute_prototypes(z, labels, old_classes) -> Prototypes:
    """Per-class mean and biased per-dimension variance of representations."""
    arr = _as_array(z)
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labs.size != arr.shape[0]:
        raise ValueError(f"{arr.shape[0]} rows but {labs.size} labels")
    ids = np.asarray(list(old_classes), dtype=np.int64)
    means, variances, counts = [], [], []
    for c in ids:
        rows = arr[labs == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no representative rows")
        mu = rows.mean(axis=0)
        means.append(mu)
        variances.append(((rows - mu) ** 2).mean(axis=0))
        counts.append(rows.shape[0])
    return Prototypes(class_ids=ids, mean=np.stack(means),
                      var=np.stack(variances), counts=np.array(counts, dtype=np.int64))


def sample_prototype_batch(protos: Prototypes, per_class: int,
                           seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw per_class Gaussian samples from every prototype.

    Returns (features, labels) with rows grouped class-major in
    protos.class_ids order; labels are the stored class ids."""
    if per_class < 1:
        raise ValueError("per_class must be at least 1")
    c, d = protos.mean.shape
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((c * per_class, d))
    mu = np.repeat(protos.mean, per_class, axis=0)
    sd = np.repeat(np.sqrt(protos.var), per_class, axis=0)
    labels = np.repeat(protos.class_ids, per_class)
    return mu + eps * sd, labels


def replay_loss(joint_logits: Tensor, label_idx) -> Tensor:
    """Mean cross-entropy on replayed prototypes over the full joint softmax.

    label_idx must already be joint head indices, i.e. < number of old
    classes (old classes occupy the leading columns)."""
    y = np.asarray(label_idx, dtype=np.int64).reshape(-1)
    return ad.nll_rows(ad.log_softmax_rows(joint_logits), y)


def distill_loss(z_frozen: Tensor, z_current: Tensor) -> Tensor:
    """Mean per-node L2 distance between frozen and current representations."""
    if z_frozen.shape != z_current.shape:
        raise ValueError(
            f"frozen {z_frozen.shape} vs current {z_current.shape} representations")
    return ad.mean(ad.l2_row_norm(ad.sub(z_frozen, z_current)))


def rampup(epoch: int, length: int, amplitude: float) -> float:
    """Sigmoid-shaped warmup: amplitude * exp(-5 (1 - t)^2), t = epoch/length.

    Clamps at the full amplitude once epoch reaches length."""
    if length < 1:
        raise ValueError("rampup length must be >= 1")
    if epoch >= length:
        return float(amplitude)
    t = epoch / length
    return float(amplitude * np.exp(-5.0 * (1.0 - t) ** 2))


def loss_betas(w: LossWeights, epoch: int) -> tuple[float, float]:
    return (rampup(epoch, w.rampup_length, w.alpha1),
            rampup(epoch, w.rampup_length, w.alpha2))


def total_loss(components: Mapping[str, float], w: LossWeights,
               epoch: int) -> tuple[float, dict]:
    """Combine per-term scalars into the scheduled total.

    Returns (total, report); the report carries every component plus the
    epoch's effective beta weights, in the order the loss CSV expects."""
    b1, b2 = loss_betas(w, epoch)
    c = {k: float(components.get(k, 0.0)) for k in
         ("pseudo", "self", "perturb", "replay", "distill")}
    novel = c["pseudo"] + b1 * c["self"] + b2 * c["perturb"]
    base = c["replay"] + w.omega_fd * c["distill"]
    total = novel + w.lam * base
    report = dict(c)
    report["beta1"] = b1
    report["beta2"] = b2
    report["total"] = total
    return total, report
