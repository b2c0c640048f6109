"""Two-phase training pipeline.

Phase 1 pretrains encoder plus old-class head with supervised cross-entropy.
Phase 2 freezes a copy of the encoder for distillation, attaches a novel
head and an extended joint head, and runs the combined discovery/retention
objective full-batch. Gradient routing falls out of the graph structure:

  pairwise + perturb   update encoder and novel head
  self-training        updates encoder and joint head
  replay               updates joint head only (samples bypass the encoder)
  distill              updates encoder only

The pretrained old head is kept read-only after phase 1 starts; the frozen
encoder copy is never registered with the optimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .graph import ClassSplit, Graph, normalize_rows, operator_for, validate_split
from .metrics import MetricsReport, aa_af, evaluate_joint
from .models import (EncoderParams, HeadParams, encode, encoder_parameters,
                     extend_head, freeze_encoder, head_forward, head_parameters,
                     init_encoder, init_head)
from .ncd_losses import (LossWeights, Prototypes, assign_pseudo_labels, batch_sigma,
                         compute_prototypes, distill_loss, loss_betas, pairwise_bce,
                         pairwise_similarity, perturb_consistency_loss,
                         perturb_representations, replay_loss, sample_prototype_batch,
                         self_training_loss, topk_pseudo_pairs, total_loss)
from .optim import AdamState, adam_init, adam_step

ALLOWED_HIDDEN = (16, 32, 128)
MAX_LAYERS = 64

# purpose tags for deriving independent seed streams from the master seed
_SEED_ENCODER = 1
_SEED_OLD_HEAD = 2
_SEED_NOVEL_HEAD = 3
_SEED_JOINT_EXT = 4
_SEED_PERTURB = 5
_SEED_REPLAY = 6
SEED_SPLIT = 7
SEED_SBM = 8


class TrainingDiverged(RuntimeError):
    """A loss went NaN/Inf; carries the offending epoch's per-term report."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


def derive_seed(*parts: int) -> int:
    """Independent deterministic child seed from the master seed and tags."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class TrainConfig:
    backbone: str = "gcn"
    hidden: int = 32
    layers: int = 2
    lr: float = 0.01
    weight_decay: float = 5e-4
    pretrain_epochs: int = 200
    ncd_epochs: int = 600
    patience: int = 50
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    use_pseudo: bool = True
    use_self: bool = True
    use_perturb: bool = True
    use_replay: bool = True
    use_distill: bool = True
    sigma_mode: str = "empirical"
    eq8_head: str = "novel"
    init_scale: float = 0.01
    per_class_replay: int = 32
    novel_alignment: str = "hungarian"
    normalize_features: bool = False
    debug_checks: bool = False

    def validate(self) -> None:
        if self.backbone not in ("gcn", "sage"):
            raise ValueError(f"backbone must be gcn or sage, got {self.backbone!r}")
        if self.hidden not in ALLOWED_HIDDEN:
            raise ValueError(f"hidden must be one of {ALLOWED_HIDDEN}, got {self.hidden}")
        if not 2 <= self.layers <= MAX_LAYERS:
            raise ValueError(f"layers must be in [2, {MAX_LAYERS}], got {self.layers}")
        if self.eq8_head not in ("novel", "joint"):
            raise ValueError(f"eq8_head must be novel or joint, got {self.eq8_head!r}")
        if self.sigma_mode not in ("empirical", "unit"):
            raise ValueError(f"sigma_mode must be empirical or unit, got {self.sigma_mode!r}")
        if self.novel_alignment not in ("hungarian", "positional"):
            raise ValueError(
                f"novel_alignment must be hungarian or positional, got {self.novel_alignment!r}")
        if self.weights.top_k < 1 or self.weights.top_k > self.hidden:
            raise ValueError(
                f"top_k must be in [1, hidden={self.hidden}], got {self.weights.top_k}")
        for name in ("lr", "pretrain_epochs", "ncd_epochs", "patience",
                     "per_class_replay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ModelState:
    backbone: str
    encoder: EncoderParams
    old_head: HeadParams
    frozen_encoder: EncoderParams | None = None
    novel_head: HeadParams | None = None
    joint_head: HeadParams | None = None
    adam: AdamState | None = None
    phase: int = 1


@dataclass
class PretrainLog:
    rows: list[dict]
    best_epoch: int
    best_val_acc: float
    best_snapshot: dict[str, np.ndarray]


@dataclass
class NcdLog:
    rows: list[dict]
    epochs_run: int
    best_epoch: int
    best_smoothed: float
    stopped_early: bool
    final_snapshot: dict[str, np.ndarray]


def named_parameters(state: ModelState) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) listing of every present model component."""
    out: list[tuple[str, Tensor]] = []
    for i, (w, b) in enumerate(zip(state.encoder.weights, state.encoder.biases)):
        out.append((f"encoder.w{i}", w))
        out.append((f"encoder.b{i}", b))
    out.append(("old_head.w", state.old_head.weight))
    out.append(("old_head.b", state.old_head.bias))
    if state.novel_head is not None:
        out.append(("novel_head.w", state.novel_head.weight))
        out.append(("novel_head.b", state.novel_head.bias))
    if state.joint_head is not None:
        out.append(("joint_head.w", state.joint_head.weight))
        out.append(("joint_head.b", state.joint_head.bias))
    return out


def _snapshot(named: list[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named}


def _restore(named: list[tuple[str, Tensor]], snap: dict[str, np.ndarray]) -> None:
    for name, t in named:
        t.data[...] = snap[name]


def _input_features(g: Graph, cfg: TrainConfig) -> np.ndarray:
    return normalize_rows(g.features) if cfg.normalize_features else g.features


def pretrain(g: Graph, split: ClassSplit,
             cfg: TrainConfig) -> tuple[ModelState, Prototypes, PretrainLog]:
    """Supervised phase-1 training on old-class nodes.

    Runs the full epoch budget; the final state ships to phase 2 and the
    prototypes are computed from it, so replayed samples match the encoder
    that phase 2 actually starts from. The best-validation snapshot is
    returned in the log for archival."""
    cfg.validate()
    validate_split(g, split)
    adj = operator_for(cfg.backbone, g)
    x = ad.constant(_input_features(g, cfg))
    dims = [g.feat_dim] + [cfg.hidden] * cfg.layers
    enc = init_encoder(cfg.backbone, dims, derive_seed(cfg.seed, _SEED_ENCODER))
    old_head = init_head(cfg.hidden, len(split.old_classes), "old",
                         derive_seed(cfg.seed, _SEED_OLD_HEAD))
    state = ModelState(backbone=cfg.backbone, encoder=enc, old_head=old_head)
    params = encoder_parameters(enc) + head_parameters(old_head)
    state.adam = adam_init(params, cfg.lr, cfg.weight_decay)

    old_index = {c: i for i, c in enumerate(split.old_classes)}
    tr = np.asarray(split.p1_train, dtype=np.int64)
    va = np.asarray(split.p1_val, dtype=np.int64)
    y_tr = np.array([old_index[int(c)] for c in g.labels[tr]], dtype=np.int64)
    y_va = np.array([old_index[int(c)] for c in g.labels[va]], dtype=np.int64)

    named = named_parameters(state)
    rows: list[dict] = []
    best_epoch, best_val, best_snap = -1, -np.inf, _snapshot(named)
    for epoch in range(cfg.pretrain_epochs):
        z = encode(enc, adj, x)
        logits = head_forward(old_head, ad.gather_rows(z, tr))
        loss = ad.nll_rows(ad.log_softmax_rows(logits), y_tr)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"pretrain loss is not finite at epoch {epoch}: {loss_val}",
                {"epoch": epoch, "loss": loss_val})
        grads = backward(loss, params)
        adam_step(params, grads, state.adam)

        z_post = encode(enc, adj, x).data
        val_logits = z_post[va] @ old_head.weight.data + old_head.bias.data
        val_acc = float(np.mean(np.argmax(val_logits, axis=1) == y_va))
        rows.append({"epoch": epoch, "loss": loss_val, "val_acc": val_acc})
        if val_acc > best_val:
            best_epoch, best_val, best_snap = epoch, val_acc, _snapshot(named)

    z_final = encode(enc, adj, x).data
    protos = compute_prototypes(z_final[tr], g.labels[tr], split.old_classes)
    state.frozen_encoder = freeze_encoder(enc)
    return state, protos, PretrainLog(rows=rows, best_epoch=best_epoch,
                                      best_val_acc=best_val, best_snapshot=best_snap)


def _leaf_params(t: Tensor) -> set[int]:
    """ids of grad-requiring leaves reachable from t."""
    out: set[int] = set()
    stack, seen = [t], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.requires_grad and not node._parents:
            out.add(id(node))
        stack.extend(node._parents)
    return out


def ncd_train(state: ModelState, protos: Prototypes, g: Graph, split: ClassSplit,
              cfg: TrainConfig) -> tuple[ModelState, NcdLog]:
    """Phase-2 discovery loop with early stopping on the smoothed total loss.

    Freezes a copy of the incoming encoder as the distillation anchor,
    attaches novel and joint heads, and trains full-batch on phase-2 train
    nodes. Stops once the exponentially smoothed total has not improved by
    more than 1e-4 for `patience` epochs and restores the best snapshot."""
    cfg.validate()
    validate_split(g, split)
    if protos.mean.shape[0] != len(split.old_classes):
        raise ValueError(f"{protos.mean.shape[0]} prototypes for "
                         f"{len(split.old_classes)} old classes")
    w = cfg.weights
    adj = operator_for(cfg.backbone, g)
    x = ad.constant(_input_features(g, cfg))
    n_old, n_new = len(split.old_classes), len(split.new_classes)
    repr_dim = state.encoder.repr_dim

    state.frozen_encoder = freeze_encoder(state.encoder)
    state.novel_head = init_head(repr_dim, n_new, "novel",
                                 derive_seed(cfg.seed, _SEED_NOVEL_HEAD))
    state.joint_head = extend_head(state.old_head, n_new, cfg.init_scale,
                                   derive_seed(cfg.seed, _SEED_JOINT_EXT))
    state.phase = 2
    params = (encoder_parameters(state.encoder)
              + head_parameters(state.novel_head)
              + head_parameters(state.joint_head))
    state.adam = adam_init(params, cfg.lr, cfg.weight_decay)

    tr2 = np.asarray(split.p2_train, dtype=np.int64)
    z_frozen = encode(state.frozen_encoder, adj, x).data  # constant all phase
    zf_u = ad.constant(z_frozen[tr2])
    old_index = {c: i for i, c in enumerate(split.old_classes)}
    frozen_ref = [a.data.copy() for a in
                  state.frozen_encoder.weights + state.frozen_encoder.biases]

    named = named_parameters(state)
    zero = ad.constant([[0.0]])
    rows: list[dict] = []
    smoothed = None
    best_smoothed, best_epoch, best_snap = np.inf, -1, None
    wait = 0
    epochs_run = 0
    stopped_early = False
    # totals from different beta schedules are different objectives, so the
    # stopping rule only compares epochs after the warmup ramp has finished
    track_from = w.rampup_length

    for epoch in range(cfg.ncd_epochs):
        z_all = encode(state.encoder, adj, x)
        z_u = ad.gather_rows(z_all, tr2)
        u_logits = head_forward(state.novel_head, z_u)
        joint_u = None

        if cfg.use_pseudo:
            sim = pairwise_similarity(u_logits)
            pair_targets = topk_pseudo_pairs(z_u.data, w.top_k)
            l_pseudo = pairwise_bce(sim, pair_targets)
        else:
            l_pseudo = zero

        if cfg.use_self:
            pseudo = assign_pseudo_labels(u_logits.data, n_old)
            joint_u = head_forward(state.joint_head, z_u)
            l_self = self_training_loss(joint_u, pseudo)
        else:
            l_self = zero

        if cfg.use_perturb:
            sigma = batch_sigma(z_u.data, cfg.sigma_mode)
            z_pert = perturb_representations(z_u, w.eta, sigma,
                                             derive_seed(cfg.seed, _SEED_PERTURB, epoch))
            if cfg.eq8_head == "novel":
                clean, pert = u_logits, head_forward(state.novel_head, z_pert)
            else:
                if joint_u is None:
                    joint_u = head_forward(state.joint_head, z_u)
                clean, pert = joint_u, head_forward(state.joint_head, z_pert)
            l_perturb = perturb_consistency_loss(clean, pert)
        else:
            l_perturb = zero

        if cfg.use_replay:
            feats_r, labels_r = sample_prototype_batch(
                protos, cfg.per_class_replay, derive_seed(cfg.seed, _SEED_REPLAY, epoch))
            idx_r = np.array([old_index[int(c)] for c in labels_r], dtype=np.int64)
            l_replay = replay_loss(head_forward(state.joint_head, ad.constant(feats_r)),
                                   idx_r)
        else:
            l_replay = zero

        l_distill = distill_loss(zf_u, z_u) if cfg.use_distill else zero

        b1, b2 = loss_betas(w, epoch)
        novel_term = ad.add(ad.add(l_pseudo, ad.mul_scalar(l_self, b1)),
                            ad.mul_scalar(l_perturb, b2))
        base_term = ad.add(l_replay, ad.mul_scalar(l_distill, w.omega_fd))
        total_t = ad.add(novel_term, ad.mul_scalar(base_term, w.lam))

        components = {"pseudo": l_pseudo.item(), "self": l_self.item(),
                      "perturb": l_perturb.item(), "replay": l_replay.item(),
                      "distill": l_distill.item()}
        total_f, report = total_loss(components, w, epoch)
        report["epoch"] = epoch
        if not all(np.isfinite(v) for v in report.values()):
            raise TrainingDiverged(
                f"phase-2 loss not finite at epoch {epoch}: {report}", report)

        if cfg.debug_checks:
            if cfg.use_replay:
                enc_ids = {id(p) for p in encoder_parameters(state.encoder)}
                if _leaf_params(l_replay) & enc_ids:
                    raise AssertionError("replay loss reaches encoder parameters")
            for ref, cur in zip(frozen_ref, state.frozen_encoder.weights
                                + state.frozen_encoder.biases):
                if not np.array_equal(ref, cur.data):
                    raise AssertionError("frozen encoder was mutated")
            if abs(total_f - total_t.item()) > 1e-9 * max(1.0, abs(total_f)):
                raise AssertionError("tensor total and reported total disagree")

        grads = backward(total_t, params)
        adam_step(params, grads, state.adam)
        rows.append(report)
        epochs_run = epoch + 1

        if epoch >= track_from:
            smoothed = total_f if smoothed is None else 0.9 * smoothed + 0.1 * total_f
            if smoothed < best_smoothed - 1e-4:
                best_smoothed, best_epoch, best_snap = smoothed, epoch, _snapshot(named)
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    stopped_early = True
                    break

    final_snap = _snapshot(named)
    if best_snap is not None:
        _restore(named, best_snap)
    return state, NcdLog(rows=rows, epochs_run=epochs_run, best_epoch=best_epoch,
                         best_smoothed=float(best_smoothed),
                         stopped_early=stopped_early, final_snapshot=final_snap)


def stage_report(state: ModelState, g: Graph, split: ClassSplit, cfg: TrainConfig,
                 phase1_old_acc: float | None = None) -> MetricsReport:
    """Joint evaluation plus the stage performance matrix and AA/AF."""
    rep = evaluate_joint(state, g, split, cfg.novel_alignment, cfg.normalize_features)
    rep.seed = cfg.seed
    if rep.phase == 1:
        rep.perf = np.array([[rep.old_acc]])
        rep.aa, rep.af = aa_af(rep.perf, 1)
    else:
        if phase1_old_acc is None:
            raise ValueError("phase-2 report needs the phase-1 old-class accuracy")
        rep.perf = np.array([[phase1_old_acc, np.nan],
                             [rep.old_acc, rep.new_acc]])
        rep.aa, rep.af = aa_af(rep.perf, 2)
    return rep


def run_depth_sweep(g: Graph, split: ClassSplit, cfg: TrainConfig,
                    layer_counts: list[int]) -> list[dict]:
    """Full pipeline per depth with everything else held fixed."""
    out = []
    for nl in layer_counts:
        c = replace(cfg, layers=int(nl))
        state, protos, _ = pretrain(g, split, c)
        m11 = evaluate_joint(state, g, split, c.novel_alignment,
                             c.normalize_features).old_acc
        state, _ = ncd_train(state, protos, g, split, c)
        rep = stage_report(state, g, split, c, m11)
        out.append({"layers": int(nl), "old_acc": rep.old_acc, "new_acc": rep.new_acc,
                    "all_acc": rep.all_acc, "aa": rep.aa, "af": rep.af})
    return out


def save_state(path: str, state: ModelState, meta_extra: dict | None = None) -> None:
    meta = {
        "backbone": state.backbone,
        "dims": list(state.encoder.dims),
        "phase": state.phase,
        "num_old": state.old_head.num_outputs,
        "num_new": state.novel_head.num_outputs if state.novel_head else 0,
        "step": state.adam.step if state.adam else 0,
    }
    meta.update(meta_extra or {})
    save_checkpoint(path, [(n, t.data) for n, t in named_parameters(state)], meta)


def load_state(path: str) -> tuple[ModelState, dict]:
    meta, tensors = load_checkpoint(path)
    backbone = meta["backbone"]
    dims = [int(d) for d in meta["dims"]]
    n_layers = len(dims) - 1
    enc = EncoderParams(
        backbone=backbone, dims=dims,
        weights=[ad.parameter(tensors[f"encoder.w{i}"]) for i in range(n_layers)],
        biases=[ad.parameter(tensors[f"encoder.b{i}"]) for i in range(n_layers)])
    old = HeadParams(role="old", weight=ad.parameter(tensors["old_head.w"]),
                     bias=ad.parameter(tensors["old_head.b"]))
    state = ModelState(backbone=backbone, encoder=enc, old_head=old,
                       phase=int(meta.get("phase", 1)))
    if "novel_head.w" in tensors:
        state.novel_head = HeadParams(role="novel",
                                      weight=ad.parameter(tensors["novel_head.w"]),
                                      bias=ad.parameter(tensors["novel_head.b"]))
    if "joint_head.w" in tensors:
        state.joint_head = HeadParams(role="joint",
                                      weight=ad.parameter(tensors["joint_head.w"]),
                                      bias=ad.parameter(tensors["joint_head.b"]))
    return state, meta
