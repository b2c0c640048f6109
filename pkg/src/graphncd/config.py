"""Run configuration: flat key=value text (or the same keys as JSON).

Unknown keys are rejected so typos fail loudly. Values are typed by the
default: booleans accept true/false/yes/no/1/0, comma lists split on ','.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .ncd_losses import LossWeights
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


@dataclass
class RunConfig:
    # dataset
    dataset: str = "sbm"                 # "sbm" or "files"
    edges: str = ""
    features: str = ""
    labels: str = ""
    sbm_blocks: list[int] = field(default_factory=lambda: [100, 100, 100, 100, 100])
    sbm_p_in: float = 0.15
    sbm_p_out: float = 0.01
    sbm_feat_dim: int = 16
    sbm_feat_shift: float = 1.0
    # split
    split_file: str = ""                 # empty: generate and save split.json
    old_classes: list[int] = field(default_factory=lambda: [0, 1, 2])
    new_classes: list[int] = field(default_factory=lambda: [3, 4])
    split_ratios: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    # model / training
    backbone: str = "gcn"
    hidden: int = 32
    layers: int = 2
    lr: float = 0.01
    weight_decay: float = 5e-4
    pretrain_epochs: int = 200
    ncd_epochs: int = 600
    patience: int = 50
    seed: int = 0
    alpha1: float = 0.1
    alpha2: float = 4.0
    rampup_length: int = 100
    eta: float = 0.2
    lam: float = 1.0
    omega_fd: float = 10.0
    top_k: int = 5
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
    # outputs / wiring
    out: str = "runs/out"
    pretrain_dir: str = ""               # empty: same as out
    sweep_layers: list[int] = field(default_factory=lambda: [2, 4, 8])
    # optional published reference numbers for an informational comparison
    reference_old: float = float("nan")
    reference_new: float = float("nan")
    reference_all: float = float("nan")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            backbone=self.backbone, hidden=self.hidden, layers=self.layers,
            lr=self.lr, weight_decay=self.weight_decay,
            pretrain_epochs=self.pretrain_epochs, ncd_epochs=self.ncd_epochs,
            patience=self.patience, seed=self.seed,
            weights=LossWeights(alpha1=self.alpha1, alpha2=self.alpha2,
                                rampup_length=self.rampup_length, eta=self.eta,
                                lam=self.lam, omega_fd=self.omega_fd,
                                top_k=self.top_k),
            use_pseudo=self.use_pseudo, use_self=self.use_self,
            use_perturb=self.use_perturb, use_replay=self.use_replay,
            use_distill=self.use_distill, sigma_mode=self.sigma_mode,
            eq8_head=self.eq8_head, init_scale=self.init_scale,
            per_class_replay=self.per_class_replay,
            novel_alignment=self.novel_alignment,
            normalize_features=self.normalize_features,
            debug_checks=self.debug_checks)


_BOOL_WORDS = {"true": True, "yes": True, "1": True, "on": True,
               "false": False, "no": False, "0": False, "off": False}

# keys that change results; everything else is wiring and stays out of the hash
_HASH_EXCLUDE = {"out", "pretrain_dir", "edges", "features", "labels", "split_file"}


def _parse_value(name: str, text: str, default) -> object:
    text = text.strip()
    try:
        if isinstance(default, bool):
            word = text.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[word]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            elem = type(default[0]) if default else float
            return [elem(tok) for tok in text.split(",") if tok.strip() != ""]
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc


def parse_config_text(text: str) -> RunConfig:
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    values: dict[str, object] = {}

    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from exc
        for k, v in raw.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            if isinstance(v, str):
                values[k] = _parse_value(k, v, known[k])
            elif isinstance(known[k], bool) and not isinstance(v, bool):
                raise ConfigError(f"config key {k!r}: expected boolean")
            elif isinstance(known[k], list):
                elem = type(known[k][0]) if known[k] else float
                values[k] = [elem(x) for x in v]
            elif isinstance(known[k], float):
                values[k] = float(v)
            elif isinstance(known[k], int) and not isinstance(known[k], bool):
                values[k] = int(v)
            else:
                values[k] = v
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"config line {lineno}: expected key=value, got {body!r}")
            key, _, val = body.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, known[key])

    cfg = RunConfig(**values)  # type: ignore[arg-type]
    _validate(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc


def _validate(cfg: RunConfig) -> None:
    if cfg.dataset not in ("sbm", "files"):
        raise ConfigError(f"dataset must be sbm or files, got {cfg.dataset!r}")
    if cfg.dataset == "files":
        for key in ("edges", "features", "labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"dataset=files needs the {key!r} path")
    if len(cfg.split_ratios) != 3:
        raise ConfigError(f"split_ratios needs 3 entries, got {cfg.split_ratios}")
    if set(cfg.old_classes) & set(cfg.new_classes):
        raise ConfigError("old_classes and new_classes overlap")
    if not cfg.old_classes or not cfg.new_classes:
        raise ConfigError("old_classes and new_classes must both be non-empty")
    try:
        cfg.train_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def config_hash(cfg: RunConfig, dataset_hash: str, split_hash: str) -> str:
    """Content hash over everything that determines the run's numbers."""
    payload = {k: v for k, v in asdict(cfg).items() if k not in _HASH_EXCLUDE}
    for k, v in list(payload.items()):
        if isinstance(v, float) and v != v:  # NaN reference slots
            payload[k] = None
    payload["dataset_sha256"] = dataset_hash
    payload["split_sha256"] = split_hash
    return _digest(payload)


# everything phase 1 depends on; phase-2 knobs may change without invalidating
# pretrained artifacts
_PHASE1_KEYS = ("dataset", "sbm_blocks", "sbm_p_in", "sbm_p_out", "sbm_feat_dim",
                "sbm_feat_shift", "old_classes", "new_classes", "split_ratios",
                "backbone", "hidden", "layers", "lr", "weight_decay",
                "pretrain_epochs", "seed", "normalize_features")


def phase1_hash(cfg: RunConfig, dataset_hash: str, split_hash: str) -> str:
    payload = {k: getattr(cfg, k) for k in _PHASE1_KEYS}
    payload["dataset_sha256"] = dataset_hash
    payload["split_sha256"] = split_hash
    return _digest(payload)
