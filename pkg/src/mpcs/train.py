"""MPCS pre-training, fine-tuning / linear evaluation and cross-validation."""
from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import __version__
from .dataset import (
    MAGNIFICATIONS,
    MagnificationFactor,
    MagnifiedSample,
    SplitPlan,
    make_patches,
    subsample_labels,
)
from .errors import CollapseDetected, ConfigError, EmptyLabelSubset
from .evaluate import EvalReport, PredictionRecord, aggregate, build_report
from .loss import nt_xent_loss
from .model import (
    Classifier,
    ClassifierHead,
    EncoderAdapter,
    ProjectionHead,
    build_encoder,
    to_tensor,
)
from .sampler import PairStrategy, derive_rng, sample_pair
from .transforms import TransformPolicy, apply_pair, apply_uniform, resize, sample_params, transform_view

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mpcs-checkpoint"
CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# configs
# ----------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    strategy: PairStrategy = field(default_factory=PairStrategy.ordered)
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    temperature: float = 0.01
    input_size: int = 64
    seed: int = 0
    encoder: str = "small_cnn"
    encoder_weights: str | None = None
    weight_decay: float = 0.0
    head_bias: bool = True
    head_dims: list | None = None
    exclude_positive: bool = False
    transforms: dict = field(default_factory=dict)
    checkpoint_every: int = 0
    collapse_threshold: float = 1e-6
    collapse_patience: int = 3

    def __post_init__(self):
        if isinstance(self.strategy, dict):
            self.strategy = PairStrategy.from_config(self.strategy)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.optimizer not in ("adam", "lars"):
            raise ConfigError(f"unknown optimizer {self.optimizer}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.to_config()
        return d


@dataclass
class FinetuneConfig:
    learning_rate: float = 2e-5
    batch_size: int = 32
    input_size: int = 224
    dropout: float = 0.3
    label_fraction: float = 1.0
    mode: str = "full"
    seed: int = 0
    epochs: int = 30
    patience: int = 10
    weight_decay: float = 0.0
    magnifications: list | None = None  # training magnifications (None = all four)
    eval_magnifications: list | None = None
    encoder: str = "small_cnn"
    encoder_weights: str | None = None
    n_classes: int | None = None
    transforms: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("full", "linear"):
            raise ConfigError(f"mode must be full or linear, got {self.mode}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def train_mfs(self):
        return [MagnificationFactor(m) for m in (self.magnifications or MAGNIFICATIONS)]

    def eval_mfs(self):
        return [MagnificationFactor(m) for m in (self.eval_magnifications or self.magnifications or MAGNIFICATIONS)]

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# instrumentation
# ----------------------------------------------------------------------------


class Audit:
    """Counts label reads per phase and records the specimens in every batch."""

    def __init__(self):
        self.phase = "idle"
        self.label_reads = defaultdict(int)
        self.batches = []

    def record(self, ids) -> None:
        self.batches.append((self.phase, tuple(ids)))

    def seen(self, phase: str | None = None) -> set[str]:
        return {i for p, ids in self.batches for i in ids if phase is None or p == phase}

    def wrap(self, samples: Sequence[MagnifiedSample]) -> list["AuditedSample"]:
        return [AuditedSample(s, self) for s in samples]


class AuditedSample:
    """Read-only proxy over a sample whose ``label`` accessor is counted."""

    def __init__(self, sample: MagnifiedSample, audit: Audit):
        self._sample = sample
        self._audit = audit

    @property
    def label(self) -> int:
        self._audit.label_reads[self._audit.phase] += 1
        return self._sample.label

    def __getattr__(self, name):
        return getattr(self._sample, name)


class _Phase:
    def __init__(self, audit, phase):
        self.audit, self.phase = audit, phase

    def __enter__(self):
        if self.audit is not None:
            self.prev, self.audit.phase = self.audit.phase, self.phase

    def __exit__(self, *exc):
        if self.audit is not None:
            self.audit.phase = self.prev


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Encoder + head weights with the manifest needed to rebuild and reproduce them.

    On disk: a torch container ``{"format", "version", "tensors", "manifest"}``
    where ``tensors`` maps ``encoder.<name>`` / ``head.<name>`` to tensors and
    ``manifest`` is a JSON string.
    """

    encoder_name: str
    encoder_state: dict
    head_kind: str  # "projection" | "classifier" | "none"
    head_state: dict
    head_shape: dict
    manifest: dict
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def build_encoder(self) -> EncoderAdapter:
        enc = build_encoder(self.encoder_name, input_size=self.manifest.get("encoder_input_size"))
        enc.load_state_dict(self.encoder_state)
        enc.weights_source = "checkpoint"
        return enc

    def build_head(self) -> nn.Module:
        if self.head_kind == "projection":
            head = ProjectionHead(**self.head_shape)
        elif self.head_kind == "classifier":
            head = ClassifierHead(**self.head_shape)
        else:
            raise ValueError("checkpoint carries no head")
        head.load_state_dict(self.head_state)
        return head

    def build_classifier(self) -> Classifier:
        if self.head_kind != "classifier":
            raise ValueError("checkpoint holds no classifier head")
        return Classifier(self.build_encoder(), self.build_head())

    @property
    def encoder_id(self) -> str:
        from .model import state_hash

        enc = build_encoder(self.encoder_name)
        enc.load_state_dict(self.encoder_state)
        return state_hash(enc)[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {f"encoder.{k}": v for k, v in self.encoder_state.items()}
        tensors.update({f"head.{k}": v for k, v in self.head_state.items()})
        meta = {
            "encoder_name": self.encoder_name,
            "head_kind": self.head_kind,
            "head_shape": self.head_shape,
            "manifest": self.manifest,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "history": self.history,
            "code_version": __version__,
        }
        container = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "tensors": tensors,
            "manifest": json.dumps(meta, sort_keys=True, default=_json_default),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(container, tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        container = torch.load(path, map_location="cpu", weights_only=True)
        if container.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an MPCS checkpoint")
        if container.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {container.get('version')}")
        meta = json.loads(container["manifest"])
        tensors = container["tensors"]
        return cls(
            encoder_name=meta["encoder_name"],
            encoder_state={k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")},
            head_kind=meta["head_kind"],
            head_state={k[5:]: v for k, v in tensors.items() if k.startswith("head.")},
            head_shape=meta["head_shape"],
            manifest=meta["manifest"],
            epoch=meta["epoch"],
            rng_state=meta["rng_state"],
            history=meta["history"],
        )


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, set):
        return sorted(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class MetricLog:
    """Append-only JSON-lines metric log (one line per epoch)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []

    def append(self, **row) -> None:
        self.rows.append(row)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# optimisers
# ----------------------------------------------------------------------------


class LARS(torch.optim.Optimizer):
    """Layer-wise adaptive rate scaling around SGD with momentum.

    Biases and normalisation parameters (1-D tensors) skip adaptation and
    weight decay.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-6, trust_coefficient=1e-3):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coefficient=trust_coefficient))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if p.ndim > 1:
                    g = g.add(p, alpha=group["weight_decay"])
                    p_norm, g_norm = torch.norm(p), torch.norm(g)
                    if p_norm > 0 and g_norm > 0:
                        g = g.mul(group["trust_coefficient"] * p_norm / g_norm)
                buf = self.state[p].setdefault("momentum_buffer", torch.zeros_like(p))
                buf.mul_(group["momentum"]).add_(g)
                p.add_(buf, alpha=-group["lr"])


def make_optimizer(name: str, params, lr: float, weight_decay: float = 0.0):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == "lars":
        return LARS(params, lr=lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name}")


# ----------------------------------------------------------------------------
# pre-training
# ----------------------------------------------------------------------------


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # a single leftover view pair has no negatives
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def pretrain(cfg: PretrainConfig, data: Sequence[MagnifiedSample], enc: EncoderAdapter | None = None,
             *, run_dir=None, audit: Audit | None = None, metric_log: MetricLog | None = None) -> Checkpoint:
    """Self-supervised MPCS pre-training; never reads labels.

    Each epoch shuffles the specimens with a stream derived from
    ``(seed, epoch)``, draws one magnification pair and one shared transform
    per specimen, and minimises NT-Xent over the 2N projected views.
    """
    if not data:
        raise ValueError("pretrain needs at least one specimen")
    if len(data) < 2:
        raise ValueError("pretrain needs at least two specimens to form negatives")
    torch.manual_seed(cfg.seed)
    enc = enc or build_encoder(cfg.encoder, cfg.encoder_weights)
    head = ProjectionHead.for_encoder(enc, bias=cfg.head_bias, dims=cfg.head_dims)
    opt = make_optimizer(cfg.optimizer, list(enc.parameters()) + list(head.parameters()),
                         cfg.learning_rate, cfg.weight_decay)
    policy = TransformPolicy.from_config("pretrain", cfg.transforms, cfg.input_size)
    metric_log = metric_log or MetricLog(Path(run_dir) / "metrics.jsonl" if run_dir else None)
    run_dir = Path(run_dir) if run_dir else None
    manifest = {
        "kind": "pretrain",
        "config": cfg.to_dict(),
        "transform_policy": policy.to_dict(),
        "loss": {"name": "nt_xent", "temperature": cfg.temperature, "reduction": "mean over 2N anchors",
                 "exclude_positive": cfg.exclude_positive},
        "encoder_input_size": None,
        "n_specimens": len(data),
    }
    history = []
    low_spread = 0
    enc.train()
    head.train()
    with _Phase(audit, "pretrain"):
        for epoch in range(cfg.epochs):
            rng = derive_rng(cfg.seed, epoch, 0)
            order = rng.permutation(len(data))
            losses, spreads = [], []
            t0 = time.perf_counter()
            for idx in _batches(order, cfg.batch_size):
                views = []
                for i in idx:
                    pair = sample_pair(cfg.strategy, data[i], rng)
                    p1 = sample_params(policy, rng, pair.view1.shape[:2])
                    if policy.shared:
                        pair = apply_uniform(p1, pair)
                    else:
                        pair = apply_pair(p1, sample_params(policy, rng, pair.view2.shape[:2]), pair)
                    views += [pair.view1, pair.view2]
                if audit is not None:
                    audit.record(data[i].specimen_id for i in idx)
                z = head(enc(to_tensor(np.stack(views))))
                loss = nt_xent_loss(z, cfg.temperature, exclude_positive=cfg.exclude_positive)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                with torch.no_grad():
                    zn = F.normalize(z.detach(), dim=1)
                    spreads.append(zn.std(dim=0).mean().item())
            row = {"epoch": epoch, "split": "pretrain", "loss": float(np.mean(losses)), "ila": None,
                   "pla": None, "embedding_std": float(np.mean(spreads)),
                   "seconds": round(time.perf_counter() - t0, 3)}
            history.append(row)
            metric_log.append(**row)
            log.info("pretrain epoch %d loss %.4f std %.4g", epoch, row["loss"], row["embedding_std"])
            low_spread = low_spread + 1 if row["embedding_std"] < cfg.collapse_threshold else 0
            if low_spread >= cfg.collapse_patience:
                raise CollapseDetected(
                    f"embedding std below {cfg.collapse_threshold} for {low_spread} epochs "
                    f"(last {row['embedding_std']:.3g}) at epoch {epoch}"
                )
            if run_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                _pretrain_checkpoint(enc, head, manifest, epoch + 1, history, cfg).save(
                    run_dir / f"pretrain_epoch{epoch + 1:04d}.pt")
    ckpt = _pretrain_checkpoint(enc, head, manifest, cfg.epochs, history, cfg)
    if run_dir:
        ckpt.save(run_dir / "pretrain.pt")
    return ckpt


def _pretrain_checkpoint(enc, head, manifest, epoch, history, cfg) -> Checkpoint:
    return Checkpoint(
        encoder_name=enc.name,
        encoder_state=_state(enc),
        head_kind="projection",
        head_state=_state(head),
        head_shape={"in_dim": head.in_dim, "hidden_dim": head.hidden_dim, "out_dim": head.out_dim,
                    "bias": cfg.head_bias},
        manifest=manifest,
        epoch=epoch,
        rng_state={"seed": cfg.seed, "streams": "SeedSequence([seed, epoch, worker])", "next_epoch": epoch},
        history=list(history),
    )


def random_init_checkpoint(encoder: str = "small_cnn", seed: int = 0, weights: str | None = None) -> Checkpoint:
    """Checkpoint holding a freshly initialised (or externally weighted) encoder."""
    torch.manual_seed(seed)
    enc = build_encoder(encoder, weights)
    return Checkpoint(encoder, _state(enc), "none", {}, {},
                      {"kind": "init", "encoder": encoder, "seed": seed, "weights_source": enc.weights_source})


# ----------------------------------------------------------------------------
# fine-tuning and linear evaluation
# ----------------------------------------------------------------------------


def _image_list(samples, mfs):
    return [(s, mf) for s in samples for mf in mfs]


@torch.no_grad()
def _features(enc: EncoderAdapter, images: Sequence[np.ndarray], input_size: int, batch_size: int = 128):
    enc.eval()
    out = []
    for i in range(0, len(images), batch_size):
        chunk = np.stack([resize(im, input_size) for im in images[i:i + batch_size]])
        out.append(enc(to_tensor(chunk)))
    return torch.cat(out) if out else torch.empty(0, enc.feature_dim)


@torch.no_grad()
def predict(model: Classifier, samples, magnifications=MAGNIFICATIONS, input_size: int = 64,
            batch_size: int = 128) -> list[PredictionRecord]:
    """Eval-mode predictions, one record per (specimen, magnification)."""
    model.eval()
    items = _image_list(samples, [MagnificationFactor(m) for m in magnifications])
    feats = _features(model.encoder, [s.image(mf) for s, mf in items], input_size, batch_size)
    probs = torch.softmax(model.head(feats).double(), dim=1).numpy()
    return [PredictionRecord.from_scores(s.specimen_id, s.patient_id, mf, s.label, p / p.sum())
            for (s, mf), p in zip(items, probs)]


@torch.no_grad()
def predict_patches(model: Classifier, samples, magnifications=MAGNIFICATIONS, patch_size: int = 32,
                    stride: int = 32, input_size: int = 64, batch_size: int = 128) -> list[PredictionRecord]:
    """Patch-level predictions (``patch_coord`` set); :func:`build_report` votes them per image."""
    model.eval()
    out = []
    for s in samples:
        for mf in magnifications:
            mf = MagnificationFactor(mf)
            grid = make_patches(s.image(mf), patch_size, stride, f"{s.specimen_id}_{int(mf)}")
            feats = _features(model.encoder, [p for _, _, p in grid.patches], input_size, batch_size)
            probs = torch.softmax(model.head(feats).double(), dim=1).numpy()
            out += [PredictionRecord.from_scores(s.specimen_id, s.patient_id, mf, s.label, pr / pr.sum(), (r, c))
                    for (r, c, _), pr in zip(grid.patches, probs)]
    return out


def _split(plan: SplitPlan, fold: int, data, fraction: float, seed: int):
    by_id = {s.specimen_id: s for s in data}
    train_folds = plan.train_folds(fold)
    labeled = subsample_labels(plan, train_folds, fraction, seed)
    if not labeled:
        raise EmptyLabelSubset(f"no labeled specimens for fraction {fraction}")
    train = [by_id[i] for i in sorted(labeled) if i in by_id]
    val = [by_id[i] for i in plan.specimens_in([plan.validation_fold(fold)]) if i in by_id]
    test = [by_id[i] for i in plan.specimens_in([fold]) if i in by_id]
    if not train:
        raise EmptyLabelSubset("labeled subset has no specimens in the supplied data")
    return train, val, test


def finetune(cfg: FinetuneConfig, ckpt: Checkpoint | None, plan: SplitPlan, fold: int,
             data: Sequence[MagnifiedSample], *, audit: Audit | None = None, run_dir=None,
             metric_log: MetricLog | None = None) -> Checkpoint:
    """Supervised training on the labeled share of the train folds of ``fold``.

    The fold after the test fold is held out for model selection (best
    validation ILA, earliest epoch on ties). ``mode="linear"`` freezes the
    encoder and trains only the classifier head on cached features.
    """
    torch.manual_seed(cfg.seed)
    ckpt = ckpt or random_init_checkpoint(cfg.encoder, cfg.seed, cfg.encoder_weights)
    enc = ckpt.build_encoder()
    with _Phase(audit, "finetune"):
        train, val, test = _split(plan, fold, data, cfg.label_fraction, cfg.seed)
        n_classes = cfg.n_classes or (max(plan.labels.values()) + 1)
        head = ClassifierHead(enc.feature_dim, n_classes, cfg.dropout)
        model = Classifier(enc, head)
        metric_log = metric_log or MetricLog(Path(run_dir) / "metrics.jsonl" if run_dir else None)
        train_items = _image_list(train, cfg.train_mfs())
        labels = torch.tensor([s.label for s, _ in train_items])
        if cfg.mode == "linear":
            history, best = _fit_linear(cfg, model, train_items, labels, val, metric_log, audit)
        else:
            history, best = _fit_full(cfg, model, train_items, labels, val, metric_log, audit)
        model.load_state_dict(best)
    manifest = {
        "kind": "finetune",
        "config": cfg.to_dict(),
        "fold": fold,
        "validation_fold": plan.validation_fold(fold),
        "init": ckpt.manifest.get("kind"),
        "init_encoder": ckpt.encoder_name,
        "n_labeled_specimens": len(train),
        "test_specimens": [s.specimen_id for s in test],
        "selection": "best validation ILA",
        "encoder_input_size": None,
    }
    out = Checkpoint(
        encoder_name=enc.name,
        encoder_state=_state(model.encoder),
        head_kind="classifier",
        head_state=_state(model.head),
        head_shape={"in_dim": enc.feature_dim, "n_classes": n_classes, "dropout": cfg.dropout},
        manifest=manifest,
        epoch=len(history),
        rng_state={"seed": cfg.seed},
        history=history,
    )
    if run_dir:
        out.save(Path(run_dir) / f"finetune_fold{fold}.pt")
    return out


def _val_ila(model, val, cfg, feats=None) -> float | None:
    if not val:
        return None
    if feats is not None:
        model.head.eval()
        with torch.no_grad():
            pred = model.head(feats[0]).argmax(1)
        return float((pred == feats[1]).double().mean())
    preds = predict(model, val, cfg.eval_mfs(), cfg.input_size)
    return float(np.mean([p.correct for p in preds]))


def _fit_linear(cfg, model, train_items, labels, val, metric_log, audit):
    enc = model.encoder
    for p in enc.parameters():
        p.requires_grad_(False)
    if audit is not None:
        audit.record(s.specimen_id for s, _ in train_items)
    feats = _features(enc, [s.image(mf) for s, mf in train_items], cfg.input_size)
    model.head.fit_standardization(feats)
    val_items = _image_list(val, cfg.eval_mfs())
    val_feats = (_features(enc, [s.image(mf) for s, mf in val_items], cfg.input_size),
                 torch.tensor([s.label for s, _ in val_items])) if val else None
    opt = make_optimizer("adam", model.head.parameters(), cfg.learning_rate, cfg.weight_decay)
    return _loop(cfg, model, opt, len(train_items), metric_log,
                 lambda idx: (model.head(feats[idx]), labels[idx]),
                 lambda: _val_ila(model, val, cfg, val_feats), train_mode=lambda: model.head.train())


def _fit_full(cfg, model, train_items, labels, val, metric_log, audit):
    policy = TransformPolicy.from_config("finetune", cfg.transforms, cfg.input_size)
    opt = make_optimizer("adam", model.parameters(), cfg.learning_rate, cfg.weight_decay)
    state = {"rng": None}

    def batch(idx):
        rng = state["rng"]
        images = []
        for i in idx:
            s, mf = train_items[i]
            img = s.image(mf)
            images.append(transform_view(sample_params(policy, rng, img.shape[:2]), img))
        if audit is not None:
            audit.record(train_items[i][0].specimen_id for i in idx)
        return model(to_tensor(np.stack(images))), labels[idx]

    return _loop(cfg, model, opt, len(train_items), metric_log, batch,
                 lambda: _val_ila(model, val, cfg), train_mode=lambda: model.train(), state=state)


def _loop(cfg, model, opt, n, metric_log, forward, validate, train_mode, state=None):
    history = []
    best_state, best_score, stale = _state(model), -1.0, 0
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, epoch, 0)
        if state is not None:
            state["rng"] = rng
        order = rng.permutation(n)
        train_mode()
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue
            logits, y = forward(torch.as_tensor(idx))
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        score = validate()
        row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)) if losses else None,
               "ila": score, "pla": None}
        history.append(row)
        metric_log.append(**row)
        current = score if score is not None else -float(row["loss"] or 0.0)
        if current > best_score:
            best_state, best_score, stale = _state(model), current, 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    return history, best_state


def evaluate_checkpoint(ckpt: Checkpoint, samples, magnifications=MAGNIFICATIONS, input_size: int = 64,
                        fold: int | None = None) -> tuple[EvalReport, list[PredictionRecord]]:
    model = ckpt.build_classifier()
    preds = predict(model, samples, magnifications, input_size)
    return build_report(preds, fold=fold, meta={"checkpoint_kind": ckpt.manifest.get("kind")}), preds


def fold_samples(plan: SplitPlan, fold: int, data) -> list[MagnifiedSample]:
    ids = set(plan.specimens_in([fold]))
    return [s for s in data if s.specimen_id in ids]


fold_samples.__test__ = False  # not a pytest test


def cross_validate(cfg: FinetuneConfig, ckpt: Checkpoint | None, plan: SplitPlan, data,
                   folds=None, *, audit: Audit | None = None, run_dir=None):
    """Fine-tune and evaluate on every fold; returns (reports, aggregate)."""
    reports = []
    for fold in (range(plan.k) if folds is None else folds):
        fold_dir = Path(run_dir) / f"fold{fold}" if run_dir else None
        if fold_dir:
            fold_dir.mkdir(parents=True, exist_ok=True)
        model_ckpt = finetune(cfg, ckpt, plan, fold, data, audit=audit, run_dir=fold_dir)
        report, _ = evaluate_checkpoint(model_ckpt, fold_samples(plan, fold, data), cfg.eval_mfs(),
                                        cfg.input_size, fold)
        reports.append(report)
    return reports, aggregate(reports)
