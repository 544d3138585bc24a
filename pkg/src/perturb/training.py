"""Training loops: SGD with Nesterov momentum, plateau LR decay, and the
three-phase occlusion scheme.

Phases: (1) train an attention classifier; (2) cluster pixels of its mean
attention map, refreshed every epoch; (3) train a predictor whose training
samples are stochastically occluded by one cluster region at a time.
Evaluation always sees unmodified images.

Determinism: every random decision draws from its own PCG64 stream keyed
as (seed, domain, epoch[, sample index]) with distinct domain codes for
shuffling, augmentation, and masking.  Masking with mask_prob == 0 makes
no draws at all, so a zero-probability phase-3 run is bit-identical to
plain predictor training with the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .clustering import ClusterConfig, ClusterModel, cluster_to_masks, epoch_update, kmeans_fit, label_image, model_to_text
from .data import AugmentConfig, Dataset, apply_mask, augment, write_pgm
from .metrics import eval_batches, evaluate, report_from_confusion, report_to_json
from .models import Model, ModelSpec, build_model, forward_pass, mean_attention_map

# RNG domain codes (second SeedSequence word)
_DOM_SHUFFLE = 1
_DOM_AUGMENT = 2
_DOM_MASK = 3


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class RlrpConfig:
    """Reduce-LR-on-plateau over a higher-is-better metric."""

    factor: float = 0.1
    patience: int = 10
    min_lr: float = 1e-5
    threshold: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise TrainingError(f"rlrp factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise TrainingError(f"rlrp patience must be >= 1, got {self.patience}")
        if self.min_lr <= 0 or self.threshold < 0:
            raise TrainingError("rlrp min_lr must be positive and threshold non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15  # desk-scale default; full runs use ~200
    batch_size: int = 64
    lr0: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    mask_prob: float = 0.5
    fill_value: float | str = "mean"
    seed: int = 0
    augment_enabled: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    rlrp: RlrpConfig = field(default_factory=RlrpConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    eval_batch_size: int = 256
    workers: int = 1
    attention_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise TrainingError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise TrainingError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if not isinstance(self.fill_value, str) and not 0.0 <= float(self.fill_value) <= 1.0:
            raise TrainingError(f"fill_value must be in [0, 1] or 'mean', got {self.fill_value}")
        if self.workers < 1:
            raise TrainingError(f"workers must be >= 1, got {self.workers}")


def with_cluster_k(config: TrainConfig, k: int) -> TrainConfig:
    return replace(config, cluster=replace(config.cluster, k=k))


@dataclass
class OptimizerState:
    lr: float
    velocity: dict
    best_metric: float = float("-inf")
    stale_epochs: int = 0


def init_optimizer(params: dict, config: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=config.lr0, velocity={n: np.zeros_like(t.data) for n, t in params.items()})


def sgd_nesterov_step(params: dict, state: OptimizerState, config: TrainConfig) -> None:
    """One update: g' = g + wd*p;  v' = mu*v + g';  p -= lr*(g' + mu*v').

    With nesterov=False the update is the classical p -= lr*v'.
    Tensors with no gradient are skipped.
    """
    mu = config.momentum
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad + config.weight_decay * p.data
        v = mu * state.velocity[name] + g
        state.velocity[name] = v
        p.data -= state.lr * (g + mu * v) if config.nesterov else state.lr * v


def rlrp_step(state: OptimizerState, metric: float, rlrp: RlrpConfig) -> float:
    """Update plateau bookkeeping after an epoch; returns the (possibly reduced) lr."""
    if metric > state.best_metric + rlrp.threshold:
        state.best_metric = metric
        state.stale_epochs = 0
    else:
        state.stale_epochs += 1
        if state.stale_epochs >= rlrp.patience:
            state.lr = max(state.lr * rlrp.factor, rlrp.min_lr)
            state.stale_epochs = 0
    return state.lr


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    lr: float


CURVES_HEADER = "epoch,train_loss,train_acc,val_acc,lr"


def curves_to_csv(curves) -> str:
    lines = [CURVES_HEADER]
    lines += [
        f"{s.epoch},{s.train_loss!r},{s.train_accuracy!r},{s.val_accuracy!r},{s.lr!r}"
        for s in curves
    ]
    return "\n".join(lines) + "\n"


def _rng(*words) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


def _fit(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    epoch_setup=None,
    sample_transform=None,
    on_epoch_end=None,
):
    """Shared mini-batch loop.

    ``epoch_setup(model, epoch)`` may return per-epoch context (phase 3
    uses it to refresh clusters); ``sample_transform(img, epoch, idx, ctx)``
    edits one training sample (masking); ``on_epoch_end(stats, ctx)`` lets
    callers flush artifacts incrementally.  Returns (model-with-best-val
    -weights, curves, eval hash log).
    """
    images, labels = dataset.split("train")
    val_images, val_labels = dataset.split("val")
    if len(images) == 0 or len(val_images) == 0:
        raise TrainingError("training needs non-empty train and val splits")
    n = len(labels)
    params = model.params
    state = init_optimizer(params, config)
    curves: list[EpochStats] = []
    hash_log: list[dict] = []
    best_acc = -1.0
    best_arrays = model.param_arrays()
    size = model.spec.image_size

    for epoch in range(config.epochs):
        ctx = epoch_setup(model, epoch) if epoch_setup else None
        order = _rng(config.seed, _DOM_SHUFFLE, epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idxs = order[start : start + config.batch_size]
            batch = np.empty((len(idxs), 1, size, size))
            for b, idx in enumerate(idxs):
                img = images[idx]
                if sample_transform is not None:
                    img = sample_transform(img, epoch, int(idx), ctx)
                if config.augment_enabled:
                    img = augment(img, _rng(config.seed, _DOM_AUGMENT, epoch, idx), config.augment)
                batch[b, 0] = img
            y = labels[idxs]
            logits = forward_pass(model.spec, params, batch)
            loss = T.softmax_cross_entropy(logits, y)
            T.backward(loss)
            sgd_nesterov_step(params, state, config)
            T.zero_grad(params)
            loss_sum += loss.item() * len(idxs)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        conf, digests = eval_batches(model, val_images, val_labels, config.eval_batch_size, config.workers)
        val_acc = report_from_confusion(conf).accuracy
        hash_log.append({"epoch": epoch, "split": "val", "batch_sha256": digests})
        stats = EpochStats(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_accuracy=correct / n,
            val_accuracy=val_acc,
            lr=state.lr,
        )
        curves.append(stats)
        if val_acc > best_acc:  # strict: ties keep the earlier epoch
            best_acc = val_acc
            best_arrays = model.param_arrays()
        rlrp_step(state, val_acc, config.rlrp)
        if on_epoch_end:
            on_epoch_end(stats, ctx)
    model.load_arrays(best_arrays)
    return model, curves, hash_log


def train_attention(dataset: Dataset, spec: ModelSpec, config: TrainConfig, on_epoch_end=None):
    """Phase 1: plain supervised training of the attention classifier."""
    if spec.variant != "attention_classifier":
        raise TrainingError(f"phase 1 expects an attention_classifier spec, got {spec.variant!r}")
    model = build_model(spec, config.seed)
    return _fit(model, dataset, config, on_epoch_end=on_epoch_end)


def train_baseline(dataset: Dataset, spec: ModelSpec, config: TrainConfig, on_epoch_end=None):
    """Plain predictor training; the control arm for the masked scheme."""
    model = build_model(spec, config.seed)
    return _fit(model, dataset, config, on_epoch_end=on_epoch_end)


def train_masked_predictor(
    dataset: Dataset,
    attention_model: Model,
    spec: ModelSpec,
    config: TrainConfig,
    on_epoch_end=None,
    on_clusters=None,
):
    """Phases 2+3: refresh pixel clusters each epoch, train with stochastic
    single-cluster occlusion.

    Each training sample independently gets masked with probability
    ``mask_prob`` by exactly one cluster region (chosen uniformly); with
    mask_prob == 0 the mask stream is never consulted.
    """
    model = build_model(spec, config.seed)
    train_images = dataset.split("train")[0]
    cluster_history: list[ClusterModel] = []

    def epoch_setup(_model, epoch):
        amap = mean_attention_map(attention_model, train_images, config.attention_batch_size)
        if cluster_history:
            cm = epoch_update(cluster_history[-1], amap)
        else:
            cm = kmeans_fit(amap, config.cluster)
        cluster_history.append(cm)
        if on_clusters:
            on_clusters(epoch, cm)
        return {"masks": cluster_to_masks(cm, config.fill_value)}

    def sample_transform(img, epoch, idx, ctx):
        if config.mask_prob <= 0.0:
            return img
        rng = _rng(config.seed, _DOM_MASK, epoch, idx)
        if rng.random() < config.mask_prob:
            masks = ctx["masks"]
            return apply_mask(img, masks[int(rng.integers(0, len(masks)))])
        return img

    model, curves, hash_log = _fit(
        model, dataset, config, epoch_setup=epoch_setup, sample_transform=sample_transform, on_epoch_end=on_epoch_end
    )
    return model, curves, {"hash_log": hash_log, "clusters": cluster_history}


# ---------------------------------------------------------------------------
# end-to-end scheme with on-disk artifacts
# ---------------------------------------------------------------------------

@dataclass
class SchemeArtifacts:
    out_dir: Path
    phase1_model: Model
    phase3_model: Model
    phase1_curves: list
    phase3_curves: list
    clusters: list
    test_report_json: str


def _append_curve(path: Path, stats: EpochStats) -> None:
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(CURVES_HEADER + "\n")
        fh.write(
            f"{stats.epoch},{stats.train_loss!r},{stats.train_accuracy!r},{stats.val_accuracy!r},{stats.lr!r}\n"
        )


def run_perturb_scheme(
    dataset: Dataset,
    attention_spec: ModelSpec,
    predictor_spec: ModelSpec,
    config: TrainConfig,
    out_dir,
    manifest_extra: dict | None = None,
) -> SchemeArtifacts:
    """Run all three phases, flushing artifacts as they are produced.

    Curve rows are appended per epoch and cluster models written per
    epoch, so an aborted run leaves valid partial artifacts behind.
    Outputs: phase1.ckpt, phase3.ckpt, phase{1,3}_curves.csv,
    clusters/epoch_NNN.{txt,pgm}, metrics.json, eval_hashes.json,
    manifest.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "clusters").mkdir(exist_ok=True)
    for stale in ["phase1_curves.csv", "phase3_curves.csv"]:
        p = out / stale
        if p.exists():
            p.unlink()

    manifest = {"schema_version": 1, "command": "run-scheme", "seed": config.seed}
    if manifest_extra:
        manifest.update(manifest_extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    p1_model, p1_curves, p1_hashes = train_attention(
        dataset, attention_spec, config, on_epoch_end=lambda s, _: _append_curve(out / "phase1_curves.csv", s)
    )
    p1_model.save(out / "phase1.ckpt")

    def flush_cluster(epoch: int, cm: ClusterModel) -> None:
        (out / "clusters" / f"epoch_{epoch:03d}.txt").write_text(model_to_text(cm))
        write_pgm(out / "clusters" / f"epoch_{epoch:03d}.pgm", label_image(cm))

    p3_model, p3_curves, extras = train_masked_predictor(
        dataset,
        p1_model,
        predictor_spec,
        config,
        on_epoch_end=lambda s, _: _append_curve(out / "phase3_curves.csv", s),
        on_clusters=flush_cluster,
    )
    p3_model.save(out / "phase3.ckpt")

    test_images, test_labels = dataset.split("test")
    conf, test_digests = eval_batches(p3_model, test_images, test_labels, config.eval_batch_size, config.workers)
    report_json = report_to_json(report_from_confusion(conf))
    (out / "metrics.json").write_text(report_json)
    hashes = {
        "phase1_val": p1_hashes,
        "phase3_val": extras["hash_log"],
        "test": [{"split": "test", "batch_sha256": test_digests}],
    }
    (out / "eval_hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    return SchemeArtifacts(
        out_dir=out,
        phase1_model=p1_model,
        phase3_model=p3_model,
        phase1_curves=p1_curves,
        phase3_curves=p3_curves,
        clusters=extras["clusters"],
        test_report_json=report_json,
    )


def run_baseline(
    dataset: Dataset,
    predictor_spec: ModelSpec,
    config: TrainConfig,
    out_dir,
    manifest_extra: dict | None = None,
):
    """train-baseline counterpart of run_perturb_scheme (same artifact shapes)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves_path = out / "curves.csv"
    if curves_path.exists():
        curves_path.unlink()
    manifest = {"schema_version": 1, "command": "train-baseline", "seed": config.seed}
    if manifest_extra:
        manifest.update(manifest_extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    model, curves, hash_log = train_baseline(
        dataset, predictor_spec, config, on_epoch_end=lambda s, _: _append_curve(curves_path, s)
    )
    model.save(out / "baseline.ckpt")
    test_images, test_labels = dataset.split("test")
    conf, digests = eval_batches(model, test_images, test_labels, config.eval_batch_size, config.workers)
    report_json = report_to_json(report_from_confusion(conf))
    (out / "metrics.json").write_text(report_json)
    (out / "eval_hashes.json").write_text(
        json.dumps({"val": hash_log, "test": [{"split": "test", "batch_sha256": digests}]}, indent=2, sort_keys=True)
        + "\n"
    )
    return model, curves
