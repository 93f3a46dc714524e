"""Training loops, optimizer, LR schedule, and checkpoint persistence.

Pre-training minimizes the dual-branch reconstruction loss; fine-tuning
minimizes cross-entropy through the classification path.  Every random
draw comes from a generator derived from (seed, purpose, epoch, item), so
any step can be recomputed exactly: resuming from a checkpoint needs only
the step counter.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AUGMENTATIONS, augment
from .errors import CheckpointError, ConfigError, NumericError, UsageError
from .model import GLOBAL, LOCAL, DualBranchMAE, ModelConfig, chamfer_mean
from .patchmask import global_random_mask, local_block_mask, patchify

FINETUNE_MODES = ("full", "lem_and_head")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    seed: int = 0
    finetune_mode: str = "full"
    augmentation: str = "none"
    max_steps: int | None = None  # cap on total optimizer steps

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"need 0 <= warmup_epochs < epochs, got "
                f"{self.warmup_epochs} / {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ConfigError(
                f"finetune_mode must be one of {FINETUNE_MODES}, "
                f"got {self.finetune_mode!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(
                f"augmentation must be one of {AUGMENTATIONS}, "
                f"got {self.augmentation!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")


# -- optimizer ------------------------------------------------------------


def init_adamw_state(params: dict) -> dict:
    """Zeroed first/second moments per parameter, plus the step counter."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               betas: tuple = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters without a gradient entry are left untouched; their moments
    do not advance either.
    """
    beta1, beta2 = betas
    state["step"] += 1
    t = state["step"]
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, grad in grads.items():
        if grad is None:
            continue
        p = params[name]
        if grad.shape != p.data.shape:
            raise UsageError(
                f"gradient shape {grad.shape} != parameter shape "
                f"{p.data.shape} for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (lr * (m_hat / (np.sqrt(v_hat) + eps)
                         + weight_decay * p.data)).astype(p.data.dtype)


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                base_lr: float) -> float:
    """Linear warmup to base_lr, cosine decay to base_lr / 100."""
    if total_steps < 1 or not 0 <= warmup_steps <= total_steps:
        raise UsageError(
            f"need 0 <= warmup {warmup_steps} <= total {total_steps} >= 1")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    floor = base_lr * 0.01
    if total_steps == warmup_steps:
        return base_lr
    frac = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- derived RNG streams ---------------------------------------------------

_PERM_TAG = 3
_MASK_TAG = 7
_AUG_TAG = 11


def _derived_rng(seed: int, tag: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *key])


# -- loss pieces ------------------------------------------------------------


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of the true class under softmax logits."""
    n = logits.data.shape[-1]
    if not 0 <= label < n:
        raise UsageError(f"label {label} out of range for {n} classes")
    log_p = ad.log(ad.softmax_lastaxis(logits))
    picked = ad.slice_axis(log_p, 0, label, label + 1)
    return ad.scale(ad.sum_all(picked), -1.0)


# -- checkpoint format ------------------------------------------------------

_MAGIC = b"PCMAECKP"
FORMAT_VERSION = 1
_OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    """In-memory image of one saved model: manifest, tensors, optimizer."""

    manifest: dict
    tensors: dict  # model parameter name -> float32 array
    optimizer: dict | None  # {"step", "m", "v"} or None

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(**self.manifest["config"])


def save_checkpoint(path, model: DualBranchMAE, optimizer: dict | None = None,
                    train_config: TrainConfig | None = None) -> None:
    """Write magic + manifest JSON + float32 payload + sha256 of the payload.

    Tensors are serialized in sorted-name order; optimizer moments ride
    along under reserved ``opt.`` names so one payload holds everything.
    """
    arrays = {name: np.ascontiguousarray(p.data, dtype=np.float32)
              for name, p in model.named_parameters().items()}
    if optimizer is not None:
        for kind in ("m", "v"):
            for name, arr in optimizer[kind].items():
                if name not in arrays:
                    raise CheckpointError(
                        f"optimizer state for unknown parameter {name!r}")
                arrays[f"{_OPT_PREFIX}{kind}.{name}"] = np.ascontiguousarray(
                    arr, dtype=np.float32)
    order = sorted(arrays)
    payload = b"".join(arrays[name].tobytes() for name in order)
    offset = 0
    table = []
    for name in order:
        size = arrays[name].size
        table.append({"name": name, "shape": list(arrays[name].shape),
                      "offset": offset})
        offset += size
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "train_config": asdict(train_config) if train_config else None,
        "optimizer_step": optimizer["step"] if optimizer else None,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": table,
    }
    blob = json.dumps(manifest, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint; every failure names its cause."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from None
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    head = len(_MAGIC)
    if len(raw) < head + 8:
        raise CheckpointError(f"{path}: truncated before manifest length")
    (blob_len,) = struct.unpack("<Q", raw[head : head + 8])
    blob_start = head + 8
    if len(raw) < blob_start + blob_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[blob_start : blob_start + blob_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} "
            f"!= supported {FORMAT_VERSION}")
    payload = raw[blob_start + blob_len :]
    names = [t["name"] for t in manifest["tensors"]]
    if len(set(names)) != len(names):
        raise CheckpointError(f"{path}: duplicate tensor names in manifest")
    expected = 0
    for t in manifest["tensors"]:
        if t["offset"] != expected:
            raise CheckpointError(
                f"{path}: tensor {t['name']!r} offset {t['offset']} != "
                f"expected {expected}")
        expected += int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
    if len(payload) != expected * 4:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, manifest expects "
            f"{expected * 4}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors = {}
    opt_m, opt_v = {}, {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size,
                            offset=t["offset"] * 4).reshape(t["shape"]).copy()
        name = t["name"]
        if name.startswith(_OPT_PREFIX):
            kind, param = name[len(_OPT_PREFIX):].split(".", 1)
            (opt_m if kind == "m" else opt_v)[param] = arr
        else:
            tensors[name] = arr
    optimizer = None
    if manifest.get("optimizer_step") is not None:
        optimizer = {"step": manifest["optimizer_step"], "m": opt_m, "v": opt_v}
    return Checkpoint(manifest=manifest, tensors=tensors, optimizer=optimizer)


def restore_model(model: DualBranchMAE, ckpt: Checkpoint,
                  fresh_head: bool = False) -> None:
    """Copy checkpoint tensors into the model, validating config and shapes.

    fresh_head leaves the classifier at its initialization (used when
    fine-tuning onto a different label set).
    """
    saved = dict(ckpt.manifest["config"])
    current = asdict(model.config)
    skip_keys = {"num_classes"} if fresh_head else set()
    mismatched = [k for k in current
                  if k not in skip_keys and saved.get(k) != current[k]]
    if mismatched:
        detail = ", ".join(
            f"{k}: checkpoint {saved.get(k)!r} vs model {current[k]!r}"
            for k in mismatched)
        raise CheckpointError(f"config mismatch: {detail}")
    params = model.named_parameters()
    for name, p in params.items():
        if fresh_head and name.startswith("classifier."):
            continue
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, model "
                f"expects {p.data.shape}")
        p.data = arr.astype(np.float32).copy()
    known = set(params)
    extra = [n for n in ckpt.tensors if n not in known]
    if extra:
        raise CheckpointError(f"checkpoint holds unknown tensors: {extra}")


# -- training loops ---------------------------------------------------------


@dataclass
class TrainResult:
    model: DualBranchMAE
    optimizer: dict
    metrics: list  # pretrain: (step, loss_g, loss_l, lr); finetune: (step, loss, acc)


def _plan_steps(n_items: int, tc: TrainConfig) -> tuple:
    steps_per_epoch = max(1, math.ceil(n_items / tc.batch_size))
    total = tc.epochs * steps_per_epoch
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    warmup = min(tc.warmup_epochs * steps_per_epoch, total)
    return steps_per_epoch, total, warmup


def _batch_indices(n_items: int, seed: int, steps_per_epoch: int,
                   batch_size: int, step: int) -> tuple:
    epoch = step // steps_per_epoch
    pos = step % steps_per_epoch
    perm = _derived_rng(seed, _PERM_TAG, epoch).permutation(n_items)
    return epoch, perm[pos * batch_size : (pos + 1) * batch_size]


def _prepared_cloud(dataset, idx: int, tc: TrainConfig, epoch: int,
                    mc: ModelConfig, cache: dict):
    """Patchify one (possibly augmented) cloud; cache when deterministic."""
    if tc.augmentation == "none" and idx in cache:
        return cache[idx]
    pc = dataset[idx]
    if tc.augmentation != "none":
        rng = _derived_rng(tc.seed, _AUG_TAG, epoch, idx)
        pc = augment(pc, tc.augmentation, rng)
    ps = patchify(pc, mc.patches, mc.group_size)
    if tc.augmentation == "none":
        cache[idx] = ps
    return ps


def run_pretrain(dataset, model_config: ModelConfig, train_config: TrainConfig,
                 resume_from: Checkpoint | None = None,
                 on_step=None) -> TrainResult:
    """Mask-reconstruction pre-training; returns the model and metrics rows.

    Each metrics row is (step, loss_global, loss_local, lr); an absent
    branch logs NaN for its column.  Runs are bitwise deterministic given
    (seed, configs, dataset), and resuming reproduces the uninterrupted
    run because all randomness is derived, not sequential.
    on_step(model, optimizer_state, step) runs after each update; saving a
    checkpoint there and resuming from it continues the exact run.
    """
    model_config.validate()
    train_config.validate()
    if len(dataset) == 0:
        raise UsageError("pre-training dataset is empty")
    tc = train_config
    model = DualBranchMAE(model_config, seed=tc.seed)
    params = model.named_parameters()
    trainable = {k: v for k, v in params.items()
                 if not k.startswith("classifier.")}
    state = init_adamw_state(trainable)
    start_step = 0
    if resume_from is not None:
        restore_model(model, resume_from)
        if resume_from.optimizer is None:
            raise CheckpointError("checkpoint lacks optimizer state; "
                                  "cannot resume")
        state["step"] = resume_from.optimizer["step"]
        for kind in ("m", "v"):
            for name, arr in resume_from.optimizer[kind].items():
                if name in state[kind]:
                    state[kind][name] = arr.astype(np.float32).copy()
        start_step = state["step"]
    steps_per_epoch, total, warmup = _plan_steps(len(dataset), tc)
    variant = model.variant
    cache: dict = {}
    metrics = []
    for step in range(start_step, total):
        epoch, batch = _batch_indices(len(dataset), tc.seed, steps_per_epoch,
                                      tc.batch_size, step)
        terms = []
        branch_vals = {GLOBAL: [], LOCAL: []}
        try:
            for idx in batch:
                idx = int(idx)
                ps = _prepared_cloud(dataset, idx, tc, epoch, model_config,
                                     cache)
                rng = _derived_rng(tc.seed, _MASK_TAG, epoch, idx)
                cloud_terms = []
                if variant.global_branch:
                    plan = global_random_mask(model_config.patches,
                                              model_config.mask_ratio, rng)
                    pred, target = model.reconstruct(ps, plan, GLOBAL)
                    term = chamfer_mean(pred, target)
                    branch_vals[GLOBAL].append(term.item())
                    cloud_terms.append(term)
                if variant.local_branch:
                    plan = local_block_mask(ps.centers,
                                            model_config.mask_ratio, rng)
                    pred, target = model.reconstruct(ps, plan, LOCAL)
                    term = chamfer_mean(pred, target)
                    branch_vals[LOCAL].append(term.item())
                    cloud_terms.append(term)
                cloud_loss = cloud_terms[0]
                for extra in cloud_terms[1:]:
                    cloud_loss = ad.add(cloud_loss, extra)
                terms.append(cloud_loss)
            batch_loss = terms[0]
            for extra in terms[1:]:
                batch_loss = ad.add(batch_loss, extra)
            batch_loss = ad.scale(batch_loss, 1.0 / len(terms))
            if not np.isfinite(batch_loss.item()):
                raise NumericError("non-finite batch loss")
            ad.backward(batch_loss)
        except NumericError as exc:
            raise NumericError(f"pre-training aborted at step {step}: {exc}") \
                from exc
        lr = lr_schedule(step + 1, total, warmup, tc.base_lr)
        grads = {k: v.grad for k, v in trainable.items()}
        adamw_step(trainable, grads, state, lr,
                   weight_decay=tc.weight_decay)
        for p in trainable.values():
            p.grad = None
        loss_g = (float(np.mean(branch_vals[GLOBAL]))
                  if branch_vals[GLOBAL] else float("nan"))
        loss_l = (float(np.mean(branch_vals[LOCAL]))
                  if branch_vals[LOCAL] else float("nan"))
        metrics.append((step, loss_g, loss_l, lr))
        if on_step is not None:
            on_step(model, state, step)
    return TrainResult(model=model, optimizer=state, metrics=metrics)


def _dataset_classes(dataset) -> int:
    label_set = {pc.label for pc in dataset}
    if None in label_set:
        raise UsageError("fine-tuning needs labeled clouds")
    labels = sorted(label_set)
    if labels != list(range(len(labels))):
        raise UsageError(
            f"labels must be dense in [0, n), got {labels}")
    return len(labels)


def run_finetune(checkpoint: Checkpoint | None, dataset,
                 train_config: TrainConfig,
                 model_config: ModelConfig | None = None,
                 on_step=None) -> TrainResult:
    """Classification fine-tuning from a checkpoint or from scratch.

    The classifier head always starts fresh (its width follows the
    dataset's class count).  Metrics rows are (step, loss, batch accuracy).
    on_step(model, step) is called after each optimizer update.
    """
    train_config.validate()
    tc = train_config
    if len(dataset) == 0:
        raise UsageError("fine-tuning dataset is empty")
    num_classes = _dataset_classes(dataset)
    if checkpoint is not None:
        mc = ModelConfig(**{**checkpoint.manifest["config"],
                            "num_classes": num_classes})
    elif model_config is not None:
        mc = ModelConfig(**{**asdict(model_config),
                            "num_classes": num_classes})
    else:
        raise UsageError("need a checkpoint or a model config")
    mc.validate()
    model = DualBranchMAE(mc, seed=tc.seed)
    if checkpoint is not None:
        restore_model(model, checkpoint, fresh_head=True)
    params = model.named_parameters()
    trainable = model.finetune_trainable(tc.finetune_mode)
    for name, p in params.items():
        p.requires_grad = name in trainable
    state = init_adamw_state(trainable)
    steps_per_epoch, total, warmup = _plan_steps(len(dataset), tc)
    cache: dict = {}
    metrics = []
    for step in range(total):
        epoch, batch = _batch_indices(len(dataset), tc.seed, steps_per_epoch,
                                      tc.batch_size, step)
        terms = []
        correct = 0
        try:
            for idx in batch:
                idx = int(idx)
                ps = _prepared_cloud(dataset, idx, tc, epoch, mc, cache)
                label = dataset[idx].label
                logits = model.classify(ps)
                if int(np.argmax(logits.data)) == label:
                    correct += 1
                terms.append(cross_entropy(logits, label))
            batch_loss = terms[0]
            for extra in terms[1:]:
                batch_loss = ad.add(batch_loss, extra)
            batch_loss = ad.scale(batch_loss, 1.0 / len(terms))
            if not np.isfinite(batch_loss.item()):
                raise NumericError("non-finite batch loss")
            ad.backward(batch_loss)
        except NumericError as exc:
            raise NumericError(f"fine-tuning aborted at step {step}: {exc}") \
                from exc
        lr = lr_schedule(step + 1, total, warmup, tc.base_lr)
        grads = {k: v.grad for k, v in trainable.items()}
        adamw_step(trainable, grads, state, lr, weight_decay=tc.weight_decay)
        for p in trainable.values():
            p.grad = None
        metrics.append((step, batch_loss.item(), correct / len(batch)))
        if on_step is not None:
            on_step(model, step)
    return TrainResult(model=model, optimizer=state, metrics=metrics)
