"""Synthetic grating+blob datasets, the training loop and the model zoo.

Class ``k`` of ``K`` is drawn as a gray sinusoidal grating whose orientation
is ``pi * k / K`` and whose spatial frequency cycles through
``GRATING_FREQS[k % 3]`` periods per image width, overlaid with a Gaussian
blob in the class color (hue ``k / K``) centered at a per-sample jittered
position. Gaussian pixel noise is added and the result clamped to ``[0, 1]``.
"""
from __future__ import annotations

import colorsys
import hashlib
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import numerics as nx
from .errors import ConfigError, TrainingDivergedError, ZooGateError
from .rng import RngStream

log = logging.getLogger(__name__)

GRATING_FREQS = (2.0, 3.5, 5.0)
GRATING_AMPLITUDE = 0.25
BLOB_SIGMA = 3.0
BLOB_JITTER = 0.25  # center drawn from the middle +-25% of each axis


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    train_per_class: int = 200
    eval_per_class: int = 50
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.channels != 3:
            raise ConfigError("the grating+blob renderer draws RGB images (channels=3)")
        if self.num_classes < 2 or self.train_per_class < 1 or self.eval_per_class < 0:
            raise ConfigError("dataset needs >=2 classes and >=1 training sample per class")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def class_color(k: int, num_classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(k / num_classes, 0.9, 0.95))


def render(spec: DatasetSpec, k: int, center, noise: np.ndarray | None = None) -> np.ndarray:
    """Draw one image of class ``k`` with the blob at ``center = (row, col)``."""
    h, w = spec.image_h, spec.image_w
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = math.pi * k / spec.num_classes
    freq = GRATING_FREQS[k % len(GRATING_FREQS)]
    phase = 2 * math.pi * freq * (cc * math.cos(theta) + rr * math.sin(theta)) / w
    grating = 0.5 + GRATING_AMPLITUDE * np.sin(phase)
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    alpha = np.exp(-d2 / (2 * BLOB_SIGMA**2))[..., None]
    img = (1 - alpha) * grating[..., None] + alpha * class_color(k, spec.num_classes)
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)


def _sample_set(spec: DatasetSpec, rng: RngStream, per_class: int) -> Dataset:
    n = per_class * spec.num_classes
    images = np.empty((n, spec.image_h, spec.image_w, spec.channels))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = i % spec.num_classes
        s = rng.split(i)
        lo_r, lo_c = spec.image_h * (0.5 - BLOB_JITTER), spec.image_w * (0.5 - BLOB_JITTER)
        center = (lo_r + s.uniform() * spec.image_h * 2 * BLOB_JITTER,
                  lo_c + s.uniform() * spec.image_w * 2 * BLOB_JITTER)
        noise = s.normal(0.0, spec.noise_std, images.shape[1:]) if spec.noise_std > 0 else None
        images[i] = render(spec, k, center, noise)
        labels[i] = k
    return Dataset(images, labels)


def gen_dataset(spec: DatasetSpec):
    """Returns ``(train, eval)``; the two sets come from disjoint RNG lineages."""
    root = RngStream(spec.seed)
    train = _sample_set(spec, root.split("train"), spec.train_per_class)
    evaluation = _sample_set(spec, root.split("eval"), spec.eval_per_class)
    return train, evaluation


# -- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 50
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    grad_clip: float = 5.0


@dataclass
class TrainResult:
    model: M.ModelHandle
    train_accuracy: float
    eval_accuracy: float
    history: list = field(default_factory=list)


def accuracy(model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(M.predict(model, dataset.images) == dataset.labels))


def init_model(arch, rng: RngStream, label: str = ""):
    if isinstance(arch, M.ViTConfig):
        return M.init_vit(arch, rng, label or "vit")
    if isinstance(arch, M.CNNConfig):
        return M.init_cnn(arch, rng, label or "cnn")
    raise ConfigError(f"unknown architecture config {type(arch).__name__}")


def _lr_at(hyper: TrainHyper, step: int, total: int, per_epoch: int) -> float:
    warm = hyper.warmup_epochs * per_epoch
    if step < warm:
        return hyper.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return hyper.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def train_model(arch, train: Dataset, hyper: TrainHyper, seed: int, evaluation: Dataset | None = None,
                label: str = "") -> TrainResult:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Learning rate warms up linearly then follows a cosine decay; weight decay
    applies to matrices only. The gradient norm is clipped at
    ``hyper.grad_clip``. Deterministic given ``seed``.
    """
    root = RngStream(seed)
    model = init_model(arch, root.split("init"), label)
    params = {k: np.array(v) for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(train)
    per_epoch = max(1, n // hyper.batch_size)
    total = per_epoch * hyper.epochs
    history = []
    step = 0
    for epoch in range(hyper.epochs):
        order = root.split("epoch").split(epoch).permutation(n)
        losses = []
        for b in range(per_epoch):
            idx = np.sort(order[b * hyper.batch_size : (b + 1) * hyper.batch_size])
            current = M.ModelHandle(model.kind, model.config, params, model.label)
            try:
                loss, grads, _ = M.loss_and_param_grads(current, train.images[idx], train.labels[idx])
            except nx.NonFiniteError as exc:
                raise TrainingDivergedError(f"{exc} at epoch {epoch}, step {step}") from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, step {step}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            clip = min(1.0, hyper.grad_clip / norm) if norm > 0 else 1.0
            lr = _lr_at(hyper, step, total, per_epoch)
            new = {}
            for name, value in params.items():
                g = grads[name] * clip
                if hyper.weight_decay and value.ndim >= 2 and name != "pos_embed":
                    g = g + hyper.weight_decay * value
                velocity[name] = hyper.momentum * velocity[name] + g
                new[name] = value - lr * velocity[name]
            params = new
            losses.append(float(loss))
            step += 1
        history.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.4f", label, epoch, history[-1])
    trained = M.ModelHandle(model.kind, model.config, params, model.label)
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise TrainingDivergedError("trained parameters contain non-finite values")
    return TrainResult(trained, accuracy(trained, train),
                       accuracy(trained, evaluation) if evaluation is not None else float("nan"),
                       history)


# -- model zoo ------------------------------------------------------------------

VIT_HYPER = TrainHyper(lr=0.05, epochs=10, grad_clip=0.5)
CNN_HYPER = TrainHyper(lr=0.1, epochs=10, grad_clip=1.0)
ZOO_MIN_ACCURACY = 0.85

# label prefixes: S = surrogate-eligible ViT, V = victim-only ViT, C = CNN victim
ZOO_ROSTER = (
    ("S0", M.ViTConfig(patch_size=4, depth=3, num_heads=2, head_dim=16), VIT_HYPER),
    ("S1", M.ViTConfig(patch_size=4, depth=4, num_heads=4, head_dim=8), VIT_HYPER),
    ("S2", M.ViTConfig(patch_size=8, depth=2, num_heads=2, head_dim=16), VIT_HYPER),
    ("S3", M.ViTConfig(patch_size=8, depth=3, num_heads=4, head_dim=8), VIT_HYPER),
    ("V0", M.ViTConfig(patch_size=4, depth=2, num_heads=2, head_dim=12, embed_dim=24, mlp_hidden=48,
                       use_class_token=False), VIT_HYPER),
    ("V1", M.ViTConfig(patch_size=8, depth=4, num_heads=3, head_dim=16, embed_dim=48, mlp_hidden=96),
     VIT_HYPER),
    ("V2", M.ViTConfig(patch_size=4, depth=2, num_heads=4, head_dim=8, use_class_token=False), VIT_HYPER),
    ("C0", M.CNNConfig(conv_channels=(8, 16), pools=(2, 2)), CNN_HYPER),
    ("C1", M.CNNConfig(conv_channels=(12, 24), pools=(4, 2)), CNN_HYPER),
)


ZOO_NOISE = 0.2


def zoo_spec(seed: int) -> DatasetSpec:
    """Dataset every zoo member is trained on: default shape, ``ZOO_NOISE`` pixel noise."""
    return DatasetSpec(seed=seed, noise_std=ZOO_NOISE)


def member_digest(name, arch, hyper, spec: DatasetSpec) -> str:
    """Cache key of one zoo member: everything its trained weights depend on."""
    blob = repr((name, arch, hyper, spec))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _train_member(task):
    name, arch, hyper, seed, train, evaluation = task
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass
    return train_model(arch, train, hyper, seed, evaluation, label=name)


def model_zoo(seed: int, cache_dir: str | None = None, jobs: int = 1, roster=None,
              spec: DatasetSpec | None = None, min_accuracy: float | None = None,
              return_data: bool = False):
    """Train (or load from ``cache_dir``) the pinned roster on one dataset.

    Member ``name`` is initialized from ``RngStream(seed).split("zoo").split(name)``.
    Raises :class:`ZooGateError` if any member's eval accuracy is below
    ``min_accuracy`` (default ``ZOO_MIN_ACCURACY``). Returns the models, or ``(models, train, eval)`` with
    ``return_data``.
    """
    roster = ZOO_ROSTER if roster is None else roster
    min_accuracy = ZOO_MIN_ACCURACY if min_accuracy is None else min_accuracy
    spec = spec or zoo_spec(seed)
    train, evaluation = gen_dataset(spec)
    root = RngStream(seed).split("zoo")
    paths = [os.path.join(cache_dir, f"zoo_seed{seed}_{name}_{member_digest(name, arch, hyper, spec)}.pgrd")
             if cache_dir else None for name, arch, hyper in roster]
    models: list = [None] * len(roster)
    todo = []
    for i, ((name, arch, hyper), path) in enumerate(zip(roster, paths)):
        if path and os.path.exists(path):
            models[i] = M.load_checkpoint(path)
        else:
            member_seed = int(root.split(name).integers(0, 2**63 - 1))
            todo.append((i, (name, arch, hyper, member_seed, train, evaluation)))
    if todo:
        tasks = [t for _, t in todo]
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
                results = list(ex.map(_train_member, tasks))
        else:
            results = [_train_member(t) for t in tasks]
        for (i, _), res in zip(todo, results):
            models[i] = res.model
            log.info("zoo %s: train %.3f eval %.3f", res.model.label, res.train_accuracy,
                     res.eval_accuracy)
            if paths[i]:
                os.makedirs(cache_dir, exist_ok=True)
                M.save_checkpoint(res.model, paths[i])
    for m in models:
        acc = accuracy(m, evaluation)
        if acc < min_accuracy:
            raise ZooGateError(f"zoo model {m.label} reached {acc:.3f} eval accuracy, "
                               f"below the {min_accuracy:.2f} gate")
    return (models, train, evaluation) if return_data else models
