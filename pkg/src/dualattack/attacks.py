"""Patch-subset attacks with attention-free gradients on ViT surrogates.

The engine is one loop (:func:`dual_attack`). Each iteration samples a patch
mask, evaluates the gradient of ``J(f(x + M*delta), y) + lam * ||delta||_2``
under a gradient-routing policy, and takes a clipped step. Switching every
component off recovers BIM; ``iterations=1`` with ``step_size=epsilon``
recovers FGSM; ``mi_momentum > 0`` gives MI.

All images of a batch are attacked independently. Image ``i`` draws its patch
masks from ``RngStream(cfg.seed).split(image_ids[i])``, so results do not
depend on how images are grouped into batches.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from . import numerics as nx
from .errors import ConfigError, DegenerateGradientError, DualAttackError
from .models.vit import unpatchify
from .rng import RngStream


class ConstraintViolation(DualAttackError, AssertionError):
    """A perturbation left the epsilon ball or the valid pixel range."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    iterations: int = 10
    step_size: float | None = None
    patch_count: int | None = None
    lam: float = 0.1
    use_pna: bool = False
    use_patchout: bool = False
    use_l2: bool = False
    mi_momentum: float = 0.0
    sgm_decay: float = 1.0
    sign_step: bool = True
    l2_unmasked: bool = False
    attention_chunks: tuple | None = None  # per-chunk attention-gradient switches
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError("step size must be positive")
        if self.lam < 0 or self.mi_momentum < 0:
            raise ConfigError("lambda and momentum must be non-negative")
        if not (0.0 < self.sgm_decay <= 1.0):
            raise ConfigError("sgm_decay must lie in (0, 1]")
        if self.patch_count is not None and self.patch_count < 1:
            raise ConfigError("patch_count must be >= 1")
        if self.attention_chunks is not None:
            chunks = tuple(bool(c) for c in self.attention_chunks)
            if not chunks:
                raise ConfigError("attention_chunks must not be empty")
            if self.use_pna:
                raise ConfigError("use_pna and attention_chunks are mutually exclusive")
            object.__setattr__(self, "attention_chunks", chunks)

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.iterations

    def effective_patch_count(self, num_patches: int) -> int:
        if not self.use_patchout:
            return num_patches
        t = self.patch_count if self.patch_count is not None else default_patch_count(num_patches)
        if not 1 <= t <= num_patches:
            raise ConfigError(f"patch_count {t} outside [1, {num_patches}]")
        return t

    def policy(self, depth: int) -> M.GradRoutingPolicy:
        if self.attention_chunks is not None:
            return M.GradRoutingPolicy.chunked(depth, self.attention_chunks, self.sgm_decay)
        return M.GradRoutingPolicy((not self.use_pna,) * depth, (self.sgm_decay,) * depth)

    @property
    def routes_gradient(self) -> bool:
        return self.use_pna or self.attention_chunks is not None or self.sgm_decay != 1.0

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha"] = self.alpha
        return d

    def digest(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("name")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    # presets

    @classmethod
    def fgsm(cls, epsilon=16 / 255, **kw):
        return cls(epsilon=epsilon, iterations=1, step_size=epsilon, name="FGSM", **kw)

    @classmethod
    def bim(cls, epsilon=16 / 255, iterations=10, **kw):
        kw.setdefault("name", "BIM")
        return cls(epsilon=epsilon, iterations=iterations, **kw)

    @classmethod
    def mi(cls, epsilon=16 / 255, iterations=10, momentum=1.0, **kw):
        kw.setdefault("name", "MI")
        return cls(epsilon=epsilon, iterations=iterations, mi_momentum=momentum, **kw)

    @classmethod
    def dual(cls, epsilon=16 / 255, iterations=10, patch_count=None, lam=0.1, **kw):
        kw.setdefault("name", "Dual")
        return cls(epsilon=epsilon, iterations=iterations, patch_count=patch_count, lam=lam,
                   use_pna=True, use_patchout=True, use_l2=True, **kw)


def default_patch_count(num_patches: int) -> int:
    """Two thirds of the patch grid, rounded up."""
    return math.ceil(2 * num_patches / 3)


@dataclass
class PatchMask:
    selected: np.ndarray
    mask: np.ndarray


@dataclass
class AttackState:
    delta: np.ndarray
    momentum: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, shape) -> "AttackState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def mask_from_indices(selected, geometry) -> np.ndarray:
    """Image-shaped {0,1} mask that is 1 exactly on the listed patches."""
    h, w, c, p = geometry
    n = (h // p) * (w // p)
    rows = np.zeros((n, p * p * c))
    rows[np.asarray(selected, dtype=np.int64)] = 1.0
    return unpatchify(rows, h, w, c, p)


def sample_patch_mask(rng: RngStream, num_patches: int, count: int, geometry) -> PatchMask:
    """Draw ``count`` distinct patches uniformly without replacement."""
    h, w, c, p = geometry
    if h % p or w % p or (h // p) * (w // p) != num_patches:
        raise ConfigError(f"geometry {geometry} does not have {num_patches} patches")
    if not 1 <= count <= num_patches:
        raise ConfigError(f"patch count {count} outside [1, {num_patches}]")
    selected = np.sort(rng.choice_without_replacement(num_patches, count))
    return PatchMask(selected, mask_from_indices(selected, geometry))


# -- gradient of the regularized objective ---------------------------------------


def _surrogate_grad(surrogate, images, labels, cfg: AttackConfig):
    if surrogate.kind == "vit":
        logits, cache = M.vit_forward(surrogate, images)
        losses, gl = nx.cross_entropy_fwd_bwd(logits, labels, reduction="none")
        grad, _ = M.vit_backward(surrogate, cache, gl, cfg.policy(surrogate.config.depth))
        return losses, grad
    if cfg.routes_gradient:
        raise ConfigError("gradient routing (PNA/SGM) needs a ViT surrogate")
    logits, cache = M.cnn_forward(surrogate, images)
    losses, gl = nx.cross_entropy_fwd_bwd(logits, labels, reduction="none")
    grad, _ = M.cnn_backward(surrogate, cache, gl)
    return losses, grad


def _objective(surrogate, point, y, delta, mask, cfg: AttackConfig):
    """Per-image objective values at ``point`` and their gradient w.r.t. ``delta``."""
    losses, gx = _surrogate_grad(surrogate, point, y, cfg)
    grad = mask * gx
    if cfg.use_l2 and cfg.lam > 0:
        axes = tuple(range(1, delta.ndim))
        norm = np.sqrt(np.sum(delta * delta, axis=axes, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        l2 = np.where(norm > 0, delta / safe, 0.0) * cfg.lam
        grad = grad + (l2 if cfg.l2_unmasked else mask * l2)
        losses = losses + cfg.lam * norm.reshape(-1)
    return losses, grad


def objective_grad(surrogate, x, y, delta, mask, cfg: AttackConfig) -> np.ndarray:
    """Gradient w.r.t. ``delta`` of ``J(f(x + M*delta), y) + lam*||delta||_2``.

    The loss gradient uses the routing policy implied by ``cfg``; both terms
    are multiplied by the mask (the L2 term only if ``cfg.l2_unmasked`` is
    false). The L2 gradient at ``delta = 0`` is taken to be zero.
    ``mask`` may be a :class:`PatchMask` or an array.
    """
    single = np.ndim(x) == 3
    m = mask.mask if isinstance(mask, PatchMask) else np.asarray(mask, dtype=np.float64)
    xb, db, mb = (np.asarray(a, dtype=np.float64)[None] if single else np.asarray(a, dtype=np.float64)
                  for a in (x, delta, m))
    yb = np.atleast_1d(y)
    _, grad = _objective(surrogate, xb + mb * db, yb, db, mb, cfg)
    return grad[0] if single else grad


# -- update rule --------------------------------------------------------------


def project(delta, x, epsilon):
    """Clip to the epsilon ball, then to the range keeping ``x + delta`` in [0, 1]."""
    return np.clip(np.clip(delta, -epsilon, epsilon), -x, 1.0 - x)


def check_constraints(delta, x, epsilon) -> None:
    if np.max(np.abs(delta)) > epsilon:
        raise ConstraintViolation(f"||delta||_inf = {np.max(np.abs(delta))!r} exceeds {epsilon!r}")
    xa = x + delta
    if np.min(xa) < 0.0 or np.max(xa) > 1.0:
        raise ConstraintViolation("x + delta left the [0, 1] pixel range")


def attack_step(state: AttackState, grad, x, cfg: AttackConfig) -> AttackState:
    """One update. Works on single images or batches (leading axis = image)."""
    grad = np.asarray(grad, dtype=np.float64)
    momentum = state.momentum
    if cfg.mi_momentum > 0:
        axes = tuple(range(1, grad.ndim)) if grad.ndim == 4 else None
        l1 = np.sum(np.abs(grad), axis=axes, keepdims=axes is not None)
        if np.any(l1 == 0):
            raise DegenerateGradientError("zero gradient cannot be L1-normalized for momentum")
        momentum = cfg.mi_momentum * momentum + grad / l1
        direction = momentum
    else:
        direction = grad
    if cfg.sign_step:
        direction = np.sign(direction)
    delta = project(state.delta + cfg.alpha * direction, x, cfg.epsilon)
    check_constraints(delta, x, cfg.epsilon)
    return AttackState(delta, momentum, state.iteration + 1)


# -- attack loops ---------------------------------------------------------------


@dataclass
class AttackTrace:
    selected: list = field(default_factory=list)  # per iteration: list of index arrays
    loss: list = field(default_factory=list)  # per iteration: (B,) objective values
    linf: list = field(default_factory=list)  # per iteration: (B,) ||delta||_inf after the step


def _geometry(surrogate):
    cfg = surrogate.config
    p = cfg.patch_size if surrogate.kind == "vit" else 1
    return (cfg.image_h, cfg.image_w, cfg.channels, p)


def _streams(cfg: AttackConfig, n: int, image_ids):
    root = RngStream(cfg.seed)
    ids = range(n) if image_ids is None else image_ids
    return [root.split(int(i)) for i in ids]


def _masks(streams, geometry, count):
    h, w, c, p = geometry
    n = (h // p) * (w // p)
    if count == n:
        full = np.ones((h, w, c))
        return [np.arange(n)] * len(streams), np.broadcast_to(full, (len(streams), h, w, c))
    pm = [sample_patch_mask(s, n, count, geometry) for s in streams]
    return [m.selected for m in pm], np.stack([m.mask for m in pm])


def _prepare(x, y):
    x = nx.as_tensor(x, "image")
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(yb) != len(xb):
        raise ConfigError(f"{len(xb)} images but {len(yb)} labels")
    if xb.min() < 0.0 or xb.max() > 1.0:
        raise ConfigError("clean images must lie in [0, 1]")
    return xb, yb, single


def dual_attack(surrogate, x, y, cfg: AttackConfig, image_ids=None):
    """Run the attack loop. Returns ``(x_adv, trace)``."""
    xb, yb, single = _prepare(x, y)
    geometry = _geometry(surrogate)
    n_patches = (geometry[0] // geometry[3]) * (geometry[1] // geometry[3])
    count = cfg.effective_patch_count(n_patches)
    streams = _streams(cfg, len(xb), image_ids)
    state = AttackState.zeros(xb.shape)
    trace = AttackTrace()
    for _ in range(cfg.iterations):
        selected, mask = _masks(streams, geometry, count)
        losses, grad = _objective(surrogate, xb + mask * state.delta, yb, state.delta, mask, cfg)
        state = attack_step(state, grad, xb, cfg)
        trace.selected.append(selected)
        trace.loss.append(losses)
        trace.linf.append(np.max(np.abs(state.delta), axis=(1, 2, 3)))
    x_adv = xb + state.delta
    return (x_adv[0] if single else x_adv), trace


def ten_patch_stacking(surrogate, x, y, stages: int, cfg: AttackConfig, patches_per_stage: int = 10,
                       image_ids=None):
    """Accumulate perturbations, each stage optimizing one fresh random patch subset.

    Every stage runs ``cfg.iterations`` steps whose updates are restricted to
    that stage's mask, with gradients taken at the fully perturbed image. The
    epsilon ball and pixel range apply to the accumulated total.
    Returns ``(x_adv, stage_masks)``.
    """
    if stages < 1:
        raise ConfigError("stages must be >= 1")
    if cfg.mi_momentum > 0:
        raise ConfigError("momentum is not supported in ten-patch stacking")
    xb, yb, single = _prepare(x, y)
    geometry = _geometry(surrogate)
    n_patches = (geometry[0] // geometry[3]) * (geometry[1] // geometry[3])
    count = min(patches_per_stage, n_patches)
    streams = _streams(cfg, len(xb), image_ids)
    state = AttackState.zeros(xb.shape)
    stage_masks = []
    for _ in range(stages):
        selected, mask = _masks(streams, geometry, count)
        stage_masks.append(selected)
        for _ in range(cfg.iterations):
            _, grad = _objective(surrogate, xb + state.delta, yb, state.delta, mask, cfg)
            state = attack_step(state, grad, xb, cfg)
    x_adv = xb + state.delta
    return (x_adv[0] if single else x_adv), stage_masks
