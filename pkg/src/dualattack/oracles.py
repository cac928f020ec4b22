"""Brute-force gradient oracles.

These never touch a backward pass: every derivative is a central finite
difference of a forward evaluation. Perturbed inputs are evaluated as batches
for speed; the batching does not change any individual loss value.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, PolicyError
from .models import forward
from .models.vit import vit_forward

FD_STEP = 1e-5
_CHUNK = 512


def central_difference(batch_fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of a scalar function by central differences.

    ``batch_fn`` maps a stack ``(M, *x.shape)`` of inputs to ``M`` scalars.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    flat = x.reshape(-1)
    grad = np.empty(n)
    for start in range(0, n, _CHUNK):
        idx = np.arange(start, min(n, start + _CHUNK))
        plus = np.repeat(flat[None], len(idx), axis=0)
        minus = plus.copy()
        plus[np.arange(len(idx)), idx] += step
        minus[np.arange(len(idx)), idx] -= step
        both = np.concatenate([plus, minus]).reshape(2 * len(idx), *x.shape)
        vals = np.asarray(batch_fn(both), dtype=np.float64)
        grad[idx] = (vals[: len(idx)] - vals[len(idx) :]) / (2.0 * step)
    return grad.reshape(x.shape)


def _ce_per_sample(logits, y):
    labels = np.full(len(logits), int(y))
    losses, _ = nx.cross_entropy_fwd_bwd(logits, labels, reduction="none")
    return losses


def fd_input_grad(model, x, y, step: float = FD_STEP) -> np.ndarray:
    """Finite-difference gradient of ``CE(model(x), y)`` w.r.t. the pixels of one image."""
    return central_difference(lambda b: _ce_per_sample(forward(model, b)[0], y), x, step)


def record_attention(model, x) -> list:
    """Attention arrays ``(heads, T, T)`` of every block at a single image."""
    _, cache = vit_forward(model, np.asarray(x)[None])
    return [blk["attn"][0] for blk in cache["blocks"]]


def fd_frozen_attention_grad(model, x, y, frozen_blocks, step: float = FD_STEP) -> np.ndarray:
    """Finite-difference gradient of the loss with some attention maps frozen.

    Attention of each block in ``frozen_blocks`` is fixed at its value for the
    unperturbed ``x``; the remaining blocks recompute attention as usual.
    """
    frozen = sorted(set(int(b) for b in frozen_blocks))
    depth = model.config.depth
    if any(b < 0 or b >= depth for b in frozen):
        raise PolicyError(f"frozen block indices {frozen} out of range for depth {depth}")
    recorded = record_attention(model, x)

    def batch_fn(b):
        override = {l: np.broadcast_to(recorded[l], (len(b),) + recorded[l].shape) for l in frozen}
        logits, _ = vit_forward(model, b, frozen_attention=override)
        return _ce_per_sample(logits, y)

    return central_difference(batch_fn, x, step)


# -- attention Jacobian decomposition -------------------------------------------


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(m).reshape(m.shape[0], -1).T.reshape(-1)


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product by explicit block assembly."""
    ra, ca = a.shape
    rb, cb = b.shape
    out = np.zeros((ra * rb, ca * cb))
    for i in range(ra):
        for j in range(ca):
            out[i * rb : (i + 1) * rb, j * cb : (j + 1) * cb] = a[i, j] * b
    return out


def _jacobian(fn, z, step):
    """Dense Jacobian of ``vec(fn(Z))`` w.r.t. ``vec(Z)`` by central differences."""
    n, d = z.shape
    cols = []
    for j in range(d):
        for i in range(n):  # column-stacking order of vec(Z)
            e = np.zeros_like(z)
            e[i, j] = step
            cols.append((vec(fn(z + e)) - vec(fn(z - e))) / (2.0 * step))
    return np.stack(cols, axis=1)


def attention_head(z, wq, wk, wv):
    """Single head: returns ``(A, Z W^V, A Z W^V)``."""
    dh = wq.shape[1]
    a = nx.softmax_rows_fwd((z @ wq) @ (z @ wk).T / np.sqrt(dh))
    v = z @ wv
    return a, v, a @ v


def kronecker_terms(z, wq, wk, wv, step: float = FD_STEP):
    """Full Jacobian of the head output and the two product-rule terms.

    Returns ``(jac_full, value_term, attention_term)`` where
    ``value_term = (I ⊗ A) d vec(Z W^V)/d vec(Z)`` and
    ``attention_term = ((Z W^V)^T ⊗ I) d vec(A)/d vec(Z)``.
    """
    a, v, _ = attention_head(z, wq, wk, wv)
    n, dh = v.shape
    jac_full = _jacobian(lambda m: attention_head(m, wq, wk, wv)[2], z, step)
    jac_v = _jacobian(lambda m: m @ wv, z, step)
    jac_a = _jacobian(lambda m: attention_head(m, wq, wk, wv)[0], z, step)
    value_term = kron(np.eye(dh), a) @ jac_v
    attention_term = kron(v.T, np.eye(n)) @ jac_a
    return jac_full, value_term, attention_term


def kronecker_identity_check(rng, sizes=(3, 4, 2), zero_query: bool = False,
                             step: float = FD_STEP) -> float:
    """Max absolute gap between the head Jacobian and its two-term decomposition."""
    n, d, dh = (int(s) for s in sizes)
    if min(n, d, dh) < 1 or max(n, d, dh) > 6:
        raise ConfigError(f"sizes {sizes} outside the dense-Jacobian range [1, 6]")
    z = rng.normal(0.0, 1.0, (n, d))
    wq = rng.normal(0.0, 1.0, (d, dh))
    wk = rng.normal(0.0, 1.0, (d, dh))
    wv = rng.normal(0.0, 1.0, (d, dh))
    if zero_query:
        wq = np.zeros_like(wq)
    full, t1, t2 = kronecker_terms(z, wq, wk, wv, step)
    return float(np.max(np.abs(full - t1 - t2)))


def rel_err(a, b) -> float:
    """Norm-wise relative error ``max|a-b| / max(max|a|, max|b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


# -- the gradcheck suite ----------------------------------------------------------------

GRADCHECK_TOL = 1e-5


def _probe_fd(fwd, x, probe, step):
    return central_difference(lambda b: np.array([np.sum(probe * fwd(v)) for v in b]), x, step)


def layer_checks(seed: int = 0, step: float = FD_STEP) -> dict:
    """Rel-errs of every primitive's input gradient against finite differences."""
    g = np.random.default_rng(seed)
    out = {}
    x, w, b = g.normal(size=(3, 4)), g.normal(size=(4, 2)), g.normal(size=2)
    p = g.normal(size=(3, 2))
    out["linear"] = rel_err(nx.linear_bwd(x, w, p)[0], _probe_fd(lambda v: nx.linear_fwd(v, w, b), x, p, step))
    z, p = g.normal(size=(3, 5)), g.normal(size=(3, 5))
    s = nx.softmax_rows_fwd(z)
    out["softmax"] = rel_err(nx.softmax_rows_bwd(s, p), _probe_fd(nx.softmax_rows_fwd, z, p, step))
    x, gm, bt, p = g.normal(size=(3, 6)), g.normal(size=6), g.normal(size=6), g.normal(size=(3, 6))
    _, cache = nx.layer_norm_fwd(x, gm, bt)
    out["layer_norm"] = rel_err(nx.layer_norm_bwd(cache, p)[0],
                                _probe_fd(lambda v: nx.layer_norm_fwd(v, gm, bt)[0], x, p, step))
    x, p = g.normal(0, 2, size=(4, 5)), g.normal(size=(4, 5))
    out["gelu"] = rel_err(nx.gelu_bwd(x, p), _probe_fd(nx.gelu_fwd, x, p, step))
    x, w, b = g.normal(size=(1, 5, 5, 2)), g.normal(size=(3, 3, 2, 3)), g.normal(size=3)
    p = g.normal(size=(1, 5, 5, 3))
    out["conv2d"] = rel_err(nx.conv2d_bwd(x, w, p)[0], _probe_fd(lambda v: nx.conv2d_fwd(v, w, b), x, p, step))
    x, p = g.normal(size=(1, 4, 4, 2)), g.normal(size=(1, 2, 2, 2))
    out["avgpool"] = rel_err(nx.avgpool_bwd(p, 2), _probe_fd(lambda v: nx.avgpool_fwd(v, 2), x, p, step))
    z, y = g.normal(size=(3, 5)), np.array([0, 4, 2])
    fd = central_difference(lambda bb: np.array([nx.cross_entropy_fwd_bwd(v, y)[0] for v in bb]), z, step)
    out["cross_entropy"] = rel_err(nx.cross_entropy_fwd_bwd(z, y)[1], fd)
    return out


def gradcheck_model(seed: int = 0):
    """The 2-block, D=16, 2-head, 8x8x3, P=4 ViT with random weights."""
    from .models import ViTConfig, init_vit
    from .rng import RngStream

    cfg = ViTConfig(image_h=8, image_w=8, channels=3, patch_size=4, embed_dim=16, head_dim=8,
                    num_heads=2, depth=2, mlp_hidden=32, num_classes=10)
    return init_vit(cfg, RngStream(seed).split("gradcheck"), "gradcheck")


def model_checks(seed: int = 0, n_images: int = 10, step: float = FD_STEP) -> dict:
    """Full-policy, PNA and per-block-frozen input gradients vs. their FD oracles.

    Also reports ``pna_vs_full_maxabs``: the largest gap between the PNA and
    full gradients, which must be non-zero for the PNA check to mean anything.
    """
    from .models import GradRoutingPolicy, vit_input_grad

    model = gradcheck_model(seed)
    depth = model.config.depth
    rng = np.random.default_rng([seed, 1])
    images = rng.uniform(0.0, 1.0, (n_images,) + model.config.image_shape)
    labels = rng.integers(0, model.config.num_classes, n_images)
    patterns = {"full": ()}
    for bits in range(1, 2**depth):
        frozen = tuple(l for l in range(depth) if bits >> l & 1)
        patterns["pna" if len(frozen) == depth else "frozen" + "".join(map(str, frozen))] = frozen
    errs = {k: 0.0 for k in patterns}
    gap = 0.0
    for x, y in zip(images, labels):
        grads = {}
        for name, frozen in patterns.items():
            enabled = tuple(l not in frozen for l in range(depth))
            policy = GradRoutingPolicy(enabled, (1.0,) * depth)
            grads[name] = vit_input_grad(model, x[None], np.array([y]), policy)[0]
            oracle = (fd_input_grad(model, x, y, step) if not frozen
                      else fd_frozen_attention_grad(model, x, y, frozen, step))
            errs[name] = max(errs[name], rel_err(grads[name], oracle))
        gap = max(gap, float(np.max(np.abs(grads["pna"] - grads["full"]))))
    errs["pna_vs_full_maxabs"] = gap
    return errs


def kronecker_checks(seeds=range(20), sizes=(3, 4, 2)) -> float:
    from .rng import RngStream

    return max(kronecker_identity_check(RngStream(s).split("kron"), sizes) for s in seeds)
