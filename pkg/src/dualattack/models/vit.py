"""Miniature Vision Transformer with an analytic, routable backward pass.

Block wiring is pre-norm::

    z = z + Proj(MSA(LN1(z)))
    z = z + FC2(GELU(FC1(LN2(z))))

Each head computes ``A = softmax(U Wq_h (U Wk_h)^T / sqrt(head_dim))`` and
outputs ``A (U Wv_h)`` with ``U = LN1(z)``; query/key/value projections carry
no bias, so a zero query (or key) weight yields exactly uniform attention.
With a class token the head reads token 0 after the final norm, otherwise the
mean over tokens.

The backward pass honours a :class:`GradRoutingPolicy`: blocks whose attention
gradient is disabled propagate only through the value path, i.e. their
attention maps are treated as constants. The forward pass never depends on
the policy.
"""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from ..errors import DimensionError, PolicyError
from .types import GradRoutingPolicy, ModelHandle, ViTConfig


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., H, W, C) -> (..., N, P*P*C)``, patches and pixels row-major."""
    *lead, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"patch size {p} does not divide image {h}x{w}")
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, image_h: int, image_w: int, channels: int, patch_size: int):
    *lead, n, d = patches.shape
    p = patch_size
    gh, gw = image_h // p, image_w // p
    if gh * gw != n or d != p * p * channels:
        raise DimensionError(
            f"patch matrix {patches.shape[-2:]} does not match image "
            f"{(image_h, image_w, channels)} with P={p}"
        )
    x = patches.reshape(*lead, gh, gw, p, p, channels)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, image_h, image_w, channels))


def param_shapes(cfg: ViTConfig) -> dict:
    d, hm = cfg.embed_dim, cfg.mlp_hidden
    pd = cfg.patch_size**2 * cfg.channels
    shapes = {"patch_embed.weight": (pd, d), "patch_embed.bias": (d,)}
    if cfg.use_class_token:
        shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (cfg.num_tokens, d)
    for l in range(cfg.depth):
        b = f"blocks.{l}."
        shapes.update({
            b + "norm1.weight": (d,), b + "norm1.bias": (d,),
            b + "attn.q.weight": (d, d), b + "attn.k.weight": (d, d), b + "attn.v.weight": (d, d),
            b + "attn.proj.weight": (d, d), b + "attn.proj.bias": (d,),
            b + "norm2.weight": (d,), b + "norm2.bias": (d,),
            b + "mlp.fc1.weight": (d, hm), b + "mlp.fc1.bias": (hm,),
            b + "mlp.fc2.weight": (hm, d), b + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.weight": (d,), "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


def init_vit(cfg: ViTConfig, rng, label: str = "vit") -> ModelHandle:
    """Random initialization: N(0, 1/fan_in) weights, unit norms, N(0, 0.02^2) embeddings."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            params[name] = np.ones(shape)
        elif name in ("cls_token", "pos_embed"):
            params[name] = rng.normal(0.0, 0.02, shape)
        elif name.endswith(".weight"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            params[name] = np.zeros(shape)
    return ModelHandle("vit", cfg, params, label)


def _heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _batched(model, images):
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.shape[1:] != tuple(model.config.image_shape):
        raise DimensionError(
            f"image shape {images.shape[1:]} does not match model input {model.config.image_shape}"
        )
    return nx.check_finite(images, "image"), single


def vit_forward(model: ModelHandle, images, frozen_attention: dict | None = None):
    """Forward pass on ``(H, W, C)`` or ``(B, H, W, C)`` images.

    ``frozen_attention`` maps block index to an attention array of shape
    ``(B, heads, T, T)`` used instead of the computed one (the forward-side
    half of a stop-gradient; the oracles rely on it).

    Returns ``(logits, cache)``; logits are ``(K,)`` for a single image.
    """
    cfg, p = model.config, model.params
    x, single = _batched(model, images)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    patches = patchify(x, cfg.patch_size)
    z = nx.linear_fwd(patches, p["patch_embed.weight"], p["patch_embed.bias"])
    if cfg.use_class_token:
        cls = np.broadcast_to(p["cls_token"], (z.shape[0], 1, cfg.embed_dim))
        z = np.concatenate([cls, z], axis=1)
    z = z + p["pos_embed"]
    blocks = []
    for l in range(cfg.depth):
        b = f"blocks.{l}."
        u, ln1 = nx.layer_norm_fwd(z, p[b + "norm1.weight"], p[b + "norm1.bias"])
        q = _heads(u @ p[b + "attn.q.weight"], cfg.num_heads)
        k = _heads(u @ p[b + "attn.k.weight"], cfg.num_heads)
        v = _heads(u @ p[b + "attn.v.weight"], cfg.num_heads)
        if frozen_attention is not None and l in frozen_attention:
            attn = np.asarray(frozen_attention[l], dtype=np.float64)
            if attn.shape != (z.shape[0], cfg.num_heads, z.shape[1], z.shape[1]):
                raise DimensionError(f"frozen attention for block {l} has shape {attn.shape}")
        else:
            attn = nx.softmax_rows_fwd((q @ k.transpose(0, 1, 3, 2)) * scale)
        o = _merge(attn @ v)
        z = z + nx.linear_fwd(o, p[b + "attn.proj.weight"], p[b + "attn.proj.bias"])
        u2, ln2 = nx.layer_norm_fwd(z, p[b + "norm2.weight"], p[b + "norm2.bias"])
        m1 = nx.linear_fwd(u2, p[b + "mlp.fc1.weight"], p[b + "mlp.fc1.bias"])
        g = nx.gelu_fwd(m1)
        z = z + nx.linear_fwd(g, p[b + "mlp.fc2.weight"], p[b + "mlp.fc2.bias"])
        blocks.append(dict(u=u, ln1=ln1, q=q, k=k, v=v, attn=attn, o=o, u2=u2, ln2=ln2, m1=m1, g=g))
    zf, lnf = nx.layer_norm_fwd(z, p["norm.weight"], p["norm.bias"])
    feat = zf[:, 0] if cfg.use_class_token else zf.mean(axis=1)
    logits = nx.linear_fwd(feat, p["head.weight"], p["head.bias"])
    cache = dict(patches=patches, blocks=blocks, lnf=lnf, feat=feat, tokens=z.shape[1], single=single)
    return (logits[0] if single else logits), cache


def _lin_back(x, w, g, grads, name, bias=True):
    if grads is None:
        return g @ w.T
    gx, gw, gb = nx.linear_bwd(x, w, g)
    grads[name + ".weight"] = gw
    if bias:
        grads[name + ".bias"] = gb
    return gx


def vit_backward(model: ModelHandle, cache, grad_logits, policy: GradRoutingPolicy | None = None,
                 param_grads: bool = False):
    """Backpropagate ``grad_logits`` to the input image (and optionally parameters).

    Returns ``(grad_images, grads)`` where ``grads`` is a name->array dict or None.
    """
    cfg, p = model.config, model.params
    if policy is None:
        policy = GradRoutingPolicy.full(cfg.depth)
    if policy.depth != cfg.depth:
        raise PolicyError(f"policy covers {policy.depth} blocks, model has depth {cfg.depth}")
    grads = {} if param_grads else None
    gl = np.asarray(grad_logits, dtype=np.float64)
    if cache["single"]:
        gl = gl[None]
    scale = 1.0 / np.sqrt(cfg.head_dim)

    gfeat = _lin_back(cache["feat"], p["head.weight"], gl, grads, "head")
    bsz, t = gl.shape[0], cache["tokens"]
    gzf = np.zeros((bsz, t, cfg.embed_dim))
    if cfg.use_class_token:
        gzf[:, 0] = gfeat
    else:
        gzf[:] = gfeat[:, None, :] / t
    gz, gg, gb = nx.layer_norm_bwd(cache["lnf"], gzf)
    if grads is not None:
        grads["norm.weight"], grads["norm.bias"] = gg, gb

    for l in reversed(range(cfg.depth)):
        c = cache["blocks"][l]
        b = f"blocks.{l}."
        # MLP residual branch, scaled by the per-block decay
        gm = gz * policy.mlp_grad_decay[l] if policy.mlp_grad_decay[l] != 1.0 else gz
        gg_ = _lin_back(c["g"], p[b + "mlp.fc2.weight"], gm, grads, b + "mlp.fc2")
        gm1 = nx.gelu_bwd(c["m1"], gg_)
        gu2 = _lin_back(c["u2"], p[b + "mlp.fc1.weight"], gm1, grads, b + "mlp.fc1")
        gres, gn, gnb = nx.layer_norm_bwd(c["ln2"], gu2)
        if grads is not None:
            grads[b + "norm2.weight"], grads[b + "norm2.bias"] = gn, gnb
        gz = gz + gres
        # attention branch
        go = _lin_back(c["o"], p[b + "attn.proj.weight"], gz, grads, b + "attn.proj")
        go = _heads(go, cfg.num_heads)
        attn = c["attn"]
        gv = attn.transpose(0, 1, 3, 2) @ go
        gu = _lin_back(c["u"], p[b + "attn.v.weight"], _merge(gv), grads, b + "attn.v", bias=False)
        if policy.attention_grad_enabled[l]:
            ga = go @ c["v"].transpose(0, 1, 3, 2)
            gs = nx.softmax_rows_bwd(attn, ga) * scale
            gq = gs @ c["k"]
            gk = gs.transpose(0, 1, 3, 2) @ c["q"]
            gu = gu + _lin_back(c["u"], p[b + "attn.q.weight"], _merge(gq), grads, b + "attn.q", bias=False)
            gu = gu + _lin_back(c["u"], p[b + "attn.k.weight"], _merge(gk), grads, b + "attn.k", bias=False)
        elif grads is not None:
            grads[b + "attn.q.weight"] = np.zeros_like(p[b + "attn.q.weight"])
            grads[b + "attn.k.weight"] = np.zeros_like(p[b + "attn.k.weight"])
        gres, gn, gnb = nx.layer_norm_bwd(c["ln1"], gu)
        if grads is not None:
            grads[b + "norm1.weight"], grads[b + "norm1.bias"] = gn, gnb
        gz = gz + gres

    if grads is not None:
        grads["pos_embed"] = gz.sum(axis=0)
    if cfg.use_class_token:
        if grads is not None:
            grads["cls_token"] = gz[:, :1].sum(axis=0)
        gz = gz[:, 1:]
    gpatch = _lin_back(cache["patches"], p["patch_embed.weight"], gz, grads, "patch_embed")
    gimg = unpatchify(gpatch, cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size)
    if cache["single"]:
        gimg = gimg[0]
    return gimg, grads


def vit_input_grad(model: ModelHandle, images, labels, policy: GradRoutingPolicy | None = None):
    """Gradient of the (per-image) cross-entropy loss w.r.t. the input pixels."""
    if policy is not None and policy.depth != model.config.depth:
        raise PolicyError(f"policy covers {policy.depth} blocks, model has depth {model.config.depth}")
    logits, cache = vit_forward(model, images)
    _, gl = nx.cross_entropy_fwd_bwd(logits, labels, reduction="sum")
    grad, _ = vit_backward(model, cache, gl, policy)
    return grad
