"""Small convolutional victim: [conv -> GELU -> avgpool] x n -> global mean -> linear."""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from .types import CNNConfig, ModelHandle
from .vit import _batched


def param_shapes(cfg: CNNConfig) -> dict:
    shapes = {}
    cin, k = cfg.channels, cfg.kernel_size
    for i, cout in enumerate(cfg.conv_channels):
        shapes[f"conv{i}.weight"] = (k, k, cin, cout)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    shapes["head.weight"] = (cin, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_cnn(cfg: CNNConfig, rng, label: str = "cnn") -> ModelHandle:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        else:
            params[name] = np.zeros(shape)
    return ModelHandle("cnn", cfg, params, label)


def cnn_forward(model: ModelHandle, images):
    cfg, p = model.config, model.params
    x, single = _batched(model, images)
    layers = []
    for i, pool in enumerate(cfg.pools):
        pre = nx.conv2d_fwd(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
        act = nx.gelu_fwd(pre)
        layers.append((x, pre))
        x = nx.avgpool_fwd(act, pool) if pool > 1 else act
    feat = x.mean(axis=(1, 2))
    logits = nx.linear_fwd(feat, p["head.weight"], p["head.bias"])
    cache = dict(layers=layers, feat=feat, spatial=x.shape[1:3], single=single)
    return (logits[0] if single else logits), cache


def cnn_backward(model: ModelHandle, cache, grad_logits, param_grads: bool = False):
    cfg, p = model.config, model.params
    grads = {} if param_grads else None
    gl = np.asarray(grad_logits, dtype=np.float64)
    if cache["single"]:
        gl = gl[None]
    gfeat, gw, gb = nx.linear_bwd(cache["feat"], p["head.weight"], gl)
    if grads is not None:
        grads["head.weight"], grads["head.bias"] = gw, gb
    h, w = cache["spatial"]
    g = np.broadcast_to(gfeat[:, None, None, :] / (h * w), (gl.shape[0], h, w, gfeat.shape[1]))
    for i in reversed(range(len(cfg.pools))):
        x_in, pre = cache["layers"][i]
        pool = cfg.pools[i]
        if pool > 1:
            g = nx.avgpool_bwd(g, pool)
        g = nx.gelu_bwd(pre, g)
        g, gw, gb = nx.conv2d_bwd(x_in, p[f"conv{i}.weight"], np.ascontiguousarray(g))
        if grads is not None:
            grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = gw, gb
    if cache["single"]:
        g = g[0]
    return g, grads


def cnn_input_grad(model: ModelHandle, images, labels):
    logits, cache = cnn_forward(model, images)
    _, gl = nx.cross_entropy_fwd_bwd(logits, labels, reduction="sum")
    grad, _ = cnn_backward(model, cache, gl)
    return grad
