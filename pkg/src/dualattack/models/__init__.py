"""Model families, gradient routing and checkpoints."""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .cnn import cnn_backward, cnn_forward, cnn_input_grad, init_cnn
from .types import CNNConfig, GradRoutingPolicy, ModelHandle, ViTConfig
from .vit import init_vit, patchify, unpatchify, vit_backward, vit_forward, vit_input_grad

__all__ = [
    "CNNConfig", "GradRoutingPolicy", "ModelHandle", "ViTConfig",
    "init_vit", "init_cnn", "patchify", "unpatchify",
    "vit_forward", "vit_backward", "vit_input_grad",
    "cnn_forward", "cnn_backward", "cnn_input_grad",
    "forward", "backward", "input_grad", "predict", "loss_and_param_grads",
    "save_checkpoint", "load_checkpoint", "read_container", "write_container",
]


def forward(model: ModelHandle, images):
    if model.kind == "vit":
        return vit_forward(model, images)
    return cnn_forward(model, images)


def backward(model: ModelHandle, cache, grad_logits, param_grads: bool = False):
    if model.kind == "vit":
        return vit_backward(model, cache, grad_logits, param_grads=param_grads)
    return cnn_backward(model, cache, grad_logits, param_grads=param_grads)


def input_grad(model: ModelHandle, images, labels, policy: GradRoutingPolicy | None = None):
    if model.kind == "vit":
        return vit_input_grad(model, images, labels, policy)
    return cnn_input_grad(model, images, labels)


def predict(model: ModelHandle, images, batch_size: int = 256) -> np.ndarray:
    """Argmax class for a batch of images, evaluated in fixed-size chunks."""
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward(model, images[i : i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss_and_param_grads(model: ModelHandle, images, labels):
    """Mean cross-entropy over the batch and its parameter gradients."""
    logits, cache = forward(model, images)
    loss, gl = nx.cross_entropy_fwd_bwd(logits, labels, reduction="mean")
    _, grads = backward(model, cache, gl, param_grads=True)
    return loss, grads, logits
