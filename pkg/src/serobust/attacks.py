"""White-box adversarial attacks on normalized feature segments.

Both attacks perturb inputs in the normalized feature space under an
L-infinity budget epsilon (default 0.08, i.e. 8% of a unit-variance bin).
They take and return numpy arrays; gradients flow through the model's logits
with the standard cross-entropy loss on the true labels (untargeted).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteGradient

EPSILON_DEFAULT = 0.08
BIM_STEPS_DEFAULT = 10


def _input_gradient(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.clone().requires_grad_(True)
    loss = F.cross_entropy(model.logits(x), y)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("attack gradient contains non-finite values")
    return grad


def _prepare(model, segments, labels):
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(segments), dtype=dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} segments but {y.shape[0]} labels")
    return x, y


def fgsm(model, segments: np.ndarray, labels: np.ndarray,
         epsilon: float = EPSILON_DEFAULT) -> np.ndarray:
    """Fast gradient sign attack: x + epsilon * sign(dL/dx).

    The model is evaluated in eval mode (batch-norm running statistics,
    dropout off) and restored afterwards.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    x, y = _prepare(model, segments, labels)
    was_training = model.training
    model.eval()
    try:
        grad = _input_gradient(model, x, y)
        adv = x + epsilon * torch.sign(grad)
    finally:
        model.train(was_training)
    return adv.detach().cpu().numpy()


def bim(model, segments: np.ndarray, labels: np.ndarray,
        epsilon: float = EPSILON_DEFAULT, steps: int = BIM_STEPS_DEFAULT,
        step_size: float | None = None) -> np.ndarray:
    """Basic iterative attack: repeated signed-gradient steps, each result
    clipped back into the epsilon ball around the original input.

    ``step_size`` defaults to epsilon / 5.  With steps=1 and
    step_size=epsilon this reduces to the single-step attack.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if step_size is None:
        step_size = epsilon / 5.0
    x0, y = _prepare(model, segments, labels)
    lo, hi = x0 - epsilon, x0 + epsilon
    was_training = model.training
    model.eval()
    try:
        x = x0.clone()
        for _ in range(steps):
            grad = _input_gradient(model, x, y)
            x = torch.clamp(x + step_size * torch.sign(grad), min=lo, max=hi)
    finally:
        model.train(was_training)
    return x.detach().cpu().numpy()
