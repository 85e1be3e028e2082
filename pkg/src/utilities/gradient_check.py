"""
Central finite-difference oracle for composite modules.

torch.autograd.gradcheck perturbs every input coordinate, which is too slow for a
network with thousands of weights; here a few coordinates per tensor are sampled.
"""
from typing import Callable, Dict, Iterable, Tuple

import numpy as np
import torch


def sampled_gradient_check(loss_fn: Callable[[], torch.Tensor],
                           tensors: Iterable[Tuple[str, torch.Tensor]],
                           samples_per_tensor: int = 3,
                           eps: float = 1e-5,
                           floor: float = 1e-6,
                           atol_scale: float = 1e-3,
                           seed: int = 0) -> Dict[str, float]:
    """
    Compare autograd gradients of loss_fn() against central differences.

    Args:
        loss_fn: closure returning a scalar; must be deterministic across calls
        tensors: (name, leaf tensor) pairs, e.g. module.named_parameters()
        samples_per_tensor: coordinates probed per tensor
        eps: finite-difference step
        floor: denominator floor of the relative error; coordinates whose analytic
            gradient is below it are only probed when nothing larger exists
        atol_scale: coordinates whose absolute error is below atol_scale * eps * max(|loss|, 1)
            count as exact; the relative error is meaningless where the true gradient is 0
    Returns:
        name -> worst relative error over the probed coordinates
    """
    named = [(n, t) for n, t in tensors if t.requires_grad]
    loss = loss_fn()
    atol = atol_scale * eps * max(abs(loss.item()), 1.0)
    grads = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)

    rng = np.random.default_rng(seed)
    errors = {}
    for (name, tensor), grad in zip(named, grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        flat_grad = grad.detach().reshape(-1)
        candidates = torch.nonzero(flat_grad.abs() > floor).flatten().tolist()
        if not candidates:
            candidates = list(range(flat_grad.numel()))
        picks = rng.choice(candidates, size=min(samples_per_tensor, len(candidates)), replace=False)

        flat = tensor.detach().view(-1)
        worst = 0.0
        for idx in picks:
            idx = int(idx)
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + eps
                plus = loss_fn().item()
                flat[idx] = original - eps
                minus = loss_fn().item()
                flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = flat_grad[idx].item()
            if abs(analytic - numeric) <= atol:
                continue
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)
        errors[name] = worst
    return errors
