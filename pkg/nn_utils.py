import functools
import hashlib
import logging
import random

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)


class GradReverse(torch.autograd.Function):
    """Identity on the forward pass, gradient multiplied by -lambda on the backward pass."""

    @staticmethod
    def forward(ctx, x, constant):
        ctx.constant = constant
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        grad_output = grad_output.neg() * ctx.constant
        return grad_output, None


class GradientReversal(nn.Module):
    """Module wrapper of `GradReverse` whose strength can be changed during training."""

    def __init__(self, grl_lambda: float = 1.0):
        super().__init__()
        if grl_lambda < 0:
            raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
        self.grl_lambda = grl_lambda

    def forward(self, x):
        return GradReverse.apply(x, self.grl_lambda)

    def extra_repr(self) -> str:
        return f"grl_lambda={self.grl_lambda}"


def grl_transform(upstream_gradient: torch.Tensor, grl_lambda: float) -> torch.Tensor:
    """Runs an upstream gradient backwards through the reversal layer.

    Arguments:
        upstream_gradient {tensor} -- gradient arriving from the auxiliary head
        grl_lambda {float} -- reversal strength, >= 0

    Returns:
        tensor -- gradient passed on to the feature extractor
    """

    if grl_lambda < 0:
        raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
    x = torch.zeros_like(upstream_gradient, requires_grad=True)
    y = GradReverse.apply(x, grl_lambda)
    y.backward(upstream_gradient)
    return x.grad


def grl_warmup(grl_lambda: float, progress: float) -> float:
    """Ramp from 0 to grl_lambda as progress goes from 0 to 1."""
    progress = min(max(progress, 0.0), 1.0)
    return grl_lambda * (2.0 / (1.0 + np.exp(-10 * progress)) - 1.0)


def get_n_trainable_parameters(model):
    """This function calculates the number of trainable parameters
    of the model

    Arguments:
        model {nn.Module} -- model

    Returns:
        int -- the number of trainable parameters of the model
    """

    cnt = 0
    for param in list(model.parameters()):
        if param.requires_grad:
            cnt += functools.reduce(lambda x, y: x * y, list(param.size()), 1)
    return cnt


def split_seed(master: int, purpose: str) -> int:
    """Independent 31-bit seed for one purpose (init, shuffle, val, ...) of a run."""
    digest = hashlib.sha256(f"{master}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def set_seed(seed: int, device: int = -1):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if device > -1:
        torch.cuda.manual_seed(seed)


def get_device(device: int) -> torch.device:
    if device > -1 and not torch.cuda.is_available():
        logger.error("config conflicts: no gpu available, use cpu.")
        device = -1
    return torch.device(f"cuda:{device}" if device > -1 else "cpu")


def iterate_batches(n: int, batch_size: int, generator=None):
    """Yields index tensors covering range(n), shuffled when a generator is given."""
    if generator is not None:
        order = torch.randperm(n, generator=generator)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
