"""Bias-corrected Adam with optional global-norm gradient clipping."""

import numpy as np

from . import _kernels
from .autodiff import ContractError


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        """params: list of (name, Tensor) pairs; all must require grad."""
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def grad_norm(self):
        sq = 0.0
        for _, t in self.params:
            if t.grad is not None:
                sq += float((t.grad * t.grad).sum())
        return sq**0.5

    def step(self):
        """One update; returns the pre-clip global gradient norm.

        Parameters whose grad is None are skipped: a composite loss with a
        zeroed term legitimately leaves part of the model untouched.
        """
        if all(t.grad is None for _, t in self.params):
            raise ContractError("step called but no parameter has a gradient")
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for i, (_, t) in enumerate(self.params):
            if t.grad is None:
                continue
            g = t.grad if scale == 1.0 else t.grad * scale
            _kernels.adam_update(t.data, g, self.m[i], self.v[i], self.lr,
                                 b1, b2, self.eps, bc1, bc2)
        return norm
