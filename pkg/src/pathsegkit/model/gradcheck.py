"""Finite-difference validation of the analytic gradients.

For every parameter tensor the training loss gradient is compared against
central finite differences.  The per-tensor relative error is

    ||g_analytic - g_fd||_2 / max(||g_analytic||_2 + ||g_fd||_2, 1e-12)

which is 0 for tensors the loss does not depend on (both sides identically
zero) and O(step^2) for a correct implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .network import Params, loss_and_grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def gradient_check(
    params: Params,
    image: np.ndarray,
    token_ids: list[int],
    gt_mask: np.ndarray,
    cfg: ModelConfig,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    tensors: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients to central finite differences.

    Intended for small configurations (d <= 16, images up to 32x32).  The
    report lists every checked tensor's relative error; tensors exceeding
    the tolerance are collected in `failures` rather than raised.
    """

    def loss_fn() -> float:
        breakdown, _ = loss_and_grads(image, token_ids, gt_mask, params, cfg)
        return breakdown.total

    _, analytic = loss_and_grads(image, token_ids, gt_mask, params, cfg)

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    names = tensors if tensors is not None else sorted(params)
    for name in names:
        tensor = params[name]
        fd = np.zeros_like(tensor)
        flat = tensor.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_plus = loss_fn()
            flat[i] = orig - step
            loss_minus = loss_fn()
            flat[i] = orig
            fd_flat[i] = (loss_plus - loss_minus) / (2.0 * step)
        ga = analytic[name]
        denom = max(np.linalg.norm(ga) + np.linalg.norm(fd), 1e-12)
        rel = float(np.linalg.norm(ga - fd) / denom)
        report.per_tensor[name] = rel
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel > tolerance:
            report.failures.append(name)
    return report
