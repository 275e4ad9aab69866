"""Support prototypes and their query-guided kernel-density correction."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import torch

# incremented on every calibrate() call; lets callers prove a path never calibrates
CALL_COUNTER: Counter = Counter()

KERNEL_MODES = ("softmax", "normalized")
WEIGHTING = ("sample", "dimension")


@dataclass
class CalibratedPrototypes:
    raw: torch.Tensor  # [N, d']
    corrected: torch.Tensor  # [N, d']
    correction: torch.Tensor  # [N, d']
    beta_hat: torch.Tensor  # scalar
    sigma: float


def beta_hat(beta, dtype=None) -> torch.Tensor:
    """Squash the unconstrained calibration strength into (0, 1)."""
    if not torch.is_tensor(beta):
        beta = torch.tensor(float(beta), dtype=dtype or torch.get_default_dtype())
    elif dtype is not None:
        beta = beta.to(dtype)
    return 0.5 * (torch.tanh(beta) + 1.0)


def prototypes(support: torch.Tensor, labels, n_way: int, k_shot: int | None = None) -> torch.Tensor:
    """Row k is the mean of the support rows labelled k."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    counts = torch.bincount(labels, minlength=n_way)
    if len(counts) > n_way:
        raise ValueError(f"support label outside [0, {n_way})")
    if torch.any(counts == 0):
        missing = int(torch.nonzero(counts == 0)[0])
        raise ValueError(f"class {missing} has no support rows")
    if k_shot is not None and torch.any(counts != k_shot):
        raise ValueError(f"expected {k_shot} support rows per class, got {counts.tolist()}")
    sums = torch.zeros(n_way, support.shape[1], dtype=support.dtype).index_add(0, labels, support)
    return sums / counts.to(support.dtype)[:, None]


def _check_sigma(sigma):
    if not float(sigma) > 0:
        raise ValueError(f"kernel bandwidth must be positive, got {sigma}")


def kernel_weights(queries: torch.Tensor, prototype: torch.Tensor, sigma: float,
                   mode: str = "softmax") -> torch.Tensor:
    """One weight per query, summing to 1.

    ``softmax`` feeds the Gaussian kernel values themselves to a softmax, so
    the weights live between ``1/(e + n - 1)`` and ``e/(e + n - 1)``;
    ``normalized`` divides the kernel values by their sum instead.
    """
    _check_sigma(sigma)
    sq = ((queries - prototype) ** 2).sum(dim=-1)
    k = torch.exp(-sq / (2.0 * sigma**2))
    return _normalize(k, mode, dim=-1)


def _normalize(k, mode, dim):
    if mode == "softmax":
        return torch.softmax(k, dim=dim)
    if mode == "normalized":
        total = k.sum(dim=dim, keepdim=True)
        # every kernel value underflowed: fall back to uniform weights
        uniform = torch.full_like(k, 1.0 / k.shape[dim])
        return torch.where(total > 0, k / total.clamp_min(torch.finfo(k.dtype).tiny), uniform)
    raise ValueError(f"unknown kernel mode {mode!r}")


def calibrate(raw: torch.Tensor, queries: torch.Tensor, sigma: float, beta,
              mode: str = "softmax", weighting: str = "sample") -> CalibratedPrototypes:
    """Shift every prototype toward the kernel-weighted query mass around it.

    ``weighting="dimension"`` uses a separate weight per query and feature
    (kernel of the squared per-coordinate difference, normalized over queries).
    """
    _check_sigma(sigma)
    CALL_COUNTER["calibrate"] += 1
    diff = queries[None, :, :] - raw[:, None, :]  # [N, NM, d']
    if weighting == "sample":
        k = torch.exp(-(diff**2).sum(dim=-1) / (2.0 * sigma**2))  # [N, NM]
        w = _normalize(k, mode, dim=1)[:, :, None]
    elif weighting == "dimension":
        k = torch.exp(-(diff**2) / (2.0 * sigma**2))  # [N, NM, d']
        w = _normalize(k, mode, dim=1)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    correction = (w * diff).sum(dim=1)
    bh = beta_hat(beta, raw.dtype)
    return CalibratedPrototypes(raw=raw, corrected=raw + bh * correction,
                                correction=correction, beta_hat=bh, sigma=float(sigma))


def uncalibrated(raw: torch.Tensor, beta=0.0) -> CalibratedPrototypes:
    """Identity calibration (zero correction)."""
    return CalibratedPrototypes(raw=raw, corrected=raw, correction=torch.zeros_like(raw),
                                beta_hat=beta_hat(beta, raw.dtype), sigma=float("inf"))
