"""Scalar training objectives.

All GAN losses are descent-form: each owner minimizes its loss, which
implements the underlying min-max game. Probabilities are clamped away
from {0, 1} before logs so early training cannot produce infinities.

The triplet loss is the mean over the batch of -log p, where
p = exp(d-) / (exp(d+) + exp(d-)) is the probability that the negative is
farther than the positive; -log p equals softplus(d+ - d-), which is the
numerically stable form used for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import Tensor
from torch.nn import functional as F

from .errors import ContractError
from .models import LatentCode

PROB_EPS = 1e-7


@dataclass
class LossReport:
    """One step's (or one epoch's mean) loss values.

    Fields are None when the corresponding term was not computed (no
    triplet batch, or the model variant does not train that part).
    """

    l_d: Optional[float] = None
    l_eg: Optional[float] = None
    l_t: Optional[float] = None
    l_teg: Optional[float] = None
    d_plus_mean: Optional[float] = None
    d_minus_mean: Optional[float] = None

    def __post_init__(self):
        for name, value in self.to_dict().items():
            if value is not None and not math.isfinite(value):
                raise ContractError(f"loss report field {name} is not finite: {value}")

    def to_dict(self) -> dict[str, Optional[float]]:
        return {
            "l_d": self.l_d,
            "l_eg": self.l_eg,
            "l_t": self.l_t,
            "l_teg": self.l_teg,
            "d_plus_mean": self.d_plus_mean,
            "d_minus_mean": self.d_minus_mean,
        }

    def check_combination(self, lam: float, tol: float = 1e-6) -> None:
        if self.l_t is not None and self.l_teg is not None and self.l_eg is not None:
            expected = self.l_eg + lam * self.l_t
            if abs(self.l_teg - expected) > tol:
                raise ContractError(f"l_teg {self.l_teg} != l_eg + lambda*l_t = {expected}")


def _as_code_tensor(code: Union[LatentCode, Tensor]) -> Tensor:
    return code.z if isinstance(code, LatentCode) else code


def triplet_distances(
    anchor: Union[LatentCode, Tensor],
    positive: Union[LatentCode, Tensor],
    negative: Union[LatentCode, Tensor],
) -> tuple[Tensor, Tensor]:
    """Per-example L2 distances (d+, d-) between latent codes."""
    a, p, n = _as_code_tensor(anchor), _as_code_tensor(positive), _as_code_tensor(negative)
    if a.shape != p.shape or a.shape != n.shape:
        raise ContractError(f"code shapes differ: {tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}")
    d_plus = torch.linalg.vector_norm(a - p, dim=1)
    d_minus = torch.linalg.vector_norm(a - n, dim=1)
    return d_plus, d_minus


def triplet_probability(d_plus, d_minus):
    """p = exp(d-) / (exp(d+) + exp(d-)), computed overflow-free.

    Accepts scalars or arrays; the max of the two distances is subtracted
    before exponentiation.
    """
    d_plus = np.asarray(d_plus, dtype=np.float64)
    d_minus = np.asarray(d_minus, dtype=np.float64)
    if np.any(d_plus < 0) or np.any(d_minus < 0):
        raise ContractError("distances must be non-negative")
    shift = np.maximum(d_plus, d_minus)
    ep = np.exp(d_plus - shift)
    en = np.exp(d_minus - shift)
    p = en / (ep + en)
    return float(p) if p.ndim == 0 else p


def triplet_loss(
    anchor: Union[LatentCode, Tensor],
    positive: Union[LatentCode, Tensor],
    negative: Union[LatentCode, Tensor],
) -> Tensor:
    """Mean over the batch of -log p = softplus(d+ - d-)."""
    d_plus, d_minus = triplet_distances(anchor, positive, negative)
    return F.softplus(d_plus - d_minus).mean()


def _checked_probs(values: Tensor, name: str) -> Tensor:
    if torch.any(values < 0) or torch.any(values > 1):
        raise ContractError(f"{name} contains values outside [0, 1]")
    return values.clamp(PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean log D(real pair) - mean log(1 - D(generated pair))."""
    d_real = _checked_probs(d_real, "d_real")
    d_fake = _checked_probs(d_fake, "d_fake")
    return -torch.log(d_real).mean() - torch.log(1.0 - d_fake).mean()


def encoder_generator_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean log D(generated pair) - mean log(1 - D(real pair))."""
    d_real = _checked_probs(d_real, "d_real")
    d_fake = _checked_probs(d_fake, "d_fake")
    return -torch.log(d_fake).mean() - torch.log(1.0 - d_real).mean()


def combined_loss(l_eg, l_t, lam: float):
    """l_eg + lam * l_t; lam >= 0."""
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    return l_eg + lam * l_t
