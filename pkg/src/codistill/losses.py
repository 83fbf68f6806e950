"""Cross-entropy plus spectral distillation terms for the two local objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import LabeledBatch, MlpSpec, ce_loss_and_grad
from .spectrum import EPS, Spectrum, divergence_and_grad


@dataclass(frozen=True)
class DistillCoefficients:
    lambda_p: float = 1e-4
    lambda_g: float = 1e-5
    tau: float = 0.2
    eps: float = EPS
    normalize: bool = False

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_g < 0:
            raise ValueError("distillation coefficients must be non-negative")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


class LossParts(NamedTuple):
    ce: float
    reg: float  # already scaled by its coefficient
    grad: np.ndarray

    @property
    def total(self) -> float:
        return self.ce + self.reg


def spectral_objective(w, teacher: Spectrum, lam: float, spec: MlpSpec, batch: LabeledBatch,
                       eps: float = EPS, normalize: bool = False) -> LossParts:
    """``CE(w) + lam * D(s_tau(w) || teacher)`` with tau taken from the teacher."""
    ce, grad = ce_loss_and_grad(w, spec, batch)
    if lam == 0.0:
        return LossParts(ce, 0.0, grad)
    value, reg_grad = divergence_and_grad(w, teacher, teacher.tau, eps, normalize=normalize)
    return LossParts(ce, lam * value, grad + lam * reg_grad)


def pm_parts(w_p, teacher: Spectrum, spec: MlpSpec, batch: LabeledBatch,
             coeffs: DistillCoefficients) -> LossParts:
    if not teacher.is_full:
        raise ValueError(f"personalized loss needs the full teacher spectrum, got {teacher.kind}")
    return spectral_objective(w_p, teacher, coeffs.lambda_p, spec, batch, coeffs.eps, coeffs.normalize)


def gm_parts(w_g, teacher: Spectrum, spec: MlpSpec, batch: LabeledBatch,
             coeffs: DistillCoefficients) -> LossParts:
    if teacher.tau != coeffs.tau:
        raise ValueError(f"generic loss expects a truncated({coeffs.tau:g}) teacher, got {teacher.kind}")
    return spectral_objective(w_g, teacher, coeffs.lambda_g, spec, batch, coeffs.eps, coeffs.normalize)


def pm_loss_and_grad(w_p, teacher: Spectrum, spec: MlpSpec, batch: LabeledBatch,
                     coeffs: DistillCoefficients) -> tuple[float, np.ndarray]:
    """Personalized loss: CE plus ``lambda_p`` times the full-spectrum divergence to the generic model."""
    parts = pm_parts(w_p, teacher, spec, batch, coeffs)
    return parts.total, parts.grad


def gm_loss_and_grad(w_g, teacher: Spectrum, spec: MlpSpec, batch: LabeledBatch,
                     coeffs: DistillCoefficients) -> tuple[float, np.ndarray]:
    """Generic loss: CE plus ``lambda_g`` times the truncated-spectrum divergence to the personalized model."""
    parts = gm_parts(w_g, teacher, spec, batch, coeffs)
    return parts.total, parts.grad


def l2_objective(w, anchor, mu: float, spec: MlpSpec, batch: LabeledBatch) -> LossParts:
    """CE plus ``mu/2 * ||w - anchor||^2`` (Ditto-style personalization)."""
    ce, grad = ce_loss_and_grad(w, spec, batch)
    if mu == 0.0:
        return LossParts(ce, 0.0, grad)
    diff = np.asarray(w) - np.asarray(anchor)
    return LossParts(ce, 0.5 * mu * float(diff @ diff), grad + mu * diff)
