"""Numerically stable probability and loss kernels.

All kernels are implemented on torch tensors so the distillation loss is
differentiable with respect to student logits. Plain array/list inputs are
accepted and computed in float64, with results handed back as numpy arrays
or python floats.

Conventions: natural log throughout; inside any log, the second distribution
is floored at ``EPS``; terms with P(x) = 0 contribute exactly 0.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import ConfigError

EPS = 1e-12
LOG_EPS = math.log(EPS)


def _as_tensor(x):
    """Return (tensor, was_tensor). Non-tensor inputs are promoted to float64."""
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def softmax(logits, temperature: float = 1.0):
    """Temperature softmax over the last axis, with max-subtraction.

    Stable for logit magnitudes up to at least 1e4.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z, was_tensor = _as_tensor(logits)
    if not torch.isfinite(z).all():
        raise ConfigError("non-finite logits")
    z = z / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    p = torch.exp(z)
    p = p / p.sum(dim=-1, keepdim=True)
    return p if was_tensor else p.numpy()


def kl_divergence(p, q):
    """KL(P || Q) = sum_x P(x) * log(P(x) / Q(x)), in nats.

    Q is floored at EPS inside the log; P(x)=0 terms are 0 by continuity.
    Reduces over the last axis.
    """
    pt, p_tensor = _as_tensor(p)
    qt, q_tensor = _as_tensor(q)
    if pt.shape[-1] != qt.shape[-1]:
        raise ConfigError(
            f"dimension mismatch: {pt.shape[-1]} vs {qt.shape[-1]}"
        )
    log_q = torch.log(torch.clamp(qt, min=EPS))
    kl = (torch.xlogy(pt, pt) - pt * log_q).sum(dim=-1)
    if p_tensor or q_tensor:
        return kl
    return float(kl) if kl.ndim == 0 else kl.numpy()


def cross_entropy(logits, label: int):
    """Cross-entropy -log softmax(logits)[label] via log-sum-exp, in nats."""
    z, was_tensor = _as_tensor(logits)
    n_classes = z.shape[-1]
    if not 0 <= label < n_classes:
        raise ConfigError(f"label {label} out of range [0, {n_classes})")
    loss = torch.logsumexp(z, dim=-1) - z[..., label]
    if was_tensor:
        return loss
    return float(loss) if loss.ndim == 0 else loss.numpy()


def cross_entropy_mean(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy on (B, C) logits; used by the teacher trainer."""
    if logits.shape[0] == 0:
        raise ConfigError("empty batch")
    log_p = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_p.gather(1, labels.view(-1, 1)).mean()


def distillation_loss(teacher_probs, student_logits, temperature: float = 1.0):
    """Batch-mean KL(teacher || softmax(student / T)).

    Temperature applies to the student softmax only; teacher rows arrive as
    probabilities. Differentiable w.r.t. the student logits.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    p, p_tensor = _as_tensor(teacher_probs)
    z, z_tensor = _as_tensor(student_logits)
    if p.ndim != 2 or z.ndim != 2:
        raise ConfigError("expected (batch, classes) teacher probs and student logits")
    if p.shape[0] != z.shape[0]:
        raise ConfigError(f"batch-size mismatch: {p.shape[0]} vs {z.shape[0]}")
    if p.shape[1] != z.shape[1]:
        raise ConfigError(f"class-count mismatch: {p.shape[1]} vs {z.shape[1]}")
    if p.shape[0] == 0:
        raise ConfigError("empty batch")
    log_q = torch.log_softmax(z / temperature, dim=-1)
    log_q = torch.clamp(log_q, min=LOG_EPS)
    kl_rows = (torch.xlogy(p, p) - p * log_q).sum(dim=-1)
    loss = kl_rows.mean()
    return loss if (p_tensor or z_tensor) else float(loss)


def check_prob_rows(rows, tol: float = 1e-5) -> None:
    """Validate that every row is a probability vector (>= 0, sums to 1 +- tol)."""
    arr = np.asarray(rows, dtype=np.float64)
    if (arr < 0).any():
        raise ConfigError("probability rows contain negative entries")
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if bad.any():
        raise ConfigError(
            f"{int(np.count_nonzero(bad))} probability rows do not sum to 1 within {tol}"
        )
