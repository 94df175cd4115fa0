"""Loss terms: classification NLL, domain-adversarial NLL, and the batch Frobenius term.

Each per-domain expectation is estimated by the mean over that domain's
mini-batch; multi-domain totals are sums of those per-domain means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _nll(log_probs: Tensor, targets, what: str) -> Tensor:
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if targets.shape[0] != log_probs.rows:
        raise ValueError(f"{what}: {targets.shape[0]} targets for {log_probs.rows} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= log_probs.cols):
        raise IndexError(f"{what} out of range [0, {log_probs.cols})")
    return T.scale(T.mean_all(T.pick(log_probs, targets)), -1.0)


def classification_loss(class_log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the gold labels (0-based)."""
    return _nll(class_log_probs, labels, "label")


def adversarial_loss(domain_log_probs: Tensor, true_domains) -> Tensor:
    """Mean negative log-likelihood the discriminator assigns to each sample's true domain."""
    return _nll(domain_log_probs, true_domains, "domain index")


def batch_frobenius_loss(class_log_probs: Tensor) -> Tensor:
    """(1/B) * ||A||_F where A = exp(class_log_probs) is the batch output matrix."""
    probs = T.exp(class_log_probs)
    return T.scale(T.frobenius_norm_op(probs), 1.0 / class_log_probs.rows)


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_adv: float
    l_bf: float
    combined: float
    alpha: float
    beta: float


def combined_objective(l_c: float, l_adv: float, l_bf: float, alpha: float = 0.5,
                       beta: float = 1.0) -> LossBreakdown:
    """l_c + alpha * l_adv - beta * l_bf."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    combined = l_c + alpha * l_adv - beta * l_bf
    return LossBreakdown(float(l_c), float(l_adv), float(l_bf), float(combined),
                         float(alpha), float(beta))
