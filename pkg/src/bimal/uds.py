"""Domain-shift scoring.

The headline number is an upper-bound estimate (reported as ``uds_ub``):
the mean, over target samples, of the segmenter predictions' NLL under the
source-trained flow plus the weighted smoothness penalty. Lower means the
target predictions look more like source-domain label structure. The
discrete KL/entropy helpers are the measure-theoretic oracles the estimate
is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import TauConfig, tau_smoothness
from .numerics import DomainError, Tensor

__all__ = [
    "DiscreteDist",
    "kl_discrete",
    "entropy_discrete",
    "cross_entropy_bound_check",
    "UdsEstimate",
    "uds_estimate",
]


@dataclass
class DiscreteDist:
    """A finite probability vector; validated at construction."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError(f"probs must be a non-empty vector, got shape {p.shape}")
        if p.min() < 0.0:
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        self.probs = p


def _align(p: DiscreteDist, q: DiscreteDist) -> tuple[np.ndarray, np.ndarray]:
    if p.probs.shape != q.probs.shape:
        raise ValueError(f"support sizes differ: {p.probs.size} vs {q.probs.size}")
    return p.probs, q.probs


def kl_discrete(p: DiscreteDist, q: DiscreteDist) -> float:
    """KL(p || q) = Σ p_i log(p_i / q_i), with 0·log(0/q) = 0.

    Requires absolute continuity: q_i must be positive wherever p_i is.
    """
    pv, qv = _align(p, q)
    mask = pv > 0.0
    if (qv[mask] == 0.0).any():
        i = int(np.argwhere(mask & (qv == 0.0))[0][0])
        raise DomainError(f"kl_discrete: p[{i}] > 0 but q[{i}] = 0")
    return float(np.sum(pv[mask] * np.log(pv[mask] / qv[mask])))


def entropy_discrete(p: DiscreteDist) -> float:
    """Shannon entropy H(p) = -Σ p_i log p_i in nats, 0·log 0 = 0."""
    pv = p.probs
    mask = pv > 0.0
    return float(-np.sum(pv[mask] * np.log(pv[mask])))


def cross_entropy_bound_check(p: DiscreteDist, q: DiscreteDist) -> bool:
    """Verify H(p, q) >= H(p), i.e. KL(p || q) >= 0, to 1e-12 slack."""
    pv, qv = _align(p, q)
    mask = pv > 0.0
    if (qv[mask] == 0.0).any():
        i = int(np.argwhere(mask & (qv == 0.0))[0][0])
        raise DomainError(f"cross_entropy_bound_check: p[{i}] > 0 but q[{i}] = 0")
    cross = float(-np.sum(pv[mask] * np.log(qv[mask])))
    return cross >= entropy_discrete(p) - 1e-12


@dataclass
class UdsEstimate:
    """Mean NLL / smoothness over a target set, and their weighted sum."""

    mean_nll: float
    mean_tau: float
    lambda_tau: float
    value: float
    n_samples: int


def _sorted_mean(values: list[float]) -> float:
    # canonical reduction order: sort, then left-to-right; this makes the
    # estimate bit-identical under any shuffling of the input samples
    acc = 0.0
    for v in sorted(values):
        acc += v
    return acc / len(values)


def uds_estimate(
    flow,
    segmenter,
    target_images: np.ndarray,
    cfg: TauConfig | None = None,
    lambda_tau: float = 1.0,
) -> UdsEstimate:
    """Estimate the shift score of ``segmenter`` on ``target_images``.

    Runs inference only (no tape). ``target_images`` is (N, H, W, 3);
    per-sample scores are reduced in sorted order so the value does not
    depend on dataset ordering.
    """
    images = np.asarray(target_images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"target_images must be a non-empty (N, H, W, 3), got {images.shape}")
    cfg = cfg if cfg is not None else TauConfig()
    nlls: list[float] = []
    taus: list[float] = []
    for img in images:
        pred = segmenter.predict(Tensor(img))
        nlls.append(float(flow.nll(pred.values)))
        taus.append(float(tau_smoothness(pred, img, cfg)))
    mean_nll = _sorted_mean(nlls)
    mean_tau = _sorted_mean(taus)
    return UdsEstimate(
        mean_nll=mean_nll,
        mean_tau=mean_tau,
        lambda_tau=lambda_tau,
        value=mean_nll + lambda_tau * mean_tau,
        n_samples=images.shape[0],
    )
