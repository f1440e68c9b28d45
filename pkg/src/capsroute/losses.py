"""Margin loss over output-capsule lengths, plus the reconstruction penalty.

The margin loss is two-sided: present classes are pushed above an upper
margin, absent classes below a lower one, with the absent side down-weighted
so early training does not collapse every length to zero.  It depends on
capsule lengths only, never on orientation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class MarginConfig:
    """Margins and the absent-class down-weight."""

    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_prime: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ConfigError(f"need 0 < m_minus < m_plus < 1, got ({self.m_minus}, {self.m_plus})")
        if self.lambda_prime <= 0:
            raise ConfigError(f"lambda_prime must be > 0, got {self.lambda_prime}")


def targets_from_labels(labels: list[tuple[int, ...]], n_d: int) -> np.ndarray:
    """0/1 target matrix [p, n_d]; two-hot rows for two-label observations."""
    t = np.zeros((len(labels), n_d))
    for k, tup in enumerate(labels):
        for c in tup:
            t[k, c] = 1.0
    return t


def margin_loss(lengths: np.ndarray, targets: np.ndarray, cfg: MarginConfig) -> float:
    """Mean over the batch of the summed per-capsule hinge-squared terms."""
    if lengths.shape != targets.shape:
        raise DimensionError(f"lengths {lengths.shape} vs targets {targets.shape}")
    up = np.maximum(0.0, cfg.m_plus - lengths)
    down = np.maximum(0.0, lengths - cfg.m_minus)
    per = targets * up**2 + cfg.lambda_prime * (1.0 - targets) * down**2
    return float(per.sum() / lengths.shape[0])


def margin_loss_grad(
    lengths: np.ndarray, s: np.ndarray, targets: np.ndarray, cfg: MarginConfig
) -> np.ndarray:
    """Gradient of margin_loss w.r.t. the squashed capsules s [p, n_d, d2].

    Zero inside both margins; elsewhere the hinge derivative is chained
    through d||s||/ds = s/||s|| (taken as 0 for a zero capsule).
    """
    p = lengths.shape[0]
    up = np.maximum(0.0, cfg.m_plus - lengths)
    down = np.maximum(0.0, lengths - cfg.m_minus)
    dlen = (-2.0 * targets * up + 2.0 * cfg.lambda_prime * (1.0 - targets) * down) / p
    unit = np.divide(s, lengths[..., None], out=np.zeros_like(s), where=lengths[..., None] > 0)
    return dlen[..., None] * unit


def recon_loss(recon: np.ndarray, target_pixels: np.ndarray, weight: float) -> float:
    """Weighted mean-over-batch of the per-image sum of squared pixel errors."""
    if recon.shape != target_pixels.shape:
        raise DimensionError(f"reconstruction {recon.shape} vs target {target_pixels.shape}")
    return float(weight * np.sum(np.square(recon - target_pixels)) / recon.shape[0])


def recon_loss_grad(recon: np.ndarray, target_pixels: np.ndarray, weight: float) -> np.ndarray:
    return 2.0 * weight * (recon - target_pixels) / recon.shape[0]
