"""Routing algorithms coupling primary capsules to output capsules.

Two families live here.  ``dynamic_route`` is the agreement-driven baseline:
per-example logits are softmaxed into strictly positive couplings that are
amplified where a projected capsule agrees with the output it feeds.  The
discriminative alternative drops the softmax and keeps one persistent,
possibly negative, coefficient matrix B of shape [m, n_d]; column j is
trained by gradient ascent on a label-signed quadratic form of the
projected capsules, with an l2 or l1 penalty.

Throughout, ``u_hat`` is the projected-capsule tensor [p, m, n_d, d2]:
observation k contributes, for output capsule j, the m x d2 slice
``u_hat[k, :, j, :]`` whose rows are the m projections.  The m x m outer
product of that slice is never materialized; updates cost O(m n d2) per
observation via matrix-vector products.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .tensorops import squash

ROUTING_MODES = ("dynamic", "l2", "l1", "none")


@dataclass
class RoutingConfig:
    """Routing mode and its step/regularization constants.

    ``lam`` is the regularization coefficient (conventionally small, 0.001);
    ``gamma`` the ascent step size; ``n_r`` the ascent steps per training
    iteration; ``dynamic_iters`` the agreement iterations in dynamic mode.
    ``none`` keeps B frozen at its initialization (no-routing baseline).
    """

    mode: str = "l2"
    lam: float = 0.001
    gamma: float = 1e-3
    n_r: int = 1
    dynamic_iters: int = 3

    def __post_init__(self):
        if self.mode == "dr":
            self.mode = "dynamic"
        if self.mode not in ROUTING_MODES:
            raise ConfigError(f"routing mode must be one of {ROUTING_MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ConfigError(f"regularization coefficient must be >= 0, got {self.lam}")
        if self.gamma <= 0:
            raise ConfigError(f"routing step size must be > 0, got {self.gamma}")
        if self.n_r < 0 or self.dynamic_iters < 1:
            raise ConfigError("n_r must be >= 0 and dynamic_iters >= 1")


def init_coefficients(m: int, n_d: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Zero-mean normal B with std 1/m: keeps initial output norms small and
    avoids the frozen all-zero point of the l1 update (sign(0) = 0)."""
    return (rng.standard_normal((m, n_d)) / m).astype(dtype)


def dynamic_route(u_hat: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Agreement routing over ``iters`` iterations.

    Logits start at zero; each iteration softmaxes them over output capsules,
    forms the coupled sum, squashes it, and adds the inner-product agreement
    back onto the logits.  Returns the final couplings c [p, m, n_d] (rows
    sum to 1 over the last axis) and squashed outputs s [p, n_d, d2].
    """
    if iters < 1:
        raise ConfigError(f"dynamic routing needs >= 1 iteration, got {iters}")
    p, m, n_d, d2 = u_hat.shape
    logits = np.zeros((p, m, n_d), dtype=u_hat.dtype)
    c = s = None
    for _ in range(iters):
        z = logits - logits.max(axis=2, keepdims=True)
        e = np.exp(z)
        c = e / e.sum(axis=2, keepdims=True)
        v = np.einsum("kij,kijd->kjd", c, u_hat, optimize=True)
        s = squash(v)
        logits = logits + np.einsum("kijd,kjd->kij", u_hat, s, optimize=True)
    return c, s


def label_signs(labels: list[tuple[int, ...]], n_d: int) -> np.ndarray:
    """Sign indicator [p, n_d]: +1 where the capsule index is one of the
    observation's labels, -1 everywhere else."""
    p = len(labels)
    signs = -np.ones((p, n_d))
    for k, t in enumerate(labels):
        for c in t:
            if not 0 <= c < n_d:
                raise DimensionError(f"label {c} out of range for {n_d} output capsules")
            signs[k, c] = 1.0
    return signs


def _check_routing_shapes(coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray) -> None:
    p, m, n_d, _ = u_hat.shape
    if coeffs.shape != (m, n_d):
        raise DimensionError(f"coefficients {coeffs.shape} do not match projections {(m, n_d)}")
    if signs.shape != (p, n_d):
        raise DimensionError(f"sign indicator {signs.shape} does not match batch {(p, n_d)}")


def routing_objective(
    coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray, lam: float, norm: str = "l2"
) -> np.ndarray:
    """Per-capsule discriminative objective r_j over the batch.

    r_j = sum_k signs[k,j] * ||u_hat[k,:,j,:]^T b_j||^2 - lam * penalty(b_j)
    with penalty the squared l2 norm or the l1 norm of column j.
    """
    if lam < 0:
        raise ConfigError(f"regularization coefficient must be >= 0, got {lam}")
    if norm not in ("l1", "l2"):
        raise ConfigError(f"norm must be 'l1' or 'l2', got {norm!r}")
    _check_routing_shapes(coeffs, u_hat, signs)
    v = np.einsum("ij,kijd->kjd", coeffs, u_hat, optimize=True)
    quad = np.einsum("kj,kjd,kjd->j", signs, v, v, optimize=True)
    if norm == "l2":
        penalty = np.sum(np.square(coeffs), axis=0)
    else:
        penalty = np.sum(np.abs(coeffs), axis=0)
    return quad - lam * penalty


def _signed_quadratic_grad_half(coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """sum_k signs[k,j] * U_k U_k^T b_j for every column j, via two einsums."""
    v = np.einsum("ij,kijd->kjd", coeffs, u_hat, optimize=True)
    return np.einsum("kj,kijd,kjd->ij", signs, u_hat, v, optimize=True)


def update_l2(
    coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray, lam: float, gamma: float
) -> np.ndarray:
    """One exact gradient-ascent step on the l2-regularized objective.

    b_j <- b_j + 2 gamma (sum_k signs[k,j] U_k U_k^T b_j - lam b_j); the
    per-observation -lam/p shrink summed over the batch is exactly -lam.
    """
    if gamma <= 0:
        raise ConfigError(f"routing step size must be > 0, got {gamma}")
    _check_routing_shapes(coeffs, u_hat, signs)
    grad_half = _signed_quadratic_grad_half(coeffs, u_hat, signs)
    out = coeffs + 2.0 * gamma * (grad_half - lam * coeffs)
    if not np.isfinite(out).all():
        raise DivergenceError("routing coefficients diverged (step size too large?)")
    return out


def update_l1(
    coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray, lam: float, gamma: float
) -> np.ndarray:
    """One subgradient-ascent step on the l1-regularized objective.

    b_j <- b_j + gamma (2 sum_k signs[k,j] U_k U_k^T b_j - lam sign(b_j)),
    with sign(0) = 0 so an exactly-zero coefficient feels no shrink.
    """
    if gamma <= 0:
        raise ConfigError(f"routing step size must be > 0, got {gamma}")
    _check_routing_shapes(coeffs, u_hat, signs)
    grad_half = _signed_quadratic_grad_half(coeffs, u_hat, signs)
    out = coeffs + gamma * (2.0 * grad_half - lam * np.sign(coeffs))
    if not np.isfinite(out).all():
        raise DivergenceError("routing coefficients diverged (step size too large?)")
    return out


def apply_routing_update(
    coeffs: np.ndarray, u_hat: np.ndarray, signs: np.ndarray, cfg: RoutingConfig
) -> np.ndarray:
    """Dispatch ``n_r`` coefficient updates for the configured mode."""
    if cfg.mode in ("dynamic", "none"):
        return coeffs
    step = update_l2 if cfg.mode == "l2" else update_l1
    for _ in range(cfg.n_r):
        coeffs = step(coeffs, u_hat, signs, cfg.lam, cfg.gamma)
    return coeffs


def signed_gram(u_hat_j: np.ndarray, signs_j: np.ndarray, lam: float) -> np.ndarray:
    """Dense m x m matrix sum_k signs[k] U_k U_k^T - lam I for one capsule.

    Test-scale only: materializes the outer products the training updates
    deliberately avoid.
    """
    p, m, _ = u_hat_j.shape
    gram = np.einsum("k,kad,kbd->ab", signs_j, u_hat_j, u_hat_j, optimize=True)
    return gram - lam * np.eye(m)


def definiteness_probe(
    u_hat_j: np.ndarray, signs_j: np.ndarray, lam: float, max_m: int = 256
) -> tuple[bool, bool]:
    """Eigenvalue sign flags (has_positive, has_negative) of the signed Gram
    matrix for one output capsule, via a dense symmetric eigensolver.

    ``u_hat_j`` is [p, m, d2] (the per-observation m x d2 slices for one j);
    ``signs_j`` is [p].  Only for small m; raises beyond ``max_m``.
    """
    p, m, d2 = u_hat_j.shape
    if m > max_m:
        raise ConfigError(f"definiteness probe is test-scale only (m={m} > {max_m})")
    eigs = np.linalg.eigvalsh(signed_gram(u_hat_j, signs_j, lam))
    tol = 1e-12 * max(1.0, float(np.abs(eigs).max()))
    return bool(eigs.max() > tol), bool(eigs.min() < -tol)
