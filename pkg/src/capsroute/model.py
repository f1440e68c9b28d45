"""The capsule network: conv stem, primary capsules, projection, output
capsules, and the optional 3-layer reconstruction decoder.

The graph is fixed, so every backward pass is hand-written rather than
routed through a general autodiff engine.  ``forward`` records everything
the backward pass needs in a ForwardTrace; parameters are never mutated by
forward/backward, only by the trainer between steps.
"""

from dataclasses import dataclass, field

import numpy as np

from . import routing as routing_mod
from .errors import ConfigError, DimensionError
from .tensorops import (
    ConvSpec,
    check_finite,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_grad,
    relu,
    relu_grad,
    sigmoid,
    sigmoid_grad,
    squash,
    squash_backward,
)

__all__ = [
    "ModelArch",
    "CapsNetParams",
    "ParamGrads",
    "ForwardTrace",
    "preset_arch",
    "init_params",
    "squash",
    "squash_backward",
    "primary_capsules",
    "project",
    "digit_caps",
    "forward",
    "backward",
    "reconstruct",
    "reconstruct_backward",
]


@dataclass(frozen=True)
class ModelArch:
    """Static architecture description; everything shape-related derives from it."""

    in_channels: int = 1
    image_h: int = 28
    image_w: int = 28
    conv1_filters: int = 256
    conv1_kernel: int = 9
    conv1_stride: int = 1
    primary_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    num_classes: int = 10
    digit_dim: int = 16
    activation: str = "relu"  # relu | leaky_relu
    leaky_slope: float = 0.1
    recon_hidden: tuple[int, ...] | None = (512, 1024)  # None means no decoder (x/FC)

    def __post_init__(self):
        if self.activation not in ("relu", "leaky_relu"):
            raise ConfigError(f"activation must be relu or leaky_relu, got {self.activation!r}")

    @property
    def conv1_spec(self) -> ConvSpec:
        return ConvSpec(
            self.conv1_kernel, self.conv1_kernel, self.conv1_stride,
            self.in_channels, self.conv1_filters,
        )

    @property
    def primary_spec(self) -> ConvSpec:
        return ConvSpec(
            self.primary_kernel, self.primary_kernel, self.primary_stride,
            self.conv1_filters, self.primary_types * self.primary_dim, trim=True,
        )

    @property
    def conv1_hw(self) -> tuple[int, int]:
        return self.conv1_spec.out_hw(self.image_h, self.image_w)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.primary_spec.out_hw(*self.conv1_hw)

    @property
    def num_primary(self) -> int:
        gh, gw = self.grid_hw
        return self.primary_types * gh * gw

    @property
    def recon_out(self) -> int:
        return self.in_channels * self.image_h * self.image_w


def preset_arch(dataset: str, **overrides) -> ModelArch:
    """Full-scale architecture for a dataset id, with keyword overrides."""
    base = {
        "mnist": {},
        "fashion": {},
        "synthetic": {},
        "multimnist": {"image_h": 36, "image_w": 36},
        "cifar10": {
            "in_channels": 3, "image_h": 32, "image_w": 32,
            "primary_types": 64, "activation": "leaky_relu", "recon_hidden": None,
        },
    }
    if dataset not in base:
        raise ConfigError(f"unknown dataset {dataset!r}")
    kw = dict(base[dataset])
    kw.update(overrides)
    return ModelArch(**kw)


@dataclass
class CapsNetParams:
    """All trainable weights except the routing coefficient matrix B."""

    conv1_k: np.ndarray  # F, C, k, k
    conv1_b: np.ndarray  # F
    primary_k: np.ndarray  # T*d1, F, k, k
    primary_b: np.ndarray  # T*d1
    W: np.ndarray  # m, n_d, d2, d1
    recon: list[tuple[np.ndarray, np.ndarray]] | None = None  # [(W, b), ...]

    def named(self):
        yield "conv1_k", self.conv1_k
        yield "conv1_b", self.conv1_b
        yield "primary_k", self.primary_k
        yield "primary_b", self.primary_b
        yield "W", self.W
        if self.recon is not None:
            for i, (w, b) in enumerate(self.recon):
                yield f"recon{i}_w", w
                yield f"recon{i}_b", b

    def copy(self) -> "CapsNetParams":
        recon = None if self.recon is None else [(w.copy(), b.copy()) for w, b in self.recon]
        return CapsNetParams(
            self.conv1_k.copy(), self.conv1_b.copy(),
            self.primary_k.copy(), self.primary_b.copy(), self.W.copy(), recon,
        )


# gradients carry the identical structure
ParamGrads = CapsNetParams


def init_params(arch: ModelArch, rng: np.random.Generator, dtype=np.float64) -> CapsNetParams:
    """Zero-mean normal weights with std 1/sqrt(fan-in), zero biases.

    Keeps pre-squash capsule norms O(1) so the nonlinearity is neither dead
    nor saturated at step 0.
    """

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    c1 = arch.conv1_spec
    conv1_k = normal((arch.conv1_filters, arch.in_channels, c1.kernel_h, c1.kernel_w),
                     arch.in_channels * c1.kernel_h * c1.kernel_w)
    p1 = arch.primary_spec
    primary_k = normal(
        (arch.primary_types * arch.primary_dim, arch.conv1_filters, p1.kernel_h, p1.kernel_w),
        arch.conv1_filters * p1.kernel_h * p1.kernel_w,
    )
    W = normal((arch.num_primary, arch.num_classes, arch.digit_dim, arch.primary_dim),
               arch.primary_dim)
    recon = None
    if arch.recon_hidden is not None:
        sizes = (arch.num_classes * arch.digit_dim, *arch.recon_hidden, arch.recon_out)
        recon = [
            (normal((sizes[i], sizes[i + 1]), sizes[i]), np.zeros(sizes[i + 1], dtype=dtype))
            for i in range(len(sizes) - 1)
        ]
    return CapsNetParams(
        conv1_k, np.zeros(arch.conv1_filters, dtype=dtype),
        primary_k, np.zeros(arch.primary_types * arch.primary_dim, dtype=dtype),
        W, recon,
    )


@dataclass
class ForwardTrace:
    """Forward activations plus the intermediates the backward pass consumes."""

    u: np.ndarray  # p, m, d1       squashed primary capsules
    u_hat: np.ndarray  # p, m, n_d, d2  projected capsules
    v: np.ndarray  # p, n_d, d2     pre-squash output capsules
    s: np.ndarray  # p, n_d, d2     squashed output capsules
    lengths: np.ndarray  # p, n_d
    coupling: np.ndarray | None = None  # p, m, n_d  (dynamic mode only)
    # caches
    x: np.ndarray | None = None
    z1: np.ndarray | None = None  # conv1 pre-activation
    y1: np.ndarray | None = None  # conv1 post-activation
    z2: np.ndarray | None = None  # p, m, d1 pre-squash primary capsules


def _activate(arch: ModelArch, z: np.ndarray) -> np.ndarray:
    if arch.activation == "relu":
        return relu(z)
    return leaky_relu(z, arch.leaky_slope)


def _activate_grad(arch: ModelArch, z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if arch.activation == "relu":
        return relu_grad(z, dy)
    return leaky_relu_grad(z, dy, arch.leaky_slope)


def _capsule_fold(arch: ModelArch, z2raw: np.ndarray) -> np.ndarray:
    """[p, T*d1, gh, gw] -> [p, m, d1] grouping channel blocks as capsule types."""
    p = z2raw.shape[0]
    gh, gw = arch.grid_hw
    z = z2raw.reshape(p, arch.primary_types, arch.primary_dim, gh, gw)
    return z.transpose(0, 1, 3, 4, 2).reshape(p, arch.num_primary, arch.primary_dim)


def _capsule_unfold(arch: ModelArch, dz2: np.ndarray) -> np.ndarray:
    """Inverse of _capsule_fold for gradients."""
    p = dz2.shape[0]
    gh, gw = arch.grid_hw
    z = dz2.reshape(p, arch.primary_types, gh, gw, arch.primary_dim)
    return np.ascontiguousarray(z.transpose(0, 1, 4, 2, 3)).reshape(
        p, arch.primary_types * arch.primary_dim, gh, gw
    )


def primary_capsules(params: CapsNetParams, arch: ModelArch, x: np.ndarray) -> ForwardTrace:
    """Conv stem through squashed primary capsules; returns a partial trace."""
    if x.ndim != 4 or x.shape[1:] != (arch.in_channels, arch.image_h, arch.image_w):
        raise DimensionError(f"images {x.shape} do not match architecture "
                             f"[p,{arch.in_channels},{arch.image_h},{arch.image_w}]")
    x = x.astype(params.conv1_k.dtype, copy=False)
    z1 = conv2d_forward(x, params.conv1_k, arch.conv1_spec) + params.conv1_b[None, :, None, None]
    y1 = _activate(arch, z1)
    z2raw = conv2d_forward(y1, params.primary_k, arch.primary_spec)
    z2raw = z2raw + params.primary_b[None, :, None, None]
    z2 = _capsule_fold(arch, z2raw)
    u = squash(z2)
    return ForwardTrace(u=u, u_hat=None, v=None, s=None, lengths=None,
                        x=x, z1=z1, y1=y1, z2=z2)


def project(u: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Apply the per-(primary, output) projection: u_hat[k,i,j] = W[i,j] @ u[k,i]."""
    if u.shape[1] != W.shape[0] or u.shape[2] != W.shape[3]:
        raise DimensionError(f"capsules {u.shape} do not match projections {W.shape}")
    return np.einsum("ijab,kib->kija", W, u, optimize=True)


def digit_caps(u_hat: np.ndarray, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficient-weighted output capsules: returns (v, s, lengths).

    ``coeffs`` is either the shared matrix B [m, n_d] or per-example
    couplings [p, m, n_d] from dynamic routing.
    """
    if coeffs.ndim == 2:
        v = np.einsum("ij,kijd->kjd", coeffs, u_hat, optimize=True)
    elif coeffs.ndim == 3:
        v = np.einsum("kij,kijd->kjd", coeffs, u_hat, optimize=True)
    else:
        raise DimensionError(f"coefficients must be [m,n_d] or [p,m,n_d], got {coeffs.shape}")
    s = squash(v)
    lengths = np.sqrt(np.sum(np.square(s), axis=-1))
    return v, s, lengths


def forward(
    params: CapsNetParams,
    arch: ModelArch,
    x: np.ndarray,
    coeffs: np.ndarray | None = None,
    mode: str = "l2",
    dynamic_iters: int = 3,
) -> ForwardTrace:
    """Full forward pass; ``coeffs`` is B for the fixed-coefficient modes and
    ignored under dynamic routing."""
    trace = primary_capsules(params, arch, x)
    trace.u_hat = project(trace.u, params.W)
    if mode in ("dynamic", "dr"):
        c, _ = routing_mod.dynamic_route(trace.u_hat, dynamic_iters)
        trace.coupling = c
        trace.v, trace.s, trace.lengths = digit_caps(trace.u_hat, c)
    else:
        if coeffs is None:
            raise ConfigError(f"mode {mode!r} needs a coefficient matrix")
        trace.v, trace.s, trace.lengths = digit_caps(trace.u_hat, coeffs)
    check_finite(trace.lengths, "output capsule lengths")
    return trace


def backward(
    params: CapsNetParams,
    arch: ModelArch,
    trace: ForwardTrace,
    ds: np.ndarray,
    coeffs: np.ndarray | None = None,
) -> ParamGrads:
    """Gradients of a scalar loss w.r.t. all regular weights, given dL/ds.

    The routing coefficients (B, or the dynamic couplings recorded in the
    trace) are treated as constants: the alternating scheme updates them
    separately, never through this pass.
    """
    dv = squash_backward(trace.v, ds)
    cc = trace.coupling if trace.coupling is not None else coeffs
    if cc is None:
        raise ConfigError("backward needs the coefficients the forward pass used")
    if cc.ndim == 2:
        du_hat = np.einsum("ij,kjd->kijd", cc, dv, optimize=True)
    else:
        du_hat = np.einsum("kij,kjd->kijd", cc, dv, optimize=True)
    dW = np.einsum("kija,kib->ijab", du_hat, trace.u, optimize=True)
    du = np.einsum("ijab,kija->kib", params.W, du_hat, optimize=True)
    dz2 = squash_backward(trace.z2, du)
    dz2raw = _capsule_unfold(arch, dz2)
    d_primary_b = dz2raw.sum(axis=(0, 2, 3))
    d_primary_k, dy1 = conv2d_backward(trace.y1, params.primary_k, arch.primary_spec, dz2raw)
    dz1 = _activate_grad(arch, trace.z1, dy1)
    d_conv1_b = dz1.sum(axis=(0, 2, 3))
    d_conv1_k, _ = conv2d_backward(trace.x, params.conv1_k, arch.conv1_spec, dz1, need_dx=False)
    return ParamGrads(d_conv1_k, d_conv1_b, d_primary_k, d_primary_b, dW, None)


def reconstruct(
    params: CapsNetParams, arch: ModelArch, s: np.ndarray, target_idx: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Decode the target capsule of each example back to pixels.

    Masks every non-target capsule to zero, flattens, and applies the dense
    relu/relu/sigmoid stack.  Raises when the architecture has no decoder
    (the x/FC configuration).
    """
    if params.recon is None:
        raise ConfigError("architecture has no reconstruction net (x/FC configuration)")
    p, n_d, d2 = s.shape
    mask = np.zeros((p, n_d, 1), dtype=s.dtype)
    mask[np.arange(p), np.asarray(target_idx, dtype=int), 0] = 1.0
    flat = (s * mask).reshape(p, n_d * d2)
    (w1, b1), (w2, b2), (w3, b3) = params.recon
    h1z = flat @ w1 + b1
    h1 = relu(h1z)
    h2z = h1 @ w2 + b2
    h2 = relu(h2z)
    out = sigmoid(h2 @ w3 + b3)
    cache = {"mask": mask, "flat": flat, "h1z": h1z, "h1": h1, "h2z": h2z, "h2": h2, "out": out}
    return out, cache


def reconstruct_backward(
    params: CapsNetParams, cache: dict, dout: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backward through the decoder: returns its weight grads and dL/ds."""
    (w1, _), (w2, _), (w3, _) = params.recon
    doz = sigmoid_grad(cache["out"], dout)
    dw3 = cache["h2"].T @ doz
    db3 = doz.sum(axis=0)
    dh2 = relu_grad(cache["h2z"], doz @ w3.T)
    dw2 = cache["h1"].T @ dh2
    db2 = dh2.sum(axis=0)
    dh1 = relu_grad(cache["h1z"], dh2 @ w2.T)
    dw1 = cache["flat"].T @ dh1
    db1 = dh1.sum(axis=0)
    dflat = dh1 @ w1.T
    p = dflat.shape[0]
    n_d = cache["mask"].shape[1]
    ds = dflat.reshape(p, n_d, -1) * cache["mask"]
    return [(dw1, db1), (dw2, db2), (dw3, db3)], ds
