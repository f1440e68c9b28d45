"""Dense tensor primitives for the fixed capsule-network graph.

Arrays are plain contiguous ``numpy.ndarray``s (float64 in tests, float32
allowed for training throughput).  Convolution is valid-padding
cross-correlation realized as im2col + GEMM; the matching backward passes
are hand-written since the network topology is static.  Operations never
mutate their inputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one valid-padding 2-D convolution layer."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    padding: int = 0
    trim: bool = False  # floor partial windows away instead of raising

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError(f"kernel extents must be positive, got {self.kernel_h}x{self.kernel_w}")
        if self.padding != 0:
            raise ConfigError("only valid (zero) padding is supported")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial extents; raises on non-integral extents unless ``trim``."""
        if self.kernel_h > h or self.kernel_w > w:
            raise ConfigError(f"kernel {self.kernel_h}x{self.kernel_w} exceeds input {h}x{w}")
        dh, dw = h - self.kernel_h, w - self.kernel_w
        if not self.trim and (dh % self.stride or dw % self.stride):
            raise ConfigError(
                f"stride {self.stride} does not produce an integral output for input {h}x{w} "
                f"and kernel {self.kernel_h}x{self.kernel_w}"
            )
        return dh // self.stride + 1, dw // self.stride + 1


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise DivergenceError if ``a`` contains NaN or Inf; returns ``a``."""
    if not np.isfinite(a).all():
        raise DivergenceError(f"{what} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Unfold [N,C,H,W] into [N, H'*W', C*kh*kw] patch rows (copies the data)."""
    n, c, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    win = np.lib.stride_tricks.sliding_window_view(x, (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    win = win[:, :, :: spec.stride, :: spec.stride]  # N,C,H',W',kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * spec.kernel_h * spec.kernel_w)
    return np.ascontiguousarray(cols), ho, wo


def col2im(dcols: np.ndarray, x_shape: tuple, spec: ConvSpec) -> np.ndarray:
    """Scatter-add patch-row gradients [N,H'*W',C*kh*kw] back to the input grid."""
    n, c, h, w = x_shape
    ho, wo = spec.out_hw(h, w)
    d6 = dcols.reshape(n, ho, wo, c, spec.kernel_h, spec.kernel_w)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    s = spec.stride
    for a in range(spec.kernel_h):
        for b in range(spec.kernel_w):
            dx[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += d6[
                :, :, :, :, a, b
            ].transpose(0, 3, 1, 2)
    return dx


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Valid cross-correlation of [N,C,H,W] with [F,C,kh,kw] -> [N,F,H',W']."""
    n, c, h, w = x.shape
    f, ck, kh, kw = kernels.shape
    if (c, kh, kw) != (spec.in_channels, spec.kernel_h, spec.kernel_w) or f != spec.out_channels:
        raise DimensionError(
            f"kernel shape {kernels.shape} or input channels {c} disagree with spec {spec}"
        )
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, input has {c}")
    cols, ho, wo = im2col(x, spec)
    y = cols @ kernels.reshape(f, -1).T  # N, H'*W', F
    return y.transpose(0, 2, 1).reshape(n, f, ho, wo)


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, spec: ConvSpec, dy: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients of conv2d_forward w.r.t. kernels and (optionally) the input.

    ``dy`` has the forward output's shape [N,F,H',W'].  Returns (dkernels, dx)
    with dx None when ``need_dx`` is false (the image layer does not need it).
    """
    n, f, ho, wo = dy.shape
    cols, ho2, wo2 = im2col(x, spec)
    if (ho, wo) != (ho2, wo2):
        raise DimensionError(f"upstream gradient {dy.shape} disagrees with conv output {ho2}x{wo2}")
    dy_mat = dy.reshape(n, f, ho * wo)  # N,F,L
    # dK[f, ckk] = sum_n dy[n,f,:] @ cols[n,:,ckk]
    dk = np.einsum("nfl,nlc->fc", dy_mat, cols, optimize=True).reshape(kernels.shape)
    dx = None
    if need_dx:
        dcols = np.einsum("nfl,fc->nlc", dy_mat, kernels.reshape(f, -1), optimize=True)
        dx = col2im(dcols, x.shape, spec)
    return dk, dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0.0)


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, dy: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, dy, slope * dy)


def squash(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Capsule nonlinearity: scale ``v`` to length ||v||^2 / (1 + ||v||^2).

    Lengths land in [0, 1); squash(0) is defined as 0.  Applied along
    ``axis`` independently for every other index.
    """
    n2 = np.sum(np.square(v), axis=axis, keepdims=True)
    return v * (np.sqrt(n2) / (1.0 + n2))


def squash_backward(v: np.ndarray, ds: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through squash given pre-squash input ``v`` and upstream ``ds``.

    The Jacobian at v=0 is taken to be 0 (consistent with squash(0)=0).
    """
    n2 = np.sum(np.square(v), axis=axis, keepdims=True)
    n = np.sqrt(n2)
    g = n / (1.0 + n2)
    dot = np.sum(v * ds, axis=axis, keepdims=True)
    # d(scale)/dn = (1 - n^2) / (1 + n^2)^2, applied along the unit direction
    coef = (1.0 - n2) / np.square(1.0 + n2)
    dot_over_n = np.divide(dot, n, out=np.zeros_like(dot), where=n > 0)
    return g * ds + coef * dot_over_n * v


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to stay overflow-free for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output ``y``."""
    return dy * y * (1.0 - y)


def grad_check(f, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``.
    The error at each coordinate is |analytic - numeric| / max(1, |analytic|,
    |numeric|); the max over coordinates is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic.shape} does not match input {x.shape}")
    worst = 0.0
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        xp = x.copy()
        xp.ravel()[i] = orig + eps
        fp, _ = f(xp)
        xm = x.copy()
        xm.ravel()[i] = orig - eps
        fm, _ = f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DivergenceError("objective non-finite during finite differencing")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
