"""Finite-difference validation of every hand-written backward pass.

Each component is wrapped as a scalar objective with a fixed random linear
or quadratic head so its analytic gradient can be compared against central
differences.  The difference quotient is always evaluated in float64 (the
oracle side); the analytic gradient is computed in the dtype under test, so
the float32 path measures exactly the rounding of the float32 backward
passes against an accurate reference.  A full end-to-end check (margin +
reconstruction loss w.r.t. every weight of a tiny network, coefficients
frozen) closes the loop.
"""

import numpy as np

from . import model as model_mod
from .data import Batch
from .losses import MarginConfig, margin_loss, margin_loss_grad
from .routing import RoutingConfig, init_coefficients, routing_objective
from .rng import substream
from .tensorops import ConvSpec, conv2d_backward, conv2d_forward, grad_check, squash, squash_backward
from .trainer import TrainConfig, loss_and_grads

TINY = dict(
    in_channels=1, image_h=8, image_w=8,
    conv1_filters=4, conv1_kernel=3, conv1_stride=1,
    primary_types=2, primary_dim=3, primary_kernel=3, primary_stride=2,
    num_classes=3, digit_dim=4, recon_hidden=(10, 12),
)


def tiny_arch(recon: bool = True) -> model_mod.ModelArch:
    kw = dict(TINY)
    if not recon:
        kw["recon_hidden"] = None
    return model_mod.ModelArch(**kw)


def _quad_head(y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * sum(w * y^2) and its gradient w.r.t. y."""
    return float(0.5 * np.sum(w.astype(y.dtype) * np.square(y))), w.astype(y.dtype) * y


def _pack(arrs):
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrs])


def _unpack(vec, templates, dt):
    out, pos = [], 0
    for t in templates:
        out.append(vec[pos : pos + t.size].reshape(t.shape).astype(dt))
        pos += t.size
    return out


def build_conv2d(rng: np.random.Generator):
    spec = ConvSpec(3, 3, 2, in_channels=2, out_channels=3)
    x = rng.standard_normal((2, 2, 7, 7))
    k0 = rng.standard_normal((3, 2, 3, 3))
    head = rng.standard_normal((2, 3, 3, 3))
    nk = k0.size

    def run(vec, dt):
        k = vec[:nk].reshape(k0.shape).astype(dt)
        xx = vec[nk:].reshape(x.shape).astype(dt)
        y = conv2d_forward(xx, k, spec)
        val, dy = _quad_head(y, head)
        dk, dx = conv2d_backward(xx, k, spec, dy)
        return val, _pack([dk, dx])

    return _pack([k0, x]), run


def build_squash(rng: np.random.Generator):
    v0 = rng.standard_normal((5, 4)) * rng.uniform(0.1, 3.0, size=(5, 1))
    head = rng.standard_normal(v0.shape)

    def run(vec, dt):
        v = vec.reshape(v0.shape).astype(dt)
        s = squash(v)
        val, ds = _quad_head(s, head)
        return val, _pack([squash_backward(v, ds)])

    return _pack([v0]), run


def build_projection(rng: np.random.Generator):
    m, n_d, d2, d1, p = 4, 3, 4, 3, 2
    u = rng.standard_normal((p, m, d1))
    w0 = rng.standard_normal((m, n_d, d2, d1))
    head = rng.standard_normal((p, m, n_d, d2))

    def run(vec, dt):
        w = vec.reshape(w0.shape).astype(dt)
        u_hat = model_mod.project(u.astype(dt), w)
        val, du_hat = _quad_head(u_hat, head)
        dw = np.einsum("kija,kib->ijab", du_hat, u.astype(dt), optimize=True)
        return val, _pack([dw])

    return _pack([w0]), run


def build_primary_capsules(rng: np.random.Generator):
    arch = tiny_arch(recon=False)
    p0 = model_mod.init_params(arch, rng)
    x = rng.random((2, 1, 8, 8))
    head = rng.standard_normal((2, arch.num_primary, arch.primary_dim))
    templates = [p0.conv1_k, p0.conv1_b, p0.primary_k, p0.primary_b]

    def run(vec, dt):
        ck, cb, pk, pb = _unpack(vec, templates, dt)
        q = model_mod.CapsNetParams(ck, cb, pk, pb, p0.W.astype(dt), None)
        trace = model_mod.primary_capsules(q, arch, x.astype(dt))
        val, du = _quad_head(trace.u, head)
        dz2 = squash_backward(trace.z2, du)
        dz2raw = model_mod._capsule_unfold(arch, dz2)
        dpb = dz2raw.sum(axis=(0, 2, 3))
        dpk, dy1 = conv2d_backward(trace.y1, q.primary_k, arch.primary_spec, dz2raw)
        dz1 = model_mod._activate_grad(arch, trace.z1, dy1)
        dcb = dz1.sum(axis=(0, 2, 3))
        dck, _ = conv2d_backward(trace.x, q.conv1_k, arch.conv1_spec, dz1, need_dx=False)
        return val, _pack([dck, dcb, dpk, dpb])

    return _pack(templates), run


def build_margin_loss(rng: np.random.Generator):
    cfg = MarginConfig()
    p, n_d, d2 = 4, 3, 4
    s0 = rng.standard_normal((p, n_d, d2)) * 0.3
    targets = np.zeros((p, n_d))
    targets[np.arange(p), rng.integers(0, n_d, p)] = 1.0

    def run(vec, dt):
        s = vec.reshape(s0.shape).astype(dt)
        lengths = np.sqrt(np.sum(np.square(s), axis=-1))
        val = margin_loss(lengths, targets, cfg)
        return val, _pack([margin_loss_grad(lengths, s, targets, cfg)])

    return _pack([s0]), run


def build_reconstruction(rng: np.random.Generator):
    arch = tiny_arch()
    p0 = model_mod.init_params(arch, rng)
    p = 3
    s = rng.standard_normal((p, arch.num_classes, arch.digit_dim)) * 0.5
    target_idx = rng.integers(0, arch.num_classes, p)
    pixels = rng.random((p, arch.recon_out))
    templates = [t for pair in p0.recon for t in pair]

    def run(vec, dt):
        flat = _unpack(vec, templates, dt)
        recon = [(flat[2 * i], flat[2 * i + 1]) for i in range(3)]
        q = model_mod.CapsNetParams(p0.conv1_k, p0.conv1_b, p0.primary_k, p0.primary_b, p0.W, recon)
        out, cache = model_mod.reconstruct(q, arch, s.astype(dt), target_idx)
        px = pixels.astype(dt)
        val = float(np.sum(np.square(out - px)) / p)
        dout = 2.0 * (out - px) / p
        grads, _ = model_mod.reconstruct_backward(q, cache, dout)
        return val, _pack([t for pair in grads for t in pair])

    return _pack(templates), run


def _build_routing_objective(rng: np.random.Generator, norm: str):
    p, m, n_d, d2 = 3, 5, 2, 3
    u_hat = rng.standard_normal((p, m, n_d, d2))
    signs = rng.choice([-1.0, 1.0], size=(p, n_d))
    b0 = rng.standard_normal((m, n_d))
    lam = 0.01

    def run(vec, dt):
        b = vec.reshape(b0.shape).astype(dt)
        uh = u_hat.astype(dt)
        r = routing_objective(b, uh, signs, lam, norm)
        v = np.einsum("ij,kijd->kjd", b, uh, optimize=True)
        quad_grad = 2.0 * np.einsum("kj,kijd,kjd->ij", signs.astype(dt), uh, v, optimize=True)
        grad = quad_grad - (2.0 * lam * b if norm == "l2" else lam * np.sign(b))
        return float(r.sum()), _pack([grad])

    return _pack([b0]), run


def build_routing_objective_l2(rng):
    return _build_routing_objective(rng, "l2")


def build_routing_objective_l1(rng):
    return _build_routing_objective(rng, "l1")


def build_full_network(rng: np.random.Generator):
    arch = tiny_arch()
    p0 = model_mod.init_params(arch, rng)
    coeffs64 = init_coefficients(arch.num_primary, arch.num_classes, rng) * arch.num_primary
    batch_images = rng.random((2, 1, 8, 8))
    labels = [(int(c),) for c in rng.integers(0, arch.num_classes, 2)]
    templates = [a for _, a in p0.named()]

    def run(vec, dt):
        cfg = TrainConfig(dataset="synthetic", routing=RoutingConfig(mode="l2"),
                          recon=True, recon_weight=0.01,
                          dtype="float64" if dt == np.float64 else "float32")
        flat = _unpack(vec, templates, dt)
        recon = [(flat[5 + 2 * i], flat[6 + 2 * i]) for i in range(3)]
        q = model_mod.CapsNetParams(*flat[:5], recon)
        batch = Batch(batch_images.astype(dt), labels)
        loss, grads, _ = loss_and_grads(q, arch, batch, coeffs64.astype(dt), cfg)
        return loss, _pack([g for _, g in grads.named()])

    return _pack(templates), run


BUILDERS = {
    "conv2d": build_conv2d,
    "squash": build_squash,
    "projection": build_projection,
    "primary_capsules": build_primary_capsules,
    "margin_loss": build_margin_loss,
    "reconstruction": build_reconstruction,
    "routing_objective_l2": build_routing_objective_l2,
    "routing_objective_l1": build_routing_objective_l1,
    "full_network": build_full_network,
}


def check_component(
    name: str, seed: int, dtype=np.float64, eps: float = 1e-5, max_coords: int = 0
) -> float:
    """Max relative error of one component's analytic gradient.

    The numeric side always evaluates in float64; ``dtype`` picks the
    precision of the gradient under test.
    """
    x0, run = BUILDERS[name](substream(seed, f"gradcheck-{name}"))

    def f(x):
        val, _ = run(x, np.float64)
        if dtype == np.float64:
            return val, run(x, np.float64)[1]
        return val, run(x, dtype)[1]

    if max_coords and x0.size > max_coords:
        # spot-check a random coordinate subset to bound runtime
        rng = substream(seed, f"gradcheck-subset-{name}")
        idx = rng.choice(x0.size, size=max_coords, replace=False)
        _, analytic = f(x0)
        worst = 0.0
        for i in idx:
            xp, xm = x0.copy(), x0.copy()
            xp[i] += eps
            xm[i] -= eps
            numeric = (run(xp, np.float64)[0] - run(xm, np.float64)[0]) / (2 * eps)
            a = analytic[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        return worst
    return grad_check(f, x0, eps)


def run_suite(seed: int, use_f64: bool = True) -> dict[str, float]:
    """Max relative error per component for one seed."""
    dtype = np.float64 if use_f64 else np.float32
    return {
        name: check_component(name, seed, dtype, max_coords=160 if name == "full_network" else 0)
        for name in BUILDERS
    }
