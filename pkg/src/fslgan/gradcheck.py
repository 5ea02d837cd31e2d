"""Central finite-difference checks for layers and small networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nncore as nn


@dataclass
class CheckResult:
    name: str
    rel_error: float

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def check_layer(layer: nn.Layer, x: np.ndarray, rng: np.random.Generator, h: float = 1e-5,
                train: bool = True) -> list[CheckResult]:
    """Check input and parameter gradients of ``sum(proj * layer(x))``."""
    out = layer.forward(x, train=train, update_stats=False)
    proj = rng.normal(size=out.shape)

    def objective() -> float:
        return float(np.sum(proj * layer.forward(x, train=train, update_stats=False)))

    layer.zero_grad()
    layer.forward(x, train=train, update_stats=False)
    dx = layer.backward(proj)
    results = [CheckResult(f"{layer.kind}:input", rel_error(dx, numeric_grad(objective, x, h)))]
    for name, p in layer.params.items():
        analytic = layer.grads[name].copy()
        results.append(CheckResult(f"{layer.kind}:{name}",
                                   rel_error(analytic, numeric_grad(objective, p, h))))
    return results


def check_network(net: nn.Network, loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
                  x: np.ndarray, h: float = 1e-5) -> list[CheckResult]:
    """Check every parameter of ``net`` under a scalar loss of its output."""

    def objective() -> float:
        return loss_and_grad(net.forward(x, update_stats=False))[0]

    net.zero_grad()
    _, g = loss_and_grad(net.forward(x, update_stats=False))
    net.backward(g)
    results = []
    for name, p, grad in net.named_params():
        analytic = grad.copy()
        results.append(CheckResult(name, rel_error(analytic, numeric_grad(objective, p, h))))
    return results


def sample_layers(rng: np.random.Generator) -> list[tuple[nn.Layer, np.ndarray]]:
    """One small instance of every layer kind with a seeded input."""

    def away_from_zero(shape):
        # keeps kinked activations at least 0.1 from the kink so +-h never crosses it
        x = rng.normal(size=shape)
        return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)

    conv = nn.Conv2d(2, 3, kernel_size=4, stride=2, padding=1)
    convt = nn.ConvTranspose2d(3, 2, kernel_size=4, stride=2, padding=1)
    convt0 = nn.ConvTranspose2d(4, 3, kernel_size=4, stride=1, padding=0)
    bn = nn.BatchNorm2d(3)
    dense = nn.Dense(6, 4)
    for layer in (conv, convt, convt0, bn, dense):
        for name, p in layer.params.items():
            p[...] = rng.normal(1.0 if (layer is bn and name == "weight") else 0.0, 0.5, size=p.shape)
    return [
        (conv, rng.normal(size=(2, 2, 6, 6))),
        (convt, rng.normal(size=(2, 3, 3, 3))),
        (convt0, rng.normal(size=(2, 4, 1, 1))),
        (bn, rng.normal(size=(4, 3, 3, 3))),
        (nn.LeakyReLU(0.2), away_from_zero((3, 5))),
        (nn.ReLU(), away_from_zero((3, 5))),
        (nn.Tanh(), rng.normal(size=(3, 5))),
        (nn.Sigmoid(), rng.normal(size=(3, 5)) * 3),
        (nn.Flatten(), rng.normal(size=(2, 3, 2, 2))),
        (dense, rng.normal(size=(3, 6))),
    ]


def layer_suite(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for layer, x in sample_layers(rng):
        results += check_layer(layer, x, rng, h)
    bn = nn.BatchNorm2d(3)
    bn.buffers["running_mean"][:] = rng.normal(size=3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, size=3)
    for r in check_layer(bn, rng.normal(size=(2, 3, 2, 2)), rng, h, train=False):
        results.append(CheckResult(r.name.replace("BatchNorm2d", "BatchNorm2d[eval]"), r.rel_error))
    return results


def end_to_end_suite(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    """Reduced 8x8, one-block G and D: D params under the discriminator loss,
    G params under the generator loss through the frozen D."""
    from . import gan

    rng = np.random.default_rng(seed)
    arch = dict(image_size=8, n_blocks=1, base_channels=2)
    disc = gan.build_discriminator(seed, **arch)
    gen = gan.build_generator(3, seed + 1, **arch)
    # DCGAN init is tiny; widen it so the check is not dominated by near-zero gradients
    for net in (disc.network, gen.network):
        for layer in net.layers:
            if "weight" in layer.params and not isinstance(layer, nn.BatchNorm2d):
                layer.params["weight"] *= 10.0
    real = np.tanh(rng.normal(size=(4, 1, 8, 8)))
    fake = np.tanh(rng.normal(size=(4, 1, 8, 8)))
    z = rng.normal(size=(4, 3))

    def d_objective() -> float:
        out_r = disc.network.forward(real, update_stats=False)
        out_f = disc.network.forward(fake, update_stats=False)
        return gan.d_loss(out_r, out_f)

    gan.discriminator_grads(disc, real, fake)
    results = []
    for name, p, g in disc.network.named_params():
        results.append(CheckResult(f"D.{name}", rel_error(g.copy(), numeric_grad(d_objective, p, h))))

    def g_objective() -> float:
        img = gen.forward(z, update_stats=False)
        return gan.g_loss(disc.network.forward(img, update_stats=False))

    gan.generator_grads(gen, disc, z)
    for name, p, g in gen.network.named_params():
        results.append(CheckResult(f"G.{name}", rel_error(g.copy(), numeric_grad(g_objective, p, h))))
    return results
