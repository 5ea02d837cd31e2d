"""DCGAN generator/discriminator, GAN losses and single-step updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn


class LossDomainError(ValueError):
    pass


@dataclass
class Discriminator:
    network: nn.Network
    # [start, stop) layer ranges of the conv blocks; the head follows the last block
    blocks: list[tuple[int, int]] = field(default_factory=list)

    def forward(self, x: np.ndarray, update_stats: bool = True) -> np.ndarray:
        return self.network.forward(x, update_stats=update_stats)


@dataclass
class Generator:
    network: nn.Network
    latent_dim: int

    def forward(self, z: np.ndarray, update_stats: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=nn.DTYPE)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise nn.ShapeError(f"latent batch must be (B, {self.latent_dim}), got {z.shape}")
        return self.network.forward(z.reshape(z.shape[0], self.latent_dim, 1, 1), update_stats=update_stats)

    def backward(self, grad: np.ndarray) -> None:
        self.network.backward(grad)

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Eval-mode generation; leaves batch-norm statistics untouched."""
        mode = self.network.mode
        self.network.eval()
        try:
            return self.forward(z)
        finally:
            self.network.mode = mode


def _check_geometry(image_size: int, n_blocks: int) -> int:
    base = image_size >> n_blocks
    if n_blocks < 1 or base < 1 or base << n_blocks != image_size:
        raise ValueError(f"image_size {image_size} is not divisible by 2**{n_blocks}")
    return base


def build_discriminator(seed: int, image_size: int = 32, n_blocks: int = 3,
                        base_channels: int = 64, channels: int = 1) -> Discriminator:
    """Conv(4, s2, p1) blocks, BatchNorm on all but the first, LeakyReLU(0.2), Dense+Sigmoid head."""
    final = _check_geometry(image_size, n_blocks)
    layers: list[nn.Layer] = []
    blocks = []
    c_in = channels
    for i in range(n_blocks):
        start = len(layers)
        c_out = base_channels << i
        layers.append(nn.Conv2d(c_in, c_out, 4, 2, 1, bias=(i == 0)))
        if i > 0:
            layers.append(nn.BatchNorm2d(c_out))
        layers.append(nn.LeakyReLU(0.2))
        blocks.append((start, len(layers)))
        c_in = c_out
    layers += [nn.Flatten(), nn.Dense(c_in * final * final, 1), nn.Sigmoid()]
    net = nn.Network(layers, (channels, image_size, image_size))
    nn.init_dcgan(net, np.random.default_rng(seed))
    return Discriminator(net, blocks)


def build_generator(latent_dim: int = 100, seed: int = 0, image_size: int = 32, n_blocks: int = 3,
                    base_channels: int = 64, channels: int = 1) -> Generator:
    """Mirror of the discriminator: project to (C, s, s) then n_blocks stride-2 upsamplings."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    final = _check_geometry(image_size, n_blocks)
    widths = [base_channels << i for i in reversed(range(n_blocks))]
    layers: list[nn.Layer] = [
        nn.ConvTranspose2d(latent_dim, widths[0], final, 1, 0, bias=False),
        nn.BatchNorm2d(widths[0]),
        nn.ReLU(),
    ]
    for c_in, c_out in zip(widths, widths[1:]):
        layers += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
    layers += [nn.ConvTranspose2d(widths[-1], channels, 4, 2, 1, bias=True), nn.Tanh()]
    net = nn.Network(layers, (latent_dim, 1, 1))
    nn.init_dcgan(net, np.random.default_rng(seed))
    return Generator(net, latent_dim)


# ---------------------------------------------------------------------------
# losses


def _check_prob(p: np.ndarray, name: str) -> None:
    if not np.all((p > 0.0) & (p < 1.0)):
        raise LossDomainError(f"{name} must lie strictly inside (0, 1)")


def d_loss(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    _check_prob(d_real, "d_real")
    _check_prob(d_fake, "d_fake")
    return float(0.5 * (np.mean(-np.log(d_real)) + np.mean(-np.log1p(-d_fake))))


def g_loss(d_fake: np.ndarray) -> float:
    _check_prob(d_fake, "d_fake")
    return float(np.mean(-np.log(d_fake)))


def g_loss_grad(d_fake: np.ndarray) -> np.ndarray:
    return -1.0 / (d_fake.size * d_fake)


# ---------------------------------------------------------------------------
# training steps


def discriminator_grads(disc: Discriminator, real: np.ndarray, fake: np.ndarray,
                        runner=None) -> float:
    """Zero, then accumulate discriminator gradients for one real/fake pair; returns the loss.

    ``runner`` is anything with the ``Network.forward``/``Network.backward`` call
    signature (e.g. a split executor); it defaults to the discriminator's own network.
    """
    if real.shape[0] != fake.shape[0]:
        raise nn.ShapeError(f"real batch {real.shape[0]} vs fake batch {fake.shape[0]}")
    net = disc.network
    runner = net if runner is None else runner
    net.train()
    net.zero_grad()
    out_real = runner.forward(real)
    _check_prob(out_real, "d_real")
    runner.backward(-0.5 / (out_real.size * out_real))
    out_fake = runner.forward(fake)
    loss = d_loss(out_real, out_fake)
    runner.backward(0.5 / (out_fake.size * (1.0 - out_fake)))
    return loss


def discriminator_step(disc: Discriminator, real: np.ndarray, fake: np.ndarray, opt: nn.Adam,
                       runner=None) -> float:
    loss = discriminator_grads(disc, real, np.array(fake, dtype=nn.DTYPE, copy=True), runner)
    opt.step()
    return loss


def generator_grads(gen: Generator, disc: Discriminator, z: np.ndarray) -> float:
    """Accumulate generator gradients through a frozen discriminator.

    The discriminator runs on batch statistics (its training-mode function) but its
    running statistics and gradients are left untouched.
    """
    gen.network.train()
    gen.network.zero_grad()
    fake = gen.forward(z)
    dnet = disc.network
    mode = dnet.mode
    dnet.train()
    try:
        out = dnet.forward(fake, update_stats=False)
        loss = g_loss(out)
        grad_img = dnet.backward(g_loss_grad(out), param_grads=False)
    finally:
        dnet.mode = mode
    gen.backward(grad_img)
    return loss


def generator_step(gen: Generator, disc: Discriminator, z: np.ndarray, opt: nn.Adam) -> float:
    loss = generator_grads(gen, disc, z)
    opt.step()
    return loss


def make_optimizer(net: nn.Network, lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999) -> nn.Adam:
    return nn.Adam.for_network(net, lr=lr, beta1=beta1, beta2=beta2)


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """Binary P5 greymap of one (1, H, W) or (H, W) image in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    pix = np.clip(np.round((img + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def pgm_name(epoch: int, client: int, sample: int) -> str:
    return f"epoch{epoch}_client{client}_sample{sample}.pgm"


def image_grid(images: np.ndarray, cols: int = 8, pad: int = 2) -> np.ndarray:
    """Tile (N, 1, H, W) images into a single (1, H', W') image, padding with -1."""
    n, _, h, w = images.shape
    rows = -(-n // cols)
    grid = -np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = images[i, 0]
    return grid[None]
