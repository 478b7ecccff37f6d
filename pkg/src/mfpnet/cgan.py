"""Conditional GAN that turns a neutral face into a chosen expression.

The generator encodes the source image with three stride-2 convolutions,
joins the bottleneck with the label one-hot and a noise vector, and decodes
with three transposed convolutions to a sigmoid image of the input size. The
discriminator sees (candidate image, source image, label planes) and returns a
probability. Generator objective: adversarial + alpha * pixel MSE + beta *
perceptual distance, scaled by lambda; the discriminator ascends
mean[log D(x, y) + log(1 - D(x, G(x, z)))].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .model import SubNetwork
from .numcore import Parameter, Tape, Tensor, no_tape

D_CLAMP = 1e-7


@dataclass(frozen=True)
class CGANConfig:
    lam: float = 1.0
    alpha: float = 10.0
    beta: float = 1.0
    noise_dim: int = 8
    num_labels: int = 7
    base_channels: int = 8
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    batch_size: int = 16
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError("lambda, alpha and beta must be non-negative")
        if self.num_labels < 1 or self.noise_dim < 0 or self.batch_size < 1:
            raise ValueError("num_labels and batch_size must be positive, noise_dim non-negative")


@dataclass
class GANBatch:
    x: np.ndarray       # N×S×S source (neutral) images
    y: np.ndarray       # N×S×S target images
    z: np.ndarray       # N×noise_dim
    labels: np.ndarray  # N integer labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64).reshape(len(self.x), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.x)
        if self.x.ndim != 3 or self.x.shape != self.y.shape or len(self.labels) != n or len(self.z) != n:
            raise nc.ShapeError(
                f"batch arrays disagree: x {self.x.shape}, y {self.y.shape}, z {self.z.shape}, "
                f"labels {self.labels.shape}")

    @property
    def n(self) -> int:
        return len(self.x)


@dataclass
class GANLosses:
    ad: Tensor
    mse: Tensor
    pep: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"ad": float(self.ad.data), "mse": float(self.mse.data),
                "pep": float(self.pep.data), "total": float(self.total.data)}


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return np.eye(k)[labels]


def _down(s: int) -> int:
    return (s + 2 - 4) // 2 + 1


def _init(rng, shape, fan_in):
    return rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)


class Generator:
    def __init__(self, size: int, config: CGANConfig, rng: np.random.Generator):
        if size < 8:
            raise ValueError(f"generator needs images of at least 8×8, got {size}")
        c = config.base_channels
        self.size, self.num_labels, self.noise_dim = size, config.num_labels, config.noise_dim
        self.sizes = [size]
        for _ in range(3):
            self.sizes.append(_down(self.sizes[-1]))
        chans = [1, c, 2 * c, 4 * c]
        self.enc = [(Parameter(_init(rng, (chans[i + 1], chans[i], 4, 4), chans[i] * 16), f"G.enc{i}.w"),
                     Parameter(np.zeros(chans[i + 1]), f"G.enc{i}.b")) for i in range(3)]
        self.flat = chans[3] * self.sizes[3] ** 2
        width = self.flat + config.num_labels + config.noise_dim
        self.mid = (Parameter(_init(rng, (self.flat, width), width), "G.mid.w"),
                    Parameter(np.zeros(self.flat), "G.mid.b"))
        self.dec = [(Parameter(_init(rng, (chans[3 - i], chans[2 - i], 4, 4), chans[3 - i] * 16), f"G.dec{i}.w"),
                     Parameter(np.zeros(chans[2 - i]), f"G.dec{i}.b")) for i in range(3)]

    @property
    def params(self) -> list[Parameter]:
        return [p for pair in self.enc + [self.mid] + self.dec for p in pair]

    def __call__(self, x, labels: np.ndarray, z: np.ndarray) -> Tensor:
        """N×S×S sources, integer labels and N×noise_dim noise -> N×S×S images in (0, 1)."""
        x = nc.Tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, Tensor) else x
        n = x.shape[0]
        if x.shape[1:] != (self.size, self.size):
            raise nc.ShapeError(f"generator built for {self.size}×{self.size}, got {x.shape}")
        h = nc.reshape(x, (n, 1, self.size, self.size))
        for w, b in self.enc:
            h = nc.leaky_relu(nc.conv2d(h, w, b, stride=2, padding=1))
        code = np.concatenate([one_hot(labels, self.num_labels), np.asarray(z).reshape(n, -1)], axis=1)
        h = nc.concat([nc.reshape(h, (n, self.flat)), code], axis=1)
        h = nc.relu(nc.dense(h, *self.mid))
        h = nc.reshape(h, (n, self.enc[-1][0].shape[0], self.sizes[3], self.sizes[3]))
        for i, (w, b) in enumerate(self.dec):
            side = self.sizes[2 - i]
            h = nc.conv_transpose2d(h, w, b, stride=2, padding=1, output_size=(side, side))
            h = nc.sigmoid(h) if i == 2 else nc.relu(h)
        return nc.reshape(h, (n, self.size, self.size))


class Discriminator:
    def __init__(self, size: int, config: CGANConfig, rng: np.random.Generator):
        c = config.base_channels
        self.size, self.num_labels = size, config.num_labels
        chans = [2 + config.num_labels, c, 2 * c, 4 * c]
        side = size
        for _ in range(3):
            side = _down(side)
        self.convs = [(Parameter(_init(rng, (chans[i + 1], chans[i], 4, 4), chans[i] * 16), f"D.conv{i}.w"),
                       Parameter(np.zeros(chans[i + 1]), f"D.conv{i}.b")) for i in range(3)]
        self.flat = chans[3] * side * side
        self.out = (Parameter(_init(rng, (1, self.flat), self.flat) * 0.1, "D.out.w"),
                    Parameter(np.zeros(1), "D.out.b"))

    @property
    def params(self) -> list[Parameter]:
        return [p for pair in self.convs + [self.out] for p in pair]

    def __call__(self, x, y, labels: np.ndarray) -> Tensor:
        """Probability (N,) that ``y`` is a real target for source ``x`` and ``labels``."""
        y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
        n, s = y.shape[0], self.size
        if y.shape[1:] != (s, s):
            raise nc.ShapeError(f"discriminator built for {s}×{s}, got {y.shape}")
        cond = np.concatenate([np.asarray(x, dtype=np.float64).reshape(n, 1, s, s),
                               np.broadcast_to(one_hot(labels, self.num_labels)[:, :, None, None],
                                               (n, self.num_labels, s, s))], axis=1)
        h = nc.concat([nc.reshape(y, (n, 1, s, s)), cond], axis=1)
        for w, b in self.convs:
            h = nc.leaky_relu(nc.conv2d(h, w, b, stride=2, padding=1))
        return nc.reshape(nc.sigmoid(nc.dense(nc.reshape(h, (n, self.flat)), *self.out)), (n,))


class PerceptualDistance:
    """Mean squared distance between feature maps of a frozen random sub-network.

    Uses the second conv stage when the image is large enough (>= 16 px), else the first.
    """

    def __init__(self, size: int, seed: int = 0):
        sub = SubNetwork(np.random.default_rng(seed), "pep")
        self.kernels = [(w.data.copy(), b.data.copy()) for w, b in sub.convs]
        side, depth = size, 0
        for _ in range(2):
            if side < 5 or (side - 4) < 2:
                break
            side = (side - 4) // 2
            depth += 1
        if depth == 0:
            raise ValueError(f"perceptual features need images of at least 6×6, got {size}")
        self.depth = depth

    def features(self, img) -> Tensor:
        img = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=np.float64))
        n, s = img.shape[0], img.shape[-1]
        h = nc.reshape(img, (n, 1, s, s))
        for w, b in self.kernels[:self.depth]:
            h = nc.relu(nc.maxpool2x2(nc.conv2d_valid(h, w, b)))
        return h

    def __call__(self, fake: Tensor, target: np.ndarray) -> Tensor:
        with no_tape():
            real = self.features(target).data
        return nc.mse(self.features(fake), real)


def _clamped(p: Tensor) -> Tensor:
    return nc.clip(p, D_CLAMP, 1.0 - D_CLAMP)


def generator_loss(batch: GANBatch, G: Callable, D: Callable, config: CGANConfig,
                   perceptual_fn: Callable | None = None) -> GANLosses:
    """Non-saturating adversarial term -mean log D(x, G(x, z)) plus weighted MSE and perceptual terms."""
    fake = G(batch.x, batch.labels, batch.z)
    if fake.shape != batch.y.shape:
        raise nc.ShapeError(f"generator output {fake.shape} does not match targets {batch.y.shape}")
    ad = nc.mul(nc.mean(nc.log(_clamped(D(batch.x, fake, batch.labels)))), -1.0)
    pix = nc.mse(fake, batch.y)
    pep = perceptual_fn(fake, batch.y) if (perceptual_fn is not None and config.beta > 0) \
        else Tensor(np.asarray(0.0))
    total = nc.add(nc.add(ad, nc.mul(pix, config.alpha)), nc.mul(pep, config.beta))
    return GANLosses(ad, pix, pep, total)


def discriminator_loss(batch: GANBatch, G: Callable, D: Callable) -> Tensor:
    """mean[log D(x, y) + log(1 - D(x, G(x, z)))]; the discriminator maximizes it."""
    with no_tape():
        fake = G(batch.x, batch.labels, batch.z)
    fake = Tensor(np.asarray(fake.data if isinstance(fake, Tensor) else fake))
    if fake.shape != batch.y.shape:
        raise nc.ShapeError(f"generator output {fake.shape} does not match targets {batch.y.shape}")
    real_term = nc.log(_clamped(D(batch.x, batch.y, batch.labels)))
    fake_term = nc.log(_clamped(nc.sub(1.0, D(batch.x, fake, batch.labels))))
    return nc.mean(nc.add(real_term, fake_term))


@dataclass
class CGAN:
    G: Generator
    D: Discriminator
    config: CGANConfig
    size: int
    history: list[dict] = field(default_factory=list)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        nc.save_checkpoint(out / "generator.ckpt", self.G.params)
        nc.save_checkpoint(out / "discriminator.ckpt", self.D.params)
        (out / "cgan_config.json").write_text(
            json.dumps({"size": self.size, **asdict(self.config)}, indent=1) + "\n")

    @classmethod
    def load(cls, out_dir) -> "CGAN":
        out = Path(out_dir)
        meta = json.loads((out / "cgan_config.json").read_text())
        size = meta.pop("size")
        gan = build_cgan(size, CGANConfig(**meta))
        nc.restore(gan.G.params, nc.load_checkpoint(out / "generator.ckpt"))
        nc.restore(gan.D.params, nc.load_checkpoint(out / "discriminator.ckpt"))
        return gan


def build_cgan(size: int, config: CGANConfig) -> CGAN:
    rng = np.random.default_rng(config.seed)
    return CGAN(Generator(size, config, rng), Discriminator(size, config, rng), config, size)


def train_cgan(sources: np.ndarray, targets: np.ndarray, labels: Sequence[int], config: CGANConfig,
               perceptual_fn: Callable | None | str = "default", log=None) -> CGAN:
    """Alternate one discriminator ascent step and one generator descent step per batch.

    ``sources``/``targets`` are N×S×S; ``labels`` index the target expression.
    With lambda = 0 the generator objective vanishes and G stays fixed.
    """
    x = np.asarray(sources, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train a cGAN on an empty dataset")
    if x.ndim != 3 or x.shape[1] != x.shape[2] or x.shape != y.shape or len(lab) != len(x):
        raise nc.ShapeError(f"need matching N×S×S sources/targets and N labels, got {x.shape}, {y.shape}, "
                            f"{lab.shape}")
    size = x.shape[1]
    gan = build_cgan(size, config)
    if perceptual_fn == "default":
        perceptual_fn = PerceptualDistance(size, config.seed)
    opt_d = nc.RMSProp(gan.D.params, lr=config.lr_d)
    opt_g = nc.RMSProp(gan.G.params, lr=config.lr_g)
    rng = np.random.default_rng(config.seed + 1)
    order = np.array([], dtype=np.int64)
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(x))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        batch = GANBatch(x[idx], y[idx], rng.normal(size=(len(idx), config.noise_dim)), lab[idx])

        opt_d.zero_grad()
        with Tape() as tape:
            d_value = discriminator_loss(batch, gan.G, gan.D)
            objective = nc.mul(d_value, -1.0)
        tape.backward(objective)
        opt_d.step()

        opt_g.zero_grad()
        with Tape() as tape:
            losses = generator_loss(batch, gan.G, gan.D, config, perceptual_fn)
            objective = nc.mul(losses.total, config.lam)
        if config.lam > 0:
            tape.backward(objective)
            opt_g.step()
        entry = {"step": step + 1, "d_loss": float(d_value.data), **{f"g_{k}": v for k, v in losses.values().items()}}
        gan.history.append(entry)
        if log:
            log(entry)
    return gan


def synthesize_expressions(G: Generator, neutral: np.ndarray, labels: Sequence[int] | None = None,
                           z_seed: int = 0) -> list[tuple[int, np.ndarray]]:
    """One generated image per label (default: every label) from a single neutral image."""
    labels = list(range(G.num_labels)) if labels is None else list(labels)
    src = np.asarray(neutral, dtype=np.float64)
    z = np.random.default_rng(z_seed).normal(size=(len(labels), G.noise_dim))
    with no_tape():
        out = G(np.repeat(src[None], len(labels), axis=0), np.asarray(labels), z).data
    return list(zip(labels, out))


def toy_dataset(n: int = 64, size: int = 8, num_labels: int = 7, seed: int = 0):
    """Smooth random sources; each label adds its own fixed pattern to produce the target."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    patterns = np.stack([0.35 * np.sin(np.pi * (k + 1) * xx) * np.cos(np.pi * (k % 3) * yy)
                         for k in range(num_labels)])
    a = rng.uniform(0.3, 0.7, size=(n, 1, 1))
    gx = rng.uniform(-0.2, 0.2, size=(n, 1, 1))
    src = np.clip(a + gx * (xx - 0.5), 0.0, 1.0)
    labels = rng.integers(0, num_labels, size=n)
    tgt = np.clip(src + patterns[labels], 0.0, 1.0)
    return src, tgt, labels


def discriminator_accuracy(gan: CGAN, sources, targets, labels, seed: int = 0) -> float:
    """Share of real pairs scored > 0.5 and generated pairs scored < 0.5."""
    z = np.random.default_rng(seed).normal(size=(len(sources), gan.config.noise_dim))
    with no_tape():
        fake = gan.G(sources, labels, z)
        real_p = gan.D(sources, targets, labels).data
        fake_p = gan.D(sources, fake, labels).data
    return float((np.sum(real_p > 0.5) + np.sum(fake_p < 0.5)) / (2 * len(sources)))


def generator_mse(gan: CGAN, sources, targets, labels, seed: int = 0) -> float:
    z = np.random.default_rng(seed).normal(size=(len(sources), gan.config.noise_dim))
    with no_tape():
        return float(np.mean((gan.G(sources, labels, z).data - targets) ** 2))
