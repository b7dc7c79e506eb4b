"""WGAN-GP training: losses, gradient penalty, the alternating loop, and sampling.

One unconditional generator is trained per emotion class; class identity is
encoded by which generator produced a sample. The critic is regularized with
a penalty pushing its input-gradient norm toward 1 on interpolates between
real and generated batches.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .data import Dataset, EmotionClass, from_gan_range, to_gan_range
from .models import (CriticModel, GeneratorModel, build_critic, build_generator)


class GanError(ValueError):
    """Raised for malformed GAN inputs or configs."""


class GanDivergenceError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite; carries the log so far."""

    def __init__(self, message: str, log: "GanTrainLog | None" = None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class GanConfig:
    """Hyperparameters of one per-class WGAN-GP training."""

    lambda_gp: float = 10.0
    n_critic: int = 5
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    noise_dim: int = 128
    seed: int = 0
    generator_width: int = 256
    critic_width: int = 64

    def __post_init__(self) -> None:
        if self.lambda_gp <= 0:
            raise GanError(f"lambda_gp must be > 0, got {self.lambda_gp}")
        if self.n_critic < 1:
            raise GanError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.batch_size < 2:
            raise GanError(f"batch_size must be >= 2 (interpolation needs pairs), "
                           f"got {self.batch_size}")
        if self.epochs < 1:
            raise GanError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class GanStepRecord:
    step: int
    kind: str  # "critic" or "generator"
    loss: float
    gp: float | None
    seconds: float


@dataclass
class GanTrainLog:
    records: list[GanStepRecord] = field(default_factory=list)

    def critic_steps(self) -> int:
        return sum(1 for r in self.records if r.kind == "critic")

    def generator_steps(self) -> int:
        return sum(1 for r in self.records if r.kind == "generator")

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "kind", "loss", "gp", "seconds"])
            for r in self.records:
                writer.writerow([r.step, r.kind, repr(r.loss),
                                 "" if r.gp is None else repr(r.gp), f"{r.seconds:.4f}"])
        return path


def _net_of(critic) -> torch.nn.Module:
    return getattr(critic, "net", critic)


def gp_interpolates(real_batch: torch.Tensor, fake_batch: torch.Tensor,
                    seed: int) -> torch.Tensor:
    """Per-sample eps ~ Uniform[0,1]; returns eps*real + (1-eps)*fake."""
    if real_batch.shape != fake_batch.shape:
        raise GanError(f"shape mismatch: real {tuple(real_batch.shape)} vs "
                       f"fake {tuple(fake_batch.shape)}")
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    eps_shape = (real_batch.shape[0],) + (1,) * (real_batch.ndim - 1)
    eps = torch.rand(eps_shape, generator=g, dtype=real_batch.dtype)
    return eps * real_batch + (1.0 - eps) * fake_batch


def gradient_penalty(critic, real_batch, fake_batch, seed: int) -> torch.Tensor:
    """Mean of (||grad_x critic(x_hat)||_2 - 1)^2 over a fresh interpolation.

    Deterministic given the seed. The returned scalar keeps the graph alive,
    so it can be folded into the critic loss and backpropagated.
    """
    real = torch.as_tensor(np.asarray(real_batch), dtype=torch.float32) \
        if not isinstance(real_batch, torch.Tensor) else real_batch
    fake = torch.as_tensor(np.asarray(fake_batch), dtype=torch.float32) \
        if not isinstance(fake_batch, torch.Tensor) else fake_batch

    x_hat = gp_interpolates(real, fake, seed).detach().requires_grad_(True)
    scores = _net_of(critic)(x_hat)
    grads = torch.autograd.grad(outputs=scores.sum(), inputs=x_hat, create_graph=True)[0]
    if not torch.all(torch.isfinite(grads)):
        raise GanDivergenceError("non-finite critic gradient in gradient penalty")
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(real_scores, fake_scores, gp, lambda_gp: float) -> torch.Tensor:
    """mean(fake) - mean(real) + lambda_gp * gp."""
    real = torch.as_tensor(real_scores, dtype=torch.float32) \
        if not isinstance(real_scores, torch.Tensor) else real_scores
    fake = torch.as_tensor(fake_scores, dtype=torch.float32) \
        if not isinstance(fake_scores, torch.Tensor) else fake_scores
    gp_t = gp if isinstance(gp, torch.Tensor) else torch.as_tensor(float(gp))
    return fake.mean() - real.mean() + lambda_gp * gp_t


def generator_loss(fake_scores) -> torch.Tensor:
    """-mean(fake scores)."""
    fake = torch.as_tensor(fake_scores, dtype=torch.float32) \
        if not isinstance(fake_scores, torch.Tensor) else fake_scores
    return -fake.mean()


def _step_seed(base_seed: int, step: int) -> int:
    return ((base_seed + 1) * 1_000_003 + step) & 0x7FFFFFFFFFFFFFFF


def train_wgangp_for_class(
    class_samples: Dataset,
    cfg: GanConfig,
    *,
    generator: GeneratorModel | None = None,
    critic: CriticModel | None = None,
) -> tuple[GeneratorModel, GanTrainLog]:
    """Train a per-class generator with the alternating WGAN-GP loop.

    Per real batch: ``cfg.n_critic`` critic updates, each with a fresh
    interpolation and gradient penalty, then one generator update. Runs
    ``cfg.epochs`` passes over the class subset and is deterministic given
    ``cfg.seed``. Custom ``generator``/``critic`` wrappers may be injected;
    by default the standard architectures are built for the sample size.
    """
    labels = {int(s.image.label) for s in class_samples.samples}
    if len(labels) != 1:
        raise GanError(f"class_samples must hold exactly one class, got ids {sorted(labels)}")
    if len(class_samples) < cfg.batch_size:
        raise GanError(f"need at least batch_size={cfg.batch_size} samples, "
                       f"got {len(class_samples)}")
    class_tag = EmotionClass(next(iter(labels)))

    torch.manual_seed(cfg.seed)
    if generator is None:
        size = class_samples.image_size
        if size is None:
            raise GanError("non-square images need an injected generator")
        generator = build_generator(cfg.noise_dim, size, class_tag,
                                    width=cfg.generator_width)
    if critic is None:
        critic = build_critic(class_samples.samples[0].image.shape[0],
                              width=cfg.critic_width)

    gen_net, critic_net = generator.net, _net_of(critic)
    gen_net.train()
    critic_net.train()
    opt_g = torch.optim.Adam(gen_net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_c = torch.optim.Adam(critic_net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    images = torch.from_numpy(to_gan_range(class_samples.images_array())).unsqueeze(1)
    n = len(class_samples)
    shuffle_rng = np.random.default_rng(cfg.seed)
    log = GanTrainLog()
    step = 0

    for _ in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for b in range(n // cfg.batch_size):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            real = images[idx]

            for _ in range(cfg.n_critic):
                started = time.perf_counter()
                noise = torch.randn(cfg.batch_size, generator.noise_dim)
                fake = gen_net(noise).view(cfg.batch_size, 1, *generator.image_shape).detach()
                gp = gradient_penalty(critic, real, fake, seed=_step_seed(cfg.seed, step))
                loss_c = critic_loss(critic_net(real), critic_net(fake), gp, cfg.lambda_gp)
                if not torch.isfinite(loss_c):
                    raise GanDivergenceError(f"non-finite critic loss at step {step}", log)
                opt_c.zero_grad()
                loss_c.backward()
                opt_c.step()
                log.records.append(GanStepRecord(step, "critic", float(loss_c.detach()),
                                                 float(gp.detach()),
                                                 time.perf_counter() - started))
                step += 1

            started = time.perf_counter()
            noise = torch.randn(cfg.batch_size, generator.noise_dim)
            fake = gen_net(noise).view(cfg.batch_size, 1, *generator.image_shape)
            loss_g = generator_loss(critic_net(fake))
            if not torch.isfinite(loss_g):
                raise GanDivergenceError(f"non-finite generator loss at step {step}", log)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            log.records.append(GanStepRecord(step, "generator", float(loss_g.detach()), None,
                                             time.perf_counter() - started))
            step += 1

    gen_net.eval()
    return generator, log


def generate_samples(gen: GeneratorModel, n: int, seed: int):
    """Draw n images from the generator, labeled with its class tag.

    Outputs are converted from [-1, 1] back to [0, 1]; source ids encode
    the generator id, seed, and sample index. Deterministic given the seed.
    """
    from .data import LabeledImage  # local import keeps module load light

    if n < 1:
        raise GanError(f"n must be >= 1, got {n}")
    g = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    out: list[LabeledImage] = []
    chunk = 256
    produced = 0
    while produced < n:
        take = min(chunk, n - produced)
        noise = torch.randn(take, gen.noise_dim, generator=g)
        raw = gen.sample_raw(noise).squeeze(1).numpy()
        pixels = from_gan_range(raw)
        for i in range(take):
            out.append(LabeledImage(pixels[i], gen.class_tag,
                                    f"{gen.gen_id}:seed={seed}:{produced + i:05d}"))
        produced += take
    return out


def save_contact_sheet(path: str | Path, samples, reference=None, *,
                       max_cols: int = 8, pad: int = 2) -> Path:
    """PNG grid of samples, optionally led by a real reference image column."""
    cells = ([reference] if reference is not None else []) + list(samples)
    if not cells:
        raise GanError("contact sheet needs at least one image")
    h, w = cells[0].pixels.shape
    cols = min(max_cols, len(cells))
    rows = (len(cells) + cols - 1) // cols
    sheet = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for i, cell in enumerate(cells):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = np.round(cell.pixels * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, mode="L").save(path, format="PNG")
    return path
