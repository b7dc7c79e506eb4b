"""The three networks of the pipeline: FER classifier, image generator, and critic.

Layer widths default to values that land the parameter totals near the
reference budgets (classifier ~19.3M, critic ~4.3M, generator ~1.6M at
48x48 input); a ``width`` knob scales them down for desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .data import EmotionClass

LEAKY_SLOPE = 0.2
DROPOUT = 0.3
DEFAULT_NOISE_DIM = 128

PREDICT_BATCH = 256


class ModelConfigError(ValueError):
    """Raised when a requested architecture cannot be built."""


def _seed_if_given(seed: int | None) -> None:
    if seed is not None:
        torch.manual_seed(seed)


class _ClassifierNet(nn.Module):
    """Conv blocks with batch norm and max-pooling, then an FC head with softmax."""

    def __init__(self, num_classes: int, image_size: int, width: int):
        super().__init__()
        chans = [width, width, 2 * width, 2 * width, 4 * width, 4 * width, 8 * width, 8 * width]
        layers: list[nn.Module] = []
        in_ch = 1
        for i, out_ch in enumerate(chans):
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            if i % 2 == 1:
                layers.append(nn.MaxPool2d(2))
            in_ch = out_ch
        self.features = nn.Sequential(*layers)

        spatial = image_size // 16
        flat = chans[-1] * spatial * spatial
        fc = 32 * width
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, fc),
            nn.ReLU(inplace=True),
            nn.Dropout(DROPOUT),
            nn.Linear(fc, fc),
            nn.ReLU(inplace=True),
            nn.Dropout(DROPOUT),
            nn.Linear(fc, num_classes),
            nn.Softmax(dim=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


class _GeneratorNet(nn.Module):
    """Dense projection of noise, then three upsampling conv stages ending in tanh."""

    def __init__(self, noise_dim: int, image_size: int, width: int):
        super().__init__()
        self.base_spatial = image_size // 8
        self.base_channels = width
        self.project = nn.Linear(noise_dim, width * self.base_spatial ** 2)
        stages: list[nn.Module] = [nn.BatchNorm2d(width), nn.LeakyReLU(LEAKY_SLOPE, inplace=True)]
        ch = width
        for _ in range(3):
            stages += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, kernel_size=3, padding=1),
                nn.BatchNorm2d(ch // 2),
                nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            ]
            ch //= 2
        stages += [nn.Conv2d(ch, 1, kernel_size=3, padding=1), nn.Tanh()]
        self.stages = nn.Sequential(*stages)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.project(z)
        x = x.view(-1, self.base_channels, self.base_spatial, self.base_spatial)
        return self.stages(x)


class _CriticNet(nn.Module):
    """Strided conv blocks with leaky ReLU and dropout; no squashing on the output.

    No batch normalization anywhere: the gradient penalty needs a per-sample
    critic gradient, which batch statistics would couple across the batch.
    """

    def __init__(self, image_size: int, width: int):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 8 * width]
        layers: list[nn.Module] = []
        in_ch = 1
        for out_ch in chans:
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=5, stride=2, padding=2),
                nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
                nn.Dropout(DROPOUT),
            ]
            in_ch = out_ch
        spatial = image_size // 16
        layers += [nn.Flatten(), nn.Linear(chans[-1] * spatial * spatial, 1)]
        self.blocks = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).squeeze(-1)


def _as_batch_tensor(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(1)
    if x.ndim != 4:
        raise ModelConfigError(f"expected (N,H,W) or (N,1,H,W) images, got shape {tuple(x.shape)}")
    return x


@dataclass(eq=False)
class ClassifierModel:
    """FER classifier wrapper: softmax-head CNN plus architecture metadata."""

    net: nn.Module
    num_classes: int
    image_size: int
    width: int
    trainable_scope: str = "all"
    descriptor: tuple[str, ...] = ()

    def predict_proba(self, images: np.ndarray | torch.Tensor) -> np.ndarray:
        """Class probabilities per sample, evaluated in inference mode."""
        x = _as_batch_tensor(images)
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ModelConfigError(
                f"images of shape {tuple(x.shape[-2:])} do not match model size "
                f"{self.image_size}x{self.image_size}"
            )
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                chunks = [self.net(x[i:i + PREDICT_BATCH]) for i in range(0, len(x), PREDICT_BATCH)]
        finally:
            self.net.train(was_training)
        return torch.cat(chunks).numpy()

    def set_trainable_scope(self, scope: str) -> None:
        """'all' trains everything; 'fc_only' freezes the convolutional stack."""
        if scope not in ("all", "fc_only"):
            raise ModelConfigError(f"unknown trainable scope: {scope!r}")
        freeze_features = scope == "fc_only"
        for p in self.net.features.parameters():
            p.requires_grad_(not freeze_features)
        for p in self.net.classifier.parameters():
            p.requires_grad_(True)
        self.trainable_scope = scope


@dataclass(eq=False)
class GeneratorModel:
    """Noise-to-image generator trained on a single emotion class."""

    net: nn.Module
    noise_dim: int
    image_shape: tuple[int, int]
    class_tag: EmotionClass
    gen_id: str = ""
    descriptor: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.gen_id:
            self.gen_id = f"wgangp_{self.class_tag.label}"

    @property
    def image_size(self) -> int:
        return self.image_shape[0]

    def sample_raw(self, noise: torch.Tensor) -> torch.Tensor:
        """Forward pass in inference mode; outputs lie in [-1, 1]."""
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                out = self.net(noise)
        finally:
            self.net.train(was_training)
        return out.view(-1, 1, *self.image_shape)


@dataclass(eq=False)
class CriticModel:
    """Wasserstein critic: one unbounded scalar score per image."""

    net: nn.Module
    image_size: int
    descriptor: tuple[str, ...] = ()

    def score(self, images: np.ndarray | torch.Tensor) -> np.ndarray:
        x = _as_batch_tensor(images)
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                out = self.net(x)
        finally:
            self.net.train(was_training)
        return out.numpy().reshape(-1)


def _check_image_size(image_size: int, what: str) -> None:
    if image_size < 32 or image_size % 16 != 0:
        raise ModelConfigError(
            f"{what} needs image_size >= 32 and divisible by 16 for its four "
            f"downsampling stages; got {image_size}"
        )


def build_classifier(num_classes: int, image_size: int, *, width: int = 64,
                     seed: int | None = None) -> ClassifierModel:
    """Stacked conv/batch-norm blocks with pooling, FC layers with dropout, softmax head."""
    if num_classes < 2:
        raise ModelConfigError(f"num_classes must be >= 2, got {num_classes}")
    _check_image_size(image_size, "classifier")
    _seed_if_given(seed)
    net = _ClassifierNet(num_classes, image_size, width)
    chans = f"{width}x2,{2 * width}x2,{4 * width}x2,{8 * width}x2"
    descriptor = (
        f"conv3x3+bn+relu blocks ({chans}), maxpool after each pair",
        f"flatten({8 * width * (image_size // 16) ** 2})",
        f"fc({32 * width})+relu+dropout{DROPOUT} x2",
        f"fc({num_classes})+softmax",
    )
    return ClassifierModel(net=net, num_classes=num_classes, image_size=image_size,
                           width=width, descriptor=descriptor)


def build_generator(noise_dim: int, image_size: int, class_tag: EmotionClass, *,
                    width: int = 256, seed: int | None = None) -> GeneratorModel:
    """Noise input, dense projection, batch-norm/leaky-ReLU upscaling stages, tanh output."""
    if noise_dim < 8:
        raise ModelConfigError(f"noise_dim must be >= 8, got {noise_dim}")
    if image_size < 8 or image_size % 8 != 0:
        raise ModelConfigError(
            f"image_size {image_size} is not reachable by the x8 upsampling schedule "
            f"(must be divisible by 8)"
        )
    if width % 8 != 0:
        raise ModelConfigError(f"generator width must be divisible by 8, got {width}")
    _seed_if_given(seed)
    net = _GeneratorNet(noise_dim, image_size, width)
    base = image_size // 8
    descriptor = (
        f"dense({noise_dim}->{width}x{base}x{base})+bn+lrelu{LEAKY_SLOPE}",
        f"3x [upsample2 + conv3x3 halving channels from {width} + bn + lrelu]",
        f"conv3x3({width // 8}->1)+tanh",
    )
    return GeneratorModel(net=net, noise_dim=noise_dim, image_shape=(image_size, image_size),
                          class_tag=EmotionClass(class_tag), descriptor=descriptor)


def build_critic(image_size: int, *, width: int = 64, seed: int | None = None) -> CriticModel:
    """Strided conv blocks with leaky ReLU and dropout; single scalar output per image."""
    _check_image_size(image_size, "critic")
    _seed_if_given(seed)
    net = _CriticNet(image_size, width)
    descriptor = (
        f"4x [conv5x5 stride2 ({width},{2 * width},{4 * width},{8 * width}) + "
        f"lrelu{LEAKY_SLOPE} + dropout{DROPOUT}]",
        f"flatten + linear({8 * width * (image_size // 16) ** 2}->1)",
    )
    return CriticModel(net=net, image_size=image_size, descriptor=descriptor)


def classifier_predict(
    model: ClassifierModel, images: np.ndarray | torch.Tensor
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Probabilities, argmax labels, and max-probability confidences per sample.

    Argmax ties break toward the lowest class id.
    """
    probs = model.predict_proba(images)
    labels = probs.argmax(axis=1)
    confidences = probs.max(axis=1)
    return probs, labels, confidences


def count_parameters(model) -> int:
    """Total element count of trainable parameters (wrapper or bare module)."""
    net = getattr(model, "net", model)
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def count_all_parameters(model) -> int:
    """Total element count including frozen parameters."""
    net = getattr(model, "net", model)
    return sum(p.numel() for p in net.parameters())
