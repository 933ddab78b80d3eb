"""Classification model, generator and batch-norm statistics plumbing.

The classifier is split into a feature extractor ``h`` and an expandable
linear head ``g`` so that ``f(x) = g(h(x))``.  Rows of the head follow the
global class order: rows for task ``j`` always precede rows for task ``j+1``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

_BN_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class IdentityExtractor(nn.Module):
    """Test double: ``h(x) = x`` for flat inputs."""

    def __init__(self, dim: int):
        super().__init__()
        self.out_dim = dim

    def forward(self, x):
        return x


class MLPExtractor(nn.Module):
    """Vector extractor used on the tied-Gaussian oracle tasks.

    The input passes through a batch-norm layer first so that the inversion
    stage has running statistics of the raw inputs to align against.  With
    ``hidden=()`` the extractor is affine in evaluation mode.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = ()):
        super().__init__()
        layers: list[nn.Module] = [nn.BatchNorm1d(in_dim)]
        width = in_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.BatchNorm1d(h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, out_dim))
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


class SmallConvNet(nn.Module):
    """Desk-scale convolutional backbone (conv-BN-ReLU blocks, global pool)."""

    def __init__(self, in_channels: int = 1, widths: Sequence[int] = (16, 32, 32)):
        super().__init__()
        blocks: list[nn.Module] = []
        c = in_channels
        for i, w in enumerate(widths):
            blocks += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU()]
            if i == len(widths) - 2:
                blocks.append(nn.MaxPool2d(2))
            c = w
        self.body = nn.Sequential(*blocks)
        self.out_dim = c

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet32(nn.Module):
    """CIFAR-style ResNet-32 (3 stages x 5 basic blocks, d = 64)."""

    def __init__(self, in_channels: int = 3, depth: int = 32):
        super().__init__()
        n = (depth - 2) // 6
        self.conv = nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False)
        self.bn = nn.BatchNorm2d(16)
        stages, cin = [], 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for j in range(n):
                stages.append(_BasicBlock(cin, cout, stride if j == 0 else 1))
                cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_dim = 64

    def forward(self, x):
        out = F.relu(self.bn(self.conv(x)))
        return self.stages(out).mean(dim=(2, 3))


def _resnet18(in_channels: int = 3) -> nn.Module:
    from torchvision.models import resnet18

    net = resnet18(num_classes=1000)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    net.out_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net


def build_backbone(spec: dict) -> nn.Module:
    """Instantiate a feature extractor from a plain-dict spec."""
    kind = spec["kind"]
    if kind == "identity":
        return IdentityExtractor(spec["dim"])
    if kind == "mlp":
        return MLPExtractor(spec["in_dim"], spec["out_dim"], tuple(spec.get("hidden", ())))
    if kind == "small_conv":
        return SmallConvNet(spec.get("in_channels", 1), tuple(spec.get("widths", (16, 32, 32))))
    if kind == "resnet32":
        return ResNet32(spec.get("in_channels", 3))
    if kind == "resnet18":
        return _resnet18(spec.get("in_channels", 3))
    raise ValueError(f"unknown backbone kind {kind!r}")


# ---------------------------------------------------------------------------
# Classification model
# ---------------------------------------------------------------------------


class IncrementalNet(nn.Module):
    """Feature extractor plus a linear head that grows one task at a time."""

    def __init__(self, backbone: nn.Module, input_shape: Sequence[int], num_classes: int,
                 backbone_spec: dict | None = None, seed: int = 0):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.backbone = backbone
        self.input_shape = tuple(input_shape)
        self.backbone_spec = dict(backbone_spec) if backbone_spec else None
        self.feature_dim = backbone.out_dim
        self.classifier = nn.Linear(self.feature_dim, num_classes)
        self._init_rows(self.classifier.weight.data, self.classifier.bias.data, seed)

    @classmethod
    def from_spec(cls, backbone_spec: dict, input_shape, num_classes: int, seed: int = 0):
        # Backbone init draws from the global RNG; pin it so builds are reproducible.
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            backbone = build_backbone(backbone_spec)
        return cls(backbone, input_shape, num_classes, backbone_spec, seed)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    @property
    def weight(self) -> torch.Tensor:
        return self.classifier.weight

    def _check_input(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(
                f"input shape {tuple(x.shape[1:])} does not match model input {self.input_shape}"
            )

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.backbone(x)

    def forward_logits(self, x: torch.Tensor, classes: slice | None = None) -> torch.Tensor:
        logits = self.classifier(self.forward_features(x))
        return logits if classes is None else logits[:, classes]

    def forward(self, x):
        return self.forward_logits(x)

    def _init_rows(self, weight: torch.Tensor, bias: torch.Tensor, seed: int):
        # Same fan-in bound as nn.Linear's default init, drawn from a private stream.
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(self.feature_dim)
        weight.copy_(torch.rand(weight.shape, generator=g, dtype=weight.dtype) * 2 * bound - bound)
        bias.copy_(torch.rand(bias.shape, generator=g, dtype=bias.dtype) * 2 * bound - bound)

    @torch.no_grad()
    def expand_classifier(self, new_class_count: int, seed: int = 0) -> "IncrementalNet":
        """Append ``new_class_count`` randomly initialised rows to the head.

        Existing rows are copied bit-for-bit.  Mutates ``self`` and returns it.
        """
        if new_class_count < 1:
            raise ValueError("new_class_count must be >= 1")
        old = self.classifier
        ref = old.weight
        new = nn.Linear(self.feature_dim, old.out_features + new_class_count).to(ref.device, ref.dtype)
        k = old.out_features
        new.weight[:k] = old.weight
        new.bias[:k] = old.bias
        self._init_rows(new.weight[k:], new.bias[k:], seed)
        new.weight.requires_grad_(ref.requires_grad)
        new.bias.requires_grad_(ref.requires_grad)
        self.classifier = new
        return self

    def bn_layers(self) -> list[nn.Module]:
        return [m for m in self.modules() if isinstance(m, _BN_TYPES)]

    @property
    def bn_stats(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(m.running_mean, m.running_var) for m in self.bn_layers()]


# ---------------------------------------------------------------------------
# Batch-norm input statistics
# ---------------------------------------------------------------------------


class BNStatsRecorder:
    """Forward-hook recorder of the batch mean/variance seen at each BN input.

    Statistics keep their autograd history, so the recorder can be used inside
    a generator training step.  Variances are population (biased) variances.
    """

    def __init__(self, model: nn.Module):
        self.layers = [m for m in model.modules() if isinstance(m, _BN_TYPES)]
        self.stats: list[tuple[torch.Tensor, torch.Tensor] | None] = [None] * len(self.layers)
        self._handles = []

    def _hook(self, idx):
        def hook(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            self.stats[idx] = (mean, var)
        return hook

    def __enter__(self):
        self._handles = [m.register_forward_hook(self._hook(i)) for i, m in enumerate(self.layers)]
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles = []


@contextmanager
def evaluation(model: nn.Module) -> Iterator[nn.Module]:
    """Temporarily switch ``model`` to eval mode, restoring module flags after."""
    flags = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        yield model
    finally:
        for m, flag in flags:
            m.training = flag


def capture_bn_batch_stats(model: IncrementalNet, batch: torch.Tensor):
    """Batch mean/variance at every BN layer input, in ``bn_stats`` order."""
    recorder = BNStatsRecorder(model)
    if not recorder.layers:
        raise ValueError("model has no normalization layers")
    if batch.shape[0] < 2:
        raise ValueError("batch statistics need at least 2 samples")
    with evaluation(model), recorder:
        model.forward_features(batch)
    return list(recorder.stats)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


class ImageGenerator(nn.Module):
    """Noise -> dense -> reshape -> upsample/conv blocks -> tanh image."""

    def __init__(self, noise_dim: int, output_shape: Sequence[int], width: int = 64,
                 out_scale: float = 1.0):
        super().__init__()
        c, h, w = output_shape
        if h != w or h % 4:
            raise ValueError("ImageGenerator expects square images with side divisible by 4")
        self.noise_dim = noise_dim
        self.output_shape = tuple(output_shape)
        self.out_scale = out_scale
        self.init_size = h // 4
        self.width = width
        self.fc = nn.Linear(noise_dim, width * self.init_size ** 2)
        self.bn0 = nn.BatchNorm2d(width)
        self.block1 = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.BatchNorm2d(width), nn.LeakyReLU(0.2)
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(width, width // 2, 3, padding=1), nn.BatchNorm2d(width // 2), nn.LeakyReLU(0.2),
            nn.Conv2d(width // 2, c, 3, padding=1),
        )

    def forward(self, z):
        out = self.fc(z).view(z.shape[0], self.width, self.init_size, self.init_size)
        out = self.bn0(out)
        out = self.block1(F.interpolate(out, scale_factor=2))
        out = self.block2(F.interpolate(out, scale_factor=2))
        return self.out_scale * torch.tanh(out)


class VectorGenerator(nn.Module):
    """MLP generator for flat vector data."""

    def __init__(self, noise_dim: int, output_shape: Sequence[int], hidden: int = 64):
        super().__init__()
        (d,) = output_shape
        self.noise_dim = noise_dim
        self.output_shape = (d,)
        self.net = nn.Sequential(
            nn.Linear(noise_dim, hidden), nn.BatchNorm1d(hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, d),
        )

    def forward(self, z):
        return self.net(z)


class GeneratorBundle(nn.Module):
    """Wraps a generator network with its noise dimension and output shape."""

    def __init__(self, net: nn.Module):
        super().__init__()
        self.net = net
        self.noise_dim = net.noise_dim
        self.output_shape = tuple(net.output_shape)

    def forward(self, z):
        x = self.net(z)
        if tuple(x.shape[1:]) != self.output_shape:
            raise RuntimeError(f"generator produced shape {tuple(x.shape[1:])}, expected {self.output_shape}")
        return x

    def noise(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return torch.randn(n, self.noise_dim, generator=generator, dtype=dtype)

    @torch.no_grad()
    def sample(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Draw ``n`` samples in evaluation mode."""
        with evaluation(self):
            return self(self.noise(n, generator))


def build_generator(input_shape: Sequence[int], noise_dim: int = 128, seed: int = 0,
                    width: int = 64, out_scale: float = 1.0) -> GeneratorBundle:
    """Fresh randomly initialised generator matched to the data shape."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if len(input_shape) == 1:
            net = VectorGenerator(noise_dim, input_shape, hidden=width)
        else:
            net = ImageGenerator(noise_dim, input_shape, width=width, out_scale=out_scale)
    return GeneratorBundle(net)
