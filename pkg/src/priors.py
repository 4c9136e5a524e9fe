"""Image parameterizations (pixels, deep image prior, implicit neural representation)
and the analytic image regularizers.

Every prior renders a (C, H, W) image in [0, 1] and splits its trainable
parameters into ordered layer groups. ``set_unlock(i)`` makes groups 1..i
trainable and holds the remaining groups at their recorded initialization.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ConfigError
from src.logger import get_logger

logger = get_logger()

PRIOR_KINDS = ('pixel', 'dip', 'inr')
TV_EPSILON = 1e-8


def tv_norm(img: torch.Tensor, epsilon: float = TV_EPSILON) -> torch.Tensor:
    """Isotropic total variation summed over channels.

    Sums sqrt(dx^2 + dy^2 + eps^2) over every pixel that has both a right and a
    down neighbour (no padding, no wraparound).

    Args:
        img: (C, H, W) or (N, C, H, W) image
        epsilon: Smoothing term inside the square root

    Raises:
        ConfigError: If H < 2 or W < 2
    """
    if img.dim() < 2 or img.shape[-1] < 2 or img.shape[-2] < 2:
        raise ConfigError(f"tv_norm needs H >= 2 and W >= 2, got shape {tuple(img.shape)}")
    base = img[..., :-1, :-1]
    dx = img[..., :-1, 1:] - base
    dy = img[..., 1:, :-1] - base
    return torch.sqrt(dx.pow(2) + dy.pow(2) + epsilon ** 2).sum()


def l2_norm(img: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over all channels and pixels."""
    return torch.sqrt(img.pow(2).sum())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(F.mse_loss(a.detach().float(), b.detach().float()))
    if mse == 0.0:
        return float('inf')
    return 10.0 * math.log10(1.0 / mse)


class FourierBank(nn.Module):
    """Frozen random Fourier features: frequencies b_i ~ N(0, variance), amplitudes a_i."""

    def __init__(
        self,
        num_frequencies: int = 256,
        variance: float = 100.0,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__()
        frequencies = torch.randn(num_frequencies, 2, generator=generator) * math.sqrt(variance)
        self.register_buffer('frequencies', frequencies)
        self.register_buffer('amplitudes', torch.ones(num_frequencies))

    @property
    def num_frequencies(self) -> int:
        return self.frequencies.shape[0]


def fourier_embed(coords: torch.Tensor, bank: FourierBank) -> torch.Tensor:
    """Map (P, 2) coordinates to interleaved [a cos(2 pi b.v), a sin(2 pi b.v), ...].

    Returns:
        (P, 2M) embedding
    """
    frequencies = bank.frequencies.to(coords.dtype)
    amplitudes = bank.amplitudes.to(coords.dtype)
    angles = 2 * math.pi * coords @ frequencies.t()
    pairs = torch.stack([amplitudes * torch.cos(angles), amplitudes * torch.sin(angles)], dim=-1)
    return pairs.reshape(coords.shape[0], -1)


def coordinate_grid(height: int, width: int) -> torch.Tensor:
    """(H*W, 2) grid of (row, col) coordinates in [0, 1]^2, row-major."""
    rows = torch.linspace(0, 1, height)
    cols = torch.linspace(0, 1, width)
    grid = torch.stack(torch.meshgrid(rows, cols, indexing='ij'), dim=-1)
    return grid.reshape(-1, 2)


@dataclass
class UnlockSchedule:
    """Ordered layer groups g_1..g_L (input side first) and the current stage."""

    groups: List[List[nn.Parameter]]
    stage: int = 0
    snapshot: List[List[torch.Tensor]] = field(default_factory=list)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for group in self.groups[:self.stage] for p in group]

    def take_snapshot(self) -> None:
        self.snapshot = [[p.detach().clone() for p in group] for group in self.groups]

    @torch.no_grad()
    def apply(self, stage: int) -> None:
        if not 0 <= stage <= self.num_groups:
            raise ConfigError(f"unlock index must lie in [0, {self.num_groups}], got {stage}")
        self.stage = stage
        for idx, group in enumerate(self.groups):
            trainable = idx < stage
            for p_idx, param in enumerate(group):
                if not trainable:
                    param.copy_(self.snapshot[idx][p_idx])
                    param.grad = None
                param.requires_grad_(trainable)

    def frozen_groups_intact(self) -> bool:
        """True iff every group beyond the current stage equals its snapshot bitwise."""
        for idx in range(self.stage, self.num_groups):
            for param, saved in zip(self.groups[idx], self.snapshot[idx]):
                if not torch.equal(param.detach(), saved):
                    return False
        return True


class ImagePrior(nn.Module):
    """Base class for the image parameterizations."""

    kind: str = ''

    def __init__(self, image_shape: Sequence[int]) -> None:
        super().__init__()
        self.image_shape: Tuple[int, int, int] = tuple(image_shape)
        self.schedule: Optional[UnlockSchedule] = None

    def layer_groups(self) -> List[List[nn.Parameter]]:
        raise NotImplementedError

    def _init_schedule(self) -> None:
        self.schedule = UnlockSchedule(groups=self.layer_groups())
        self.schedule.take_snapshot()
        self.schedule.apply(0)

    @property
    def num_groups(self) -> int:
        return self.schedule.num_groups

    @property
    def unlock_index(self) -> int:
        return self.schedule.stage

    def set_unlock(self, stage: int) -> 'ImagePrior':
        self.schedule.apply(stage)
        return self

    def trainable_parameters(self) -> List[nn.Parameter]:
        return self.schedule.trainable_parameters()

    def snapshot_initialization(self) -> None:
        """Record the current values as the initialization frozen groups return to."""
        self.schedule.take_snapshot()

    def frozen_groups_intact(self) -> bool:
        return self.schedule.frozen_groups_intact()

    def render(self) -> torch.Tensor:
        raise NotImplementedError


class PixelParam(ImagePrior):
    """Direct pixel grid squashed through a sigmoid."""

    kind = 'pixel'

    def __init__(self, image_shape: Sequence[int], init: Optional[torch.Tensor] = None,
                 generator: Optional[torch.Generator] = None) -> None:
        super().__init__(image_shape)
        if init is not None:
            raw = torch.logit(init.detach().reshape(self.image_shape).float().clamp(1e-6, 1 - 1e-6))
        else:
            raw = torch.randn(self.image_shape, generator=generator)
        self.raw = nn.Parameter(raw)
        self._init_schedule()

    def layer_groups(self) -> List[List[nn.Parameter]]:
        return [[self.raw]]

    def render(self) -> torch.Tensor:
        return torch.sigmoid(self.raw)


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, padding_mode='reflect'),
        nn.BatchNorm2d(out_ch, track_running_stats=False),
        nn.LeakyReLU(0.2, inplace=True),
    )


class DIPGenerator(ImagePrior):
    """Encoder-decoder with skip connections driven by a fixed noise image z ~ U[-1, 1].

    Layer groups run encoder-shallow -> bottleneck -> decoder-deep, so the
    first unlocked stages shape coarse structure.
    """

    kind = 'dip'

    def __init__(
        self,
        image_shape: Sequence[int],
        scales: int = 4,
        width: int = 32,
        noise_channels: int = 32,
        skip_channels: int = 4,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__(image_shape)
        channels, height, width_px = self.image_shape
        if scales < 1:
            raise ConfigError(f"DIP needs at least one scale, got {scales}")
        factor = 2 ** scales
        if height % factor or width_px % factor or min(height, width_px) // factor < 2:
            raise ConfigError(
                f"DIP with {scales} scales needs H and W divisible by {factor} "
                f"and a bottleneck of at least 2x2, got {height}x{width_px}"
            )
        self.scales: int = scales

        noise = torch.rand(1, noise_channels, height, width_px, generator=generator) * 2 - 1
        self.register_buffer('noise', noise)

        self.down = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.up = nn.ModuleList()
        prev = noise_channels
        for _ in range(scales):
            self.skips.append(_conv(prev, skip_channels, 1))
            self.down.append(nn.Sequential(_conv(prev, width, 3, stride=2), _conv(width, width, 3)))
            prev = width
        for _ in range(scales):
            self.up.append(nn.Sequential(
                nn.BatchNorm2d(width + skip_channels, track_running_stats=False),
                _conv(width + skip_channels, width, 3),
                _conv(width, width, 1),
            ))
        self.head = nn.Conv2d(width, channels, 1)
        self._init_schedule()

    def layer_groups(self) -> List[List[nn.Parameter]]:
        groups = [list(block.parameters()) for block in self.down]
        for k in reversed(range(self.scales)):
            group = list(self.up[k].parameters()) + list(self.skips[k].parameters())
            if k == 0:
                group += list(self.head.parameters())
            groups.append(group)
        return groups

    def render(self) -> torch.Tensor:
        h = self.noise
        skips = []
        for k in range(self.scales):
            skips.append(self.skips[k](h))
            h = self.down[k](h)
        for k in reversed(range(self.scales)):
            h = F.interpolate(h, size=skips[k].shape[-2:], mode='bilinear', align_corners=False)
            h = self.up[k](torch.cat([h, skips[k]], dim=1))
        return torch.sigmoid(self.head(h))[0]


class SineLayer(nn.Module):
    """Linear layer followed by sin(w0 * (Wx + b)), with SIREN initialization."""

    def __init__(self, dim_in: int, dim_out: int, w0: float = 30.0, is_first: bool = False,
                 generator: Optional[torch.Generator] = None) -> None:
        super().__init__()
        self.w0 = w0
        self.linear = nn.Linear(dim_in, dim_out)
        bound = 1 / dim_in if is_first else math.sqrt(6 / dim_in) / w0
        with torch.no_grad():
            self.linear.weight.copy_(torch.rand(dim_out, dim_in, generator=generator) * 2 * bound - bound)
            self.linear.bias.copy_(torch.rand(dim_out, generator=generator) * 2 * bound - bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sin(self.w0 * self.linear(x))


class INRGenerator(ImagePrior):
    """Coordinate MLP over Fourier-embedded pixel positions with sine activations.

    The Fourier bank and the coordinate grid are fixed; layer groups are the
    MLP layers in input-to-output order.
    """

    kind = 'inr'

    def __init__(
        self,
        image_shape: Sequence[int],
        num_frequencies: int = 256,
        freq_variance: float = 100.0,
        hidden_layers: int = 3,
        hidden_width: int = 128,
        w0: float = 30.0,
        generator: Optional[torch.Generator] = None,
    ) -> None:
        super().__init__(image_shape)
        channels, height, width = self.image_shape
        if hidden_layers < 1:
            raise ConfigError(f"INR needs at least one hidden layer, got {hidden_layers}")
        self.bank = FourierBank(num_frequencies, freq_variance, generator=generator)
        self.register_buffer('coords', coordinate_grid(height, width))

        dims = [2 * num_frequencies] + [hidden_width] * hidden_layers
        self.layers = nn.ModuleList(
            SineLayer(dims[i], dims[i + 1], w0=w0, is_first=(i == 0), generator=generator)
            for i in range(hidden_layers)
        )
        self.output = nn.Linear(hidden_width, channels)
        bound = math.sqrt(6 / hidden_width) / w0
        with torch.no_grad():
            self.output.weight.copy_(torch.rand(channels, hidden_width, generator=generator) * 2 * bound - bound)
            self.output.bias.zero_()
        self._init_schedule()

    def layer_groups(self) -> List[List[nn.Parameter]]:
        groups = [list(layer.parameters()) for layer in self.layers]
        groups.append(list(self.output.parameters()))
        return groups

    def render(self) -> torch.Tensor:
        channels, height, width = self.image_shape
        h = fourier_embed(self.coords, self.bank)
        for layer in self.layers:
            h = layer(h)
        out = torch.sigmoid(self.output(h))
        return out.t().reshape(channels, height, width)


def render(state: ImagePrior) -> torch.Tensor:
    """Render the current image of a prior state."""
    return state.render()


def set_unlock(state: ImagePrior, stage: int) -> ImagePrior:
    """Make layer groups 1..stage trainable and hold the rest at initialization."""
    return state.set_unlock(stage)


def build_prior(
    kind: str,
    image_shape: Sequence[int],
    seed: int = 0,
    query: Optional[torch.Tensor] = None,
    dip: Optional[dict] = None,
    inr: Optional[dict] = None,
) -> ImagePrior:
    """Construct a prior with all randomness drawn from ``seed``.

    Args:
        kind: 'pixel', 'dip' or 'inr'
        image_shape: (C, H, W)
        seed: Seed for noise, Fourier bank and weights
        query: Pixel priors start from this image when given
        dip: Keyword overrides for DIPGenerator
        inr: Keyword overrides for INRGenerator
    """
    if kind not in PRIOR_KINDS:
        raise ConfigError(f"unknown prior '{kind}' (expected one of {', '.join(PRIOR_KINDS)})")
    generator = torch.Generator().manual_seed(seed)
    # Default layer initializers draw from the global RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == 'pixel':
            prior = PixelParam(image_shape, init=query, generator=generator)
        elif kind == 'dip':
            prior = DIPGenerator(image_shape, generator=generator, **(dip or {}))
        else:
            prior = INRGenerator(image_shape, generator=generator, **(inr or {}))
    logger.debug(f"Built {kind} prior with {prior.num_groups} layer groups (seed={seed})")
    return prior
