"""Encoder, generator, and three-part discriminator.

The encoder is a 7-layer conv net: six conv blocks (conv + batchnorm +
leaky ReLU), then a final conv without normalization that emits 2m
channels split into (mu, logvar), and the sampling step z = mu + sigma*eps
as the last operation. The generator mirrors it with seven transposed
convs, batchnorm + leaky ReLU after all but the last, and a sigmoid that
squashes pixels into (0, 1). The discriminator is three nets: D_x scores
the image, D_z the code, and D_xz maps the concatenation of their output
vectors to a probability.

Only 16x16 and 32x32 inputs are supported; the conv geometry for each is
a fixed plan and channel widths scale with a single width knob.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import torch
from torch import Tensor, nn

from .errors import ContractError

LOGVAR_CLAMP = 10.0

# (kernel, stride) per layer, valid padding throughout.
_ENCODER_PLAN = {
    32: [(5, 1), (4, 2), (4, 1), (4, 2), (4, 1), (1, 1), (1, 1)],
    16: [(3, 1), (4, 2), (4, 2), (2, 1), (1, 1), (1, 1), (1, 1)],
}
_GENERATOR_PLAN = {
    32: [(4, 1), (4, 2), (4, 1), (4, 2), (5, 1), (1, 1), (1, 1)],
    16: [(1, 1), (1, 1), (2, 1), (4, 2), (4, 2), (3, 1), (1, 1)],
}


@dataclass(frozen=True)
class ArchitectureConfig:
    """Channel widths and shapes for all three networks.

    Layer counts are fixed at 7 (encoder) / 7 (generator) / 5 (D_x) /
    2 (D_z) / 3 (D_xz); the channel lists must match those lengths.
    """

    latent_dim: int
    image_shape: tuple[int, int, int]
    encoder_channels: tuple[int, ...]
    generator_channels: tuple[int, ...]
    dx_channels: tuple[int, ...]
    dz_channels: tuple[int, ...]
    dxz_channels: tuple[int, ...]
    leaky_slope: float = 0.02

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ContractError("latent_dim must be >= 1")
        c, h, w = self.image_shape
        if h != w or h not in _ENCODER_PLAN:
            raise ContractError(f"image_shape {self.image_shape} unsupported; only square 16 or 32 presets exist")
        for name, channels, count in (
            ("encoder_channels", self.encoder_channels, 7),
            ("generator_channels", self.generator_channels, 7),
            ("dx_channels", self.dx_channels, 5),
            ("dz_channels", self.dz_channels, 2),
            ("dxz_channels", self.dxz_channels, 3),
        ):
            if len(channels) != count:
                raise ContractError(f"{name} must have {count} entries, got {len(channels)}")
        if self.encoder_channels[-1] != 2 * self.latent_dim:
            raise ContractError("encoder_channels[-1] must be 2 * latent_dim (mu and logvar heads)")
        if self.generator_channels[-1] != c:
            raise ContractError("generator_channels[-1] must equal the image channel count")
        if self.dxz_channels[-1] != 1:
            raise ContractError("dxz_channels[-1] must be 1 (single real/fake score)")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ContractError("leaky_slope must lie in (0, 1)")

    @staticmethod
    def preset(latent_dim: int, image_shape: tuple[int, int, int], width: int | None = None) -> "ArchitectureConfig":
        """Standard topology for a given image size, scaled by ``width``.

        ``width`` is the first encoder layer's channel count; it defaults
        to 32 for 32x32 inputs and 8 for the 16x16 preset.
        """
        c, h, _ = image_shape
        if width is None:
            width = 32 if h == 32 else 8
        m = latent_dim
        w = width
        return ArchitectureConfig(
            latent_dim=m,
            image_shape=image_shape,
            encoder_channels=(w, 2 * w, 4 * w, 8 * w, 16 * w, 16 * w, 2 * m),
            generator_channels=(8 * w, 4 * w, 2 * w, w, w, w, c),
            dx_channels=(w, 2 * w, 4 * w, 8 * w, 16 * w),
            dz_channels=(16 * w, 16 * w),
            dxz_channels=(32 * w, 32 * w, 1),
        )

    @staticmethod
    def tiny(latent_dim: int = 8) -> "ArchitectureConfig":
        """Width-8 preset on 16x16 single-channel images, for tests."""
        return ArchitectureConfig.preset(latent_dim, (1, 16, 16), width=8)

    def with_latent_dim(self, latent_dim: int) -> "ArchitectureConfig":
        enc = self.encoder_channels[:-1] + (2 * latent_dim,)
        return replace(self, latent_dim=latent_dim, encoder_channels=enc)


@dataclass
class LatentCode:
    """Batch of latent codes with their reparametrization statistics.

    In train mode z = mu + exp(0.5 * logvar) * noise for the stored noise;
    in deterministic mode z = mu and noise is None.
    """

    z: Tensor
    mu: Tensor
    logvar: Tensor
    noise: Optional[Tensor] = None

    def detach(self) -> "LatentCode":
        return LatentCode(
            self.z.detach(),
            self.mu.detach(),
            self.logvar.detach(),
            None if self.noise is None else self.noise.detach(),
        )


def reparameterize(mu: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
    """z = mu + exp(0.5 * logvar) * noise."""
    return mu + torch.exp(0.5 * logvar) * noise


class Encoder(nn.Module):
    """Maps images to latent codes via seven convolutions plus sampling."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        plan = _ENCODER_PLAN[config.image_shape[1]]
        layers: list[nn.Module] = []
        in_ch = config.image_shape[0]
        for i, (out_ch, (kernel, stride)) in enumerate(zip(config.encoder_channels, plan)):
            layers.append(nn.Conv2d(in_ch, out_ch, kernel, stride))
            if i < 6:  # no normalization/activation on the stats head
                layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.LeakyReLU(config.leaky_slope))
            in_ch = out_ch
        self.features = nn.Sequential(*layers)

    def forward(
        self,
        images: Tensor,
        *,
        deterministic: bool = False,
        noise: Optional[Tensor] = None,
        generator: Optional[torch.Generator] = None,
    ) -> LatentCode:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.config.image_shape:
            raise ContractError(f"images have shape {tuple(images.shape)}, expected (N,) + {self.config.image_shape}")
        stats = self.features(images).flatten(1)
        mu, logvar = stats.chunk(2, dim=1)
        logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        if deterministic:
            return LatentCode(z=mu, mu=mu, logvar=logvar, noise=None)
        if noise is None:
            noise = torch.randn(mu.shape, dtype=mu.dtype, device=mu.device, generator=generator)
        elif noise.shape != mu.shape:
            raise ContractError(f"noise shape {tuple(noise.shape)} does not match mu shape {tuple(mu.shape)}")
        return LatentCode(z=reparameterize(mu, logvar, noise), mu=mu, logvar=logvar, noise=noise)


class Generator(nn.Module):
    """Maps latent codes to images in (0, 1) via seven transposed convs."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        plan = _GENERATOR_PLAN[config.image_shape[1]]
        layers: list[nn.Module] = []
        in_ch = config.latent_dim
        for i, (out_ch, (kernel, stride)) in enumerate(zip(config.generator_channels, plan)):
            layers.append(nn.ConvTranspose2d(in_ch, out_ch, kernel, stride))
            if i < 6:
                layers.append(nn.BatchNorm2d(out_ch))
                layers.append(nn.LeakyReLU(config.leaky_slope))
            in_ch = out_ch
        layers.append(nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, codes: Tensor) -> Tensor:
        if codes.ndim != 2 or codes.shape[1] != self.config.latent_dim:
            raise ContractError(f"codes have shape {tuple(codes.shape)}, expected (N, {self.config.latent_dim})")
        return self.net(codes.unsqueeze(-1).unsqueeze(-1))


class Discriminator(nn.Module):
    """Scores (image, code) pairs: u = D_x(x), v = D_z(z), p = D_xz([u, v])."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        slope = config.leaky_slope

        dx_plan = _ENCODER_PLAN[config.image_shape[1]][:5]
        dx_layers: list[nn.Module] = []
        in_ch = config.image_shape[0]
        for out_ch, (kernel, stride) in zip(config.dx_channels, dx_plan):
            dx_layers += [nn.Conv2d(in_ch, out_ch, kernel, stride), nn.LeakyReLU(slope)]
            in_ch = out_ch
        self.dx = nn.Sequential(*dx_layers)

        dz_layers: list[nn.Module] = []
        in_ch = config.latent_dim
        for out_ch in config.dz_channels:
            dz_layers += [nn.Conv2d(in_ch, out_ch, 1), nn.LeakyReLU(slope)]
            in_ch = out_ch
        self.dz = nn.Sequential(*dz_layers)

        joint_in = config.dx_channels[-1] + config.dz_channels[-1]
        self.dxz = nn.Sequential(
            nn.Conv2d(joint_in, config.dxz_channels[0], 1),
            nn.LeakyReLU(slope),
            nn.Conv2d(config.dxz_channels[0], config.dxz_channels[1], 1),
            nn.LeakyReLU(slope),
            nn.Conv2d(config.dxz_channels[1], config.dxz_channels[2], 1),
            nn.Sigmoid(),
        )

    def forward(self, images: Tensor, codes: Tensor) -> Tensor:
        if images.shape[0] != codes.shape[0]:
            raise ContractError(f"batch mismatch: {images.shape[0]} images vs {codes.shape[0]} codes")
        if codes.ndim != 2 or codes.shape[1] != self.config.latent_dim:
            raise ContractError(f"codes have shape {tuple(codes.shape)}, expected (N, {self.config.latent_dim})")
        u = self.dx(images).flatten(1)
        v = self.dz(codes.unsqueeze(-1).unsqueeze(-1)).flatten(1)
        joint = torch.cat([u, v], dim=1).unsqueeze(-1).unsqueeze(-1)
        return self.dxz(joint).flatten()


@dataclass
class ModelBundle:
    """The three live networks; the trainer owns all parameter mutation."""

    encoder: Encoder
    generator: Generator
    discriminator: Discriminator
    config: ArchitectureConfig = field(init=False)

    def __post_init__(self):
        self.config = self.encoder.config

    def state_dicts(self) -> dict:
        return {
            "encoder": self.encoder.state_dict(),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
        }

    def load_state_dicts(self, dicts: dict) -> None:
        self.encoder.load_state_dict(dicts["encoder"])
        self.generator.load_state_dict(dicts["generator"])
        self.discriminator.load_state_dict(dicts["discriminator"])

    def eg_parameters(self):
        yield from self.generator.parameters()
        yield from self.encoder.parameters()

    def double(self) -> "ModelBundle":
        self.encoder.double()
        self.generator.double()
        self.discriminator.double()
        return self


def build_models(config: ArchitectureConfig, seed: int) -> ModelBundle:
    """Construct all three networks with deterministic, seeded initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        bundle = ModelBundle(Encoder(config), Generator(config), Discriminator(config))
    return bundle


def encode(
    encoder: Encoder,
    images: Tensor,
    mode: str = "train",
    *,
    noise: Optional[Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> LatentCode:
    """Run the encoder in ``train`` (sampled z, batch-statistics batchnorm)
    or ``deterministic`` (z = mu, running-statistics batchnorm) mode."""
    _set_mode(encoder, mode)
    return encoder(images, deterministic=(mode == "deterministic"), noise=noise, generator=generator)


def generate(generator_net: Generator, codes: Tensor, mode: str = "train") -> Tensor:
    _set_mode(generator_net, mode)
    return generator_net(codes)


def discriminate(discriminator: Discriminator, images: Tensor, codes: Tensor, mode: str = "train") -> Tensor:
    _set_mode(discriminator, mode)
    return discriminator(images, codes)


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode == "train":
        module.train()
    elif mode == "deterministic":
        module.eval()
    else:
        raise ContractError(f"unknown mode {mode!r}; expected 'train' or 'deterministic'")


def sample_prior(
    batch: int,
    m: int,
    seed: int | torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Draw a (batch, m) block of i.i.d. standard normal latent codes."""
    if batch < 1 or m < 1:
        raise ContractError("batch and m must be >= 1")
    if isinstance(seed, torch.Generator) or seed is None:
        generator = seed
    else:
        generator = torch.Generator().manual_seed(int(seed))
    return torch.randn((batch, m), generator=generator, dtype=dtype)
