"""Generator, critic and encoder networks plus their AdaIN / self-attention blocks.

Images are ``(batch, 3, H, W)`` tensors in [0, 1]. Every network can record a
layer-by-layer shape trace; spatial shapes in the trace are reported as
``(H, W, C)`` and dense shapes as ``(units,)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .latent import init_orthogonal

LEAKY_SLOPE = 0.2
ADAIN_EPS = 1e-8
# Style heads are scaled at runtime (equalized-learning-rate style): the stored weight keeps
# its orthogonal init and the head output is multiplied by this gain. Each AdaIN site then
# starts as a gentle modulation around (gamma=1, beta=0), and because Adam steps are
# scale-free the effective head learning rate shrinks by the same factor, so the w -> image
# map the encoder has to invert drifts slowly.
STYLE_HEAD_GAIN = 0.1


@dataclass(frozen=True)
class ArchitectureProfile:
    """Resolution-parameterized layer plan.

    ``gen_channels[i]`` is the generator width at spatial size ``base_spatial * 2**i``.
    ``disc_channels`` / ``enc_channels`` list widths from full resolution down to
    ``base_spatial``; the critic's first entry is the image channel count.
    """

    base_spatial: int = 7
    n_stages: int = 5
    gen_channels: tuple[int, ...] = (256, 512, 256, 128, 64, 32)
    disc_channels: tuple[int, ...] = (3, 32, 64, 128, 256, 512)
    enc_channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    dense_width: int = 1024
    attention_stage: int = 28
    latent_dim: int = 200
    spectral_norm: bool = False
    name: str = "full"

    def __post_init__(self):
        for label, chans in (("gen", self.gen_channels), ("disc", self.disc_channels),
                             ("enc", self.enc_channels)):
            if len(chans) != self.n_stages + 1:
                raise ValueError(f"{label}_channels needs {self.n_stages + 1} entries, got {len(chans)}")
        if self.attention_stage not in self.spatial_sizes:
            raise ValueError(f"attention_stage {self.attention_stage} is not one of {self.spatial_sizes}")

    @property
    def base_resolution(self) -> int:
        return self.base_spatial * 2 ** self.n_stages

    @property
    def spatial_sizes(self) -> list[int]:
        return [self.base_spatial * 2 ** i for i in range(self.n_stages + 1)]

    @property
    def n_style_sites(self) -> int:
        # two dense layers, then a residual conv and an upscale conv per stage
        return 2 + 2 * self.n_stages

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureProfile":
        d = dict(d)
        for k in ("gen_channels", "disc_channels", "enc_channels"):
            d[k] = tuple(d[k])
        return cls(**d)


FULL_PROFILE = ArchitectureProfile()
TOY_PROFILE = ArchitectureProfile(
    base_spatial=7, n_stages=2,
    gen_channels=(32, 32, 16), disc_channels=(3, 16, 32), enc_channels=(16, 32, 32),
    dense_width=256, attention_stage=14, latent_dim=200, name="toy",
)
PROFILES = {"full": FULL_PROFILE, "toy": TOY_PROFILE}


def _hwc(t: torch.Tensor) -> tuple[int, ...]:
    if t.dim() == 4:
        return (t.shape[2], t.shape[3], t.shape[1])
    return tuple(t.shape[1:])


def _record(trace: list | None, kind: str, before: torch.Tensor | None, after: torch.Tensor) -> None:
    if trace is not None:
        trace.append((kind, None if before is None else _hwc(before), _hwc(after)))


# --------------------------------------------------------------------- blocks


def adain(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Adaptive instance normalization.

    Spatial maps ``(B, C, H, W)`` are normalized per instance and channel over
    H, W. Dense activations ``(B, F)`` are normalized per instance over F.
    ``gamma``/``beta`` are ``(B, C)`` (or ``(B, F)``).
    """
    if gamma.shape[-1] != x.shape[1] or beta.shape[-1] != x.shape[1]:
        raise ValueError(f"affine width {gamma.shape[-1]} does not match {x.shape[1]} channels")
    # statistics on values shifted by one element: exact zero for constant channels
    if x.dim() == 4:
        shifted = x - x[:, :, :1, :1]
        centered = shifted - shifted.mean(dim=(2, 3), keepdim=True)
        var = (centered * centered).mean(dim=(2, 3), keepdim=True)
        xn = centered / torch.sqrt(var + eps)
        return gamma[:, :, None, None] * xn + beta[:, :, None, None]
    shifted = x - x[:, :1]
    centered = shifted - shifted.mean(dim=1, keepdim=True)
    var = (centered * centered).mean(dim=1, keepdim=True)
    return gamma * centered / torch.sqrt(var + eps) + beta


class AdaIN(nn.Module):
    """Style-conditioned affine head feeding :func:`adain`; scale is ``1 + head``."""

    def __init__(self, channels: int, latent_dim: int, eps: float = ADAIN_EPS,
                 gain: float = STYLE_HEAD_GAIN):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gain = gain
        self.head = nn.Linear(latent_dim, 2 * channels)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"AdaIN expects {self.channels} channels, got {x.shape[1]}")
        gamma, beta = (self.gain * self.head(w)).chunk(2, dim=1)
        return adain(x, 1.0 + gamma, beta, self.eps)


class SelfAttention(nn.Module):
    """x + gamma · softmax-attention(x) with 1x1 query/key/value projections.

    The gate ``gamma`` starts at 0, so the block is the identity at init.
    """

    def __init__(self, channels: int, spatial: int, reduction: int = 8):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.spatial = spatial
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h != self.spatial or w != self.spatial:
            raise ValueError(f"attention built for {self.spatial}x{self.spatial}, got {h}x{w}")
        q = self.query(x).flatten(2)                 # B, c', N
        k = self.key(x).flatten(2)                   # B, c', N
        v = self.value(x).flatten(2)                 # B, C, N
        attn = torch.softmax(q.transpose(1, 2) @ k, dim=-1)   # B, N(query), N(key)
        out = (v @ attn.transpose(1, 2)).view(b, c, h, w)
        return x + self.gamma * out


def attention(x: torch.Tensor, block: SelfAttention) -> torch.Tensor:
    return block(x)


def _maybe_sn(layer: nn.Module, enabled: bool) -> nn.Module:
    if enabled:
        return nn.utils.parametrizations.spectral_norm(layer)
    return layer


class ResConv(nn.Module):
    """Residual 3x3 conv; with a style head the sum is AdaIN-normalized before the activation."""

    def __init__(self, channels: int, latent_dim: int | None = None, sn: bool = False):
        super().__init__()
        self.conv = _maybe_sn(nn.Conv2d(channels, channels, 3, padding=1), sn)
        self.norm = AdaIN(channels, latent_dim) if latent_dim else None

    def forward(self, x: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
        h = x + self.conv(x)
        if self.norm is not None:
            h = self.norm(h, w)
        return F.leaky_relu(h, LEAKY_SLOPE)


# ------------------------------------------------------------------- networks


class Generator(nn.Module):
    """w-schedule -> image. ``forward`` takes styles of shape ``(B, n_sites, latent_dim)``."""

    def __init__(self, profile: ArchitectureProfile = FULL_PROFILE):
        super().__init__()
        p = profile
        self.profile = p
        c0, s0 = p.gen_channels[0], p.base_spatial
        self.dense1 = nn.Linear(p.latent_dim, p.dense_width)
        self.norm1 = AdaIN(p.dense_width, p.latent_dim)
        self.dense2 = nn.Linear(p.dense_width, c0 * s0 * s0)
        self.norm2 = AdaIN(c0 * s0 * s0, p.latent_dim)
        self.res = nn.ModuleList()
        self.up = nn.ModuleList()
        self.up_norm = nn.ModuleList()
        self.attn = nn.ModuleDict()
        for i, s in enumerate(p.spatial_sizes[:-1]):
            c_in, c_out = p.gen_channels[i], p.gen_channels[i + 1]
            self.res.append(ResConv(c_in, p.latent_dim))
            if s == p.attention_stage:
                self.attn[str(i)] = SelfAttention(c_in, s)
            self.up.append(nn.ConvTranspose2d(c_in, c_out, 2, stride=2))
            self.up_norm.append(AdaIN(c_out, p.latent_dim))
        self.out = nn.Conv2d(p.gen_channels[-1], 3, 3, padding=1)
        init_orthogonal(self)

    @property
    def n_sites(self) -> int:
        return self.profile.n_style_sites

    def forward(self, styles: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        p = self.profile
        if styles.dim() != 3 or styles.shape[1] != self.n_sites:
            raise ValueError(f"style schedule must be (batch, {self.n_sites}, dim), got {tuple(styles.shape)}")
        site = iter(styles.unbind(dim=1))
        h = self.dense1(styles[:, 0])
        h = F.leaky_relu(self.norm1(h, next(site)), LEAKY_SLOPE)
        _record(trace, "dense", styles[:, 0], h)
        prev = h
        h = self.dense2(h)
        h = F.leaky_relu(self.norm2(h, next(site)), LEAKY_SLOPE)
        _record(trace, "dense", prev, h)
        prev = h
        h = h.view(-1, p.gen_channels[0], p.base_spatial, p.base_spatial)
        _record(trace, "reshape", prev, h)
        for i in range(p.n_stages):
            prev = h
            h = self.res[i](h, next(site))
            _record(trace, "resconv", prev, h)
            if str(i) in self.attn:
                prev = h
                h = self.attn[str(i)](h)
                _record(trace, "attention", prev, h)
            prev = h
            h = F.leaky_relu(self.up_norm[i](self.up[i](h), next(site)), LEAKY_SLOPE)
            _record(trace, "upconv", prev, h)
        prev = h
        h = self.out(h)
        _record(trace, "conv", prev, h)
        prev = h
        # float32 sigmoid rounds to exactly 0 or 1 for large logits; keep the open interval
        tiny = torch.finfo(h.dtype).eps / 2
        h = torch.sigmoid(h).clamp(tiny, 1.0 - tiny)
        _record(trace, "sigmoid", prev, h)
        return h


class _DownscaleTrunk(nn.Module):
    """Shared critic/encoder body: [residual conv, optional attention, stride-2 conv] per stage."""

    def __init__(self, channels: tuple[int, ...], profile: ArchitectureProfile, sn: bool = False):
        super().__init__()
        self.sizes = profile.spatial_sizes[::-1]
        self.res = nn.ModuleList()
        self.down = nn.ModuleList()
        self.attn = nn.ModuleDict()
        for i, s in enumerate(self.sizes[:-1]):
            self.res.append(ResConv(channels[i], sn=sn))
            if s == profile.attention_stage:
                self.attn[str(i)] = SelfAttention(channels[i], s)
            self.down.append(_maybe_sn(nn.Conv2d(channels[i], channels[i + 1], 2, stride=2), sn))

    def forward(self, h: torch.Tensor, trace: list | None) -> torch.Tensor:
        for i in range(len(self.res)):
            prev = h
            h = self.res[i](h)
            _record(trace, "resconv", prev, h)
            if str(i) in self.attn:
                prev = h
                h = self.attn[str(i)](h)
                _record(trace, "attention", prev, h)
            prev = h
            h = F.leaky_relu(self.down[i](h), LEAKY_SLOPE)
            _record(trace, "downconv", prev, h)
        return h


def _check_image(x: torch.Tensor, profile: ArchitectureProfile) -> None:
    r = profile.base_resolution
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, r, r):
        raise ValueError(f"expected images of shape (batch, 3, {r}, {r}), got {tuple(x.shape)}")


class Discriminator(nn.Module):
    """Critic C: image -> one unbounded logit per image."""

    def __init__(self, profile: ArchitectureProfile = FULL_PROFILE):
        super().__init__()
        p = profile
        self.profile = p
        sn = p.spectral_norm
        self.trunk = _DownscaleTrunk(p.disc_channels, p, sn=sn)
        flat = p.disc_channels[-1] * p.base_spatial ** 2
        self.dense1 = _maybe_sn(nn.Linear(flat, p.dense_width), sn)
        self.dense2 = _maybe_sn(nn.Linear(p.dense_width, 1), sn)
        init_orthogonal(self)

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        _check_image(x, self.profile)
        _record(trace, "input", None, x)
        h = self.trunk(x, trace)
        prev = h
        h = h.permute(0, 2, 3, 1).flatten(1)
        _record(trace, "flatten", prev, h)
        prev = h
        h = F.leaky_relu(self.dense1(h), LEAKY_SLOPE)
        _record(trace, "dense", prev, h)
        prev = h
        h = self.dense2(h)
        _record(trace, "dense", prev, h)
        return h.squeeze(1)


class Encoder(nn.Module):
    """E: image -> w' of size ``latent_dim``."""

    def __init__(self, profile: ArchitectureProfile = FULL_PROFILE):
        super().__init__()
        p = profile
        self.profile = p
        # channel lift at full resolution: 2x2 kernel, stride 1, one-pixel trailing pad
        self.lift = nn.Conv2d(3, p.enc_channels[0], 2)
        self.trunk = _DownscaleTrunk(p.enc_channels, p)
        flat = p.enc_channels[-1] * p.base_spatial ** 2
        self.dense1 = nn.Linear(flat, p.dense_width)
        self.dense2 = nn.Linear(p.dense_width, p.latent_dim)
        init_orthogonal(self)

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        _check_image(x, self.profile)
        _record(trace, "input", None, x)
        h = F.leaky_relu(self.lift(F.pad(x, (0, 1, 0, 1))), LEAKY_SLOPE)
        _record(trace, "conv", x, h)
        h = self.trunk(h, trace)
        prev = h
        h = h.permute(0, 2, 3, 1).flatten(1)
        _record(trace, "flatten", prev, h)
        prev = h
        h = F.leaky_relu(self.dense1(h), LEAKY_SLOPE)
        _record(trace, "dense", prev, h)
        prev = h
        h = self.dense2(h)
        _record(trace, "dense", prev, h)
        return h


def generate(generator: Generator, styles: torch.Tensor) -> torch.Tensor:
    """Images from a style schedule, or from plain w of shape ``(B, dim)`` (no mixing)."""
    if styles.dim() == 2:
        styles = styles.unsqueeze(1).expand(-1, generator.n_sites, -1)
    return generator(styles)


def discriminate(critic: Discriminator, x: torch.Tensor) -> torch.Tensor:
    return critic(x)


def encode(encoder: Encoder, x: torch.Tensor) -> torch.Tensor:
    return encoder(x)


@dataclass
class GAN:
    """The four trainable networks of one run."""

    profile: ArchitectureProfile
    mapping: nn.Module = field(repr=False)
    generator: Generator = field(repr=False)
    critic: Discriminator = field(repr=False)
    encoder: Encoder = field(repr=False)

    @classmethod
    def build(cls, profile: ArchitectureProfile, seed: int = 0) -> "GAN":
        from .latent import MappingNetwork

        torch.manual_seed(seed)
        return cls(profile, MappingNetwork(profile.latent_dim), Generator(profile),
                   Discriminator(profile), Encoder(profile))

    def modules(self) -> dict[str, nn.Module]:
        return {"mapping": self.mapping, "generator": self.generator,
                "critic": self.critic, "encoder": self.encoder}

    def eval(self) -> "GAN":
        for m in self.modules().values():
            m.eval()
        return self
