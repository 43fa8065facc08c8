"""Prior sampling, the residual mapping network and style-mixing schedules.

Latent batches are plain tensors of shape ``(batch, dim)``. A style schedule is a
tensor of shape ``(batch, n_sites, dim)``: one w per AdaIN site of the generator.
"""

from __future__ import annotations

import torch
from torch import nn


def sample_z(count: int, dim: int = 200, seed: int | None = None,
             generator: torch.Generator | None = None,
             dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Draw ``count`` standard-normal prior vectors.

    Pass either ``seed`` (fresh generator, fully reproducible) or an existing
    ``generator`` whose state is advanced.
    """
    if count < 1 or dim < 1:
        raise ValueError(f"count and dim must be positive, got count={count}, dim={dim}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    return torch.randn(count, dim, generator=generator, dtype=dtype)


class ResidualDense(nn.Module):
    """out = x + W2 · relu(W1 · x + b1) + b2"""

    def __init__(self, dim: int):
        super().__init__()
        self.inner = nn.Linear(dim, dim)
        self.outer = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.outer(torch.relu(self.inner(x)))


class MappingNetwork(nn.Module):
    """z -> w through four residual dense blocks and a final linear layer."""

    def __init__(self, dim: int = 200, n_blocks: int = 4):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(ResidualDense(dim) for _ in range(n_blocks))
        self.final = nn.Linear(dim, dim)
        init_orthogonal(self)

    def forward(self, z: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent dim {z.shape[-1]} does not match mapping width {self.dim}")
        h = z
        for block in self.blocks:
            h = block(h)
            if trace is not None:
                trace.append(("resdense", (self.dim,), tuple(h.shape[1:])))
        w = self.final(h)
        if trace is not None:
            trace.append(("dense", (self.dim,), tuple(w.shape[1:])))
        return w


def map_latent(mapping: MappingNetwork, z: torch.Tensor) -> torch.Tensor:
    return mapping(z)


def init_orthogonal(module: nn.Module) -> None:
    """Orthogonal weights, zero biases, for every linear/conv layer under ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def make_style_schedule(w1: torch.Tensor, w2: torch.Tensor | None = None,
                        crossover: int | None = None, n_sites: int = 1) -> torch.Tensor:
    """Broadcast w to every AdaIN site, optionally switching to ``w2`` at ``crossover``.

    Sites ``[0, crossover)`` get ``w1`` and ``[crossover, n_sites)`` get ``w2``.
    Accepts a single vector ``(dim,)`` or a batch ``(batch, dim)``.
    """
    if n_sites < 1:
        raise ValueError(f"n_sites must be positive, got {n_sites}")
    squeeze = w1.dim() == 1
    if squeeze:
        w1 = w1.unsqueeze(0)
    sched = w1.unsqueeze(1).expand(-1, n_sites, -1)
    if w2 is not None:
        if crossover is None or not 1 <= crossover < n_sites:
            raise ValueError(f"crossover must lie in [1, {n_sites - 1}], got {crossover}")
        if w2.dim() == 1:
            w2 = w2.unsqueeze(0)
        if w2.shape != w1.shape:
            raise ValueError(f"w1 {tuple(w1.shape)} and w2 {tuple(w2.shape)} differ in shape")
        mask = (torch.arange(n_sites) >= crossover).view(1, n_sites, 1)
        sched = torch.where(mask, w2.unsqueeze(1), sched)
    elif crossover is not None:
        raise ValueError("crossover given without a second latent")
    sched = sched.contiguous()
    return sched[0] if squeeze else sched


def draw_crossover(n_sites: int, generator: torch.Generator) -> int:
    """Uniform crossover site in {1, ..., n_sites - 1}."""
    return int(torch.randint(1, n_sites, (1,), generator=generator).item())
