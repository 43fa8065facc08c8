"""Relativistic-average adversarial losses and the latent reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

LOG_EPS = 1e-12


@dataclass
class LossValue:
    """A scalar loss tensor together with its named sub-terms."""

    value: torch.Tensor
    components: dict[str, torch.Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())

    def backward(self) -> None:
        self.value.backward()


def _check_logits(*batches: torch.Tensor) -> None:
    for b in batches:
        if b.numel() == 0:
            raise ValueError("logit batch is empty")
        if not torch.isfinite(b).all():
            raise FloatingPointError("non-finite critic logits")


def relativistic_probs(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """sigmoid(a_i - mean(b)) for every element of ``logits_a``."""
    if logits_a.numel() == 0 or logits_b.numel() == 0:
        raise ValueError("logit batch is empty")
    return torch.sigmoid(logits_a - logits_b.mean())


def _relativistic_pair(first: torch.Tensor, second: torch.Tensor, names: tuple[str, str]) -> LossValue:
    # -E[log D~(first)] - E[log(1 - D~(second))]
    _check_logits(first, second)
    p_first = relativistic_probs(first, second)
    p_second = relativistic_probs(second, first)
    t1 = -torch.log(p_first + LOG_EPS).mean()
    t2 = -torch.log(1.0 - p_second + LOG_EPS).mean()
    return LossValue(t1 + t2, {names[0]: t1, names[1]: t2})


def loss_discriminator(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> LossValue:
    return _relativistic_pair(logits_real, logits_fake, ("real", "fake"))


def loss_generator(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> LossValue:
    return _relativistic_pair(logits_fake, logits_real, ("fake", "real"))


def loss_encoder(w: torch.Tensor, w_prime: torch.Tensor) -> LossValue:
    """Mean over the batch of the per-vector mean squared error."""
    if w.shape != w_prime.shape:
        raise ValueError(f"latent shapes differ: {tuple(w.shape)} vs {tuple(w_prime.shape)}")
    mse = ((w - w_prime) ** 2).mean()
    return LossValue(mse, {"mse": mse})
