"""Spatially averaged relativistic GAN loss and the cyclic constraint."""

from __future__ import annotations

from dataclasses import dataclass

from rave import ops
from rave.autograd import ShapeError, Tensor


@dataclass
class RelativisticLogits:
    rho: Tensor
    phi: Tensor
    s_bar_rho: Tensor
    s_bar_phi: Tensor


@dataclass
class LossReport:
    iteration: int
    l_gan_g: float
    l_gan_d: float
    l_cyc: float
    total_g: float

    def csv_row(self) -> str:
        return f"{self.iteration},{self.l_gan_g!r},{self.l_gan_d!r},{self.l_cyc!r}"


CSV_HEADER = "iter,l_gan_g,l_gan_d,l_cyc"


def _check_logits(s_real: Tensor, s_fake: Tensor) -> None:
    if s_real.shape != s_fake.shape:
        raise ShapeError(f"real logits {s_real.shape} vs fake logits {s_fake.shape}")
    if s_real.ndim != 4 or s_real.shape[3] != 1:
        raise ShapeError(f"logits must be [T, H, W, 1], got {s_real.shape}")


def relativistic_transform(s_real: Tensor, s_fake: Tensor) -> RelativisticLogits:
    """Subtract the other side's per-frame spatial mean from each logit map.

    Means are taken over (H, W) separately for every time step and gradients
    flow through them.
    """
    _check_logits(s_real, s_fake)
    bar_real = ops.mean(s_real, axis=(1, 2, 3), keepdims=True)
    bar_fake = ops.mean(s_fake, axis=(1, 2, 3), keepdims=True)
    return RelativisticLogits(
        rho=ops.sub(s_real, bar_fake),
        phi=ops.sub(s_fake, bar_real),
        s_bar_rho=bar_real,
        s_bar_phi=bar_fake,
    )


def raw_logits(s_real: Tensor, s_fake: Tensor) -> RelativisticLogits:
    """Identity transform: plain sigmoid cross-entropy on the raw maps."""
    _check_logits(s_real, s_fake)
    zero = ops.mul(ops.mean(s_real, axis=(1, 2, 3), keepdims=True), 0.0)
    return RelativisticLogits(rho=s_real, phi=s_fake, s_bar_rho=zero, s_bar_phi=zero)


def gan_loss_g(rl: RelativisticLogits) -> Tensor:
    # -log sigmoid(phi) = softplus(-phi); -log(1 - sigmoid(rho)) = softplus(rho)
    return ops.add(ops.mean(ops.softplus(ops.neg(rl.phi))), ops.mean(ops.softplus(rl.rho)))


def gan_loss_d(rl: RelativisticLogits) -> Tensor:
    return ops.add(ops.mean(ops.softplus(ops.neg(rl.rho))), ops.mean(ops.softplus(rl.phi)))


def cyclic_loss(x: Tensor, x_cyc: Tensor, y: Tensor, y_cyc: Tensor) -> Tensor:
    """mean((x' - x)^2) + mean((y' - y)^2)."""
    if x.shape != x_cyc.shape:
        raise ShapeError(f"x {x.shape} vs x' {x_cyc.shape}")
    if y.shape != y_cyc.shape:
        raise ShapeError(f"y {y.shape} vs y' {y_cyc.shape}")
    return ops.add(ops.mean(ops.square(ops.sub(x_cyc, x))), ops.mean(ops.square(ops.sub(y_cyc, y))))


def total_objective(rl: RelativisticLogits, cyc: Tensor, alpha: float) -> tuple[Tensor, Tensor]:
    """Return (generator-side objective, discriminator objective)."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    g_obj = gan_loss_g(rl)
    if alpha:
        g_obj = ops.add(g_obj, ops.mul(cyc, float(alpha)))
    return g_obj, gan_loss_d(rl)
