"""Local/global module: a local conv whose output is extended with pooled,
spatially replicated features from a strided patch conv."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rave import ops
from rave.autograd import ShapeError, Tensor


@dataclass(frozen=True)
class LgmConfig:
    in_channels: int
    features: int
    global_features: int
    k_global: int
    k_local: int = 3

    def __post_init__(self):
        if not 0 < self.global_features < self.features:
            raise ValueError(f"need 0 < global_features < features, got {self.global_features}, {self.features}")
        if self.k_global < 1:
            raise ValueError(f"k_global must be >= 1, got {self.k_global}")
        if self.k_local % 2 == 0:
            raise ValueError(f"k_local must be odd, got {self.k_local}")

    @property
    def local_features(self) -> int:
        return self.features - self.global_features


@dataclass
class LgmParams:
    local_w: Tensor
    local_b: Tensor
    global_w: Tensor
    global_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.local.w": self.local_w,
            f"{prefix}.local.b": self.local_b,
            f"{prefix}.global.w": self.global_w,
            f"{prefix}.global.b": self.global_b,
        }


def init_lgm(cfg: LgmConfig, rng: np.random.Generator, dtype=np.float32) -> LgmParams:
    kl, kg, cin = cfg.k_local, cfg.k_global, cfg.in_channels
    return LgmParams(
        local_w=Tensor(_fan_in(rng, (kl, kl, cin, cfg.local_features), dtype)),
        local_b=Tensor(np.zeros(cfg.local_features, dtype)),
        global_w=Tensor(_fan_in(rng, (kg, kg, cin, cfg.global_features), dtype)),
        global_b=Tensor(np.zeros(cfg.global_features, dtype)),
    )


def _fan_in(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[0] * shape[1] * shape[2]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def lgm_forward(f: Tensor, p: LgmParams, cfg: LgmConfig) -> Tensor:
    """``[H, W, Cin] -> [H, W, F]``: local maps first, then the global maps."""
    h, w, _ = f.shape
    for axis, n in ((0, h), (1, w)):
        if n % cfg.k_global:
            raise ShapeError(f"k_global={cfg.k_global} does not divide extent {n} on axis {axis}", axis)
    local = ops.conv2d(f, p.local_w, p.local_b, stride=1, padding="same")
    g = ops.conv2d(f, p.global_w, p.global_b, stride=cfg.k_global, padding="valid")
    v = ops.global_avg_pool(g)
    return ops.concat_channels([local, ops.replicate_spatial(v, h, w)])
