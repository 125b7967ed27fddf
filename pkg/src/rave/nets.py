"""Recurrent generator/degrader and joint-distribution discriminator cells.

Parameters are plain ordered ``dict[str, Tensor]``; the generator and the
degrader share the layer plan (and hence the name/shape manifest) but never
the tensors themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from rave import ops
from rave.autograd import ShapeError, Tensor, as_tensor
from rave.lgm import LgmConfig, LgmParams, _fan_in, init_lgm, lgm_forward

Params = dict[str, Tensor]

SHUFFLE = 4
FULL_RES_KG = 8


@dataclass(frozen=True)
class NetConfig:
    features: int = 32
    global_features: int = 8
    hidden: int = 16
    body_blocks: int = 6
    d_features: int = 16
    d_global_features: int = 4
    d_hidden: int = 8
    d_blocks: int = 8
    k_local: int = 3
    recurrent: bool = True
    lgm: bool = True

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def ablation_config(recurrent: bool, lgm: bool, base: NetConfig | None = None) -> NetConfig:
    """Network toggles for the ablation axes (the loss axis lives in TrainConfig)."""
    return replace(base or NetConfig(), recurrent=recurrent, lgm=lgm)


@dataclass
class RecurrentState:
    hidden: Tensor
    feedback: Tensor


# ---------------------------------------------------------------- blocks


def _init_block(params: Params, prefix: str, cin: int, feats: int, gfeats: int, kg: int, cfg: NetConfig, rng, dtype):
    if cfg.lgm:
        lp = init_lgm(LgmConfig(cin, feats, gfeats, kg, cfg.k_local), rng, dtype)
        params.update(lp.named(prefix))
    else:
        _init_conv(params, prefix, cin, feats, cfg.k_local, rng, dtype)


def _init_conv(params: Params, prefix: str, cin: int, cout: int, k: int, rng, dtype, zero: bool = False):
    w = np.zeros((k, k, cin, cout), dtype) if zero else _fan_in(rng, (k, k, cin, cout), dtype)
    params[f"{prefix}.w"] = Tensor(w)
    params[f"{prefix}.b"] = Tensor(np.zeros(cout, dtype))


def _block(f: Tensor, p: Params, prefix: str, kg: int, cfg: NetConfig) -> Tensor:
    if not cfg.lgm:
        return ops.conv2d(f, p[f"{prefix}.w"], p[f"{prefix}.b"])
    lp = LgmParams(p[f"{prefix}.local.w"], p[f"{prefix}.local.b"], p[f"{prefix}.global.w"], p[f"{prefix}.global.b"])
    w = lp.global_w.shape
    gcfg = LgmConfig(w[2], lp.local_w.shape[3] + w[3], w[3], kg, cfg.k_local)
    return lgm_forward(f, lp, gcfg)


def _conv(f: Tensor, p: Params, prefix: str) -> Tensor:
    return ops.conv2d(f, p[f"{prefix}.w"], p[f"{prefix}.b"])


def _global_split(feats: int, gfeats: int) -> int:
    return max(1, min(gfeats, feats - 1))


# ---------------------------------------------------------------- generator


def generator_plan(cfg: NetConfig) -> list[tuple[str, int, int, int, int]]:
    """(name, in_channels, features, global_features, k_global) per block."""
    F, Fg, Fh = cfg.features, cfg.global_features, cfg.hidden
    cin = 4 * 3 * SHUFFLE * SHUFFLE + Fh
    plan = []
    for i in range(cfg.body_blocks):
        plan.append((f"body{i}", cin if i == 0 else F, F, Fg, FULL_RES_KG // SHUFFLE))
    plan.append(("hid0", F, F, Fg, FULL_RES_KG // SHUFFLE))
    plan.append(("hid1", F, Fh, _global_split(Fh, Fh // 4), FULL_RES_KG // SHUFFLE))
    plan.append(("up0", F, F // 2, _global_split(F // 2, Fg // 2), FULL_RES_KG // 2))
    plan.append(("up1", F // 2, F // 4, _global_split(F // 4, Fg // 4), FULL_RES_KG))
    return plan


def init_generator(cfg: NetConfig, seed: int | np.random.Generator = 0, dtype=np.float32, zero_final: bool = True) -> Params:
    """Fan-in scaled random blocks; the output conv is zero so G starts as identity."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, cin, feats, gfeats, kg in generator_plan(cfg):
        _init_block(params, name, cin, feats, gfeats, kg, cfg, rng, dtype)
    _init_conv(params, "out", cfg.features // 4, 3, 3, rng, dtype, zero=zero_final)
    for k, t in params.items():
        t.name = k
    return params


def zero_generator_state(h: int, w: int, cfg: NetConfig, dtype=np.float32) -> RecurrentState:
    return RecurrentState(
        hidden=Tensor(np.zeros((h // SHUFFLE, w // SHUFFLE, cfg.hidden), dtype)),
        feedback=Tensor(np.zeros((h, w, 3), dtype)),
    )


def _check_frame(x: Tensor, what: str) -> None:
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"{what} must be [H, W, 3], got {x.shape}")
    for axis in (0, 1):
        if x.shape[axis] % FULL_RES_KG:
            raise ShapeError(f"{what} extent {x.shape[axis]} on axis {axis} is not divisible by {FULL_RES_KG}", axis)


def generator_cell_step(
    x_prev: Tensor, x_t: Tensor, x_next: Tensor, state: RecurrentState, p: Params, cfg: NetConfig
) -> tuple[Tensor, RecurrentState]:
    """One recurrent step producing the enhanced centre frame and the next state."""
    _check_frame(x_t, "x_t")
    for name, fr in (("x_prev", x_prev), ("x_next", x_next)):
        if fr.shape != x_t.shape:
            raise ShapeError(f"{name} shape {fr.shape} != x_t shape {x_t.shape}")
    h, w, _ = x_t.shape
    if not cfg.recurrent:
        state = zero_generator_state(h, w, cfg, x_t.dtype)
    stacked = ops.concat_channels([x_prev, x_t, x_next, state.feedback])
    f = ops.concat_channels([ops.space_to_depth(stacked, SHUFFLE), state.hidden])
    for i in range(cfg.body_blocks):
        f = ops.relu(_block(f, p, f"body{i}", FULL_RES_KG // SHUFFLE, cfg))
    hid = ops.relu(_block(f, p, "hid0", FULL_RES_KG // SHUFFLE, cfg))
    hid = ops.relu(_block(hid, p, "hid1", FULL_RES_KG // SHUFFLE, cfg))
    u = ops.relu(_block(ops.bilinear_resize_x2(f), p, "up0", FULL_RES_KG // 2, cfg))
    u = ops.relu(_block(ops.bilinear_resize_x2(u), p, "up1", FULL_RES_KG, cfg))
    y = ops.add(x_t, _conv(u, p, "out"))
    return y, RecurrentState(hidden=hid, feedback=y)


def pad_sequence(n_frames: int, pad: int) -> list[int]:
    """Frame indices of the internally processed sequence: ``pad`` copies of
    frame 0 followed by every frame."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    return [0] * pad + list(range(n_frames))


def _frames(x) -> tuple[Tensor, list[Tensor]]:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"sequence must be [T, H, W, C], got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("empty sequence", 0)
    return x, [x[t] for t in range(x.shape[0])]


def _windows(frames: list[Tensor], pad: int):
    order = pad_sequence(len(frames), pad)
    seq = [frames[i] for i in order]
    n = len(seq)
    for i in range(n):
        yield seq[max(i - 1, 0)], seq[i], seq[min(i + 1, n - 1)]


def run_generator(x, p: Params, cfg: NetConfig, pad: int = 3) -> Tensor:
    """Enhance a ``[T, H, W, 3]`` sequence; the ``pad`` warm-up outputs are dropped."""
    x, frames = _frames(x)
    _, h, w, _ = x.shape
    state = zero_generator_state(h, w, cfg, x.dtype)
    outs = []
    for prev, cur, nxt in _windows(frames, pad):
        y, state = generator_cell_step(prev, cur, nxt, state, p, cfg)
        outs.append(y)
    return ops.stack(outs[pad:], axis=0)


# ---------------------------------------------------------------- discriminator


def discriminator_plan(cfg: NetConfig) -> list[tuple[str, int, int, int, int]]:
    Fd, Fg, Fh = cfg.d_features, cfg.d_global_features, cfg.d_hidden
    cin = 2 * 3 * 3 + 1 + Fh
    return [(f"blk{i}", cin if i == 0 else Fd, Fd, Fg, FULL_RES_KG) for i in range(cfg.d_blocks)]


def init_discriminator(cfg: NetConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, cin, feats, gfeats, kg in discriminator_plan(cfg):
        _init_block(params, name, cin, feats, gfeats, kg, cfg, rng, dtype)
    _init_conv(params, "logit", cfg.d_features, 1, 3, rng, dtype)
    _init_conv(params, "hidden", cfg.d_features, cfg.d_hidden, 3, rng, dtype)
    for k, t in params.items():
        t.name = k
    return params


def zero_discriminator_state(h: int, w: int, cfg: NetConfig, dtype=np.float32) -> RecurrentState:
    return RecurrentState(
        hidden=Tensor(np.zeros((h, w, cfg.d_hidden), dtype)),
        feedback=Tensor(np.zeros((h, w, 1), dtype)),
    )


def discriminator_cell_step(
    x_window: tuple[Tensor, Tensor, Tensor],
    y_window: tuple[Tensor, Tensor, Tensor],
    state: RecurrentState,
    p: Params,
    cfg: NetConfig,
) -> tuple[Tensor, RecurrentState]:
    """Score one time step of a (source, target) pair; returns ``[H, W, 1]`` logits."""
    shapes = {fr.shape for fr in (*x_window, *y_window)}
    if len(shapes) != 1:
        raise ShapeError(f"x/y window frames disagree in shape: {sorted(shapes)}")
    h, w, _ = x_window[1].shape
    if not cfg.recurrent:
        state = zero_discriminator_state(h, w, cfg, x_window[1].dtype)
    f = ops.concat_channels([*x_window, *y_window, state.feedback, state.hidden])
    for i in range(cfg.d_blocks):
        f = ops.leaky_relu(_block(f, p, f"blk{i}", FULL_RES_KG, cfg), 0.2)
    s = ops.add(state.feedback, _conv(f, p, "logit"))
    hid = ops.leaky_relu(_conv(f, p, "hidden"), 0.2)
    return s, RecurrentState(hidden=hid, feedback=s)


def run_discriminator(x, y, p: Params, cfg: NetConfig, pad: int = 3) -> Tensor:
    """Logit maps ``[T, H, W, 1]`` for the unpadded steps of the pair (x, y)."""
    x, xf = _frames(x)
    y, yf = _frames(y)
    if x.shape != y.shape:
        raise ShapeError(f"x shape {x.shape} != y shape {y.shape}")
    _, h, w, _ = x.shape
    state = zero_discriminator_state(h, w, cfg, x.dtype)
    outs = []
    for xw, yw in zip(_windows(xf, pad), _windows(yf, pad)):
        s, state = discriminator_cell_step(xw, yw, state, p, cfg)
        outs.append(s)
    return ops.stack(outs[pad:], axis=0)


def param_count(p: Params) -> int:
    return int(sum(t.size for t in p.values()))


def manifest(p: Params) -> list[tuple[str, tuple[int, ...]]]:
    return [(k, t.shape) for k, t in p.items()]
