"""Alternating unpaired adversarial training of generator, degrader and
discriminator, with Adam, online crops and checkpoint/resume."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from rave import nets, objective
from rave.autograd import Tape, Tensor, no_grad
from rave.formats import Checkpoint, CheckpointMismatch, manifest_diff, read_checkpoint, write_checkpoint
from rave.objective import CSV_HEADER, LossReport

log = logging.getLogger(__name__)

_NET_KEYS = {f.name for f in fields(nets.NetConfig)} - {"recurrent", "lgm"}


class NonFiniteError(FloatingPointError):
    """A loss or gradient went NaN/inf; the iteration was aborted."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-4
    crop_t: int = 5
    crop_h: int = 64
    crop_w: int = 64
    pad: int = 3
    iterations: int = 1000
    seed: int = 0
    recurrent: bool = True
    lgm: bool = True
    ragan_star: bool = True
    d_steps: int = 1
    checkpoint_interval: int = 0
    features: int = 32
    global_features: int = 8
    hidden: int = 16
    body_blocks: int = 6
    d_features: int = 16
    d_global_features: int = 4
    d_hidden: int = 8
    d_blocks: int = 8
    k_local: int = 3

    def __post_init__(self):
        if self.crop_h % 8 or self.crop_w % 8:
            raise ValueError(f"crop H, W must be divisible by 8, got {self.crop_h}x{self.crop_w}")
        if self.crop_t < 1:
            raise ValueError(f"crop_t must be >= 1, got {self.crop_t}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.pad < 0 or self.d_steps < 1:
            raise ValueError("pad must be >= 0 and d_steps >= 1")

    @property
    def crop(self) -> tuple[int, int, int]:
        return self.crop_t, self.crop_h, self.crop_w

    def net_config(self) -> nets.NetConfig:
        kw = {k: getattr(self, k) for k in _NET_KEYS}
        return nets.NetConfig(recurrent=self.recurrent, lgm=self.lgm, **kw)


def parse_config_text(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                low = val.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(val)
                values[key] = low in ("true", "1", "yes")
            elif kind in ("int", int):
                values[key] = int(val)
            else:
                values[key] = float(val)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {val!r} for {key} ({kind})") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- sampling


@dataclass
class UnpairedBatch:
    x: np.ndarray
    y: np.ndarray
    x_origin: tuple[int, int, int, int]  # (video, t, h, w)
    y_origin: tuple[int, int, int, int]


def _crop_offsets(shape: tuple[int, ...], crop: tuple[int, int, int], rng: np.random.Generator) -> tuple[int, int, int]:
    t, h, w = shape[:3]
    ct, ch, cw = crop
    if t < ct or h < ch or w < cw:
        raise ValueError(f"video {shape[:3]} smaller than crop {crop}")
    return int(rng.integers(0, t - ct + 1)), int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def sample_unpaired_crop(
    source_set: Sequence[np.ndarray], target_set: Sequence[np.ndarray], rng: np.random.Generator, crop=(5, 64, 64)
) -> UnpairedBatch:
    """Draw x and y from independently chosen videos at independent offsets."""
    if not source_set or not target_set:
        raise ValueError("source and target sets must be non-empty")
    ct, ch, cw = crop
    xi = int(rng.integers(len(source_set)))
    xo = _crop_offsets(source_set[xi].shape, crop, rng)
    yi = int(rng.integers(len(target_set)))
    yo = _crop_offsets(target_set[yi].shape, crop, rng)
    xs, ys = source_set[xi], target_set[yi]
    x = xs[xo[0] : xo[0] + ct, xo[1] : xo[1] + ch, xo[2] : xo[2] + cw]
    y = ys[yo[0] : yo[0] + ct, yo[1] : yo[1] + ch, yo[2] : yo[2] + cw]
    return UnpairedBatch(np.ascontiguousarray(x, np.float32), np.ascontiguousarray(y, np.float32), (xi, *xo), (yi, *yo))


def pad_and_trim(x: np.ndarray, pad: int) -> tuple[np.ndarray, slice]:
    """Prepend ``pad`` copies of frame 0; the slice selects the kept outputs."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    x = np.asarray(x)
    padded = np.concatenate([np.repeat(x[:1], pad, axis=0), x], axis=0) if pad else x
    return padded, slice(pad, pad + x.shape[0])


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam; parameters are rebound to fresh arrays."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {len(bad)} tensor(s): {', '.join(bad[:5])}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1**opt.step
    c2 = 1 - b2**opt.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        v = opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)


# ---------------------------------------------------------------- model / state


@dataclass
class RaveModel:
    net: nets.NetConfig
    g: nets.Params
    h: nets.Params
    d: nets.Params

    @classmethod
    def create(cls, net: nets.NetConfig, seed: int = 0, dtype=np.float32) -> "RaveModel":
        ss = np.random.SeedSequence(seed).spawn(3)
        return cls(
            net=net,
            g=nets.init_generator(net, np.random.default_rng(ss[0]), dtype),
            h=nets.init_generator(net, np.random.default_rng(ss[1]), dtype),
            d=nets.init_discriminator(net, np.random.default_rng(ss[2]), dtype),
        )

    def named(self) -> dict[str, Tensor]:
        out = {}
        for prefix, params in (("G", self.g), ("H", self.h), ("D", self.d)):
            out.update({f"{prefix}/{k}": t for k, t in params.items()})
        return out

    def enhance(self, x: np.ndarray, pad: int = 3) -> np.ndarray:
        """Inference: run G without recording and clamp to [0, 1]."""
        out = nets.run_generator(Tensor(np.asarray(x, np.float32)), self.g, self.net, pad)
        return np.clip(out.data, 0, 1)


@dataclass
class TrainState:
    model: RaveModel
    opt_gh: OptimizerState
    opt_d: OptimizerState
    rng: np.random.Generator
    iteration: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        model = RaveModel.create(cfg.net_config(), cfg.seed)
        return cls(
            model=model,
            opt_gh=OptimizerState.for_params({**_prefixed("G", model.g), **_prefixed("H", model.h)}),
            opt_d=OptimizerState.for_params(_prefixed("D", model.d)),
            rng=np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3]),
        )


def _prefixed(prefix: str, params: nets.Params) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": t for k, t in params.items()}


def _set_trainable(params: dict[str, Tensor], flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag
        t.grad = None


def _collect(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.items()}


def _finite(value: Tensor, what: str) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise NonFiniteError(f"{what} is not finite ({v})")
    return v


def _logits(cfg: TrainConfig, s_real: Tensor, s_fake: Tensor) -> objective.RelativisticLogits:
    if cfg.ragan_star:
        return objective.relativistic_transform(s_real, s_fake)
    return objective.raw_logits(s_real, s_fake)


def train_iteration(state: TrainState, batch: UnpairedBatch, cfg: TrainConfig) -> LossReport:
    """One generator/degrader update followed by ``cfg.d_steps`` discriminator updates."""
    m = state.model
    gh = {**_prefixed("G", m.g), **_prefixed("H", m.h)}
    dd = _prefixed("D", m.d)
    x, y = Tensor(batch.x), Tensor(batch.y)

    # real scores are recorded for the D update; D is untouched until then
    _set_trainable(gh, False)
    _set_trainable(dd, True)
    tape_d = Tape()
    with tape_d:
        s_real = nets.run_discriminator(x, y, m.d, m.net, cfg.pad)

    # step A: generator + degrader, discriminator frozen
    _set_trainable(dd, False)
    _set_trainable(gh, True)
    tape_g = Tape()
    with tape_g:
        y_hat = nets.run_generator(x, m.g, m.net, cfg.pad)
        x_hat = nets.run_generator(y, m.h, m.net, cfg.pad)
        x_cyc = nets.run_generator(y_hat, m.h, m.net, cfg.pad)
        y_cyc = nets.run_generator(x_hat, m.g, m.net, cfg.pad)
        s_fake = nets.run_discriminator(x_hat, y_hat, m.d, m.net, cfg.pad)
        cyc = objective.cyclic_loss(x, x_cyc, y, y_cyc)
        rl = _logits(cfg, s_real.detach(), s_fake)
        g_obj, _ = objective.total_objective(rl, cyc, cfg.alpha)
    total_g = _finite(g_obj, "generator objective")
    l_cyc = float(cyc.data)
    with no_grad():
        l_gan_g = float(objective.gan_loss_g(rl).data)
    tape_g.backward(g_obj)
    grads = _collect(gh)
    _set_trainable(gh, False)
    adam_step(gh, grads, state.opt_gh, cfg.learning_rate)

    # step B: discriminator on detached fakes
    fakes = (x_hat.detach(), y_hat.detach())
    l_gan_d = None
    for k in range(cfg.d_steps):
        _set_trainable(dd, True)
        if k:
            tape_d = Tape()
            with tape_d:
                s_real = nets.run_discriminator(x, y, m.d, m.net, cfg.pad)
        with tape_d:
            s_fake_d = nets.run_discriminator(*fakes, m.d, m.net, cfg.pad)
            d_obj = objective.gan_loss_d(_logits(cfg, s_real, s_fake_d))
        value = _finite(d_obj, "discriminator objective")
        if l_gan_d is None:
            l_gan_d = value
        tape_d.backward(d_obj)
        grads = _collect(dd)
        _set_trainable(dd, False)
        adam_step(dd, grads, state.opt_d, cfg.learning_rate)

    state.iteration += 1
    return LossReport(state.iteration, l_gan_g, l_gan_d, l_cyc, total_g)


# ---------------------------------------------------------------- checkpoints


def state_to_checkpoint(state: TrainState, cfg: TrainConfig) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for k, t in state.model.named().items():
        tensors[k] = t.data
    for tag, opt in (("optGH", state.opt_gh), ("optD", state.opt_d)):
        for k in opt.m:
            tensors[f"{tag}/m/{k}"] = opt.m[k]
            tensors[f"{tag}/v/{k}"] = opt.v[k]
    meta = {
        "net": state.model.net.as_dict(),
        "train": asdict(cfg),
        "iteration": state.iteration,
        "opt_steps": {"optGH": state.opt_gh.step, "optD": state.opt_d.step},
        "rng": _json_safe(state.rng.bit_generator.state),
    }
    return Checkpoint(meta=meta, tensors=tensors)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, int) and abs(obj) >= 2**53:
        return {"__bigint__": str(obj)}
    return obj


def _json_restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__bigint__"}:
            return int(obj["__bigint__"])
        return {k: _json_restore(v) for k, v in obj.items()}
    return obj


def model_from_checkpoint(ckpt: Checkpoint, net: nets.NetConfig | None = None) -> RaveModel:
    """Build a model from a checkpoint, refusing on any name/shape mismatch."""
    saved = nets.NetConfig(**ckpt.meta["net"])
    net = net or saved
    model = RaveModel.create(net)
    expected = {k: t.shape for k, t in model.named().items()}
    found = {k: a.shape for k, a in ckpt.tensors.items() if k[:2] in ("G/", "H/", "D/")}
    diffs = manifest_diff(expected, found)
    if diffs:
        raise CheckpointMismatch(diffs)
    for k, t in model.named().items():
        t.data = ckpt.tensors[k].copy()
    return model


def load_model(path) -> RaveModel:
    return model_from_checkpoint(read_checkpoint(path))


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    model = model_from_checkpoint(ckpt, cfg.net_config())
    state = TrainState.fresh(cfg)
    state.model = model
    for tag, opt in (("optGH", state.opt_gh), ("optD", state.opt_d)):
        for k in opt.m:
            opt.m[k] = ckpt.tensors[f"{tag}/m/{k}"].copy()
            opt.v[k] = ckpt.tensors[f"{tag}/v/{k}"].copy()
        opt.step = int(ckpt.meta["opt_steps"][tag])
    state.iteration = int(ckpt.meta["iteration"])
    state.rng.bit_generator.state = _json_restore(ckpt.meta["rng"])
    return state


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    write_checkpoint(path, state_to_checkpoint(state, cfg))


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.ravw"


# ---------------------------------------------------------------- loop


def deterministic_mode() -> bool:
    return os.environ.get("RAVE_DETERMINISTIC", "") == "1"


def train(
    cfg: TrainConfig,
    source_set: Sequence[np.ndarray],
    target_set: Sequence[np.ndarray],
    out_dir,
    resume=None,
    stop_at: int | None = None,
) -> TrainState:
    """Run ``cfg.iterations`` iterations, writing ``log.csv`` and checkpoints.

    ``resume`` is a checkpoint path; ``stop_at`` ends the run early (used to
    simulate interruption) after writing a checkpoint at that iteration.
    """
    from threadpoolctl import threadpool_limits

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    if resume is not None:
        state = state_from_checkpoint(read_checkpoint(resume), cfg)
        _truncate_log(log_path, state.iteration)
    else:
        state = TrainState.fresh(cfg)
        log_path.write_text(CSV_HEADER + "\n")
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    limits = threadpool_limits(1) if deterministic_mode() else None
    try:
        with log_path.open("a") as fh:
            while state.iteration < end:
                batch = sample_unpaired_crop(source_set, target_set, state.rng, cfg.crop)
                rep = train_iteration(state, batch, cfg)
                fh.write(rep.csv_row() + "\n")
                fh.flush()
                if rep.iteration % 50 == 0:
                    log.info("iter %d g=%.4f d=%.4f cyc=%.5f", rep.iteration, rep.l_gan_g, rep.l_gan_d, rep.l_cyc)
                if cfg.checkpoint_interval and rep.iteration % cfg.checkpoint_interval == 0:
                    save_state(out / checkpoint_name(rep.iteration), state, cfg)
        save_state(out / checkpoint_name(state.iteration), state, cfg)
        save_state(out / "last.ravw", state, cfg)
    finally:
        if limits is not None:
            limits.unregister()
    return state


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        path.write_text(CSV_HEADER + "\n")
        return
    lines = path.read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) <= iteration]
    path.write_text("\n".join(keep) + "\n")
