"""Procedural target-domain clips, a parametric degradation for the source
domain, and the unpaired dataset builder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rave.formats import read_rvid, write_rvid

LUMA = np.array([0.299, 0.587, 0.114], np.float32)


@dataclass(frozen=True)
class SceneParams:
    n_shapes: int = 4
    max_speed: float = 1.0  # pixels per frame
    edge: float = 2.0  # soft-edge width in pixels
    bg_drift: float = 0.01  # background gradient phase change per frame

    def frame_step_bound(self) -> float:
        """Upper bound on max |frame[t+1] - frame[t]| for clips built with these params."""
        return self.n_shapes * self.max_speed / self.edge + self.bg_drift


def _vivid_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    # HSV with high saturation and value, converted to RGB
    h = rng.random(n)
    s = rng.uniform(0.8, 1.0, n)
    v = rng.uniform(0.75, 1.0, n)
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = np.stack(
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ]
    )
    return table[i, np.arange(n)]


def synth_target_video(seed: int, t: int, h: int, w: int, scene: SceneParams = SceneParams()) -> np.ndarray:
    """Vivid soft-edged discs drifting over a two-colour gradient background."""
    if t < 1 or h < 8 or w < 8 or h % 8 or w % 8:
        raise ValueError(f"need T >= 1 and H, W positive multiples of 8, got {t}x{h}x{w}")
    rng = np.random.default_rng(seed)
    c1, c2 = _vivid_colors(rng, 2)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = ((xx / w - 0.5) * np.cos(theta) + (yy / h - 0.5) * np.sin(theta)) + 0.5
    colors = _vivid_colors(rng, scene.n_shapes)
    radius = rng.uniform(0.08, 0.22, scene.n_shapes) * min(h, w)
    pos = np.stack([rng.uniform(0, h, scene.n_shapes), rng.uniform(0, w, scene.n_shapes)], -1)
    angle = rng.uniform(0, 2 * np.pi, scene.n_shapes)
    speed = rng.uniform(0.3, 1.0, scene.n_shapes) * scene.max_speed
    vel = np.stack([np.sin(angle), np.cos(angle)], -1) * speed[:, None]
    phase0 = rng.uniform(-0.2, 0.2)

    frames = np.empty((t, h, w, 3), np.float32)
    for k in range(t):
        s = np.clip(ramp + phase0 + scene.bg_drift * k, 0, 1)[..., None]
        img = c1 * (1 - s) + c2 * s
        for j in range(scene.n_shapes):
            cy, cx = pos[j] + vel[j] * k
            dist = np.hypot(yy - cy, xx - cx)
            a = np.clip((radius[j] - dist) / scene.edge, 0, 1)[..., None]
            img = a * colors[j] + (1 - a) * img
        frames[k] = np.clip(img, 0, 1)
    return frames


@dataclass(frozen=True)
class DegradeSpec:
    saturation_scale: float = 1.0
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    blur_radius: int = 0
    flicker_amplitude: float = 0.0

    def __post_init__(self):
        checks = [
            (0 <= self.saturation_scale <= 1, "saturation_scale in [0, 1]"),
            (-0.3 <= self.brightness_offset <= 0.3, "brightness_offset in [-0.3, 0.3]"),
            (0.3 <= self.contrast_scale <= 1, "contrast_scale in [0.3, 1]"),
            (self.blur_radius in (0, 1, 2), "blur_radius in {0, 1, 2}"),
            (0 <= self.flicker_amplitude <= 0.1, "flicker_amplitude in [0, 0.1]"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValueError(f"DegradeSpec requires {what}: {self}")


def _box_blur(v: np.ndarray, r: int) -> np.ndarray:
    n = 2 * r + 1
    for axis in (1, 2):
        pad = [(0, 0)] * v.ndim
        pad[axis] = (r, r)
        p = np.pad(v, pad, mode="edge")
        c = np.cumsum(p, axis=axis, dtype=np.float64)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        hi = np.take(c, np.arange(n, c.shape[axis]), axis=axis)
        lo = np.take(c, np.arange(0, c.shape[axis] - n), axis=axis)
        v = ((hi - lo) / n).astype(np.float32)
    return v


def degrade_video(v: np.ndarray, spec: DegradeSpec, seed: int = 0) -> np.ndarray:
    """Saturation, contrast, brightness, blur, flicker, in that order; then clamp."""
    out = np.asarray(v, np.float32).copy()
    if spec.saturation_scale != 1:
        gray = (out @ LUMA)[..., None]
        out = gray + np.float32(spec.saturation_scale) * (out - gray)
    if spec.contrast_scale != 1:
        out = np.float32(0.5) + np.float32(spec.contrast_scale) * (out - np.float32(0.5))
    if spec.brightness_offset:
        out = out + np.float32(spec.brightness_offset)
    if spec.blur_radius:
        out = _box_blur(out, spec.blur_radius)
    if spec.flicker_amplitude:
        rng = np.random.default_rng(seed)
        jitter = rng.uniform(-spec.flicker_amplitude, spec.flicker_amplitude, out.shape[0]).astype(np.float32)
        out = out + jitter[:, None, None, None]
    return np.clip(out, 0, 1).astype(np.float32)


# ---------------------------------------------------------------- datasets


@dataclass
class UnpairedDataset:
    source: list[np.ndarray]
    target: list[np.ndarray]
    heldout_source: list[np.ndarray]
    source_ids: list[int]
    target_ids: list[int]
    heldout_ids: list[int]


def build_dataset(
    n_clips: int = 32,
    n_heldout: int = 8,
    seed: int = 0,
    t: int = 10,
    h: int = 96,
    w: int = 96,
    spec: DegradeSpec = DegradeSpec(saturation_scale=0.4, contrast_scale=0.6, flicker_amplitude=0.03),
    scene: SceneParams = SceneParams(),
) -> UnpairedDataset:
    """Target clips and degraded source clips rendered from disjoint scene seeds."""
    base = seed * 100_000
    target_ids = [base + i for i in range(n_clips)]
    source_ids = [base + n_clips + i for i in range(n_clips)]
    heldout_ids = [base + 2 * n_clips + i for i in range(n_heldout)]
    target = [synth_target_video(i, t, h, w, scene) for i in target_ids]
    source = [degrade_video(synth_target_video(i, t, h, w, scene), spec, seed=i) for i in source_ids]
    heldout = [degrade_video(synth_target_video(i, t, h, w, scene), spec, seed=i) for i in heldout_ids]
    return UnpairedDataset(source, target, heldout, source_ids, target_ids, heldout_ids)


def write_dataset(ds: UnpairedDataset, out_dir, meta: dict | None = None) -> Path:
    root = Path(out_dir)
    for sub, clips, ids in (
        ("target", ds.target, ds.target_ids),
        ("source", ds.source, ds.source_ids),
        ("heldout", ds.heldout_source, ds.heldout_ids),
    ):
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for clip, i in zip(clips, ids):
            write_rvid(d / f"clip_{i:06d}.rvid", clip)
    manifest = {
        "target_ids": ds.target_ids,
        "source_ids": ds.source_ids,
        "heldout_ids": ds.heldout_ids,
        **(meta or {}),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_clip_dir(directory) -> list[np.ndarray]:
    d = Path(directory)
    files = sorted(d.glob("*.rvid"))
    if not files:
        raise FileNotFoundError(f"no .rvid clips in {d}")
    return [read_rvid(f) for f in files]


def degrade_spec_dict(spec: DegradeSpec) -> dict:
    return asdict(spec)
