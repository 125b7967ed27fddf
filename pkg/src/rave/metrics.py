"""Relative pixel-flow, hand-crafted-feature Frechet distance, saturation and
the best-of-N runtime benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class RpfCurve:
    mu: np.ndarray
    sigma: np.ndarray

    def rows(self):
        for t, (m, s) in enumerate(zip(self.mu, self.sigma)):
            yield t, float(m), float(s)


def rpf(source: np.ndarray, method_out: np.ndarray, unnormalized: bool = False) -> RpfCurve:
    """Per-step statistics of ``(out[t+1] - out[t]) - (src[t+1] - src[t])``.

    By default ``mu`` is the mean over all pixels and channels and ``sigma``
    the standard deviation about ``mu``. ``unnormalized`` switches to the
    unnormalised sum and root-sum-of-squares.
    """
    s = np.asarray(source, np.float64)
    m = np.asarray(method_out, np.float64)
    if s.shape != m.shape:
        raise ValueError(f"source {s.shape} and method output {m.shape} differ")
    if s.ndim != 4 or s.shape[0] < 2:
        raise ValueError(f"need [T, H, W, C] with T >= 2, got {s.shape}")
    d = np.diff(m, axis=0) - np.diff(s, axis=0)
    flat = d.reshape(d.shape[0], -1)
    if unnormalized:
        return RpfCurve(flat.sum(axis=1), np.sqrt((flat**2).sum(axis=1)))
    mu = flat.mean(axis=1)
    return RpfCurve(mu, np.sqrt(((flat - mu[:, None]) ** 2).mean(axis=1)))


def write_rpf_csv(curve: RpfCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,mu,sigma\n")
        for t, m, s in curve.rows():
            fh.write(f"{t},{m!r},{s!r}\n")


def plot_rpf_svg(curves: dict[str, RpfCurve], path) -> None:
    """Mean line with a +-sigma band per curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for label, c in curves.items():
        t = np.arange(len(c.mu))
        (line,) = ax.plot(t, c.mu, label=label)
        ax.fill_between(t, c.mu - c.sigma, c.mu + c.sigma, alpha=0.25, color=line.get_color())
    ax.set_xlabel("t")
    ax.set_ylabel("relative pixel-flow")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------- features


def frame_features(frame: np.ndarray) -> np.ndarray:
    """12-vector: per-channel mean, std, mean |dx|, mean |dy|."""
    f = np.asarray(frame, np.float64)
    gx = np.abs(np.diff(f, axis=1)).mean(axis=(0, 1)) if f.shape[1] > 1 else np.zeros(f.shape[2])
    gy = np.abs(np.diff(f, axis=0)).mean(axis=(0, 1)) if f.shape[0] > 1 else np.zeros(f.shape[2])
    return np.concatenate([f.mean(axis=(0, 1)), f.std(axis=(0, 1)), gx, gy])


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def feature_stats(frames: Sequence[np.ndarray], extractor: Callable[[np.ndarray], np.ndarray] = frame_features) -> FeatureStats:
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    feats = np.stack([np.atleast_1d(np.asarray(extractor(f), np.float64)) for f in frames])
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return FeatureStats(feats.mean(axis=0), (cov + cov.T) / 2, len(frames))


def _sqrt_psd(a: np.ndarray, what: str, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise ValueError(f"{what} is not positive semidefinite (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root equals the trace of the root of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which is what is computed.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    root_a = _sqrt_psd(a.cov, "covariance a", tol)
    _sqrt_psd(b.cov, "covariance b", tol)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise ValueError(f"covariance product has eigenvalue {vals.min():.3e} < 0")
    tr_root = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = a.mean - b.mean
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_root)
    return max(fd, 0.0)


def video_frames(videos: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [f for v in videos for f in np.asarray(v)]


def fd_between(videos_a: Sequence[np.ndarray], videos_b: Sequence[np.ndarray]) -> float:
    return frechet_distance(feature_stats(video_frames(videos_a)), feature_stats(video_frames(videos_b)))


def saturation(frame: np.ndarray) -> float:
    """Mean HSV saturation of one frame."""
    f = np.asarray(frame, np.float64)
    mx = f.max(axis=-1)
    mn = f.min(axis=-1)
    s = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1), 0.0)
    return float(s.mean())


def mean_saturation(videos: Sequence[np.ndarray]) -> float:
    return float(np.mean([saturation(f) for f in video_frames(videos)]))


# ---------------------------------------------------------------- runtime


@dataclass
class BestTime:
    runs_ms: list[float] = field(default_factory=list)

    @property
    def best_ms(self) -> float:
        return min(self.runs_ms)

    @property
    def fps(self) -> float:
        return 1000.0 / self.best_ms if self.best_ms > 0 else float("inf")

    def as_dict(self) -> dict:
        return {"runs_ms": list(self.runs_ms), "best_ms": self.best_ms, "fps": self.fps}


def bench_runtime(model, sequence: np.ndarray, runs: int = 10, pad: int = 3) -> BestTime:
    """Per-frame wall time of enhancing ``sequence``, best of ``runs``.

    ``model`` is anything with ``enhance(x, pad)`` or a plain callable
    ``f(x)``. The padded warm-up frames are processed inside the timed call,
    while the divisor is the number of input frames. BLAS is held to one
    thread for the duration so timings are comparable between runs.
    """
    from threadpoolctl import threadpool_limits

    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    enhance = (lambda s: model.enhance(s, pad)) if hasattr(model, "enhance") else model
    seq = np.asarray(sequence, np.float32)
    n = seq.shape[0]
    result = BestTime()
    with threadpool_limits(1):
        for _ in range(runs):
            t0 = time.perf_counter()
            enhance(seq)
            result.runs_ms.append((time.perf_counter() - t0) * 1000.0 / n)
    return result
