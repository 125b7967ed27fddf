import numpy as np
import pytest
from scipy.linalg import sqrtm

from rave import metrics
from rave.metrics import FeatureStats, feature_stats, frame_features, frechet_distance, rpf


def _video(seed, t=4, h=8, w=8):
    return np.random.default_rng(seed).random((t, h, w, 3))


# ---------------------------------------------------------------- rpf


def test_rpf_identity():
    v = _video(0)
    c = rpf(v, v)
    assert len(c.mu) == len(c.sigma) == 3
    assert np.all(c.mu == 0) and np.all(c.sigma == 0)


def test_rpf_per_frame_offsets():
    v = _video(1, t=3)
    out = v + np.array([0, 0.2, 0])[:, None, None, None]
    c = rpf(v, out)
    np.testing.assert_allclose(c.mu, [0.2, -0.2], atol=1e-12)
    np.testing.assert_allclose(c.sigma, [0, 0], atol=1e-12)


def test_rpf_noise_in_one_frame_spikes_adjacent_steps():
    v = _video(2, t=5)
    noise = np.random.default_rng(3).normal(0, 0.1, v.shape[1:])
    out = v.copy()
    out[2] += noise
    c = rpf(v, out)
    expect = np.array([0, noise.std(), noise.std(), 0])
    np.testing.assert_allclose(c.sigma, expect, atol=1e-12)


def test_rpf_translation_covariant():
    v, m = _video(4), _video(5)
    a, b = rpf(v, m), rpf(v, m + 0.3)
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-12)


def test_rpf_unnormalized_form():
    v, m = _video(6), _video(7)
    c = rpf(v, m, unnormalized=True)
    d = np.diff(m, axis=0) - np.diff(v, axis=0)
    np.testing.assert_allclose(c.mu, d.sum(axis=(1, 2, 3)))
    np.testing.assert_allclose(c.sigma, np.sqrt((d**2).sum(axis=(1, 2, 3))))


def test_jitter_beats_identity():
    v = _video(8, t=6)
    # valid frames are clipped to [0, 1], which is where jitter shows up in sigma
    jit = np.clip(v + np.random.default_rng(0).uniform(-0.05, 0.05, 6)[:, None, None, None], 0, 1)
    assert rpf(v, jit).sigma.mean() > rpf(v, v).sigma.mean()
    assert np.abs(rpf(v, jit).mu).mean() > 0


def test_rpf_errors():
    with pytest.raises(ValueError):
        rpf(_video(0, t=3), _video(0, t=4))
    with pytest.raises(ValueError):
        rpf(_video(0, t=1), _video(0, t=1))


def test_rpf_csv_and_svg(tmp_path):
    v = _video(9)
    c = rpf(v, v + 0.01 * _video(10))
    metrics.write_rpf_csv(c, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "t,mu,sigma" and len(lines) == 4
    metrics.plot_rpf_svg({"m": c}, tmp_path / "r.svg")
    assert (tmp_path / "r.svg").read_text().lstrip().startswith("<?xml")


# ---------------------------------------------------------------- features / FD


def test_constant_frame_features():
    f = frame_features(np.full((6, 5, 3), 0.4))
    np.testing.assert_allclose(f[:3], 0.4)
    np.testing.assert_allclose(f[3:], 0, atol=1e-15)


def test_feature_stats_identical_frames():
    st = feature_stats([np.full((4, 4, 3), 0.2)] * 3)
    np.testing.assert_allclose(st.cov, 0, atol=1e-15)


def test_feature_stats_two_samples():
    st = feature_stats([0, 1], extractor=lambda v: np.full(3, float(v)))
    np.testing.assert_allclose(st.mean, 0.5)
    # brute-force unbiased covariance of two samples
    x = np.array([[0.0] * 3, [1.0] * 3])
    brute = sum(np.outer(r - x.mean(0), r - x.mean(0)) for r in x) / (len(x) - 1)
    np.testing.assert_allclose(st.cov, brute)
    np.testing.assert_allclose(st.cov, 0.5)


def test_feature_stats_needs_two_frames():
    with pytest.raises(ValueError):
        feature_stats([np.zeros((4, 4, 3))])


def _stats(mean, cov):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), 10)


def test_fd_examples():
    assert frechet_distance(_stats([0], [[1]]), _stats([1], [[1]])) == pytest.approx(1.0, abs=1e-12)
    assert frechet_distance(_stats([0, 0], np.diag([1, 4])), _stats([0, 0], np.eye(2))) == pytest.approx(1.0, abs=1e-12)
    s = _stats([0.3, -1], [[2, 0.5], [0.5, 1]])
    assert abs(frechet_distance(s, s)) < 1e-8


def _scipy_fd(a, b):
    root = sqrtm(a.cov @ b.cov)
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * np.real(root)))


def _random_psd(rng, k, rank=None):
    a = rng.standard_normal((k, rank or k))
    return a @ a.T


@pytest.mark.parametrize("seed", range(20))
def test_fd_matches_scipy_oracle(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 13))
    a = _stats(rng.standard_normal(k), _random_psd(rng, k))
    b = _stats(rng.standard_normal(k), _random_psd(rng, k))
    fd = frechet_distance(a, b)
    assert fd == pytest.approx(_scipy_fd(a, b), rel=1e-7, abs=1e-9)
    assert fd == pytest.approx(frechet_distance(b, a), rel=1e-9, abs=1e-12)
    assert fd >= 0


def test_fd_rank_deficient():
    rng = np.random.default_rng(0)
    a = _stats(np.zeros(5), _random_psd(rng, 5, rank=2))
    assert frechet_distance(a, a) < 1e-8


def test_fd_rejects_non_psd():
    with pytest.raises(ValueError):
        frechet_distance(_stats([0, 0], [[1, 0], [0, -1]]), _stats([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        frechet_distance(_stats([0], [[1]]), _stats([0, 0], np.eye(2)))


def test_fd_between_videos():
    a = [_video(i, t=5) for i in range(3)]
    assert metrics.fd_between(a, a) < 1e-8
    b = [np.clip(v * 0.5, 0, 1) for v in a]
    assert metrics.fd_between(a, b) > 0.01


def test_saturation():
    assert metrics.saturation(np.full((2, 2, 3), 0.5)) == 0.0
    assert metrics.saturation(np.zeros((2, 2, 3))) == 0.0
    red = np.zeros((2, 2, 3))
    red[..., 0] = 0.8
    assert metrics.saturation(red) == pytest.approx(1.0)
    mixed = np.array([[[1.0, 0.5, 0.5]]])
    assert metrics.saturation(mixed) == pytest.approx(0.5)


# ---------------------------------------------------------------- runtime


class _Model:
    def __init__(self):
        self.calls = []

    def enhance(self, x, pad):
        self.calls.append((x.shape, pad))
        return np.tanh(np.repeat(x[:1], pad, axis=0).sum() + x)


def test_bench_structure():
    m = _Model()
    res = metrics.bench_runtime(m, np.zeros((4, 8, 8, 3)), runs=10, pad=3)
    assert len(res.runs_ms) == 10 and len(m.calls) == 10
    assert m.calls[0] == ((4, 8, 8, 3), 3)
    assert res.best_ms == min(res.runs_ms)
    assert res.best_ms <= np.mean(res.runs_ms)
    d = res.as_dict()
    assert set(d) == {"runs_ms", "best_ms", "fps"}
    assert d["fps"] == pytest.approx(1000 / d["best_ms"])


def test_bench_accepts_callable_and_validates_runs():
    res = metrics.bench_runtime(lambda s: s * 2, np.zeros((2, 8, 8, 3)), runs=3)
    assert len(res.runs_ms) == 3
    with pytest.raises(ValueError):
        metrics.bench_runtime(lambda s: s, np.zeros((2, 8, 8, 3)), runs=0)


def test_bench_monotone_in_resolution():
    from rave.nets import NetConfig
    from rave.trainer import RaveModel

    model = RaveModel.create(NetConfig(), seed=0)
    small = metrics.bench_runtime(model, _video(0, t=2, h=64, w=64), runs=3)
    large = metrics.bench_runtime(model, _video(0, t=2, h=128, w=128), runs=3)
    assert small.best_ms < large.best_ms
