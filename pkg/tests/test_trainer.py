import copy
import os

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from rave import nets, objective
from rave.autograd import Tape, Tensor, no_grad
from rave.formats import CheckpointMismatch, read_checkpoint, write_checkpoint
from rave.trainer import (
    NonFiniteError,
    OptimizerState,
    TrainConfig,
    TrainState,
    _crop_offsets,
    adam_step,
    checkpoint_name,
    load_model,
    model_from_checkpoint,
    pad_and_trim,
    parse_config_text,
    sample_unpaired_crop,
    train,
    train_iteration,
)

TINY = dict(
    crop_t=2,
    crop_h=16,
    crop_w=16,
    pad=1,
    features=8,
    global_features=2,
    hidden=4,
    body_blocks=2,
    d_features=4,
    d_global_features=1,
    d_hidden=2,
    d_blocks=2,
)


def tiny_cfg(**kw):
    return TrainConfig(**{**TINY, **kw})


def _clips(seed, n=3, t=4, h=24, w=24):
    rng = np.random.default_rng(seed)
    return [rng.random((t, h, w, 3)).astype(np.float32) for _ in range(n)]


# ---------------------------------------------------------------- sampling


def test_crop_bounds_over_many_draws():
    shapes = [(10, 96, 80, 3), (6, 64, 72, 3), (5, 64, 64, 3)]
    rng = np.random.default_rng(0)
    for i in range(100_000):
        shape = shapes[i % 3]
        t0, h0, w0 = _crop_offsets(shape, (5, 64, 64), rng)
        assert 0 <= t0 <= shape[0] - 5 and 0 <= h0 <= shape[1] - 64 and 0 <= w0 <= shape[2] - 64


def test_crop_shapes():
    src = [np.zeros(s, np.float32) for s in ((10, 96, 80, 3), (6, 64, 72, 3))]
    tgt = [np.zeros((7, 72, 64, 3), np.float32)]
    rng = np.random.default_rng(1)
    for _ in range(100):
        b = sample_unpaired_crop(src, tgt, rng, (5, 64, 64))
        assert b.x.shape == b.y.shape == (5, 64, 64, 3)


def test_crop_content_matches_origin():
    src, tgt = _clips(1), _clips(2)
    b = sample_unpaired_crop(src, tgt, np.random.default_rng(3), (2, 16, 16))
    vi, t0, h0, w0 = b.x_origin
    np.testing.assert_array_equal(b.x, src[vi][t0 : t0 + 2, h0 : h0 + 16, w0 : w0 + 16])
    vi, t0, h0, w0 = b.y_origin
    np.testing.assert_array_equal(b.y, tgt[vi][t0 : t0 + 2, h0 : h0 + 16, w0 : w0 + 16])


def test_source_and_target_draws_independent():
    src = [np.zeros((5, 8, 8, 3), np.float32)] * 4
    tgt = [np.zeros((5, 8, 8, 3), np.float32)] * 4
    rng = np.random.default_rng(5)
    table = np.zeros((4, 4), int)
    for _ in range(20_000):
        b = sample_unpaired_crop(src, tgt, rng, (5, 8, 8))
        table[b.x_origin[0], b.y_origin[0]] += 1
    _, p, _, _ = chi2_contingency(table)
    assert p > 0.001


def test_crop_too_large():
    with pytest.raises(ValueError):
        sample_unpaired_crop(_clips(0, t=2), _clips(1), np.random.default_rng(0), (3, 16, 16))


def test_sampler_deterministic_given_seed():
    src, tgt = _clips(1), _clips(2)
    a = [sample_unpaired_crop(src, tgt, np.random.default_rng(9), (2, 16, 16)) for _ in range(2)]
    assert a[0].x_origin == a[1].x_origin and a[0].y_origin == a[1].y_origin


def test_pad_and_trim_three_frames():
    x = np.arange(3, dtype=np.float32).reshape(3, 1, 1, 1)
    padded, keep = pad_and_trim(x, 3)
    np.testing.assert_array_equal(padded[:, 0, 0, 0], [0, 0, 0, 0, 1, 2])
    same, keep0 = pad_and_trim(x, 0)
    np.testing.assert_array_equal(same, x)
    np.testing.assert_array_equal(same[keep0], x)


def test_pad_and_trim():
    x = np.arange(4, dtype=np.float32).reshape(4, 1, 1, 1)
    padded, keep = pad_and_trim(x, 3)
    assert padded.shape[0] == 7
    np.testing.assert_array_equal(padded[:4, 0, 0, 0], [0, 0, 0, 0])
    np.testing.assert_array_equal(padded[keep], x)


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_is_signed_lr():
    rng = np.random.default_rng(0)
    p = {"w": Tensor(rng.standard_normal(50))}
    g = {"w": rng.standard_normal(50)}
    before = p["w"].data.copy()
    adam_step(p, g, OptimizerState.for_params(p), 1e-3)
    step = p["w"].data - before
    np.testing.assert_allclose(step, -1e-3 * g["w"] / (np.abs(g["w"]) + 1e-8), rtol=1e-9)
    np.testing.assert_allclose(step, -1e-3 * np.sign(g["w"]), rtol=1e-5)


def test_adam_zero_gradient_leaves_params():
    p = {"w": Tensor(np.linspace(-1, 1, 7))}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(7)}, OptimizerState.for_params(p), 1e-3)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_two_steps_match_scalar_reference():
    w0, g1, g2, lr = 0.7, 0.3, -1.2, 0.01
    # scalar reference
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    w = w0
    for t, g in enumerate((g1, g2), 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    p = {"w": Tensor(np.array([w0]))}
    opt = OptimizerState.for_params(p)
    adam_step(p, {"w": np.array([g1])}, opt, lr)
    adam_step(p, {"w": np.array([g2])}, opt, lr)
    assert abs(p["w"].data[0] - w) < 1e-12
    assert opt.step == 2


def test_adam_rejects_non_finite():
    p = {"w": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteError):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, OptimizerState.for_params(p), 1e-3)


def test_adam_rebinds_parameter_array():
    p = {"w": Tensor(np.zeros(2))}
    held = p["w"].data
    adam_step(p, {"w": np.ones(2)}, OptimizerState.for_params(p), 1e-3)
    assert p["w"].data is not held
    np.testing.assert_array_equal(held, 0)


# ---------------------------------------------------------------- iteration


def _batch(seed, cfg):
    return sample_unpaired_crop(_clips(seed), _clips(seed + 1), np.random.default_rng(seed), cfg.crop)


def _perturb(state, seed=0):
    # move every generator output conv off zero so all paths carry signal
    rng = np.random.default_rng(seed)
    for params in (state.model.g, state.model.h):
        params["out.w"].data = (rng.standard_normal(params["out.w"].shape) * 0.05).astype(np.float32)


def _grads_of(loss_fn, params):
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    tape = Tape()
    with tape:
        loss = loss_fn()
    tape.backward(loss)
    out = {k: t.grad.copy() for k, t in params.items()}
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return out


@pytest.mark.parametrize("ragan_star", [True, False])
def test_iteration_matches_manual_replay(ragan_star):
    cfg = tiny_cfg(ragan_star=ragan_star, alpha=0.5)
    state = TrainState.fresh(cfg)
    _perturb(state)
    ref = copy.deepcopy(state)
    before = {k: t.data.copy() for k, t in state.model.named().items()}
    batch = _batch(4, cfg)
    rep = train_iteration(state, batch, cfg)

    m, net, pad = ref.model, ref.model.net, cfg.pad
    x, y = Tensor(batch.x), Tensor(batch.y)
    tf = objective.relativistic_transform if ragan_star else objective.raw_logits
    with no_grad():
        s_real = nets.run_discriminator(x, y, m.d, net, pad)

    def g_loss():
        y_hat = nets.run_generator(x, m.g, net, pad)
        x_hat = nets.run_generator(y, m.h, net, pad)
        cyc = objective.cyclic_loss(
            x, nets.run_generator(y_hat, m.h, net, pad), y, nets.run_generator(x_hat, m.g, net, pad)
        )
        s_fake = nets.run_discriminator(x_hat, y_hat, m.d, net, pad)
        return objective.total_objective(tf(s_real, s_fake), cyc, cfg.alpha)[0]

    gh = {**{f"G/{k}": t for k, t in m.g.items()}, **{f"H/{k}": t for k, t in m.h.items()}}
    with no_grad():
        y_hat = nets.run_generator(x, m.g, net, pad)
        x_hat = nets.run_generator(y, m.h, net, pad)
    g_grads = _grads_of(g_loss, gh)
    dd = {f"D/{k}": t for k, t in m.d.items()}
    d_grads = _grads_of(
        lambda: objective.gan_loss_d(
            tf(nets.run_discriminator(x, y, m.d, net, pad), nets.run_discriminator(x_hat, y_hat, m.d, net, pad))
        ),
        dd,
    )
    adam_step(gh, g_grads, ref.opt_gh, cfg.learning_rate)
    adam_step(dd, d_grads, ref.opt_d, cfg.learning_rate)

    got, want = state.model.named(), ref.model.named()
    for k in got:
        np.testing.assert_allclose(got[k].data, want[k].data, rtol=1e-5, atol=1e-9, err_msg=k)
    for prefix in ("G/", "H/", "D/"):
        assert any(not np.array_equal(got[k].data, before[k]) for k in got if k.startswith(prefix)), prefix
    assert rep.iteration == 1 and np.isfinite([rep.l_gan_g, rep.l_gan_d, rep.l_cyc]).all()
    assert all(not t.requires_grad for t in state.model.named().values())


def test_identity_at_iteration_zero():
    cfg = tiny_cfg(alpha=1.0)
    state = TrainState.fresh(cfg)
    rep = train_iteration(state, _batch(7, cfg), cfg)
    assert rep.l_cyc == 0.0
    assert rep.total_g == rep.l_gan_g


def test_optimizer_registries_are_disjoint():
    state = TrainState.fresh(tiny_cfg())
    gh, d = set(state.opt_gh.m), set(state.opt_d.m)
    assert gh and d and not gh & d
    assert gh | d == set(state.model.named())


def test_each_step_updates_only_its_networks(monkeypatch):
    import rave.trainer as tr

    cfg = tiny_cfg()
    state = TrainState.fresh(cfg)
    _perturb(state)
    real = tr.adam_step
    seen = []

    def spy(params, grads, opt, lr):
        before = {k: t.data.copy() for k, t in state.model.named().items()}
        real(params, grads, opt, lr)
        after = state.model.named()
        changed = {k for k in after if not np.array_equal(after[k].data, before[k])}
        assert changed <= set(params)
        seen.append({k.split("/")[0] for k in params})

    monkeypatch.setattr(tr, "adam_step", spy)
    train_iteration(state, _batch(4, cfg), cfg)
    assert seen == [{"G", "H"}, {"D"}]


def test_d_steps_runs_extra_updates():
    cfg = tiny_cfg(d_steps=2)
    state = TrainState.fresh(cfg)
    train_iteration(state, _batch(1, cfg), cfg)
    assert state.opt_d.step == 2 and state.opt_gh.step == 1


# ---------------------------------------------------------------- config


def test_parse_config_text():
    cfg = parse_config_text("# toy\nalpha = 0.5\niterations=12  # short\nragan_star = false\nlearning_rate = 2e-4\n")
    assert cfg.alpha == 0.5 and cfg.iterations == 12 and cfg.ragan_star is False and cfg.learning_rate == 2e-4


@pytest.mark.parametrize("text", ["bogus = 1", "alpha 1", "iterations = 1.5", "lgm = maybe", "crop_h = 60", "alpha = -1"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


# ---------------------------------------------------------------- loop / checkpoints


def _run(tmp_path, name, cfg, **kw):
    return train(cfg, _clips(10), _clips(11), tmp_path / name, **kw)


def test_checkpoint_cadence_and_log(tmp_path):
    cfg = tiny_cfg(iterations=5, checkpoint_interval=2)
    _run(tmp_path, "a", cfg)
    names = sorted(p.name for p in (tmp_path / "a").glob("*.ravw"))
    assert names == [checkpoint_name(2), checkpoint_name(4), checkpoint_name(5), "last.ravw"]
    rows = (tmp_path / "a" / "log.csv").read_text().splitlines()
    assert rows[0] == "iter,l_gan_g,l_gan_d,l_cyc"
    assert [int(r.split(",")[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]


def test_runs_are_bit_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("RAVE_DETERMINISTIC", "1")
    cfg = tiny_cfg(iterations=3)
    _run(tmp_path, "a", cfg)
    _run(tmp_path, "b", cfg)
    assert (tmp_path / "a" / "last.ravw").read_bytes() == (tmp_path / "b" / "last.ravw").read_bytes()
    assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, monkeypatch):
    monkeypatch.setenv("RAVE_DETERMINISTIC", "1")
    cfg = tiny_cfg(iterations=4, checkpoint_interval=2)
    _run(tmp_path, "full", cfg)
    _run(tmp_path, "cut", cfg, stop_at=2)
    _run(tmp_path, "cut", cfg, resume=tmp_path / "cut" / checkpoint_name(2))
    assert (tmp_path / "full" / "last.ravw").read_bytes() == (tmp_path / "cut" / "last.ravw").read_bytes()
    assert (tmp_path / "full" / "log.csv").read_bytes() == (tmp_path / "cut" / "log.csv").read_bytes()


def test_checkpoint_model_round_trip(tmp_path):
    cfg = tiny_cfg(iterations=1)
    state = _run(tmp_path, "a", cfg)
    model = load_model(tmp_path / "a" / "last.ravw")
    for k, t in state.model.named().items():
        assert model.named()[k].data.tobytes() == t.data.tobytes()
    x = _clips(3, n=1, t=3, h=16, w=16)[0]
    np.testing.assert_array_equal(model.enhance(x, 1), state.model.enhance(x, 1))


def test_checkpoint_mismatch_lists_differences(tmp_path):
    cfg = tiny_cfg(iterations=1)
    _run(tmp_path, "a", cfg)
    ckpt = read_checkpoint(tmp_path / "a" / "last.ravw")
    with pytest.raises(CheckpointMismatch) as e:
        model_from_checkpoint(ckpt, tiny_cfg(features=16).net_config())
    assert "G/" in str(e.value)
    del ckpt.tensors["D/logit.b"]
    write_checkpoint(tmp_path / "broken.ravw", ckpt)
    with pytest.raises(CheckpointMismatch) as e:
        load_model(tmp_path / "broken.ravw")
    assert "D/logit.b" in str(e.value)


def test_deterministic_env_applied_on_import():
    # the flag is read at import; only check the accessor here
    from rave.trainer import deterministic_mode

    old = os.environ.get("RAVE_DETERMINISTIC")
    os.environ["RAVE_DETERMINISTIC"] = "1"
    try:
        assert deterministic_mode()
    finally:
        if old is None:
            del os.environ["RAVE_DETERMINISTIC"]
        else:
            os.environ["RAVE_DETERMINISTIC"] = old
