"""Loss, balancing, Adam, and training-loop tests."""

import re

import numpy as np
import pytest

from tsgad import numgrad as ng
from tsgad import training as tr
from tsgad import vae_head as vh
from tsgad.model import Detector, ModelConfig


def _grid_alpha(g1, g2, step=1e-3):
    """Independent oracle: dense scan of ||a*g1 + (1-a)*g2||^2."""
    alphas = np.arange(0.0, 1.0 + step / 2, step)
    norms = [np.linalg.norm(a * g1 + (1 - a) * g2) for a in alphas]
    best = int(np.argmin(norms))
    return alphas[best], norms


# --- losses ------------------------------------------------------------------


def test_loss_pred_examples():
    tp = ng.Tape()
    h = tp.leaf(np.array([[1.0, 2.0]]))
    assert tr.loss_pred(h, tp.leaf(np.array([[1.0, 2.0]]))).item() == 0.0
    pred = tp.leaf(np.array([[3.0, 4.0]]))
    assert tr.loss_pred(pred, tp.leaf(np.zeros((1, 2)))).item() == 25.0
    # per-window losses 2 and 4 average to 3
    p2 = tp.leaf(np.array([[np.sqrt(2.0), 0.0], [2.0, 0.0]]))
    assert abs(tr.loss_pred(p2, tp.leaf(np.zeros((2, 2)))).item() - 3.0) < 1e-15
    with pytest.raises(ng.ShapeError):
        tr.loss_pred(h, tp.leaf(np.zeros((1, 3))))


def _zero_sample(tp, latent=2, batch=1):
    mu = tp.leaf(np.zeros((batch, latent)))
    return vh.LatentSample(mu, tp.leaf(np.zeros((batch, latent))), None, mu)


def test_loss_recon_examples():
    tp = ng.Tape()
    win = tp.leaf(np.random.default_rng(0).normal(size=(1, 2, 2)))
    assert tr.loss_recon(win, win, _zero_sample(tp)).item() == 0.0
    off = tp.leaf(win.data + 0.5)
    assert abs(tr.loss_recon(off, win, _zero_sample(tp)).item() - 2.0) < 1e-12
    mu1 = tp.leaf(np.array([[1.0]]))
    s = vh.LatentSample(mu1, tp.leaf(np.array([[0.0]])), None, mu1)
    assert abs(tr.loss_recon(win, win, s).item() - 0.5) < 1e-15
    with pytest.raises(ng.ShapeError):
        tr.loss_recon(win, tp.leaf(np.zeros((1, 3, 2))), _zero_sample(tp))


def test_loss_pair_guards():
    with pytest.raises(ng.NumericError):
        tr.LossPair(float("nan"), 1.0)
    with pytest.raises(ng.NumericError):
        tr.LossPair(1.0, float("inf"))


# --- closed-form balancing ----------------------------------------------------


def test_mgda_worked_examples():
    assert tr.mgda_alpha(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.5
    assert tr.mgda_alpha(np.array([2.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    g = np.array([0.3, -0.7, 1.1])
    assert tr.mgda_alpha(g, g) == 0.5
    assert tr.mgda_alpha(g, g + 1e-9) == 0.5  # below the degeneracy floor


def test_mgda_matches_grid_search():
    rng = np.random.default_rng(7)
    for _ in range(100):
        dim = int(rng.integers(8, 65))
        g1 = rng.normal(size=dim)
        g2 = rng.normal(size=dim)
        alpha = tr.mgda_alpha(g1, g2)
        grid_best, norms = _grid_alpha(g1, g2)
        assert abs(alpha - grid_best) <= 5e-3
        ours = np.linalg.norm(alpha * g1 + (1 - alpha) * g2)
        assert ours <= min(norms) + 1e-9


def test_mgda_beats_random_alphas():
    rng = np.random.default_rng(11)
    for _ in range(20):
        g1 = rng.normal(size=16)
        g2 = rng.normal(size=16)
        alpha = tr.mgda_alpha(g1, g2)
        ours = np.linalg.norm(alpha * g1 + (1 - alpha) * g2)
        for a in rng.uniform(0, 1, size=1000):
            assert ours <= np.linalg.norm(a * g1 + (1 - a) * g2) + 1e-9


def test_mgda_descent_direction():
    rng = np.random.default_rng(13)
    checked = 0
    while checked < 50:
        g1 = rng.normal(size=12)
        g2 = rng.normal(size=12)
        alpha = tr.mgda_alpha(g1, g2)
        if not 0.01 < alpha < 0.99:
            continue
        combined = alpha * g1 + (1 - alpha) * g2
        assert combined @ g1 >= -1e-12
        assert combined @ g2 >= -1e-12
        checked += 1


def test_mgda_errors():
    with pytest.raises(ng.NumericError):
        tr.mgda_alpha(np.array([np.nan, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ng.ShapeError):
        tr.mgda_alpha(np.ones(3), np.ones(4))


def test_mgda_alpha_always_in_unit_interval():
    rng = np.random.default_rng(17)
    for _ in range(200):
        a = tr.mgda_alpha(rng.normal(size=6) * 10, rng.normal(size=6) * 0.1)
        assert 0.0 <= a <= 1.0


def test_pareto_dominates():
    assert tr.pareto_dominates(tr.LossPair(1, 1), tr.LossPair(2, 2))
    assert tr.pareto_dominates(tr.LossPair(1, 2), tr.LossPair(2, 2))
    assert not tr.pareto_dominates(tr.LossPair(1, 3), tr.LossPair(2, 2))
    assert not tr.pareto_dominates(tr.LossPair(1, 1), tr.LossPair(1, 1))
    assert not tr.pareto_dominates(tr.LossPair(2, 2), tr.LossPair(1, 1))


# --- Adam ---------------------------------------------------------------------


def _tiny_store():
    return ng.ParamStore({"a": {"w": np.array([1.0, -2.0])}, "b": {"w": np.array([0.5])}}, 0)


def test_adam_zero_grad_fixed_point():
    store = _tiny_store()
    before = store.copy()
    adam = tr.Adam(lr=0.1)
    zeros = {g: {n: np.zeros_like(a) for n, a in ts.items()} for g, ts in store.groups.items()}
    for _ in range(3):
        adam.update(store, zeros)
    assert np.array_equal(store.groups["a"]["w"], before.groups["a"]["w"])
    assert np.array_equal(store.groups["b"]["w"], before.groups["b"]["w"])


def test_adam_first_step_magnitude():
    store = _tiny_store()
    adam = tr.Adam(lr=0.01)
    g = np.array([3.0, -0.2])
    adam.update(store, {"a": {"w": g.copy()}})
    moved = store.groups["a"]["w"] - np.array([1.0, -2.0])
    # bias-corrected first step is lr * g/|g| up to the epsilon softening
    assert np.allclose(moved, -0.01 * np.sign(g), atol=1e-6)
    assert np.array_equal(store.groups["b"]["w"], [0.5])  # untouched group


def test_adam_per_parameter_counters():
    store = _tiny_store()
    adam = tr.Adam(lr=0.01)
    ga = {"a": {"w": np.array([1.0, 1.0])}}
    adam.update(store, ga)
    adam.update(store, ga)
    # group b enters late; its own step must still get full bias correction
    adam.update(store, {"b": {"w": np.array([2.0])}})
    assert adam._t[("a", "w")] == 2 and adam._t[("b", "w")] == 1
    moved = store.groups["b"]["w"][0] - 0.5
    assert abs(moved + 0.01) < 1e-6


def test_adam_deterministic():
    s1, s2 = _tiny_store(), _tiny_store()
    a1, a2 = tr.Adam(lr=0.05), tr.Adam(lr=0.05)
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = {"a": {"w": rng.normal(size=2)}, "b": {"w": rng.normal(size=1)}}
        a1.update(s1, g)
        a2.update(s2, g)
    assert np.array_equal(s1.groups["a"]["w"], s2.groups["a"]["w"])


def test_adam_shape_guard():
    store = _tiny_store()
    with pytest.raises(ng.ShapeError):
        tr.Adam().update(store, {"a": {"w": np.zeros(3)}})


# --- combined steps -----------------------------------------------------------


def _toy_detector(seed=0, **kw):
    cfg = ModelConfig(
        n_sensors=3, window=4, neighbors=1, embed_dim=2, latent=2, **kw
    )
    return Detector.build(cfg, seed)


def _toy_batch(det, m=8, seed=1):
    cfg = det.config
    rng = np.random.default_rng(seed)
    t = np.arange(m + cfg.window)
    base = np.stack(
        [np.sin(t / (3.0 + i)) for i in range(cfg.n_sensors)], axis=1
    ) + 0.01 * rng.normal(size=(m + cfg.window, cfg.n_sensors))
    windows = np.stack([base[i : i + cfg.window].T for i in range(m)])
    targets = base[cfg.window : cfg.window + m]
    return windows, targets


def test_fixed_pred_only_freezes_recon():
    det = _toy_detector(seed=2)
    w, t = _toy_batch(det)
    before = det.store.copy()
    tr.combined_step(det, w, t, tr.CombinationMode("fixed", 1.0, 0.0), tr.Adam())
    for name, arr in det.store.groups["recon"].items():
        assert np.array_equal(arr, before.groups["recon"][name]), name
    assert not np.array_equal(
        det.store.groups["pred"]["mlp.W2"], before.groups["pred"]["mlp.W2"]
    )
    assert not np.array_equal(
        det.store.groups["shared"]["attn.Wv"], before.groups["shared"]["attn.Wv"]
    )


def test_mode_validation():
    with pytest.raises(ValueError):
        tr.CombinationMode("nope")
    with pytest.raises(ValueError):
        tr.CombinationMode("fixed", 0.7, 0.7)
    with pytest.raises(ValueError):
        tr.CombinationMode("fixed", -0.1, 1.1)
    with pytest.raises(ValueError):
        tr.CombinationMode("alternating", period=0)


def test_symmetric_tasks_balance_at_half():
    # two mirror-image quadratic losses around the origin pull with exactly
    # opposite gradients, so the closed form lands on 0.5
    tp = ng.Tape()
    z = tp.leaf(np.zeros(4))
    a = tp.leaf(np.array([1.0, -2.0, 0.5, 3.0]))
    tp.tag(z, "Z")
    l_pred = ng.sq_l2_norm(ng.sub(z, a))
    l_recon = ng.sq_l2_norm(ng.add(z, a))
    gp = tp.backward(l_pred).at_tag("Z")
    gr = tp.backward(l_recon).at_tag("Z")
    assert tr.mgda_alpha(gp, gr) == 0.5
    assert l_pred.item() == l_recon.item()


def test_mgda_step_updates_both_partitions():
    det = _toy_detector(seed=3)
    w, t = _toy_batch(det)
    before = det.store.copy()
    stats = tr.combined_step(det, w, t, tr.CombinationMode("mgda_ub"), tr.Adam())
    assert 0.0 <= stats.alpha <= 1.0
    changed = {
        g: any(
            not np.array_equal(arr, before.groups[g][n])
            for n, arr in det.store.groups[g].items()
        )
        for g in ("shared", "pred", "recon")
    }
    assert all(changed.values()), changed


def test_upper_bound_inequality():
    # combined parameter gradient through the trunk never exceeds the trunk
    # Jacobian norm times the combined trunk-output gradient norm
    det = _toy_detector(seed=5)
    w, t = _toy_batch(det, m=2)
    out, lp, lr_ = tr.forward_losses(det, w, t, eps=None)
    gp = out.tape.backward(lp)
    gr = out.tape.backward(lr_)
    alpha = tr.mgda_alpha(
        gp.at_tag("Z").mean(axis=0).ravel(), gr.at_tag("Z").mean(axis=0).ravel()
    )

    def shared_vec(grads):
        m = ng.param_grads(grads, out.bound)["shared"]
        return np.concatenate([m[k].ravel() for k in sorted(m)])

    comb_theta = alpha * shared_vec(gp) + (1 - alpha) * shared_vec(gr)
    comb_z = (alpha * gp.at_tag("Z") + (1 - alpha) * gr.at_tag("Z")).ravel()

    rows = []
    z_size = out.z.size
    for j in range(z_size):
        seed = np.zeros(z_size)
        seed[j] = 1.0
        rows.append(shared_vec(out.tape.backward(out.z, seed=seed.reshape(out.z.shape))))
    jac = np.stack(rows)  # (z_size, n_shared_params)

    # sanity: the chain rule reproduces the combined parameter gradient
    assert np.allclose(jac.T @ comb_z, comb_theta, atol=1e-10)
    lhs = np.linalg.norm(comb_theta)
    rhs = np.linalg.norm(jac) * np.linalg.norm(comb_z)
    assert lhs <= rhs * (1.0 + 1e-6)


def test_alternating_parity_freezes_heads():
    det = _toy_detector(seed=7)
    w, t = _toy_batch(det)
    mode = tr.CombinationMode("alternating", period=1)
    adam = tr.Adam()

    before = det.store.copy()
    s0 = tr.combined_step(det, w, t, mode, adam, epoch=0)
    assert s0.alpha == 1.0
    for name, arr in det.store.groups["recon"].items():
        assert np.array_equal(arr, before.groups["recon"][name])

    before = det.store.copy()
    s1 = tr.combined_step(det, w, t, mode, adam, epoch=1)
    assert s1.alpha == 0.0
    for name, arr in det.store.groups["pred"].items():
        assert np.array_equal(arr, before.groups["pred"][name])
    # period 2 keeps the forecast head active on epoch 1
    assert tr.combined_step(
        det, w, t, tr.CombinationMode("alternating", period=2), adam, epoch=1
    ).alpha == 1.0


def test_single_head_ablation_steps():
    det = _toy_detector(seed=9, no_recon=True)
    w, t = _toy_batch(det)
    stats = tr.combined_step(det, w, t, tr.CombinationMode("mgda_ub"), tr.Adam())
    assert stats.alpha == 1.0 and stats.losses.l_recon == 0.0
    det2 = _toy_detector(seed=9, no_pred=True)
    stats2 = tr.combined_step(det2, w, t, tr.CombinationMode("mgda_ub"), tr.Adam())
    assert stats2.alpha == 0.0 and stats2.losses.l_pred == 0.0


def test_all_modes_reduce_toy_loss():
    for mode in (
        tr.CombinationMode("mgda_ub"),
        tr.CombinationMode("fixed", 0.5, 0.5),
        tr.CombinationMode("alternating", period=1),
    ):
        det = Detector.build(
            ModelConfig(n_sensors=2, window=4, neighbors=1, embed_dim=2, latent=2),
            11,
        )
        w, t = _toy_batch(det, m=32, seed=5)
        hist = tr.train(
            det, w, t, epochs=25, batch_size=16, lr=5e-3, mode=mode, seed=1
        )  # 2 steps/epoch -> 50 steps
        first = hist[0].l_pred + hist[0].l_recon
        last = hist[-1].l_pred + hist[-1].l_recon
        assert last < first, (mode.kind, first, last)


def test_train_log_format_and_determinism():
    def run(seed):
        det = _toy_detector(seed=13)
        w, t = _toy_batch(det, m=16)
        lines = []
        tr.train(
            det, w, t, epochs=3, batch_size=8, mode=tr.CombinationMode("mgda_ub"),
            seed=seed, log=lines.append,
        )
        return det.store, lines

    s1, lines1 = run(0)
    s2, _ = run(0)
    s3, _ = run(99)
    pattern = (
        r"^epoch=\d+ l_pred=\d+\.\d{6} l_recon=\d+\.\d{6} "
        r"alpha=[01]\.\d{4} wall_s=\d+\.\d{2}$"
    )
    assert len(lines1) == 3
    for line in lines1:
        assert re.match(pattern, line), line
    for g, ts in s1.groups.items():
        for n, arr in ts.items():
            assert np.array_equal(arr, s2.groups[g][n])
    assert any(
        not np.array_equal(arr, s3.groups[g][n])
        for g, ts in s1.groups.items()
        for n, arr in ts.items()
    )


def test_train_aborts_on_divergence():
    det = _toy_detector(seed=15)
    # a huge latent-mean map overflows mu^2 inside the KL term
    det.store.groups["recon"]["mu.W"][:] = 1e200
    w, t = _toy_batch(det)
    with np.errstate(over="ignore"), pytest.raises(ng.NumericError) as exc:
        tr.train(det, w, t, epochs=1, batch_size=4, seed=0)
    assert "epoch 0" in str(exc.value)
