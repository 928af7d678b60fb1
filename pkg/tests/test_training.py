import math
from dataclasses import replace

import numpy as np
import pytest

from ctmetaaf import kws as kws_mod
from ctmetaaf import metaopt
from ctmetaaf import training as tr
from ctmetaaf.checkpoint import Checkpoint, load_checkpoint
from ctmetaaf.errors import NumericError, UsageError

from conftest import toy_scenes

TINY = dict(K=32, B=2, hidden=4, batch_size=8, L_range=(4, 8))
TINY_KWS = kws_mod.KwsConfig(n_classes=2, width=16, bottleneck=8)


def test_meta_loss_matches_formula(rng):
    e = rng.standard_normal((3, 50))
    want = np.mean([math.log(np.mean(x ** 2) + 1e-8) for x in e])
    assert abs(float(tr.meta_loss(e)) - want) < 1e-12


def test_meta_loss_rejects_empty_window():
    with pytest.raises(UsageError):
        tr.meta_loss(np.zeros((2, 0)))


def test_joint_loss_weight_outside_unit_interval(rng):
    with pytest.raises(UsageError):
        tr.joint_loss(rng.standard_normal(10), 0, np.array([0.5, 0.5]), 1.5)


def _ref_adam(p, grads, lr, b1, b2, eps):
    # textbook scalar loop
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_real_matches_scalar_reference(rng):
    gs = rng.standard_normal((6, 5))
    p0 = rng.standard_normal(5)
    params = {"w": p0.astype(np.float32)}
    opt = tr.Adam(params, 1e-2, 0.9, 0.999, 1e-8)
    for g in gs:
        opt.step(params, {"w": g})
    want = [_ref_adam(float(np.float32(p0[i])), gs[:, i], 1e-2, 0.9, 0.999, 1e-8) for i in range(5)]
    assert np.allclose(params["w"], want, atol=1e-5)


def test_adam_complex_treats_parts_independently(rng):
    gs = rng.standard_normal((5, 4)) + 1j * rng.standard_normal((5, 4))
    params = {"z": np.zeros(4, np.complex64)}
    opt = tr.Adam(params, 1e-2, 0.99, 0.999, 1e-8)
    for g in gs:
        opt.step(params, {"z": g})
    re = [_ref_adam(0.0, gs[:, i].real, 1e-2, 0.99, 0.999, 1e-8) for i in range(4)]
    im = [_ref_adam(0.0, gs[:, i].imag, 1e-2, 0.99, 0.999, 1e-8) for i in range(4)]
    assert np.allclose(params["z"].real, re, atol=1e-5)
    assert np.allclose(params["z"].imag, im, atol=1e-5)


def test_adam_zero_lr_freezes():
    params = {"w": np.ones(3, np.float32)}
    opt = tr.Adam(params, 0.0)
    opt.step(params, {"w": np.ones(3)})
    assert np.array_equal(params["w"], np.ones(3)) and opt.t == 0


def test_clipping_bounds_global_norm(rng):
    for _ in range(50):
        g1 = {"a": rng.standard_normal(7) * 10 ** rng.uniform(-3, 3)}
        g2 = {"b": (rng.standard_normal(3) + 1j * rng.standard_normal(3)) * 10 ** rng.uniform(-3, 3)}
        n = tr.global_norm(g1, g2)
        brute = math.sqrt(np.sum(g1["a"] ** 2) + np.sum(np.abs(g2["b"]) ** 2))
        assert abs(n - brute) <= 1e-12 * brute
        s = tr.clip_scale(n, 10.0)
        assert n * s <= 10.0 * (1 + 1e-12)
        if n <= 10.0:
            assert s == 1.0


def test_schedule_halves_and_stops():
    s = tr.Schedule(lr_patience=2, stop_patience=5)
    assert s.update(0, (1.0,))
    scales = []
    for e in range(1, 6):
        s.update(e, (0.5,))
        scales.append(s.lr_scale)
    assert scales == [1.0, 0.5, 0.5, 0.25, 0.25]
    assert s.should_stop and s.best_epoch == 0


def test_schedule_prefers_f1_then_loss():
    s = tr.Schedule(10, 10)
    s.update(0, (0.8, -2.0))
    assert not s.update(1, (0.7, -1.0))
    assert s.update(2, (0.8, -1.5))


def test_windows_tile_the_scene():
    rng = np.random.default_rng(0)
    for n in (1, 7, 50, 333):
        w = tr._windows(rng, n, (8, 32))
        assert w[0][0] == 0 and sum(L for _, L in w) == n
        assert all(t0 + L == t1 for (t0, L), (t1, _) in zip(w, w[1:]))
        assert all(8 <= L <= 32 for _, L in w[:-1])


def test_zero_update_residual_is_mixture(small_folds):
    b = tr.SceneBatch.from_scenes(small_folds["test"][:2], 32, 2)
    zero = {k: np.zeros_like(v) for k, v in metaopt.init_params(metaopt.OptimizerConfig(hidden=4), 2,
                                                                   np.random.default_rng(0)).items()}
    e = tr.meta_residual(zero, b, 32)
    assert np.allclose(e, tr.zero_update_residual(b), atol=1e-12)


# -- classifier training ------------------------------------------------------

@pytest.fixture(scope="module")
def kws_folds():
    return toy_scenes(seed=3, counts={"train": 48, "val": 16, "test": 0})


def test_train_kws_separates_two_classes(kws_folds):
    cfg = tr.TrainConfig.for_mode("kws-pretrain", batch_size=16, lr=3e-3, max_epochs=8)
    res = tr.train_kws(cfg, kws_folds["train"], kws_folds["val"], TINY_KWS)
    assert res.best.meta["val_score"] >= 0.95
    assert res.best.kind == "kws" and res.last.kind == "kws-train-state"


def test_train_kws_shuffled_labels_stay_near_chance(kws_folds):
    y = np.random.default_rng(5).permutation([s.c for s in kws_folds["train"]])
    cfg = tr.TrainConfig.for_mode("kws-pretrain", batch_size=16, lr=3e-3, max_epochs=8)
    res = tr.train_kws(cfg, kws_folds["train"], kws_folds["val"], TINY_KWS, labels=y)
    params = tr.kws_from_checkpoint(res.best)
    mels = tr.mel_features(s.s for s in kws_folds["val"])
    # the best-on-validation pick is optimistic, so only rule out real learning
    assert tr.macro_f1(params, mels, [s.c for s in kws_folds["val"]]) < 0.9


def test_train_kws_overfits_single_example(kws_folds):
    one = kws_folds["train"][:1]
    cfg = tr.TrainConfig.for_mode("kws-pretrain", batch_size=1, lr=1e-2, max_epochs=40)
    res = tr.train_kws(cfg, one, [], TINY_KWS)
    losses = [r["loss"] for r in res.history if r["split"] == "train"]
    assert losses[-1] < 0.05 * losses[0]


def test_train_kws_resume_is_exact(kws_folds):
    cfg = tr.TrainConfig.for_mode("kws-pretrain", batch_size=16, max_epochs=2)
    full = tr.train_kws(cfg, kws_folds["train"], kws_folds["val"], TINY_KWS)
    half = tr.train_kws(tr.TrainConfig.for_mode("kws-pretrain", batch_size=16, max_epochs=1),
                        kws_folds["train"], kws_folds["val"], TINY_KWS)
    rest = tr.train_kws(cfg, kws_folds["train"], kws_folds["val"], TINY_KWS, resume=half.last)
    assert rest.last.to_bytes() == full.last.to_bytes()


# -- meta-training ------------------------------------------------------------

def test_train_optimizer_writes_both_checkpoints(small_folds):
    cfg = tr.TrainConfig.for_mode("meta-frozen", max_epochs=1, **TINY)
    res = tr.train_optimizer(cfg, small_folds["train"][:8], small_folds["val"][:4])
    assert res.best.kind == "meta-optimizer" and res.last.kind == "meta-train-state"
    assert [r["epoch"] for r in res.history if r["split"] == "val"] == [-1, 0]
    phi = tr.phi_from_checkpoint(res.best)
    assert set(phi) == set(metaopt.init_params(metaopt.OptimizerConfig(hidden=4), 2, np.random.default_rng(0)))
    rt = Checkpoint.from_bytes(res.best.to_bytes())
    assert rt.digest() == res.best.digest()


def test_train_optimizer_resume_is_exact(small_folds):
    tr_s, va_s = small_folds["train"][:8], small_folds["val"][:4]
    full = tr.train_optimizer(tr.TrainConfig.for_mode("meta-frozen", max_epochs=2, **TINY), tr_s, va_s)
    half = tr.train_optimizer(tr.TrainConfig.for_mode("meta-frozen", max_epochs=1, **TINY), tr_s, va_s)
    rest = tr.train_optimizer(tr.TrainConfig.for_mode("meta-frozen", max_epochs=2, **TINY), tr_s, va_s,
                              resume=half.last)
    assert rest.last.to_bytes() == full.last.to_bytes()
    assert rest.best.to_bytes() == full.best.to_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_optimizer_aborts_on_divergence(small_folds, tmp_path):
    cfg = tr.TrainConfig.for_mode("meta-frozen", max_epochs=1, lr=1e-2, **TINY)
    init = metaopt.init_params(metaopt.OptimizerConfig(hidden=4), 2, np.random.default_rng(0))
    init["block_gain"] = np.full_like(init["block_gain"], np.inf)
    with pytest.raises(NumericError) as err:
        tr.train_optimizer(cfg, small_folds["train"][:4], [], init_phi=init, out_dir=tmp_path)
    assert "divergence.ckpt" in str(err.value)
    assert load_checkpoint(tmp_path / "divergence.ckpt").kind == "divergence"


def test_positive_weight_needs_classifier(small_folds):
    cfg = tr.TrainConfig.for_mode("meta-frozen", lam=0.5, max_epochs=1, **TINY)
    with pytest.raises(UsageError):
        tr.train_optimizer(cfg, small_folds["train"][:4], [])


def test_label_outside_classifier_rejected(small_folds):
    kp = kws_mod.init_params(TINY_KWS, np.random.default_rng(0))
    bad = [replace(s, c=2) for s in small_folds["train"][:4]]
    cfg = tr.TrainConfig.for_mode("meta-frozen", lam=0.5, max_epochs=1, **TINY)
    with pytest.raises(UsageError):
        tr.train_optimizer(cfg, bad, [], kws_params=kp)


def test_joint_with_frozen_optimizer_only_moves_classifier(small_folds):
    init_phi = tr._cast(metaopt.init_params(metaopt.OptimizerConfig(hidden=4), 2, np.random.default_rng(0)))
    kp = kws_mod.init_params(TINY_KWS, np.random.default_rng(1))
    cfg = tr.TrainConfig.for_mode("joint", lr=0.0, kws_lr=1e-2, max_epochs=1, **TINY)
    phi_ck, kws_ck, res = tr.train_joint(cfg, small_folds["train"][:8], small_folds["val"][:4], init_phi, kp)
    phi = tr.phi_from_checkpoint(phi_ck)
    last_phi = res.last.subset("phi/")
    for k in init_phi:
        assert np.array_equal(last_phi[k], init_phi[k])
        assert np.array_equal(phi[k], init_phi[k])
    last_kws = res.last.subset("kws/")
    moved = [k for k in last_kws if kws_mod.is_trainable(k)
             and not np.allclose(last_kws[k], kp[k].astype(np.float32))]
    assert moved
    assert kws_ck.kind == "kws"


def test_classification_gradient_reaches_optimizer(small_folds):
    # lam = 1: only the classifier term drives phi, through the final window
    kp = kws_mod.init_params(TINY_KWS, np.random.default_rng(1))
    cfg = tr.TrainConfig.for_mode("meta-frozen", lam=1.0, max_epochs=1, lr=1e-2, **TINY)
    init = tr._cast(metaopt.init_params(metaopt.OptimizerConfig(hidden=4), 2, np.random.default_rng(0)))
    res = tr.train_optimizer(cfg, small_folds["train"][:8], [], kws_params=kp, init_phi=init)
    last = res.last.subset("phi/")
    assert any(not np.array_equal(last[k], init[k]) for k in init)


def test_noisy_signal_is_seeded_and_hits_the_drawn_snr(small_folds):
    scene = small_folds["train"][0]
    clean = tr.clean_signal(scene)
    a = tr.noisy_signal((10.0, 10.0), seed=4)(scene)
    assert np.array_equal(a, tr.noisy_signal((10.0, 10.0), seed=4)(scene))
    assert not np.array_equal(a, tr.noisy_signal((10.0, 10.0), seed=5)(scene))
    noise = a - clean
    active = np.sum(clean ** 2) / np.count_nonzero(clean)
    snr = 10 * np.log10(active / np.mean(noise ** 2))
    assert abs(snr - 10.0) < 0.5
