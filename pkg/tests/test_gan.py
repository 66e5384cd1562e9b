import math

import numpy as np
import pytest

from mslab import autodiff as ad
from mslab import gan
from mslab.autodiff import ContractError, Tensor
from mslab.config import TrainConfig
from mslab.datasets import FiniteAtoms
from mslab.transforms import K, rotate_batch

rng = np.random.default_rng(0)


def log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_sigmoid_np(z):
    return -np.logaddexp(0.0, -z)


# --- losses against direct numpy summation ---------------------------------


def test_gan_losses_match_summation():
    r, f = rng.standard_normal(7), rng.standard_normal(7)
    d, g = gan.gan_losses(r, f)
    assert float(d.data) == pytest.approx(-log_sigmoid_np(r).mean() - log_sigmoid_np(-f).mean(), rel=1e-12)
    assert float(g.data) == pytest.approx(-log_sigmoid_np(f).mean(), rel=1e-12)


def test_ss_psi_matches_summation():
    logits = rng.standard_normal((6, K))
    ks = np.array([1, 2, 3, 4, 1, 2])
    expect = -log_softmax_np(logits)[np.arange(6), ks - 1].mean()
    assert float(gan.ss_psi_loss(logits, ks).data) == pytest.approx(expect, rel=1e-12)
    assert float(gan.ss_phi_loss(logits, ks).data) == pytest.approx(expect, rel=1e-12)


def test_ms_psi_matches_summation():
    lr_, lf = rng.standard_normal((5, K + 1)), rng.standard_normal((5, K + 1))
    ks = np.array([4, 3, 2, 1, 1])
    expect = -log_softmax_np(lr_)[np.arange(5), ks - 1].mean() - log_softmax_np(lf)[:, K].mean()
    assert float(gan.ms_psi_loss(lr_, ks, lf).data) == pytest.approx(expect, rel=1e-12)


def test_ms_phi_matches_summation():
    lf = rng.standard_normal((5, K + 1))
    ks = np.array([2, 2, 3, 1, 4])
    lp = log_softmax_np(lf)
    expect = -lp[np.arange(5), ks - 1].mean() + lp[:, K].mean()
    assert float(gan.ms_phi_loss(lf, ks).data) == pytest.approx(expect, rel=1e-12)


def test_ms_matching_matches_summation():
    lf, lr_ = rng.standard_normal((4, K + 1)), rng.standard_normal((4, K + 1))
    ks = np.array([1, 2, 3, 4])
    pf, pr = log_softmax_np(lf), log_softmax_np(lr_)
    gap = (pf[np.arange(4), ks - 1].mean() - pf[:, K].mean()) - (pr[np.arange(4), ks - 1].mean() - pr[:, K].mean())
    out = gan.ms_matching_loss(gan.ms_stats(lf, ks), gan.ms_stats(lr_, ks))
    assert float(out.data) == pytest.approx(abs(gap), rel=1e-12)


def test_loss_contracts():
    with pytest.raises(ContractError):
        gan.ss_psi_loss(np.zeros((3, K)), np.array([0, 1, 2]))
    with pytest.raises(ContractError):
        gan.ss_psi_loss(np.zeros((3, K)), np.array([1, 2]))
    with pytest.raises(ContractError):
        gan.ms_matching_loss(gan.ms_stats(np.zeros((3, K + 1)), np.ones(3, int)),
                             gan.ms_stats(np.zeros((2, K + 1)), np.ones(2, int)))
    with pytest.raises(ContractError):
        gan.gan_losses(np.zeros(0), np.zeros(3))


def test_saturated_logits_stay_finite():
    d, g = gan.gan_losses(np.array([-1e4]), np.array([1e4]))
    assert math.isfinite(float(d.data)) and math.isfinite(float(g.data))
    assert math.isfinite(float(gan.ss_psi_loss(np.array([[1e4, -1e4, 0, 0]]), np.array([2])).data))


# --- networks ---------------------------------------------------------------


def test_heads_share_the_trunk():
    D = gan.build_discriminator(2, 8, 2, K + 1, seed=0)
    out = gan.discriminate(D, rng.standard_normal((3, 2)))
    assert out.rf_logit.shape == (3,)
    assert out.class_logits.shape == (3, K + 1)
    np.testing.assert_allclose(ad.softmax(out.class_logits).data.sum(axis=1), 1.0)
    trunk = [k for k in D if k.startswith("trunk.")]
    assert trunk and all(not k.startswith("trunk.") for k in D if k.startswith(("rf.", "cls.")))
    ad.backward(ad.sum_(out.rf_logit) + ad.sum_(out.class_logits), D)
    assert all(np.any(D[k].grad != 0) for k in trunk if k.endswith("W0"))


def test_plain_discriminator_has_no_classifier():
    D = gan.build_discriminator(2, 4, 1, 0, seed=0)
    with pytest.raises(ContractError):
        gan.discriminate(D, np.zeros((1, 2)), heads="cls")


def test_rotate_tensor_backward_is_inverse_rotation():
    x = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    ks = np.array([1, 2, 3, 4])
    w = rng.standard_normal((4, 2))
    ad.backward(ad.sum_(ad.mul(gan.rotate_tensor(x, ks), w)))
    inv = np.array([1, 4, 3, 2])
    np.testing.assert_allclose(x.grad, rotate_batch(w, inv))


# --- fitting a classifier ---------------------------------------------------


def test_fit_classifier_ms_requires_fake():
    with pytest.raises(ContractError):
        gan.fit_classifier(np.ones((3, 2)), "ms")


def test_fit_classifier_learns_disjoint_rotations():
    real = np.array([[2.0, 1.0], [3.0, 0.5]])
    clf = gan.fit_classifier(real, "ss", steps=600, lr=1e-2, hidden=16)
    probs = clf.probs(rotate_batch(np.repeat(real, 4, axis=0), np.tile(np.arange(1, 5), 2)))
    assert np.all(probs[np.arange(8), np.tile(np.arange(4), 2)] > 0.9)


# --- training ---------------------------------------------------------------


def small_config(**kw):
    base = dict(steps=40, eval_every=20, eval_samples=500, batch_size=16, g_hidden=16, d_hidden=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("mode", ["plain", "ss", "ms"])
def test_train_runs_and_reports(mode):
    run = gan.train(small_config(mode=mode))
    assert [m.step for m in run.metrics] == [20, 40]
    row = run.metrics[-1]
    assert 0 <= row.modes_covered <= 25
    assert (row.ss_component is None) == (mode == "plain")
    assert run.adam_g.step == 40 and run.adam_d.step == 40


def test_direct_objective_and_multiple_d_steps():
    run = gan.train(small_config(mode="ms", g_objective="direct", d_steps_per_g=2))
    assert run.adam_d.step == 80 and run.adam_g.step == 40


def test_same_seed_same_run():
    a = gan.train(small_config(mode="ss"))
    b = gan.train(small_config(mode="ss"))
    assert a.metrics == b.metrics
    for k in a.G:
        np.testing.assert_array_equal(a.G[k].data, b.G[k].data)


def test_resume_continues_identically(tmp_path):
    cfg = small_config(mode="ms", steps=60)
    full = gan.train(cfg)
    gan.train(cfg, out_dir=tmp_path, stop_at=20)
    resumed = gan.train(cfg, resume=tmp_path / "final.ckpt")
    assert resumed.metrics == [m for m in full.metrics if m.step > 20]


def test_divergence_aborts_with_checkpoint(tmp_path):
    cfg = small_config(mode="ss", lr=1e200, steps=50)
    with pytest.raises(gan.TrainingDiverged) as info:
        gan.train(cfg, out_dir=tmp_path)
    assert info.value.checkpoint and (tmp_path / "diverged.ckpt").exists()
    assert info.value.step <= 50


def test_custom_dataset():
    data = FiniteAtoms(np.array([[1.0, 1.0], [2.0, 2.0]]))
    run = gan.train(small_config(mode="ms", steps=20), dataset=data)
    assert run.metrics[-1].step == 20
