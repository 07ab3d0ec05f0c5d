import numpy as np
import pytest

from lcmkit.distill import TrainConfig
from lcmkit.net import Denoiser
from lcmkit.schedule import forward_sample_batch, make_vp_schedule
from lcmkit.teacher import (
    MixtureSpec,
    TeacherModel,
    cfg_eps,
    gmm_score,
    make_ring_mixture,
    standard_normal_mixture,
    teacher_eps,
    train_teacher,
)


@pytest.fixture(scope="module")
def sched():
    return make_vp_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="module")
def two_mix():
    return MixtureSpec(
        weights=np.array([0.3, 0.7]),
        means=np.array([[-1.0, 0.5], [1.2, -0.8]]),
        variances=np.array([0.2, 0.05]),
        labels=np.array([0, 1]),
    )


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureSpec(np.array([0.5, 0.4]), np.zeros((2, 2)), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        MixtureSpec(np.array([0.5, 0.5]), np.zeros((2, 2)), np.array([1.0, -1.0]),
                    np.zeros(2))


def test_standard_normal_score_is_negative_z(sched):
    mix = standard_normal_mixture(3)
    rng = np.random.default_rng(0)
    z = rng.standard_normal(3)
    for n in (1, 400, 1000):
        np.testing.assert_allclose(gmm_score(mix, z, n, sched), -z, atol=1e-12)


def test_single_component_closed_form(sched):
    mix = MixtureSpec(np.array([1.0]), np.array([[0.5, -1.0]]), np.array([0.3]),
                      np.array([0]))
    z = np.array([0.2, 0.9])
    n = 300
    alpha, sigma = sched.alpha_sigma(n)
    expected = (alpha * mix.means[0] - z) / (alpha**2 * 0.3 + sigma**2)
    np.testing.assert_allclose(gmm_score(mix, z, n, sched), expected, atol=1e-12)


def test_score_against_numerical_log_density(sched, two_mix):
    def log_q(z, n):
        alpha, sigma = sched.alpha_sigma(n)
        v = alpha**2 * two_mix.variances + sigma**2
        ll = np.log(two_mix.weights) - np.log(2 * np.pi * v) - np.sum(
            (alpha * two_mix.means - z) ** 2, axis=1
        ) / (2 * v)
        top = ll.max()
        return top + np.log(np.sum(np.exp(ll - top)))

    rng = np.random.default_rng(1)
    h = 1e-6
    for n in (5, 250, 900):
        z = rng.standard_normal(2)
        fd = np.array([
            (log_q(z + h * e, n) - log_q(z - h * e, n)) / (2 * h) for e in np.eye(2)
        ])
        np.testing.assert_allclose(gmm_score(two_mix, z, n, sched), fd, atol=1e-6)


def test_conditional_score_restricts_components(sched, two_mix):
    z = np.array([0.1, 0.1])
    s1 = gmm_score(two_mix, z, 200, sched, c=1)
    single = MixtureSpec(np.array([1.0]), two_mix.means[1:], two_mix.variances[1:],
                         np.array([1]))
    np.testing.assert_allclose(s1, gmm_score(single, z, 200, sched), atol=1e-12)
    with pytest.raises(ValueError):
        gmm_score(two_mix, z, 200, sched, c=7)


def test_score_index_validation(sched, two_mix):
    with pytest.raises(IndexError):
        gmm_score(two_mix, np.zeros(2), 0, sched)


def test_teacher_eps_standard_normal(sched):
    teacher = TeacherModel(kind="analytic", schedule=sched,
                           mixture=standard_normal_mixture(2))
    z = np.array([1.1, -0.4])
    for n in (1, 600):
        _, sigma = sched.alpha_sigma(n)
        np.testing.assert_allclose(teacher_eps(teacher, z, n), sigma * z, atol=1e-12)


def test_teacher_eps_zero_at_scaled_mean(sched):
    mix = MixtureSpec(np.array([1.0]), np.array([[2.0, -1.0]]), np.array([0.4]),
                      np.array([0]))
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=mix)
    n = 350
    alpha, _ = sched.alpha_sigma(n)
    out = teacher_eps(teacher, alpha * mix.means[0], n)
    np.testing.assert_allclose(out, np.zeros(2), atol=1e-12)


def test_teacher_eps_matches_score(sched, two_mix):
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=two_mix)
    rng = np.random.default_rng(4)
    z = rng.standard_normal((8, 2))
    n = 420
    _, sigma = sched.alpha_sigma(n)
    np.testing.assert_allclose(
        teacher_eps(teacher, z, n), -sigma * gmm_score(two_mix, z, n, sched),
        atol=1e-12,
    )


def test_teacher_call_counter(sched, two_mix):
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=two_mix)
    assert teacher.calls == 0
    teacher_eps(teacher, np.zeros(2), 10)
    teacher_eps(teacher, np.zeros(2), 10, c=1)
    assert teacher.calls == 2


def test_cfg_eps_affine_in_omega(sched, two_mix):
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=two_mix)
    rng = np.random.default_rng(5)
    z = rng.standard_normal(2)
    n = 500
    e_c = teacher_eps(teacher, z, n, c=0)
    e_u = teacher_eps(teacher, z, n)
    np.testing.assert_allclose(cfg_eps(teacher, z, 0.0, 0, n), e_c, atol=1e-14)
    for omega in (0.5, 8.0, 13.7):
        got = cfg_eps(teacher, z, omega, 0, n)
        np.testing.assert_allclose(got, e_u + (1 + omega) * (e_c - e_u), atol=1e-12)
    with pytest.raises(ValueError):
        cfg_eps(teacher, z, 8.0, None, n)


def test_cfg_eps_collapses_when_conditional_equals_unconditional(sched):
    # single-label mixture: conditioning on that label changes nothing
    mix = make_ring_mixture(4, labeled=False)
    mix = MixtureSpec(mix.weights, mix.means, mix.variances, np.zeros(4, dtype=int))
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=mix)
    z = np.array([0.3, -0.2])
    e_c = teacher_eps(teacher, z, 200, c=0)
    e_u = teacher_eps(teacher, z, 200)
    np.testing.assert_allclose(e_c, e_u, atol=1e-14)
    np.testing.assert_allclose(cfg_eps(teacher, z, 9.0, 0, 200), e_c, atol=1e-12)


def test_paper_scale_cfg_value(sched, two_mix):
    # omega = 8, the canonical guidance scale: value from the affine formula
    teacher = TeacherModel(kind="analytic", schedule=sched, mixture=two_mix)
    z = np.array([0.25, -0.6])
    n = 700
    got = cfg_eps(teacher, z, 8.0, 1, n)
    expected = 9.0 * teacher_eps(teacher, z, n, c=1) - 8.0 * teacher_eps(teacher, z, n)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_ring_mixture_data_std():
    mix = make_ring_mixture(8, radius=1.0, mode_std=0.1)
    # per-coordinate second moment r^2/2 + s^2
    assert mix.data_std() == pytest.approx(np.sqrt(0.5 + 0.01), rel=1e-12)


class TestTrainTeacher:
    def test_zero_iterations_no_change(self, sched):
        net = Denoiser(2, width=16, embed_dim=8, seed=0)
        before = net.theta.copy()
        cfg = TrainConfig(lr=1e-3, iters=0, batch=8, seed=0)
        train_teacher(net, np.zeros((16, 2)), sched, cfg)
        np.testing.assert_array_equal(net.theta, before)

    def test_requires_epsilon_kind(self, sched):
        net = Denoiser(2, width=16, embed_dim=8, prediction_kind="x", seed=0)
        with pytest.raises(ValueError):
            train_teacher(net, np.zeros((4, 2)), sched, TrainConfig(iters=1))

    def test_rejects_empty_data(self, sched):
        net = Denoiser(2, width=16, embed_dim=8, seed=0)
        with pytest.raises(ValueError):
            train_teacher(net, np.zeros((0, 2)), sched, TrainConfig(iters=1))

    def test_loss_improves_and_matches_analytic_target(self, sched):
        # standard-normal data: the ideal predictor is sigma(t) * z
        rng = np.random.default_rng(0)
        data = rng.standard_normal((4096, 2))
        net = Denoiser(2, width=64, embed_dim=16, seed=1)

        def fresh_loss(seed):
            r = np.random.default_rng(seed)
            idx = r.integers(0, len(data), 256)
            n = r.integers(1, sched.n_steps, 256, endpoint=True)
            eps = r.standard_normal((256, 2))
            x_t = forward_sample_batch(data[idx], n, eps, sched)
            pred = net.forward(x_t, n / sched.n_steps)
            return float(np.mean(np.sum((pred - eps) ** 2, axis=1)))

        loss_init = fresh_loss(123)
        cfg = TrainConfig(lr=2e-3, iters=1500, batch=128, optimizer="adam", seed=2)
        train_teacher(net, data, sched, cfg, rng=np.random.default_rng(3))
        loss_after = fresh_loss(123)
        assert loss_after < loss_init

        r = np.random.default_rng(9)
        n = r.integers(1, sched.n_steps, 512, endpoint=True)
        x0 = r.standard_normal((512, 2))
        eps = r.standard_normal((512, 2))
        z = forward_sample_batch(x0, n, eps, sched)
        pred = net.forward(z, n / sched.n_steps)
        sigma = np.sqrt(1 - sched.alpha_bar[n])
        target = sigma[:, None] * z
        rel = np.linalg.norm(pred - target) / np.linalg.norm(target)
        assert rel < 0.05
