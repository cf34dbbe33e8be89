import math

import numpy as np
import pytest

from ebmlab import autodiff as ad
from ebmlab import models as mz
from ebmlab import objectives as obj
from ebmlab import rng as rngmod


def quadratic_energy(x):
    # E(x) = 0.5 |x|^2 per row
    axis = 1 if x.value.ndim == 2 else None
    return ad.mul(0.5, ad.reduce_sum(ad.mul(x, x), axis=axis))


class TestSsmVr:
    def test_standard_normal_closed_form(self):
        # s = -x so the loss is -D + 0.5|x|^2 regardless of v in {-1,1}^D
        rng = np.random.default_rng(0)
        x = rng.normal(size=(16, 4))
        v = rngmod.rademacher(rng, x.shape)
        loss = obj.ssm_vr_loss(quadratic_energy, x, v)
        expected = -4.0 + 0.5 * (x**2).sum(axis=1).mean()
        assert loss.value == pytest.approx(expected, abs=1e-12)

    def test_scalar_quadratic_point(self):
        # E = x^2 at x = 1/sqrt(2): -2 + 0.5*(2x)^2 = -1
        def e(x):
            return ad.mul(x, x)

        x = np.array([[1.0 / math.sqrt(2.0)]])
        loss = obj.ssm_vr_loss(e, x, np.array([[1.0]]))
        assert loss.value == pytest.approx(-1.0, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(obj.ObjectiveError):
            obj.ssm_vr_loss(quadratic_energy, np.zeros((3, 2)), np.zeros((2, 2)))

    def test_against_finite_difference_oracle(self):
        # independent evaluation: finite differences of the score field
        spec = mz.ModelSpec(input_dim=3, hidden=[6, 6], activation="softplus", head="energy")
        pset = mz.init_params(spec, 11)

        def energy_np(x):
            return mz.mlp_energy(spec, pset, x).value

        def score_np(x):
            h = 1e-5
            g = np.zeros_like(x)
            for j in range(x.shape[1]):
                e = np.zeros_like(x)
                e[:, j] = h
                g[:, j] = (energy_np(x + e) - energy_np(x - e)) / (2 * h)
            return -g

        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 3))
        v = rngmod.rademacher(rng, x.shape)
        h = 1e-5
        jvp = (score_np(x + h * v) - score_np(x - h * v)) / (2 * h)
        expected = ((jvp * v).sum(axis=1) + 0.5 * (score_np(x) ** 2).sum(axis=1)).mean()

        loss = obj.ssm_vr_loss(obj.make_energy_fn(spec, pset), x, v)
        assert loss.value == pytest.approx(expected, abs=1e-5)

    def test_rademacher_expectation_matches_trace(self):
        # E_v[v^T H v] = tr(H) for Rademacher v; check the Monte Carlo mean
        spec = mz.ModelSpec(input_dim=2, hidden=[4], activation="softplus", head="energy")
        pset = mz.init_params(spec, 3)
        energy_fn = obj.make_energy_fn(spec, pset)
        x = np.array([[0.4, -0.7]])

        # exact trace of the score Jacobian via basis-vector HVPs
        exact = 0.0
        for j in range(2):
            e = np.zeros((1, 2))
            e[0, j] = 1.0
            exact += -ad.input_hvp_form(energy_fn, ad.constant(x), ad.constant(e)).value[0]

        rng = np.random.default_rng(71)
        n = 100_000
        v = rngmod.rademacher(rng, (n, 2))
        xx = np.repeat(x, n, axis=0)
        hv = ad.input_hvp_form(energy_fn, ad.constant(xx), ad.constant(v)).value
        empirical = (-(-hv)).mean()  # hvp form already carries the minus sign
        assert abs(empirical - (-exact)) / max(abs(exact), 1e-12) < 0.02

    def test_parameter_gradient_matches_fd(self):
        spec = mz.ModelSpec(input_dim=2, hidden=[2], activation="softplus", head="energy")
        pset = mz.init_params(spec, 8)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 2))
        v = rngmod.rademacher(rng, x.shape)

        leaves = mz.param_nodes(pset)
        loss = obj.ssm_vr_loss(obj.make_energy_fn(spec, leaves), x, v)
        grads = ad.grad(loss, list(leaves.values()))
        flat = np.concatenate([g.value.ravel() for g in grads])

        def loss_at(values):
            q = pset.copy()
            q.values[:] = values
            return obj.ssm_vr_loss(obj.make_energy_fn(spec, q), x, v).value

        h = 1e-5
        for i in range(pset.values.size):
            vp = pset.values.copy()
            vp[i] += h
            vm = pset.values.copy()
            vm[i] -= h
            fd = (loss_at(vp) - loss_at(vm)) / (2 * h)
            assert flat[i] == pytest.approx(fd, abs=1e-4)


class TestCdLoss:
    def test_hand_case(self):
        # E = sum(x): mean data energy 2, mean sample energy 5
        def e(x):
            return ad.reduce_sum(x, axis=1)

        loss = obj.cd_loss(e, np.array([[1.0, 1.0], [2.0, 1.0]]), np.array([[2.0, 3.0]]))
        assert loss.value == pytest.approx(2.5 - 5.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(obj.ObjectiveError):
            obj.cd_loss(quadratic_energy, np.zeros((0, 2)), np.zeros((3, 2)))

    def test_feature_mismatch_rejected(self):
        with pytest.raises(obj.ObjectiveError):
            obj.cd_loss(quadratic_energy, np.zeros((2, 2)), np.zeros((2, 3)))

    def test_translation_invariance(self):
        spec = mz.ModelSpec(input_dim=2, hidden=[5], head="energy")
        pset = mz.init_params(spec, 2)
        energy_fn = obj.make_energy_fn(spec, pset)
        rng = np.random.default_rng(4)
        xd = rng.normal(size=(6, 2))
        xs = rng.normal(size=(6, 2))
        c = np.array([3.0, -1.0])

        def shifted(x):
            return energy_fn(ad.add(x, ad.constant(c)))

        a = obj.cd_loss(energy_fn, xd + c, xs + c)
        b = obj.cd_loss(shifted, xd, xs)
        assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_precision_gradient_identity(self):
        # E(x) = theta * x^2: dL/dtheta = mean(xd^2) - mean(xs^2)
        theta = ad.leaf(np.asarray(0.7))

        def e(x):
            return ad.mul(theta, ad.reduce_sum(ad.mul(x, x), axis=1))

        rng = np.random.default_rng(6)
        xd = rng.normal(size=(50, 1))
        xs = rng.normal(size=(50, 1)) * 2.0
        loss = obj.cd_loss(e, xd, xs)
        (g,) = ad.grad(loss, [theta])
        assert g.value == pytest.approx((xd**2).mean() - (xs**2).mean(), abs=1e-12)

    def test_exact_sampler_recovers_precision(self):
        # data ~ N(0,1), E = theta*x^2 so the model is N(0, 1/(2*theta));
        # with exact sampling, gradient descent should drive theta to 0.5
        rng = np.random.default_rng(12)
        xd_all = rng.normal(size=(4000, 1))
        theta = 2.0
        lr = 0.05
        for step in range(300):
            t = ad.leaf(np.asarray(theta))

            def e(x, t=t):
                return ad.mul(t, ad.reduce_sum(ad.mul(x, x), axis=1))

            xd = xd_all[rng.integers(0, len(xd_all), size=128)]
            xs = rng.normal(size=(128, 1)) * math.sqrt(1.0 / (2.0 * theta))
            (g,) = ad.grad(obj.cd_loss(e, xd, xs), [t])
            theta = max(theta - lr * float(g.value), 1e-3)
        assert 0.35 < theta < 0.65


class TestCeLoss:
    def test_uniform_logits(self):
        logits = ad.constant(np.zeros((4, 3)))
        assert obj.ce_loss(logits, np.array([0, 1, 2, 0])).value == pytest.approx(math.log(3.0))

    def test_confident_correct(self):
        logits = ad.constant(np.array([[10.0, 0.0]]))
        assert obj.ce_loss(logits, np.array([0])).value == pytest.approx(
            math.log(1.0 + math.exp(-10.0)), rel=1e-12
        )

    def test_label_out_of_range(self):
        with pytest.raises(obj.ObjectiveError):
            obj.ce_loss(ad.constant(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(1)
        l = rng.normal(size=(5, 4))
        labels = np.array([0, 1, 2, 3, 1])
        logits = ad.leaf(l)
        (g,) = ad.grad(obj.ce_loss(logits, labels), [logits])
        p = np.exp(l - l.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(4)[labels]
        assert np.allclose(g.value, (p - onehot) / 5.0, atol=1e-12)


class TestFlowNll:
    def test_identity_flow_is_gaussian_nll(self):
        spec = mz.ModelSpec(input_dim=2, head="flow", n_flow_layers=2)
        pset = mz.init_params(spec, 0)
        x = np.random.default_rng(0).normal(size=(8, 2))
        expected = (0.5 * (x**2).sum(axis=1) + math.log(2 * math.pi)).mean()
        assert obj.flow_nll(spec, pset, x).value == pytest.approx(expected, abs=1e-9)

    def test_gradient_matches_fd(self):
        spec = mz.ModelSpec(input_dim=1, head="flow", n_flow_layers=1)
        pset = mz.init_params(spec, 7)
        x = np.array([[0.3], [-1.2], [2.0]])
        leaves = mz.param_nodes(pset)
        grads = ad.grad(obj.flow_nll(spec, leaves, x), list(leaves.values()))
        flat = np.concatenate([g.value.ravel() for g in grads])
        h = 1e-6
        for i in range(pset.values.size):
            vp = pset.copy()
            vp.values[i] += h
            vm = pset.copy()
            vm.values[i] -= h
            fd = (obj.flow_nll(spec, vp, x).value - obj.flow_nll(spec, vm, x).value) / (2 * h)
            assert flat[i] == pytest.approx(fd, abs=1e-4)


class TestJemLoss:
    def test_arithmetic(self):
        base = ad.constant(np.asarray(5.0))
        logits = ad.constant(np.zeros((1, 3)))
        loss = obj.jem_loss(base, logits, np.array([0]), gamma=2.0)
        assert loss.value == pytest.approx(5.0 + 2.0 * math.log(3.0), abs=1e-9)

    def test_gamma_zero_returns_base_node(self):
        base = ad.constant(np.asarray(1.0))
        assert obj.jem_loss(base, ad.constant(np.zeros((1, 2))), np.array([0]), 0.0) is base

    def test_negative_gamma_rejected(self):
        with pytest.raises(obj.ObjectiveError):
            obj.jem_loss(ad.constant(np.asarray(0.0)), ad.constant(np.zeros((1, 2))), [0], -1.0)

    def test_affine_in_gamma(self):
        rng = np.random.default_rng(2)
        base = ad.constant(np.asarray(rng.normal()))
        logits = ad.constant(rng.normal(size=(4, 3)))
        labels = np.array([0, 1, 2, 1])
        v0 = obj.jem_loss(base, logits, labels, 0.0).value
        v1 = obj.jem_loss(base, logits, labels, 1.0).value
        v2 = obj.jem_loss(base, logits, labels, 2.0).value
        assert v2 - v0 == pytest.approx(2.0 * (v1 - v0), abs=1e-12)

    def test_logits_head_energy_is_neg_logsumexp(self):
        spec = mz.ModelSpec(input_dim=2, hidden=[4], head="logits", n_classes=3)
        pset = mz.init_params(spec, 5)
        x = np.random.default_rng(3).normal(size=(4, 2))
        e = obj.make_energy_fn(spec, pset)(ad.constant(x)).value
        logits = mz.mlp_logits(spec, pset, x).value
        m = logits.max(axis=1)
        assert np.allclose(e, -(m + np.log(np.exp(logits - m[:, None]).sum(axis=1))), atol=1e-12)


def linear_gen_setup(d=2, latent=2, noise_std=0.1, k=50, seed=0, **cfg_kw):
    cfg = obj.VeraConfig(
        latent_dim=latent, gen_noise_std=noise_std, n_posterior_samples=k, **cfg_kw
    )
    gen_spec = mz.ModelSpec(input_dim=latent, hidden=[], head="vector", n_outputs=d)
    gen_params = mz.init_params(gen_spec, seed)
    spec = mz.ModelSpec(input_dim=d, hidden=[8], head="energy")
    params = mz.init_params(spec, seed + 1)
    return spec, params, gen_spec, gen_params, cfg


class TestVera:
    def test_eta_clamped_to_range(self):
        spec, params, gen_spec, gen_params, cfg = linear_gen_setup()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 2))
        step = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg, eta=0.5, rng=rng)
        assert step.eta == pytest.approx(cfg.eta_max)
        rng = np.random.default_rng(0)
        step = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg, eta=0.001, rng=rng)
        assert step.eta >= cfg.eta_min

    def test_ebm_loss_matches_cd_with_generator_samples(self):
        spec, params, gen_spec, gen_params, cfg = linear_gen_setup()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(16, 2))
        step = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg, eta=0.1, rng=rng)
        ref = obj.cd_loss(obj.make_energy_fn(spec, params), x, step.x_gen)
        assert step.ebm_loss.value == pytest.approx(ref.value, abs=1e-12)
        ga = ad.grad(step.ebm_loss, list(step.ebm_leaves.values()))
        leaves = mz.param_nodes(params)
        gb = ad.grad(obj.cd_loss(obj.make_energy_fn(spec, leaves), x, step.x_gen),
                     list(leaves.values()))
        for a, b in zip(ga, gb):
            assert np.allclose(a.value, b.value, atol=1e-12)

    def test_gamma_without_labels_rejected(self):
        spec = mz.ModelSpec(input_dim=2, hidden=[4], head="logits", n_classes=2)
        params = mz.init_params(spec, 0)
        _, _, gen_spec, gen_params, cfg = linear_gen_setup()
        with pytest.raises(obj.ObjectiveError):
            obj.vera_step(spec, params, gen_spec, gen_params, np.zeros((4, 2)), cfg,
                          eta=0.1, rng=np.random.default_rng(0), gamma=1.0)

    def test_score_estimate_against_linear_gaussian(self):
        # g(z) = Az gives x ~ N(0, A A^T + s^2 I); the marginal score is
        # -(A A^T + s^2 I)^{-1} x, so the estimated score should mostly
        # point the same way
        spec, params, gen_spec, gen_params, cfg = linear_gen_setup(
            k=200, noise_std=0.5, eta_max=0.5
        )
        A = np.array([[1.0, 0.3], [-0.2, 0.8]])
        gen_params.get("head.W")[:] = A.T  # row-vector convention: x = z @ A^T + b
        gen_params.get("head.b")[:] = 0.0
        cov = A @ A.T + cfg.gen_noise_std**2 * np.eye(2)
        prec = np.linalg.inv(cov)

        hits = 0
        total = 0
        for trial in range(10):
            rng = np.random.default_rng(100 + trial)
            x = rng.normal(size=(10, 2))
            step = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg, eta=0.5, rng=rng)
            analytic = -(step.x_gen @ prec.T)
            est = step.entropy_grad_wrt_x
            cos = (est * analytic).sum(axis=1) / (
                np.linalg.norm(est, axis=1) * np.linalg.norm(analytic, axis=1) + 1e-12
            )
            hits += (cos > 0).sum()
            total += len(cos)
        assert hits / total >= 0.9

    def test_generator_loss_gradient_finite(self):
        spec, params, gen_spec, gen_params, cfg = linear_gen_setup()
        rng = np.random.default_rng(3)
        x = rng.normal(size=(8, 2))
        step = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg, eta=0.1, rng=rng)
        grads = ad.grad(step.gen_loss, list(step.gen_leaves.values()))
        assert all(np.all(np.isfinite(g.value)) for g in grads)

    def test_deterministic_given_rng(self):
        spec, params, gen_spec, gen_params, cfg = linear_gen_setup()
        x = np.random.default_rng(4).normal(size=(8, 2))
        s1 = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg,
                           eta=0.1, rng=np.random.default_rng(9))
        s2 = obj.vera_step(spec, params, gen_spec, gen_params, x, cfg,
                           eta=0.1, rng=np.random.default_rng(9))
        assert s1.eta == s2.eta
        assert np.array_equal(s1.x_gen, s2.x_gen)
        assert s1.ebm_loss.value == s2.ebm_loss.value


class TestConfigs:
    def test_vera_defaults(self):
        cfg = obj.VeraConfig()
        assert cfg.entropy_weight == 1e-4
        assert (cfg.eta_min, cfg.eta_init, cfg.eta_max) == (0.01, 0.1, 0.3)
        assert cfg.gen_betas == (0.0, 0.9)
        assert (cfg.ebm_lr, cfg.gen_lr) == (3e-4, 6e-4)

    def test_negative_entropy_weight_rejected(self):
        with pytest.raises(obj.ObjectiveError):
            obj.VeraConfig(entropy_weight=-1.0)

    def test_jem_config_validation(self):
        with pytest.raises(obj.ObjectiveError):
            obj.JemConfig(gamma=-0.5)
        with pytest.raises(obj.ObjectiveError):
            obj.JemConfig(base="nope")
