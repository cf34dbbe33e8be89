import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmlab import autodiff as ad
from ebmlab import models as mz


def small_energy_spec(**kw):
    defaults = dict(input_dim=3, hidden=[8, 8], head="energy")
    defaults.update(kw)
    return mz.ModelSpec(**defaults)


class TestModelSpec:
    def test_rejects_bad_dims(self):
        with pytest.raises(mz.ModelError):
            mz.ModelSpec(input_dim=0)
        with pytest.raises(mz.ModelError):
            mz.ModelSpec(input_dim=2, hidden=[0])

    def test_logits_head_needs_classes(self):
        with pytest.raises(mz.ModelError):
            mz.ModelSpec(input_dim=2, head="logits")

    def test_bottleneck_factor_range(self):
        with pytest.raises(mz.ModelError):
            mz.ModelSpec(input_dim=2, bottleneck_factor=0.0)
        mz.ModelSpec(input_dim=2, bottleneck_factor=1.0)  # valid no-op

    def test_bottleneck_width_ceil(self):
        spec = mz.ModelSpec(input_dim=2, hidden=[10], bottleneck_factor=0.25)
        shapes = dict(spec.layer_plan())
        assert shapes["layer0.bn_down.W"] == (10, 3)  # ceil(0.25*10)


class TestMlpEnergy:
    def test_zero_params_zero_energy(self):
        spec = small_energy_spec()
        pset = mz.init_params(spec, 0)
        pset.values[:] = 0.0
        for x in (np.zeros(3), np.ones(3), np.array([3.0, -2.0, 0.5])):
            assert mz.mlp_energy(spec, pset, x).value == 0.0

    def test_single_linear_layer(self):
        # w=[1,2], b=0.5: relu is inactive on the head, so E = w.x + b
        spec = mz.ModelSpec(input_dim=2, hidden=[1], head="energy")
        pset = mz.init_params(spec, 0)
        pset.get("layer0.W")[:] = np.array([[1.0], [2.0]])
        pset.get("layer0.b")[:] = 0.5
        pset.get("head.W")[:] = 1.0
        pset.get("head.b")[:] = 0.0
        assert mz.mlp_energy(spec, pset, np.array([1.0, 1.0])).value == pytest.approx(3.5)

    def test_dimension_mismatch(self):
        spec = small_energy_spec()
        pset = mz.init_params(spec, 0)
        with pytest.raises(mz.ModelError):
            mz.mlp_energy(spec, pset, np.zeros(4))

    def test_against_straight_line_evaluator(self):
        # independent plain-numpy reimplementation
        spec = small_energy_spec(hidden=[8, 5, 8])
        pset = mz.init_params(spec, 42)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 3))

        h = x
        for i in range(3):
            h = np.maximum(h @ pset.get(f"layer{i}.W") + pset.get(f"layer{i}.b"), 0.0)
        expected = (h @ pset.get("head.W") + pset.get("head.b")).ravel()
        got = mz.mlp_energy(spec, pset, x).value
        assert np.abs(got - expected).max() < 1e-12

    def test_bottleneck_factor_one_is_plain_net(self):
        plain = small_energy_spec()
        with_bn = small_energy_spec(bottleneck_factor=1.0)
        p1 = mz.init_params(plain, 9)
        p2 = mz.init_params(with_bn, 9)
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(mz.mlp_energy(plain, p1, x).value,
                              mz.mlp_energy(with_bn, p2, x).value)

    def test_bottleneck_changes_plan(self):
        spec = small_energy_spec(bottleneck_factor=0.5)
        names = [n for n, _ in spec.layer_plan()]
        assert "layer0.bn_down.W" in names and "layer1.bn_up.b" in names


class TestJemHead:
    def test_logsumexp_uniform(self):
        assert mz.jem_logdensity(np.zeros(4)) == pytest.approx(math.log(4.0))

    def test_logsumexp_dominant(self):
        assert mz.jem_logdensity(np.array([10.0, 0.0])) == pytest.approx(
            math.log(math.exp(10) + 1), rel=1e-12
        )

    def test_single_logit_identity(self):
        assert mz.jem_logdensity(np.array([2.75])) == pytest.approx(2.75)

    def test_empty_rejected(self):
        with pytest.raises(mz.ModelError):
            mz.jem_logdensity(np.zeros(0))

    def test_shift_property(self):
        rng = np.random.default_rng(2)
        l = rng.normal(size=6)
        c = 3.7
        assert mz.jem_logdensity(l + c) - mz.jem_logdensity(l) == pytest.approx(c)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
           st.floats(-100, 100))
    def test_property_shift_equivariance(self, logits, c):
        l = np.array(logits)
        assert mz.jem_logdensity(l + c) == pytest.approx(mz.jem_logdensity(l) + c,
                                                         rel=1e-9, abs=1e-9)

    def test_no_overflow(self):
        assert np.isfinite(mz.jem_logdensity(np.array([1e4, 1e4 - 3.0])))

    def test_class_probs_uniform(self):
        assert np.allclose(mz.jem_class_probs(np.zeros(4)), 0.25)

    def test_class_probs_closed_form(self):
        p = mz.jem_class_probs(np.log(np.array([1.0, 3.0])))
        assert np.allclose(p, [0.25, 0.75])

    def test_class_probs_shift_invariance(self):
        rng = np.random.default_rng(3)
        l = rng.normal(size=5)
        assert np.allclose(mz.jem_class_probs(l), mz.jem_class_probs(l + 11.0))
        assert abs(mz.jem_class_probs(l).sum() - 1.0) < 1e-12


class TestRadialFlow:
    def _layer(self, rng, d):
        z0 = rng.normal(size=d)
        return z0, rng.normal(), rng.normal()

    def test_beta_zero_identity(self):
        # default-constrained beta = -alpha + softplus(beta_hat); pick
        # beta_hat so softplus(beta_hat) == alpha, i.e. beta == 0
        d = 3
        z0 = np.zeros(d)
        alpha_hat = 0.3
        y, logdet = mz.radial_forward(z0, alpha_hat, alpha_hat, np.array([1.0, -2.0, 0.5]))
        assert np.allclose(y.value, [1.0, -2.0, 0.5])
        assert logdet.value == pytest.approx(0.0, abs=1e-12)

    def test_center_point(self):
        rng = np.random.default_rng(4)
        d = 4
        z0, ah, bh = self._layer(rng, d)
        alpha, beta = (n.value for n in mz.radial_constrained(ah, bh))
        y, logdet = mz.radial_forward(z0, ah, bh, z0.copy())
        assert np.allclose(y.value, z0)
        expected = (d - 1) * math.log(1 + beta / alpha) + math.log(1 + beta / alpha)
        assert logdet.value == pytest.approx(expected, rel=1e-9)

    def test_logdet_matches_numeric_jacobian(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            z0, ah, bh = self._layer(rng, 2)
            x = rng.normal(size=2) * 2.0
            _, logdet = mz.radial_forward(z0, ah, bh, x)
            h = 1e-6
            jac = np.zeros((2, 2))
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                yp, _ = mz.radial_forward(z0, ah, bh, x + e)
                ym, _ = mz.radial_forward(z0, ah, bh, x - e)
                jac[:, j] = (yp.value - ym.value) / (2 * h)
            assert logdet.value == pytest.approx(math.log(abs(np.linalg.det(jac))), abs=1e-5)

    def test_statistical_injectivity(self):
        rng = np.random.default_rng(10)
        z0, ah, bh = self._layer(rng, 2)
        x = rng.normal(size=(10_000, 2)) * 3.0
        y, _ = mz.radial_forward(z0, ah, bh, x)
        perm = rng.permutation(len(x))
        distinct = np.any(x != x[perm], axis=1)
        assert np.all(np.any(y.value[distinct] != y.value[perm][distinct], axis=1))


class TestFlowDensity:
    def _identity_flow(self, d, k=3):
        spec = mz.ModelSpec(input_dim=d, head="flow", n_flow_layers=k)
        pset = mz.init_params(spec, 0)
        for i in range(k):
            pset.get(f"flow{i}.z0")[:] = 0.0  # beta == 0 already at init
        return spec, pset

    def test_identity_flow_at_origin(self):
        spec, pset = self._identity_flow(2)
        assert mz.flow_logdensity(spec, pset, np.zeros(2)).value == pytest.approx(
            -math.log(2 * math.pi), abs=1e-9
        )

    def test_identity_flow_general_point(self):
        spec, pset = self._identity_flow(3)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        expected = -0.5 * (x**2).sum(axis=1) - 1.5 * math.log(2 * math.pi)
        assert np.allclose(mz.flow_logdensity(spec, pset, x).value, expected, atol=1e-9)

    def test_1d_density_integrates_to_one(self):
        spec = mz.ModelSpec(input_dim=1, head="flow", n_flow_layers=1)
        pset = mz.init_params(spec, 5)
        pset.get("flow0.beta_hat")[...] = 1.5  # non-trivial transform
        grid = np.linspace(-20, 20, 20001)
        logp = mz.flow_logdensity(spec, pset, grid[:, None]).value
        integral = np.trapezoid(np.exp(logp), grid)
        assert integral == pytest.approx(1.0, abs=1e-3)


class TestClassifierEmbed:
    def _clf(self):
        spec = mz.ModelSpec(input_dim=4, hidden=[6, 5], head="logits", n_classes=3)
        return spec, mz.init_params(spec, 7)

    def test_width_is_last_hidden(self):
        spec, pset = self._clf()
        emb = mz.classifier_embed(spec, pset, np.zeros((2, 4)))
        assert emb.shape == (2, 5)

    def test_zero_weight_net_constant_embedding(self):
        spec, pset = self._clf()
        pset.values[:] = 0.0
        pset.get("layer1.b")[:] = np.array([1.0, -1.0, 0.5, 0.0, 2.0])
        emb = mz.classifier_embed(spec, pset, np.random.default_rng(0).normal(size=(3, 4)))
        assert np.allclose(emb, np.maximum([1.0, -1.0, 0.5, 0.0, 2.0], 0.0))
        assert np.all(emb[0] == emb[1])

    def test_energy_head_unsupported(self):
        spec = small_energy_spec()
        with pytest.raises(mz.ModelError):
            mz.classifier_embed(spec, mz.init_params(spec, 0), np.zeros(3))

    def test_embedding_feeds_energy_net(self):
        spec, pset = self._clf()
        emb = mz.classifier_embed(spec, pset, np.random.default_rng(1).normal(size=(6, 4)))
        espec = mz.ModelSpec(input_dim=emb.shape[1], hidden=[4], head="energy")
        e = mz.mlp_energy(espec, mz.init_params(espec, 1), emb)
        assert e.value.shape == (6,)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        spec = mz.ModelSpec(input_dim=3, hidden=[5, 4], head="logits", n_classes=2)
        pset = mz.init_params(spec, 13)
        path = str(tmp_path / "ckpt.json")
        mz.save_checkpoint(path, spec, pset, metadata={"note": "t"})
        spec2, pset2, meta = mz.load_checkpoint(path)
        assert spec2 == spec
        assert meta == {"note": "t"}
        assert np.array_equal(pset.values, pset2.values)
        x = np.random.default_rng(0).normal(size=(4, 3))
        a = mz.mlp_logits(spec, pset, x).value
        b = mz.mlp_logits(spec2, pset2, x).value
        assert a.tobytes() == b.tobytes()

    def test_version_mismatch_rejected(self, tmp_path):
        spec = small_energy_spec()
        pset = mz.init_params(spec, 0)
        path = str(tmp_path / "c.json")
        mz.save_checkpoint(path, spec, pset)
        import json

        doc = json.load(open(path))
        doc["schema_version"] = 99
        json.dump(doc, open(path, "w"))
        with pytest.raises(mz.ModelError):
            mz.load_checkpoint(path)
