import dataclasses

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from cfcalib.data import BatchedData, Dataset, group_by, instance_specs, synth_generate
from cfcalib.distributions import DoubleGammaParams, TransformedNormal, double_gamma_log_pdf, softplus, transformed_normal_log_pdf
from cfcalib.errors import CapabilityError, LayoutError
from cfcalib.models import IdmParams, W99Params, idm_accel, wzdm_accel
from cfcalib.models.w99 import w99_sequence
from cfcalib.priors import default_priors, wzdm_params
from cfcalib.probmodel import (
    NAN_LOG_DENSITY,
    Layout,
    LatentState,
    PoolingSpec,
    ProbModel,
    kernel_predict,
    log_joint,
    predict_batch,
    rmse,
)
from cfcalib.records import CfInstance

TRUTH = IdmParams(28, 1.4, 1.2, 2.2, 4, 2.5, 1.5)


def idm_data(n_groups=3, per=2, n_steps=120, seed=0, beta=0.2):
    specs = instance_specs(n_groups, per)
    truth = {f"g{g}": TRUTH for g in range(n_groups)}
    ds, _ = synth_generate("idm", truth, specs, DoubleGammaParams(0, beta, 1.5), np.random.default_rng(seed), n_steps=n_steps)
    return ds


def idm_model(mode="pooled", sigma=10.0):
    return ProbModel("idm", default_priors("idm", sigma), PoolingSpec(mode, "driver"))


def state_near_truth(post, rng, spread=0.05):
    x = post.initial_state().x.copy()
    parts = post.layout.unpack(x)
    u_true = np.log(np.expm1(TRUTH.as_array()))
    u_true[6] = np.log(np.expm1(1.5))
    if post.mode == "hierarchical":
        parts["mu"] = u_true + rng.normal(0, spread, 7)
        parts["theta_norm"] = rng.normal(0, 0.3, parts["theta_norm"].shape)
        parts["sigma_u"] = np.full(7, -2.0)
    else:
        parts["theta"] = u_true + rng.normal(0, spread, parts["theta"].shape)
    parts["lik_u"] = np.array([np.log(np.expm1(0.25)), np.log(np.expm1(2.0))])
    return post.layout.pack(parts)


def central_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestLayout:
    def test_roundtrip(self):
        lay = Layout([("a", (2, 3)), ("b", (3,)), ("c", ())])
        x = np.arange(lay.size, dtype=float)
        assert np.array_equal(lay.pack(lay.unpack(x)), x)
        assert lay.size == 10

    def test_mismatch(self):
        lay = Layout([("a", (2,))])
        with pytest.raises(LayoutError):
            lay.unpack(np.zeros(3))
        with pytest.raises(LayoutError):
            lay.pack({"b": np.zeros(2)})
        with pytest.raises(LayoutError):
            lay.pack({"a": np.zeros(3)})

    def test_columns(self):
        post = idm_model("hierarchical").bind(group_by(idm_data(2, 1, 30), "driver"))
        cols = post.layout.columns()
        assert len(cols) == post.dim
        assert cols[0] == "theta_norm[d0].v0"
        assert "mu.T" in cols and "sigma_u.s1" in cols and "lik_u.gamma" in cols

    def test_state_layout_check(self):
        lay = Layout([("a", (2,))])
        with pytest.raises(LayoutError):
            LatentState(np.zeros(3), np.zeros(0), lay)


class TestPoolingSpec:
    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            PoolingSpec("partial")

    def test_invalid_key(self):
        with pytest.raises(ValueError):
            PoolingSpec("pooled", "lane")

    def test_hierarchical_needs_groups(self):
        data = group_by(idm_data(1, 2, 30), "driver")
        with pytest.raises(ValueError):
            idm_model("hierarchical").bind(data)

    def test_prior_model_mismatch(self):
        with pytest.raises(ValueError):
            ProbModel("w99", default_priors("idm"))


class TestLogJoint:
    def test_empty_data_is_prior(self):
        pm = idm_model("pooled", 3.0)
        post = pm.bind(BatchedData.empty())
        rng = np.random.default_rng(0)
        x = post.initial_state().x + rng.normal(0, 0.5, post.dim)
        parts = post.layout.unpack(x)
        mu = default_priors("idm").mu_vector()
        expect = stats.norm.logpdf(parts["theta"], mu, 3.0).sum()
        expect += stats.norm.logpdf(parts["lik_u"], [1.0, 1.0], [1.0, 1.0]).sum()
        assert post.log_density(x) == pytest.approx(expect, rel=1e-12)

    def test_single_row_composition(self):
        inst = CfInstance("i", "d0", 4, [18.0], [0.3], [17.0], [0.1], [-1.0], [35.0])
        data = group_by(Dataset([inst]), "driver")
        post = idm_model().bind(data)
        theta = np.array([30.0, 1.5, 1.0, 2.0, 4.0, 2.0, 1.0])
        beta, gamma = 0.4, 1.7
        u = np.log(np.expm1(theta))
        lik_u = np.log(np.expm1([beta, gamma]))
        x = post.layout.pack({"theta": u, "lik_u": lik_u})
        prior = stats.norm.logpdf(u, default_priors("idm").mu_vector(), 10.0).sum() + stats.norm.logpdf(lik_u, 1.0, 1.0).sum()
        pred = idm_accel(inst.observation(0), IdmParams(*theta))
        lik = double_gamma_log_pdf(0.3, DoubleGammaParams(pred, beta, gamma))
        assert post.log_density(x) == pytest.approx(prior + lik, rel=1e-10)
        st = LatentState(x, np.zeros(0), post.layout)
        assert log_joint(st, idm_model(), data) == pytest.approx(prior + lik, rel=1e-10)

    def test_hierarchical_small_sigma_limit(self):
        data = group_by(idm_data(1, 2, 60), "driver")
        hier = idm_model("hierarchical").bind(data, min_groups=1)
        pooled = idm_model("pooled").bind(data)
        rng = np.random.default_rng(1)
        xp = state_near_truth(pooled, rng)
        pp = pooled.layout.unpack(xp)
        theta_norm = rng.normal(0, 1, (1, 7))
        sigma_u = np.full(7, np.log(np.expm1(1e-6)))
        xh = hier.layout.pack({"theta_norm": theta_norm, "mu": pp["theta"], "sigma_u": sigma_u, "lik_u": pp["lik_u"]})
        s = softplus(sigma_u)
        consts = stats.norm.logpdf(theta_norm).sum()
        consts += np.sum(stats.halfnorm.logpdf(s, scale=1.0) + np.log(expit(sigma_u)))
        assert hier.log_density(xh) == pytest.approx(pooled.log_density(xp) + consts, abs=1e-3)

    def test_layout_mismatch(self):
        data = group_by(idm_data(2, 1, 30), "driver")
        post = idm_model("unpooled").bind(data)
        st = LatentState(np.zeros(9), np.zeros(0), Layout([("theta", (7,)), ("lik_u", (2,))]))
        assert post.dim != 9
        with pytest.raises(LayoutError):
            log_joint(st, idm_model("unpooled"), data)

    def test_nan_prediction_replaced(self):
        data = group_by(idm_data(1, 1, 30), "driver")
        v_f = data.v_f.copy()
        v_f[5] = np.nan
        bad = dataclasses.replace(data, v_f=v_f)
        post = idm_model().bind(bad)
        ll = post.pointwise_loglik(post.initial_state().x)
        assert ll[5] == NAN_LOG_DENSITY
        assert post.nan_count == 1
        assert np.all(np.isfinite(np.delete(ll, 5)))

    def test_exchangeable_within_group(self):
        data = group_by(idm_data(2, 2, 80), "driver")
        post = idm_model("unpooled").bind(data)
        x = state_near_truth(post, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        perm = np.concatenate([rng.permutation(data.group_rows(g)) for g in range(data.n_groups)])
        cols = {c: getattr(data, c)[perm] for c in ("v_f", "a_f", "a_prev", "v_l", "a_l", "dv", "dx", "group_index", "instance_index")}
        shuffled = dataclasses.replace(data, **cols)
        post2 = idm_model("unpooled").bind(shuffled)
        assert abs(post.log_density(x) - post2.log_density(x)) < 1e-9

    def test_unpooled_single_group_equals_pooled(self):
        data = group_by(idm_data(1, 2, 80), "driver")
        un = idm_model("unpooled").bind(data)
        po = idm_model("pooled").bind(data)
        x = state_near_truth(po, np.random.default_rng(4))
        assert un.dim == po.dim
        assert un.log_density(x) == po.log_density(x)

    def test_prior_change_of_variables(self):
        post = idm_model("pooled", 2.0).bind(BatchedData.empty())
        rng = np.random.default_rng(5)
        x = post.initial_state().x + rng.normal(0, 0.4, post.dim)
        parts = post.layout.unpack(x)
        u = parts["theta"]
        theta = post.to_constrained(u)
        mu = default_priors("idm").mu_vector()
        h = 1e-6
        # constrained-space density plus numerical log |d theta / d u|
        total = 0.0
        for j in range(7):
            dtheta = (post.to_constrained(u + h * np.eye(7)[j])[j] - post.to_constrained(u - h * np.eye(7)[j])[j]) / (2 * h)
            total += transformed_normal_log_pdf(theta[j], TransformedNormal(mu[j], 2.0, "nonneg")) + np.log(dtheta)
        total += stats.norm.logpdf(parts["lik_u"], 1.0, 1.0).sum()
        assert post.log_density(x) == pytest.approx(total, abs=1e-6)

    def test_hierarchical_scale_jacobian(self):
        post = idm_model("hierarchical").bind(group_by(idm_data(2, 1, 30), "driver"))
        x = post.initial_state().x.copy()
        parts = post.layout.unpack(x)
        base = post.log_prior(x)
        sl = post.layout.slices["sigma_u"]
        u0 = parts["sigma_u"][0]
        u1 = u0 + 0.3
        x2 = x.copy()
        x2[sl.start] = u1
        h = 1e-6
        jac = lambda u: (softplus(u + h) - softplus(u - h)) / (2 * h)  # noqa: E731
        expect = (stats.halfnorm.logpdf(softplus(u1)) + np.log(jac(u1))) - (stats.halfnorm.logpdf(softplus(u0)) + np.log(jac(u0)))
        assert post.log_prior(x2) - base == pytest.approx(expect, abs=1e-6)


class TestGradient:
    @pytest.mark.parametrize("mode", ["pooled", "unpooled", "hierarchical"])
    def test_smoothed_gradient(self, mode):
        data = group_by(idm_data(2, 1, 40), "driver")
        post = idm_model(mode).bind(data)
        x = state_near_truth(post, np.random.default_rng(6))
        eps = 0.05
        g = post.grad(x, smoothing=eps)
        fd = central_gradient(lambda y: post.smoothed_log_density(y, eps=eps), x)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6

    @pytest.mark.parametrize("mode", ["pooled", "hierarchical"])
    def test_exact_gradient(self, mode):
        data = group_by(idm_data(2, 1, 15), "driver")
        post = idm_model(mode).bind(data)
        x = state_near_truth(post, np.random.default_rng(7))
        g = post.grad(x)
        fd = central_gradient(post.log_density, x, h=1e-7)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5

    def test_not_differentiable(self):
        post = ProbModel("w99", default_priors("w99")).bind(BatchedData.empty())
        with pytest.raises(CapabilityError):
            post.grad(post.initial_state().x)


class TestPredict:
    def test_standstill_rows_predict_zero(self):
        inst = CfInstance("i", "d", 4, np.zeros(5), np.zeros(5), np.zeros(5), np.zeros(5), np.zeros(5), np.full(5, 2.0))
        data = group_by(Dataset([inst]), "driver")
        p = IdmParams(s0=2.0, s1=0.0)
        assert np.all(kernel_predict("idm", data, p.as_array()) == 0.0)

    def test_group_permutation(self):
        ds = idm_data(3, 1, 50)
        data = group_by(ds, "driver")
        post = idm_model("unpooled").bind(data)
        x = state_near_truth(post, np.random.default_rng(8), spread=0.3)
        pred = post.predict(x)
        rev = group_by(Dataset(ds.instances[::-1]), "driver")
        post_r = idm_model("unpooled").bind(rev)
        parts = post.layout.unpack(x)
        xr = post_r.layout.pack({"theta": parts["theta"][::-1], "lik_u": parts["lik_u"]})
        pred_r = post_r.predict(xr)
        for g in range(3):
            np.testing.assert_array_equal(pred_r[rev.group_rows(2 - g)], pred[data.group_rows(g)])

    def test_predict_batch_front_end(self):
        data = group_by(idm_data(2, 1, 30), "driver")
        pm = idm_model("unpooled")
        st = pm.bind(data).initial_state()
        np.testing.assert_array_equal(predict_batch(st, pm, data), pm.bind(data).predict(st.x))

    def test_wzdm_rows_match_kernel(self):
        fp, rp = wzdm_params(4)
        ds, _ = synth_generate("wzdm", {"g0": (fp, rp)}, instance_specs(1, 2), None, np.random.default_rng(9), n_steps=80)
        data = group_by(ds, "instance")
        theta = np.concatenate([rp.as_array(), fp.continuous_array()])
        pred = kernel_predict("wzdm", data, theta, fp.prts())
        for inst, s in zip(ds, data.starts):
            rows = inst.rows
            for i in range(len(inst)):
                hist = rows[max(0, i - 4) : i + 1]
                assert pred[s + i] == pytest.approx(wzdm_accel(hist, fp, rp), rel=1e-12, abs=1e-12)

    def test_wzdm_posterior_uses_framework_means(self):
        fp, rp = wzdm_params(4)
        ds, _ = synth_generate("wzdm", {"g0": (fp, rp)}, instance_specs(1, 1), None, np.random.default_rng(10), n_steps=60)
        post = ProbModel("wzdm", default_priors("wzdm")).bind(group_by(ds, "instance"))
        x = post.initial_state()
        theta = post.constrained(x.x)["theta"][0]
        assert tuple(post.cat_values(x.z)) == fp.prts()
        pred = post.predict(x.x, x.z)
        np.testing.assert_allclose(pred, kernel_predict("wzdm", post.data, theta, fp.prts()), rtol=1e-12)

    def test_w99_initial_regime_latent(self):
        ds, _ = synth_generate("w99", {"g0": W99Params()}, instance_specs(1, 3), None, np.random.default_rng(11), n_steps=60)
        data = group_by(ds, "driver")
        post = ProbModel("w99", default_priors("w99"), PoolingSpec("pooled", "driver")).bind(data)
        assert len(post.cat_slots) == 3
        st = post.initial_state()
        theta = post.constrained(st.x)["theta"][0]
        for z in ([3, 3, 3], [0, 1, 2]):
            acc, _ = w99_sequence(data.v_f, data.a_prev, data.v_l, data.a_l, data.dv, data.dx, theta, data.starts, z)
            np.testing.assert_array_equal(post.predict(st.x, np.array(z)), acc)


class TestRmse:
    def test_zero(self):
        y = np.arange(5.0)
        assert rmse(y, y)["overall"] == 0.0

    def test_constant_offset(self):
        y = np.linspace(-1, 1, 7)
        assert rmse(y + 0.7, y)["overall"] == pytest.approx(0.7)

    def test_mean_of_groups(self):
        obs = np.zeros(6)
        pred = np.array([1.0, -1.0, 1.0, 3.0, -3.0, 3.0])
        out = rmse(pred, obs, np.array([0, 0, 0, 1, 1, 1]), ("a", "b"))
        assert out["a"] == pytest.approx(1.0) and out["b"] == pytest.approx(3.0)
        assert out["overall"] == pytest.approx(2.0)

    def test_empty_group_warns(self):
        with pytest.warns(UserWarning):
            out = rmse(np.ones(2), np.zeros(2), np.array([0, 0]), ("a", "b"))
        assert "b" not in out and out["overall"] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.ones(2), np.ones(3))


class TestCategoricalPrior:
    def test_polya_urn_matches_dirichlet_average(self):
        fp, rp = wzdm_params(4)
        specs = instance_specs(3, 1, key="framework")
        params = {s.param_key: (fp, rp) for s in specs}
        ds, _ = synth_generate("wzdm", params, specs, None, np.random.default_rng(12), n_steps=40)
        pm = ProbModel("wzdm", default_priors("wzdm"), PoolingSpec("hierarchical", "framework"))
        post = pm.bind(group_by(ds, "framework"))
        z = np.array([2, 0, 1, 3, 0, 0, 2, 1, 1])
        rng = np.random.default_rng(13)
        expect = 0.0
        zz = z.reshape(3, 3)
        for k, alpha in enumerate(post.dirichlet):
            p = rng.dirichlet(alpha, 400_000)
            expect += np.log(np.mean(np.prod(p[:, zz[:, k]], axis=1)))
        assert post.log_prior_cat(z) == pytest.approx(expect, abs=0.02)
