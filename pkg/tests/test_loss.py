import numpy as np
import pytest

from atlasflow.flow import flow_forward
from atlasflow.geometry import SurfaceSample
from atlasflow.loss import (
    BatchItem,
    LossBreakdown,
    LossWeights,
    MonteCarlo,
    TrainGrads,
    _eikonal_term,
    _off_surface_term,
    _riemannian_term,
    _surface_fidelity_term,
    binary_cross_entropy,
    eikonal_loss,
    f_cos,
    huber,
    occupancy_bce_fidelity,
    off_surface_penalty,
    on_surface_fidelity,
    pointwise_baseline_loss,
    pointwise_stages,
    riemannian_regularizer,
    total_training_loss,
)
from atlasflow.network import (
    TemplateNet,
    init_template,
    init_velocity_stack,
    make_linear_field_stack,
    template_forward,
)
from conftest import fd_param_gradient, rel_err


def affine_template(u, c, clamp=0.5):
    """Template computing exactly c - <u, x> via the relu(t) - relu(-t) identity."""
    u = np.asarray(u, dtype=np.float64)
    w0 = np.stack([-u, u])
    w1 = np.array([[1.0, -1.0]])
    return TemplateNet([w0, w1], [np.zeros(2), np.array([c])], skip_index=1, clamp=clamp)


def constant_template(c):
    net = affine_template(np.zeros(2), c)
    return net


def zero_stack(K=4, dim=2):
    return make_linear_field_stack(np.zeros((dim, dim)), np.zeros(dim), K=K)


def midpoint_grid(res, dim=2):
    axes = [np.linspace(-1 + 1 / res, 1 - 1 / res, res) for _ in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


class TestFCos:
    def test_identical_unit_vectors(self):
        v = np.array([0.6, 0.8])
        assert f_cos(v, v) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert f_cos(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)

    def test_max_normalization_not_classical_cosine(self):
        v = np.array([2.0, 0.0])
        assert f_cos(v, v) == pytest.approx(2.0)

    def test_bounded_by_smaller_norm(self, rng):
        a = rng.normal(size=(50, 3))
        b = rng.normal(size=(50, 3))
        vals = f_cos(a, b)
        bound = np.minimum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
        assert np.all(np.abs(vals) <= bound + 1e-12)


class TestOnSurface:
    def test_exact_fit_is_zero(self):
        u = np.array([0.6, 0.8])
        tpl = affine_template(u, 0.2)
        stack = zero_stack()
        t = np.linspace(-0.3, 0.3, 40)
        pts = 0.2 * u + np.stack([-u[1] * t, u[0] * t], axis=1)  # on the line <u,x>=0.2
        normals = np.tile(-u, (40, 1))  # aligned with grad f = -u
        sample = SurfaceSample(pts, normals)
        mc = MonteCarlo(np.random.default_rng(0), 40)
        assert on_surface_fidelity(tpl, stack, np.zeros(4), sample, mc, tau=0.5) < 1e-9

    def test_tau_zero_reduces_to_mean_abs(self, rng):
        tpl = init_template(2, 8, 2, rng, geometric=False)
        stack = init_velocity_stack(2, 3, 8, 1, 4, 0.05, rng)
        z = rng.normal(size=3) * 0.3
        pts = rng.uniform(-0.6, 0.6, (30, 2))
        normals = rng.normal(size=(30, 2))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        sample = SurfaceSample(pts, normals)
        mc = MonteCarlo(np.random.default_rng(0), 30)
        got = on_surface_fidelity(tpl, stack, z, sample, mc, tau=0.0)
        state = flow_forward(stack, pts, z)
        value, _, _ = template_forward(tpl, state.positions[-1])
        assert got == pytest.approx(np.abs(value).mean(), abs=1e-15)

    def test_mc_estimate_within_standard_errors(self, rng):
        tpl = init_template(2, 12, 2, rng, geometric=False)
        stack = init_velocity_stack(2, 3, 12, 1, 4, 0.05, rng)
        z = rng.normal(size=3) * 0.3
        angles = rng.uniform(0, 2 * np.pi, 3000)
        pts = 0.4 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        normals = -np.stack([np.cos(angles), np.sin(angles)], axis=1)
        sample = SurfaceSample(pts, normals)
        tau = 0.3
        # Per-point integrand over the dense set (test-side oracle).
        e_abs, e_norm, _ = _surface_fidelity_term(tpl, stack, z, pts, normals, tau)
        dense = e_abs + tau * e_norm
        state = flow_forward(stack, pts, z, need_jac=True)
        value, grad_f, _ = template_forward(tpl, state.positions[-1])
        grad_i = np.einsum("nij,ni->nj", state.jacobians[-1], grad_f)
        per_point = np.abs(value) + tau * (1 - f_cos(grad_i, normals))
        n = 300
        se = per_point.std() / np.sqrt(n)
        mc = MonteCarlo(np.random.default_rng(5), n)
        got = on_surface_fidelity(tpl, stack, z, sample, mc, tau=tau)
        assert abs(got - dense) < 3 * se + 1e-12


class TestOffSurface:
    def test_zero_implicit_gives_one(self, rng):
        tpl = constant_template(0.0)
        pen = off_surface_penalty(tpl, zero_stack(), np.zeros(4), rng.uniform(-1, 1, (50, 2)), 100.0)
        assert pen == pytest.approx(1.0)

    def test_closed_form_at_constant_value(self, rng):
        tpl = constant_template(0.1)
        pen = off_surface_penalty(tpl, zero_stack(), np.zeros(4), rng.uniform(-1, 1, (50, 2)), 100.0)
        assert pen == pytest.approx(np.exp(-10.0), rel=1e-12)

    def test_monotone_in_field_magnitude(self, rng):
        pts = rng.uniform(-1, 1, (50, 2))
        p1 = off_surface_penalty(constant_template(0.1), zero_stack(), np.zeros(4), pts, 50.0)
        p2 = off_surface_penalty(constant_template(0.2), zero_stack(), np.zeros(4), pts, 50.0)
        assert p2 < p1

    def test_alpha_validated(self, rng):
        with pytest.raises(ValueError):
            off_surface_penalty(constant_template(0.1), zero_stack(), np.zeros(4), np.zeros((2, 2)), 0.0)


class TestEikonal:
    def test_affine_unit_gradient_zero(self):
        tpl = affine_template(np.array([0.6, 0.8]), 0.0)  # |grad| = 1 off the clamp
        pts = np.random.default_rng(0).uniform(-0.3, 0.3, (80, 2))  # keep |f| < clamp
        assert eikonal_loss(tpl, pts, pts) == pytest.approx(0.0, abs=1e-12)

    def test_constant_template_gives_one(self, rng):
        tpl = constant_template(0.2)
        assert eikonal_loss(tpl, rng.uniform(-1, 1, (40, 2)), rng.uniform(-1, 1, (10, 2))) == 1.0

    def test_no_velocity_gradient_path(self, rng):
        tpl = init_template(2, 8, 2, rng, geometric=False)
        stack = init_velocity_stack(2, 3, 8, 1, 4, 0.05, rng)
        sink = TrainGrads.zeros(tpl, stack, 1)
        _eikonal_term(tpl, rng.uniform(-1, 1, (30, 2)), sink=sink, weight=1.0)
        assert sum(np.abs(g).sum() for net in sink.velocity for g in net) == 0.0
        assert sum(np.abs(g).sum() for g in sink.template) > 0.0


class TestRiemannian:
    def test_zero_field(self, rng):
        assert riemannian_regularizer(zero_stack(), np.zeros(4), rng.uniform(-1, 1, (100, 2)), 0.5) == 0.0

    def test_rotation_field_leaves_only_l2(self):
        stack = make_linear_field_stack(np.array([[0.0, -1.0], [1.0, 0.0]]), np.zeros(2), K=1)
        pts = midpoint_grid(256)
        eta = 0.7
        got = riemannian_regularizer(stack, np.zeros(4), pts, eta)
        assert got == pytest.approx(eta * 8.0 / 3.0, rel=1e-4)

    def test_identity_field_closed_form(self):
        stack = make_linear_field_stack(np.eye(2), np.zeros(2), K=1)
        pts = midpoint_grid(256)
        eta = 0.3
        got = riemannian_regularizer(stack, np.zeros(4), pts, eta)
        assert got == pytest.approx(32.0 + eta * 8.0 / 3.0, rel=1e-4)

    def test_stage_average(self):
        # Two stages: identity field and zero field; result is the mean.
        s_id = make_linear_field_stack(np.eye(2), np.zeros(2), K=2)
        s_id.nets[1].wo[...] = 0.0
        pts = midpoint_grid(128)
        got = riemannian_regularizer(s_id, np.zeros(4), pts, 0.0)
        assert got == pytest.approx(16.0, rel=1e-3)

    def test_killing_rigid_invariance(self, rng):
        a = rng.normal()
        S = np.array([[0.0, a], [-a, 0.0]])
        b = rng.normal(size=2)
        stack = make_linear_field_stack(S, b, K=1)
        pts = rng.uniform(-1, 1, (10_000, 2))
        got = riemannian_regularizer(stack, np.zeros(4), pts, 0.0)
        assert got < 1e-12


class TestPointwise:
    def test_huber_branches(self):
        assert huber(0.1) == pytest.approx(0.005)
        assert huber(1.0) == pytest.approx(0.21875)
        assert huber(0.25) == pytest.approx(0.03125)

    def test_stage_set(self):
        assert pointwise_stages(10) == [2, 4, 6, 8, 10]
        assert pointwise_stages(4) == [1, 2, 3, 4]
        with pytest.raises(ValueError):
            pointwise_stages(3)

    def test_zero_field(self, rng):
        assert pointwise_baseline_loss(zero_stack(8), np.zeros(4), rng.uniform(-1, 1, (20, 2))) == 0.0

    def test_constant_field_closed_form(self, rng):
        c = np.array([0.08, 0.0])
        stack = make_linear_field_stack(np.zeros((2, 2)), c, K=8)
        pts = rng.uniform(-0.5, 0.5, (13, 2))
        got = pointwise_baseline_loss(stack, np.zeros(4), pts)
        expected = sum(huber(0.08 * s / 8) for s in pointwise_stages(8))
        assert got == pytest.approx(float(expected), rel=1e-12)


class TestBce:
    def test_saturation(self):
        vals = np.array([10.0, -10.0, 10.0])
        labels = np.array([1.0, 0.0, 1.0])
        assert binary_cross_entropy(vals, labels, scale=1.0) < 5e-5

    def test_uninformative_is_log_two(self):
        vals = np.zeros(8)
        labels = np.array([0, 1] * 4, dtype=float)
        assert binary_cross_entropy(vals, labels) == pytest.approx(np.log(2.0))

    def test_label_flip_symmetry(self, rng):
        vals = rng.normal(size=20)
        labels = rng.integers(0, 2, 20).astype(float)
        a = binary_cross_entropy(vals, labels)
        b = binary_cross_entropy(-vals, 1.0 - labels)
        assert a == pytest.approx(b, rel=1e-12)

    def test_full_op_runs(self, rng):
        tpl = init_template(2, 8, 2, rng, geometric=False)
        stack = init_velocity_stack(2, 3, 8, 1, 4, 0.05, rng)
        pts = rng.uniform(-0.8, 0.8, (40, 2))
        labels = rng.integers(0, 2, 40).astype(float)
        out = occupancy_bce_fidelity(tpl, stack, rng.normal(size=3) * 0.3, pts, labels)
        assert np.isfinite(out) and out > 0

    def test_balanced_labels_against_sphere_template(self, rng):
        # Sphere-initialized template is inside-positive, so balanced occupancy
        # labels of a matching sphere should score clearly below log 2.
        from atlasflow.geometry import ShapeSpec, balanced_occupancy_points

        tpl = init_template(2, 64, 5, rng)  # geometric init: ~ sphere of radius 0.5
        spec = ShapeSpec("sphere", np.zeros(2), np.array([0.5, 0.5]), np.eye(2))
        pts, labels = balanced_occupancy_points(spec, 400, seed=3)
        out = occupancy_bce_fidelity(tpl, zero_stack(), np.zeros(4), pts, labels)
        assert out < 0.5 * np.log(2.0)


def _tiny_setup(seed=0, n_pts=10):
    rng = np.random.default_rng(seed)
    tpl = init_template(2, 6, 1, rng, geometric=False)
    stack = init_velocity_stack(2, 3, 6, 1, 4, 0.05, rng)
    for net in stack.nets:  # small fields: K=4 Euler steps must stay inside the domain
        net.wo *= 0.3
        net.bo *= 0.3
    z = rng.normal(size=3) * 0.4
    pts = rng.uniform(-0.7, 0.7, (n_pts, 2))
    normals = rng.normal(size=(n_pts, 2))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return rng, tpl, stack, z, pts, normals


def _check_term_gradients(term_call, tpl, stack, z, h=1e-5, min_pass=0.95, tol=1e-3):
    """FD-check template, velocity, and latent gradients of one term."""
    sink = TrainGrads.zeros(tpl, stack, 1)
    term_call(sink)
    analytic = np.concatenate(
        [g.ravel() for g in sink.template]
        + [g.ravel() for net in sink.velocity for g in net]
        + [sink.latent.ravel()]
    )
    params = tpl.param_arrays() + stack.param_arrays() + [z]
    fd = fd_param_gradient(params, lambda: term_call(None), h=h)
    mask = np.maximum(np.abs(fd), np.abs(analytic)) > 1e-10
    errs = rel_err(fd[mask], analytic[mask])
    assert (errs < tol).mean() >= min_pass, f"pass rate {(errs < tol).mean():.3f}"


class TestTermGradients:
    def test_on_surface(self):
        _, tpl, stack, z, pts, normals = _tiny_setup(1)

        def call(sink):
            e_abs, e_norm, _ = _surface_fidelity_term(
                tpl, stack, z, pts, normals, tau=0.5,
                sink=sink, w_abs=1.0, w_norm=0.5, latent_row=0,
            )
            return e_abs + 0.5 * e_norm

        _check_term_gradients(call, tpl, stack, z)

    def test_off_surface(self):
        _, tpl, stack, z, pts, _ = _tiny_setup(2)

        def call(sink):
            val, _ = _off_surface_term(tpl, stack, z, pts, 20.0, sink=sink, weight=1.0, latent_row=0)
            return val

        _check_term_gradients(call, tpl, stack, z)

    def test_eikonal(self):
        _, tpl, stack, z, pts, _ = _tiny_setup(3)

        def call(sink):
            return _eikonal_term(tpl, pts, sink=sink, weight=1.0)

        _check_term_gradients(call, tpl, stack, z)

    def test_riemannian(self):
        _, tpl, stack, z, pts, _ = _tiny_setup(4)

        def call(sink):
            return _riemannian_term(stack, z, pts, 0.3, sink=sink, weight=1.0, latent_row=0)

        _check_term_gradients(call, tpl, stack, z)

    def test_pointwise(self):
        _, tpl, stack, z, pts, _ = _tiny_setup(5)

        def call(sink):
            if sink is None:
                return pointwise_baseline_loss(stack, z, pts)
            state = flow_forward(stack, pts, z, keep_tapes=True)
            from atlasflow.loss import _pointwise_from_states

            return _pointwise_from_states([state], [1.0], sink=sink, weight=1.0, latent_row=0)

        _check_term_gradients(call, tpl, stack, z)

    def test_occupancy_bce(self):
        rng, tpl, stack, z, pts, _ = _tiny_setup(6)
        labels = rng.integers(0, 2, len(pts)).astype(float)

        def call(sink):
            return occupancy_bce_fidelity(
                tpl, stack, z, pts, labels, sink=sink, weight=1.0, latent_row=0
            )

        _check_term_gradients(call, tpl, stack, z)

    def test_total_training_loss_both_modes(self):
        for mode in ("riemannian", "pointwise"):
            rng, tpl, stack, z, pts, normals = _tiny_setup(7)
            sample = SurfaceSample(pts, normals, shape_id=0)
            weights = LossWeights(sigma2=0.1, tau=0.2, lam=0.05, beta=0.5, alpha=10.0, eta=0.3, c_pw=0.2)
            latents = z[None, :].copy()

            def call(sink, latents=latents):
                mc = MonteCarlo(np.random.default_rng(99), 8)
                bd = total_training_loss(
                    [BatchItem(0, sample)], tpl, stack, latents, weights, mode, mc, grads=sink
                )
                return bd.total

            sink = TrainGrads.zeros(tpl, stack, 1)
            call(sink)
            analytic = np.concatenate(
                [g.ravel() for g in sink.template]
                + [g.ravel() for net in sink.velocity for g in net]
                + [sink.latent.ravel()]
            )
            params = tpl.param_arrays() + stack.param_arrays() + [latents]
            fd = fd_param_gradient(params, lambda: call(None), h=1e-5)
            mask = np.maximum(np.abs(fd), np.abs(analytic)) > 1e-10
            errs = rel_err(fd[mask], analytic[mask])
            assert (errs < 1e-3).mean() >= 0.95, mode


class TestTotalLoss:
    def _batch(self, seed=0):
        rng, tpl, stack, z, pts, normals = _tiny_setup(seed, n_pts=20)
        return rng, tpl, stack, z[None, :].copy(), SurfaceSample(pts, normals, shape_id=0)

    def test_fidelity_only(self):
        _, tpl, stack, latents, sample = self._batch()
        weights = LossWeights(sigma2=0, tau=0, lam=0, beta=0, alpha=1.0, eta=0, c_pw=0)
        mc = MonteCarlo(np.random.default_rng(1), 16)
        bd = total_training_loss([BatchItem(0, sample)], tpl, stack, latents, weights, "riemannian", mc)
        assert bd.total == pytest.approx(bd.on_surface, abs=1e-15)

    def test_mode_equivalence_when_regularizers_off(self):
        _, tpl, stack, latents, sample = self._batch(3)
        weights = LossWeights(sigma2=0.0, tau=0.1, lam=0.01, beta=0.2, alpha=5.0, eta=0.3, c_pw=0.0)
        bd_r = total_training_loss(
            [BatchItem(0, sample)], tpl, stack, latents, weights, "riemannian",
            MonteCarlo(np.random.default_rng(7), 16),
        )
        bd_p = total_training_loss(
            [BatchItem(0, sample)], tpl, stack, latents, weights, "pointwise",
            MonteCarlo(np.random.default_rng(7), 16),
        )
        assert bd_r.total == pytest.approx(bd_p.total, abs=1e-15)
        assert bd_r.on_surface == bd_p.on_surface
        assert bd_r.eikonal == bd_p.eikonal

    def test_breakdown_consistency(self):
        _, tpl, stack, latents, sample = self._batch(4)
        weights = LossWeights(sigma2=0.1, tau=0.2, lam=0.05, beta=0.5, alpha=10.0, eta=0.3, c_pw=0.2)
        mc = MonteCarlo(np.random.default_rng(2), 16)
        bd = total_training_loss([BatchItem(0, sample)], tpl, stack, latents, weights, "riemannian", mc)
        assert bd.total == pytest.approx(bd.weighted_total(weights), abs=1e-12)

    def test_all_terms_non_negative(self):
        for seed in range(3):
            _, tpl, stack, latents, sample = self._batch(seed)
            weights = LossWeights(sigma2=0.1, tau=0.2, lam=0.05, beta=0.5, alpha=10.0, eta=0.3)
            mc = MonteCarlo(np.random.default_rng(seed), 16)
            for mode in ("riemannian", "pointwise"):
                bd = total_training_loss([BatchItem(0, sample)], tpl, stack, latents, weights, mode, mc)
                for name in LossBreakdown.FIELDS:
                    assert getattr(bd, name) >= 0.0, (seed, mode, name)

    def test_invalid_mode(self):
        _, tpl, stack, latents, sample = self._batch()
        with pytest.raises(ValueError):
            total_training_loss(
                [BatchItem(0, sample)], tpl, stack, latents, LossWeights(), "bogus",
                MonteCarlo(np.random.default_rng(0), 8),
            )

    def test_mc_variance_halves_with_double_samples(self):
        rng, tpl, stack, z, pts, normals = _tiny_setup(8, n_pts=4000)
        sample = SurfaceSample(pts, normals)
        reps = 200

        def estimates(n):
            out = []
            for s in range(reps):
                mc = MonteCarlo(np.random.default_rng(1000 + 7919 * s + n), n)
                out.append(on_surface_fidelity(tpl, stack, z, sample, mc, tau=0.3))
            return np.var(out)

        v_small = estimates(50)
        v_big = estimates(100)
        assert 1.4 < v_small / v_big < 2.9
