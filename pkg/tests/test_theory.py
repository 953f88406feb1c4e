import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greybox.diffcore import GradTape, ParamStore, backward, finite_diff_grad, grad_agreement, ops
from greybox.errors import ConfigurationError
from greybox.theory import (ThetaBox, ThetaSample, TheoryKind, TheoryModel, clamp_to_box,
                            eval_theory, laplacian_5pt, sample_prior)


def brute_laplacian(u, dx):
    H, W = u.shape
    out = np.empty_like(u)
    for i in range(H):
        for j in range(W):
            up = u[max(i - 1, 0), j]
            down = u[min(i + 1, H - 1), j]
            left = u[i, max(j - 1, 0)]
            right = u[i, min(j + 1, W - 1)]
            out[i, j] = (up + down + left + right - 4 * u[i, j]) * (1.0 / (dx * dx))
    return out


class TestEvalTheory:
    def test_sine_identity(self):
        m = TheoryModel(TheoryKind.SINE)
        out = eval_theory(m, ThetaSample([np.sqrt(2), np.pi / 4], ("a", "c")), np.array([[0.0]]))
        assert out.value[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_pendulum_substitution(self):
        m = TheoryModel(TheoryKind.PENDULUM)
        out = eval_theory(m, np.array([10.0]), np.array([[np.pi / 2, 0.0]]))
        np.testing.assert_allclose(out.value, [[0.0, 15.0]], atol=1e-14)

    def test_lotka_volterra_fixed_point(self):
        m = TheoryModel(TheoryKind.LOTKA_VOLTERRA)
        out = eval_theory(m, np.ones(4), np.array([[1.0, 1.0]]))
        np.testing.assert_array_equal(out.value, [[0.0, 0.0]])

    def test_per_instance_theta(self):
        m = TheoryModel(TheoryKind.SINE)
        theta = np.array([[1.0, 0.0], [2.0, np.pi / 2]])
        out = eval_theory(m, theta, np.array([[np.pi / 2], [0.0]]))
        np.testing.assert_allclose(out.value, [[1.0], [2.0]], atol=1e-14)

    def test_diffusion_shapes_and_constant(self):
        m = TheoryModel(TheoryKind.DIFFUSION, dx=0.125)
        s = np.full((3, 2, 5, 5), 0.7)
        out = eval_theory(m, np.array([[0.0015, 0.005]] * 3), s)
        assert out.shape == s.shape
        np.testing.assert_array_equal(out.value, 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            eval_theory(TheoryModel(TheoryKind.PENDULUM), np.ones(2), np.zeros((1, 2)))
        with pytest.raises(ConfigurationError):
            eval_theory(TheoryModel(TheoryKind.DIFFUSION), np.ones(2), np.zeros((3, 4, 4)))

    @pytest.mark.parametrize("kind,theta,state", [
        (TheoryKind.SINE, [1.2, 0.3], np.linspace(-2, 2, 4).reshape(4, 1)),
        (TheoryKind.PENDULUM, [9.5], [[0.3, -0.2], [2.0, 1.0]]),
        (TheoryKind.LOTKA_VOLTERRA, [0.7, 1.1, 0.4, 0.9], [[0.5, 0.8], [1.2, 0.3]]),
        (TheoryKind.DIFFUSION, [0.0015, 0.005], np.linspace(0, 1, 2 * 4 * 4).reshape(1, 2, 4, 4) ** 2),
    ])
    def test_gradients_wrt_theta_and_state(self, kind, theta, state):
        m = TheoryModel(kind, dx=0.5)
        params = ParamStore(theta=np.array(theta, float), state=np.array(state, float))
        w = np.random.default_rng(0).normal(size=np.shape(state))

        def loss(p):
            return ops.vsum(eval_theory(m, p["theta"], p["state"]) * w)

        tape = GradTape()
        grads = backward(tape, loss(tape.watch(params)))
        fd = finite_diff_grad(lambda p: loss(p).item(), params, 1e-6)
        rel, small = grad_agreement(grads, fd)
        assert rel <= 1e-5 and small <= 1e-7


class TestLaplacian:
    def test_constant(self):
        np.testing.assert_array_equal(laplacian_5pt(np.full((4, 6), 2.0), 0.1), 0.0)

    def test_quadratic_interior(self):
        dx = 2 / 32
        i = np.arange(8, dtype=float)[:, None] * np.ones((1, 6))
        u = i ** 2 * dx ** 2
        out = laplacian_5pt(u, dx)
        np.testing.assert_allclose(out[1:-1, 1:-1], 2.0, rtol=1e-12)

    def test_matches_brute_force(self):
        u = np.random.default_rng(3).normal(size=(5, 5))
        np.testing.assert_array_equal(laplacian_5pt(u, 0.3), brute_laplacian(u, 0.3))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
    def test_linear(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        u, v = rng.normal(size=(2, 6, 7))
        lhs = laplacian_5pt(alpha * u + beta * v, 0.25)
        rhs = alpha * laplacian_5pt(u, 0.25) + beta * laplacian_5pt(v, 0.25)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max() + 1e-12)


class TestPrior:
    def test_degenerate_box(self):
        box = ThetaBox([1.0], [1.0 + 1e-12])
        assert sample_prior(box, np.random.default_rng(0)).values[0] == pytest.approx(1.0)

    def test_mean(self):
        box = ThetaBox([0.0], [2.0])
        draws = sample_prior(box, np.random.default_rng(1), size=100_000)
        sigma = 2 / np.sqrt(12 * 100_000)
        assert abs(draws.mean() - 1.0) < 3 * sigma

    def test_pendulum_box(self):
        box = TheoryModel(TheoryKind.PENDULUM).default_box()
        np.testing.assert_array_equal(box.lower, [8.0])
        np.testing.assert_array_equal(box.upper, [12.0])
        draws = sample_prior(box, np.random.default_rng(2), size=5000)
        assert np.all((draws >= 8) & (draws <= 12))

    def test_deterministic(self):
        box = TheoryModel(TheoryKind.LOTKA_VOLTERRA).default_box()
        a = sample_prior(box, np.random.default_rng(5), size=10)
        b = sample_prior(box, np.random.default_rng(5), size=10)
        assert a.tobytes() == b.tobytes()

    def test_invalid_box(self):
        with pytest.raises(ConfigurationError):
            ThetaBox([1.0, 0.0], [0.5, 1.0])


class TestClamp:
    box = ThetaBox([0.0, -np.pi], [2.0, np.pi], ("a", "c"))

    def test_inside_unchanged(self):
        assert clamp_to_box(np.array([1.0, 0.5]), self.box).tolist() == [1.0, 0.5]

    def test_above_upper(self):
        assert clamp_to_box(np.array([3.0, 0.0]), self.box)[0] == 2.0

    def test_both_sides(self):
        out = clamp_to_box(ThetaSample([-1.0, 7.0], ("a", "c")), self.box)
        np.testing.assert_array_equal(out.values, [0.0, np.pi])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_prior_draws_fixed_by_clamp_and_idempotent(self, seed):
        draw = sample_prior(self.box, np.random.default_rng(seed))
        clamped = clamp_to_box(draw, self.box)
        assert clamped.values.tobytes() == draw.values.tobytes()
        wild = np.random.default_rng(seed).normal(scale=10, size=2)
        once = clamp_to_box(wild, self.box)
        assert clamp_to_box(once, self.box).tobytes() == once.tobytes()
