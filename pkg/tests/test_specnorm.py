import numpy as np
import pytest

from smoothcritic.autodiff import Tensor, concat
from smoothcritic.errors import ContractError
from smoothcritic.layers import LinearLayer, NetworkSpec, build_critic_head
from smoothcritic.specnorm import (SpectralState, exact_sigma_max,
                                   lipschitz_bound, power_iteration_step,
                                   singular_value_report)

from conftest import assert_grads_close


def converge_sn(head, iters=200):
    for layer in head.linear_layers():
        if layer.sn is not None:
            layer.sn.update(layer.weight.data, iters=iters)


class TestPowerIteration:
    def test_diagonal_matrix(self, rng):
        w = np.diag([3.0, 1.0])
        state = SpectralState.create(rng, 2, 2)
        state.update(w, iters=50)
        assert abs(state.sigma_hat - 3.0) < 1e-6

    def test_isotropic_one_step(self, rng):
        c = 2.5
        w = c * np.eye(4)
        state = SpectralState.create(rng, 4, 4)
        power_iteration_step(w, state)
        assert abs(state.sigma_hat - c) < 1e-12

    def test_random_matrix_vs_svd(self, rng):
        w = rng.standard_normal((64, 64))
        state = SpectralState.create(rng, 64, 64)
        state.update(w, iters=100)
        exact = exact_sigma_max(w)
        assert abs(state.sigma_hat - exact) / exact < 1e-3

    def test_zero_matrix_floored(self, rng):
        state = SpectralState.create(rng, 3, 3)
        power_iteration_step(np.zeros((3, 3)), state)
        assert state.sigma_hat == SpectralState.SIGMA_FLOOR
        assert np.isfinite(state.u).all() and np.isfinite(state.v).all()

    def test_unit_norm_vectors_maintained(self, rng):
        w = rng.standard_normal((7, 5))
        state = SpectralState.create(rng, 7, 5)
        for _ in range(20):
            power_iteration_step(w, state)
            assert abs(np.linalg.norm(state.u) - 1.0) < 1e-9
            assert abs(np.linalg.norm(state.v) - 1.0) < 1e-9

    def test_never_overestimates(self, rng):
        for _ in range(50):
            w = rng.standard_normal((rng.integers(2, 20), rng.integers(2, 20)))
            state = SpectralState.create(rng, w.shape[0], w.shape[1])
            for _ in range(10):
                power_iteration_step(w, state)
                assert state.sigma_hat <= exact_sigma_max(w) + 1e-9

    def test_monotone_for_spd(self, rng):
        a = rng.standard_normal((6, 6))
        w = a @ a.T + 0.1 * np.eye(6)  # SPD
        state = SpectralState.create(rng, 6, 6)
        prev = 0.0
        for _ in range(30):
            power_iteration_step(w, state)
            assert state.sigma_hat >= prev - 1e-12
            prev = state.sigma_hat


class TestExactSigmaMax:
    def test_diagonal(self):
        assert exact_sigma_max(np.diag([2.0, 5.0])) == 5.0

    def test_rank_one(self, rng):
        u = rng.standard_normal(6)
        v = rng.standard_normal(4)
        u *= 2.0 / np.linalg.norm(u)
        v *= 3.0 / np.linalg.norm(v)
        assert abs(exact_sigma_max(np.outer(u, v)) - 6.0) < 1e-10

    def test_matches_eigensolve(self, rng):
        w = rng.standard_normal((9, 13))
        eig = np.sqrt(np.max(np.linalg.eigvalsh(w.T @ w)))
        assert abs(exact_sigma_max(w) - eig) < 1e-8


class TestSnForward:
    def test_scaled_identity_normalizes_to_identity(self, rng):
        layer = LinearLayer(2.0 * np.eye(4), rng.standard_normal(4),
                            SpectralState.create(rng, 4, 4))
        layer.sn.update(layer.weight.data, iters=50)
        x = rng.standard_normal((3, 4))
        out = layer.forward(Tensor(x)).data
        np.testing.assert_allclose(out, x + layer.bias.data, atol=1e-9)

    def test_effective_weight_never_expands(self, rng):
        layer = LinearLayer.create(rng, 8, 8, sn_rng=rng)
        layer.weight.data *= 5.0
        layer.sn.update(layer.weight.data, iters=200)
        w_eff = layer.effective_weight()
        for _ in range(1000):
            x = rng.standard_normal(8)
            ratio = np.linalg.norm(w_eff @ x) / np.linalg.norm(x)
            assert ratio <= 1.0 + 1e-6

    def test_effective_top_singular_value_near_one(self, rng):
        layer = LinearLayer.create(rng, 10, 6, sn_rng=rng)
        layer.sn.update(layer.weight.data, iters=500)
        sigma = exact_sigma_max(layer.effective_weight())
        assert 1.0 - 1e-3 <= sigma <= 1.0 + 1e-3

    def test_idempotent_on_unit_norm_layer(self, rng):
        layer = LinearLayer.create(rng, 6, 6, sn_rng=rng)
        layer.sn.update(layer.weight.data, iters=500)
        # fold the normalization in, renormalize, and compare forwards
        folded = LinearLayer(layer.effective_weight(), layer.bias.data.copy(),
                             SpectralState.create(rng, 6, 6))
        folded.sn.update(folded.weight.data, iters=500)
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(folded.forward(Tensor(x)).data,
                                   layer.forward(Tensor(x)).data, atol=1e-9)

    def test_gradient_through_normalization(self, rng):
        layer = LinearLayer.create(rng, 5, 7, sn_rng=rng)
        layer.sn.update(layer.weight.data, iters=20)
        x = Tensor(rng.standard_normal((3, 5)))
        assert_grads_close(lambda: layer.forward(x).square().mean(),
                           [layer.weight, layer.bias])


class TestLipschitzBound:
    def test_plain_product(self, rng):
        spec = NetworkSpec("mlp", 1, 4)
        head = build_critic_head(spec, 2, 2, rng)
        w1, w2 = head.linear_layers()
        # rescale to known operator norms 2 and 3
        w1.weight.data *= 2.0 / exact_sigma_max(w1.weight.data)
        w2.weight.data *= 3.0 / exact_sigma_max(w2.weight.data)
        assert abs(lipschitz_bound(head) - 6.0) < 1e-9

    def test_sn_interior_chain_near_one(self, rng):
        spec = NetworkSpec("mlp", 3, 8, sn_policy="intermediate")
        head = build_critic_head(spec, 3, 1, rng)
        converge_sn(head)
        interior = 1.0
        for layer in head.linear_layers():
            if layer.sn is not None:
                interior *= exact_sigma_max(layer.effective_weight())
        assert interior <= 1.0 + 1e-3

    def test_empirical_never_exceeds_bound(self, rng):
        spec = NetworkSpec("mlp", 2, 8, sn_policy="intermediate")
        head = build_critic_head(spec, 3, 2, rng)
        converge_sn(head)
        bound = lipschitz_bound(head)
        feature = rng.standard_normal((1, 3))
        worst = 0.0
        for _ in range(10_000 // 10):
            a1 = rng.uniform(-1, 1, (1, 2))
            a2 = rng.uniform(-1, 1, (1, 2))
            q1 = head.forward(concat(Tensor(feature), Tensor(a1), axis=1)).item()
            q2 = head.forward(concat(Tensor(feature), Tensor(a2), axis=1)).item()
            worst = max(worst, abs(q1 - q2) / np.linalg.norm(a1 - a2))
        assert worst <= bound

    def test_modern_conservative_exceeds_ignore(self, rng):
        spec = NetworkSpec("modern", 3, 8, 12)
        head = build_critic_head(spec, 3, 1, rng)
        assert lipschitz_bound(head, "conservative") >= lipschitz_bound(head, "ignore")

    def test_unknown_mode_rejected(self, rng):
        head = build_critic_head(NetworkSpec("mlp", 1, 4), 2, 1, rng)
        with pytest.raises(ContractError):
            lipschitz_bound(head, "bogus")


class TestReport:
    def test_row_count_equals_linear_layers(self, rng):
        spec = NetworkSpec("modern", 3, 8, 12, "intermediate")
        head = build_critic_head(spec, 4, 1, rng)
        rows = singular_value_report(head)
        assert len(rows) == len(head.linear_layers()) == 6

    def test_sigma_hat_below_exact(self, rng):
        spec = NetworkSpec("mlp", 4, 8, sn_policy="intermediate")
        head = build_critic_head(spec, 4, 1, rng)
        head.power_step()
        for row in singular_value_report(head):
            if row["sn_active"]:
                assert row["sigma_hat"] <= row["sigma_exact_raw"] + 1e-9
