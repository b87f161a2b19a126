import numpy as np
import pytest

from transferbound import attacks as A
from transferbound import models as M
from transferbound.forge import SurrogateEnsemble


def small_cfg(**kw):
    base = dict(gamma=0.1, beta_x=0.02, beta_eps=0.004, inner_T=2, n_ls=1,
                mu=1.0, seed=0, keep_iterates=True)
    base.update(kw)
    return A.AttackConfig(**base)


class TestPrimitives:
    def test_project_clamps_and_is_idempotent(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, 20)
        cand = x + rng.uniform(-1, 1, 20)
        p = A.project(cand, x, 0.1)
        assert np.max(np.abs(p - x)) <= 0.1 + 1e-15
        assert p.min() >= 0.0 and p.max() <= 1.0
        assert np.array_equal(A.project(p, x, 0.1), p)

    def test_project_zero_gamma_returns_x(self):
        x = np.array([0.2, 0.8])
        assert np.array_equal(A.project(x + 0.5, x, 0.0), x)

    def test_project_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            A.project(np.zeros(2), np.zeros(2), -0.1)

    def test_momentum_two_equal_steps(self):
        g = np.array([3.0, -1.0])
        m = A.momentum_step(np.zeros(2), g, 1.0)
        m = A.momentum_step(m, g, 1.0)
        assert np.allclose(m, 2 * g / 4.0, atol=1e-15)

    def test_momentum_vanishing_gradient_contributes_nothing(self):
        m0 = np.array([0.5, 0.5])
        m = A.momentum_step(m0, np.full(2, 1e-15), 0.9)
        assert np.allclose(m, 0.9 * m0, atol=1e-18)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            A.AttackConfig(gamma=-0.1)
        with pytest.raises(ValueError):
            A.AttackConfig(beta_x=0.0)
        with pytest.raises(ValueError):
            A.AttackConfig(inner_T=-1)
        with pytest.raises(ValueError):
            A.AttackConfig(method="pgd")
        assert A.AttackConfig(inner_T=4, beta_eps=0.01).rho_inf == pytest.approx(0.04)


class TestInnerMax:
    def test_per_model_takes_t_calls_and_stays_in_radius(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg(inner_T=5)
        kind = M.neg_cross_entropy(int(data.y_test[0]))
        w = ens.components[0][0]
        with M.GRAD_CALLS.scope() as tally:
            eps = A.inner_max_per_model(data.X_test[0], w, kind, cfg)
        assert tally.count == 5
        assert np.max(np.abs(eps)) <= 5 * cfg.beta_eps + 1e-15

    def test_per_model_matches_hand_run_on_linear_model(self, tiny_setup):
        # on a linear two-class model the ascent direction never flips,
        # so after T steps eps = T * beta_eps * sign(w_y - w_other)
        ens, data = tiny_setup
        w = ens.components[0][0]
        assert w.spec.arch == "linear"
        x, y = data.X_test[1], int(data.y_test[1])
        cfg = small_cfg(inner_T=4)
        kind = M.neg_cross_entropy(y)
        g0 = M.input_gradient(w, x, kind)
        eps = A.inner_max_per_model(x, w, kind, cfg)
        assert np.array_equal(eps, 4 * cfg.beta_eps * np.sign(g0))

    def test_global_costs_t_times_batch(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg(inner_T=3)
        kind = M.neg_cross_entropy(int(data.y_test[0]))
        batch = [c[0] for c in ens.components]
        with M.GRAD_CALLS.scope() as tally:
            A.inner_max_global(data.X_test[0], batch, kind, cfg)
        assert tally.count == 3 * len(batch)

    def test_global_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            A.inner_max_global(np.zeros(2), [], M.neg_cross_entropy(0), small_cfg())

    def test_fused_single_model_equals_direct_gradient(self, tiny_setup):
        ens, data = tiny_setup
        w = ens.components[1][2]
        kind = M.neg_cross_entropy(0)
        _, fused = A.fused_loss_and_grad([w], data.X_test[3], kind, small_cfg())
        direct = M.input_gradient(w, data.X_test[3], kind)
        assert np.max(np.abs(fused - direct)) < 1e-14


class TestCostModel:
    def test_published_reference_points(self):
        assert A.predict_ngrad("mi", 25, 5) == 125
        assert A.predict_ngrad("mi", 50, 5) == 250
        assert A.predict_ngrad("mi", 100, 5) == 500
        assert A.predict_ngrad("rap", 25, 5) == 1375
        assert A.predict_ngrad("rap", 50, 5) == 2750
        assert A.predict_ngrad("rap", 100, 5) == 3000
        assert A.predict_ngrad("drap", 25, 5) == 150
        assert A.predict_ngrad("drap", 50, 5) == 175
        assert A.predict_ngrad("drap", 100, 5) == 475
        assert A.predict_ngrad("cwa", 25, 5) == 250

    def test_explicit_late_start(self):
        # per-model method: below the late-start threshold every step is
        # one call, after it (T+1) calls
        assert A.predict_ngrad("drap", 12, 3, T=2, late_start=2) == 6 + 6 * 3
        assert A.predict_ngrad("drap", 5, 3, T=2, late_start=2) == 5
        assert A.predict_ngrad("rap", 10, 4, T=3, late_start=4) == 16 + 6 * 4 * 4
        assert A.predict_ngrad("flat_rap", 6, 2, T=1, late_start=6) == 12

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            A.predict_ngrad("pgd", 10, 2)


class TestRunners:
    def test_drap_budget_and_accounting(self, quad_setup):
        ens, data = quad_setup
        cfg = small_cfg(inner_T=3, n_ls=1)
        x, y = data.X_test[0], int(data.y_test[0])
        st = A.run_drap(x, y, ens, cfg)
        K, I, n = ens.size, ens.num_components, ens.snapshots_per_component
        expect = cfg.n_ls * I + (K - cfg.n_ls * I) * (cfg.inner_T + 1)
        assert st.grad_calls == st.predicted_grad_calls == expect
        assert st.grad_calls == A.predict_ngrad("drap", K, I, T=3, late_start=1)
        assert len(st.trace) == K
        for xh in st.iterates:
            assert np.max(np.abs(xh - x)) <= cfg.gamma + 1e-12
            assert xh.min() >= 0.0 and xh.max() <= 1.0

    def test_drap_zero_gamma_is_identity(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg(gamma=0.0)
        x = data.X_test[2]
        st = A.run_drap(x, int(data.y_test[2]), ens, cfg)
        for xh in st.iterates:
            assert np.array_equal(xh, x)

    def test_drap_rejects_wrong_n_iter_and_big_n_ls(self, tiny_setup):
        ens, data = tiny_setup
        x, y = data.X_test[0], int(data.y_test[0])
        with pytest.raises(ValueError, match="n_iter"):
            A.run_drap(x, y, ens, small_cfg(n_iter=ens.size + 1))
        with pytest.raises(ValueError, match="n_ls"):
            A.run_drap(x, y, ens, small_cfg(n_ls=ens.snapshots_per_component + 1))

    def test_drap_deterministic(self, tiny_setup):
        ens, data = tiny_setup
        x, y = data.X_test[4], int(data.y_test[4])
        a = A.run_drap(x, y, ens, small_cfg())
        b = A.run_drap(x, y, ens, small_cfg())
        assert a.x_hat.tobytes() == b.x_hat.tobytes()

    def test_drap_attack_actually_degrades_true_class(self, quad_setup):
        ens, data = quad_setup
        cfg = small_cfg(inner_T=3, n_ls=1)
        kind_hits = 0
        for idx in range(10):
            x, y = data.X_test[idx], int(data.y_test[idx])
            st = A.run_drap(x, y, ens, cfg)
            before = np.mean([M.loss(w, x, M.bounded_error(y))
                              for w in ens.all_members()])
            after = np.mean([M.loss(w, st.x_hat, M.bounded_error(y))
                             for w in ens.all_members()])
            kind_hits += after > before
        assert kind_hits >= 8  # raising 1 - p_y means the attack bites

    def test_late_start_everything_reduces_to_ensemble_momentum(self, quad_setup):
        ens, data = quad_setup
        n = ens.snapshots_per_component
        x, y = data.X_test[1], int(data.y_test[1])
        drap = A.run_drap(x, y, ens, small_cfg(n_ls=n, inner_T=5))
        sweep = A.run_mifgsm(x, y, ens, small_cfg())
        assert len(drap.iterates) == len(sweep.iterates)
        for a, b in zip(drap.iterates, sweep.iterates):
            assert a.tobytes() == b.tobytes()
        assert drap.grad_calls == sweep.grad_calls == ens.size

    def test_single_model_single_step_mifgsm_is_fgsm(self, tiny_setup):
        ens, data = tiny_setup
        w = ens.components[0][0]
        x, y = data.X_test[5], int(data.y_test[5])
        cfg = small_cfg(n_iter=1, mu=1.0)
        st = A.run_mifgsm(x, y, [w], cfg)
        g = M.input_gradient(w, x, M.neg_cross_entropy(y))
        fgsm = A.project(x - cfg.beta_x * np.sign(g), x, cfg.gamma)
        assert np.array_equal(st.x_hat, fgsm)

    def test_batch_baselines_need_n_iter(self, tiny_setup):
        ens, data = tiny_setup
        with pytest.raises(ValueError, match="n_iter"):
            A.run_ifgsm(data.X_test[0], 0, [ens.components[0][0]], small_cfg())

    def test_rap_cost_branches(self, tiny_setup):
        ens, data = tiny_setup
        batch = [c[0] for c in ens.components]
        x, y = data.X_test[6], int(data.y_test[6])
        st = A.run_rap(x, y, batch, small_cfg(n_iter=4, n_ls=2, inner_T=3))
        assert st.grad_calls == 2 * 2 + 2 * 4 * 2  # ls iters + (T+1)*I iters
        st2 = A.run_rap(x, y, batch, small_cfg(n_iter=2, n_ls=5, inner_T=3))
        assert st2.grad_calls == 2 * 2  # never reaches the late start

    def test_flat_rap_and_flat_cwa_costs(self, quad_setup):
        ens, data = quad_setup
        I = ens.num_components
        x, y = data.X_test[2], int(data.y_test[2])
        fr = A.run_flat_rap(x, y, ens, small_cfg(n_iter=6, n_ls=2, inner_T=2))
        assert fr.grad_calls == 2 * I + 4 * 3 * I
        fc = A.run_flat_cwa(x, y, ens, small_cfg(n_iter=6))
        assert fc.grad_calls == 6 * 2 * I

    def test_all_methods_respect_budget(self, quad_setup):
        ens, data = quad_setup
        x, y = data.X_test[7], int(data.y_test[7])
        gamma = 0.07
        runs = [
            A.run_drap(x, y, ens, small_cfg(gamma=gamma)),
            A.run_ifgsm(x, y, ens, small_cfg(gamma=gamma)),
            A.run_mifgsm(x, y, ens, small_cfg(gamma=gamma)),
            A.run_rap(x, y, ens.pretrained, small_cfg(gamma=gamma, n_iter=3)),
            A.run_flat_rap(x, y, ens, small_cfg(gamma=gamma, n_iter=4)),
            A.run_flat_cwa(x, y, ens, small_cfg(gamma=gamma, n_iter=4)),
        ]
        for st in runs:
            for xh in st.iterates:
                assert np.max(np.abs(xh - x)) <= gamma + 1e-12
                assert xh.min() >= -0.0 and xh.max() <= 1.0

    def test_input_outside_unit_box_rejected(self, tiny_setup):
        ens, _ = tiny_setup
        with pytest.raises(ValueError, match="benign"):
            A.run_drap(np.array([0.5, 1.5]), 0, ens, small_cfg())

    def test_dispatch_matches_direct_runners(self, quad_setup):
        ens, data = quad_setup
        x, y = data.X_test[9], int(data.y_test[9])
        cfg = small_cfg(method="drap")
        via = A.run_attack(x, y, ens, cfg)
        direct = A.run_drap(x, y, ens, small_cfg(method="drap"))
        assert via.x_hat.tobytes() == direct.x_hat.tobytes()
        cfg_rap = small_cfg(method="rap", n_iter=3)
        assert A.run_attack(x, y, ens, cfg_rap).method == "rap"

    def test_targeted_objective_pulls_target_class(self, quad_setup):
        ens, data = quad_setup
        x, y = data.X_test[3], int(data.y_test[3])
        target = (y + 1) % 3
        cfg = small_cfg(gamma=0.25, beta_x=0.05, targeted=True, inner_T=0)
        st = A.run_drap(x, target, ens, cfg)
        before = np.mean([M.loss(w, x, M.targeted_cross_entropy(target))
                          for w in ens.all_members()])
        after = np.mean([M.loss(w, st.x_hat, M.targeted_cross_entropy(target))
                         for w in ens.all_members()])
        assert after < before

    def test_per_model_beats_shared_inner_most_of_the_time(self, quad_setup):
        ens, data = quad_setup
        cfg = small_cfg(inner_T=4)
        wins, total = 0, 0
        for idx in range(12):
            x, y = data.X_test[idx], int(data.y_test[idx])
            kind = M.neg_cross_entropy(y)
            batch = [c[idx % ens.snapshots_per_component] for c in ens.components]
            shared = A.inner_max_global(x, batch, kind, cfg)
            for w in batch:
                own = A.inner_max_per_model(x, w, kind, cfg)
                wins += M.loss(w, x + own, kind) >= M.loss(w, x + shared, kind)
                total += 1
        assert wins / total >= 0.85


class TestTrace:
    def test_trace_csv_shape(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg()
        st = A.run_drap(data.X_test[0], int(data.y_test[0]), ens, cfg)
        text = A.trace_to_csv(st, cfg)
        lines = text.strip().split("\n")
        assert lines[0].startswith("# method=drap")
        assert lines[1] == "iter,component,snapshot,loss_pre,loss_post,grad_calls"
        assert len(lines) == 2 + ens.size
        first = lines[2].split(",")
        assert first[0] == "0" and len(first) == 6

    def test_trace_grad_calls_column_is_cumulative(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg()
        st = A.run_drap(data.X_test[1], int(data.y_test[1]), ens, cfg)
        counts = [row.grad_calls for row in st.trace]
        assert all(b >= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] == st.grad_calls

    def test_trace_disabled(self, tiny_setup):
        ens, data = tiny_setup
        cfg = small_cfg(record_trace=False)
        st = A.run_drap(data.X_test[0], int(data.y_test[0]), ens, cfg)
        assert st.trace is None
        with pytest.raises(ValueError):
            A.trace_to_csv(st, cfg)
