import numpy as np
import pytest

from gradcert.benchmarks import build_power
from gradcert.learner import (
    RolloutBatch,
    TrainConfig,
    _BatchedEnv,
    collect_rollouts,
    compute_advantages,
    conjugate_gradient,
    discounted_returns,
    grad_from_output_grads,
    logprob_grad_rows,
    mean_kl,
    natural_step,
    param_grad_penalty,
    smooth_penalty_and_grad,
    smoothness_penalties,
    surrogate_loss,
    train,
)
from gradcert.policy import MultiAgentPolicy, PolicyNet, lipschitz_upper


def tiny_net(rng, sizes=(3, 4, 2), mask=None, scale=1.0):
    return PolicyNet.random(list(sizes), rng, input_mask=mask, scale=scale)


def fd_param_grad(fn, net, step=1e-6):
    theta = net.param_vector()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy(); up[i] += step
        dn = theta.copy(); dn[i] -= step
        g[i] = (fn(net.with_params(up)) - fn(net.with_params(dn))) / (2 * step)
    return g


class TestBackprop:
    def test_first_order_matches_fd(self):
        rng = np.random.default_rng(0)
        net = tiny_net(rng)
        X = rng.normal(size=(6, 3))
        Gout = rng.normal(size=(6, 2))
        g = grad_from_output_grads(net, X, Gout)
        g_fd = fd_param_grad(lambda n: float(np.sum(Gout * n.forward(X))), net)
        np.testing.assert_allclose(g, g_fd, atol=1e-7)

    def test_smooth_penalty_value_and_grad_match_fd(self):
        rng = np.random.default_rng(1)
        for sizes in [(3, 2), (3, 4, 2), (2, 5, 4, 1)]:
            net = tiny_net(rng, sizes)
            X = rng.normal(size=(4, sizes[0]))
            val, grad = smooth_penalty_and_grad(net, X)
            val_direct = sum(float(np.sum(net.jacobian(x) ** 2)) for x in X)
            assert val == pytest.approx(val_direct, rel=1e-12)
            g_fd = fd_param_grad(
                lambda n: sum(float(np.sum(n.jacobian(x) ** 2)) for x in X), net)
            np.testing.assert_allclose(grad, g_fd, atol=5e-6)

    def test_smooth_penalty_masked_net(self):
        rng = np.random.default_rng(2)
        mask = np.array([True, False, True])
        net = tiny_net(rng, (3, 4, 1), mask=mask)
        X = rng.normal(size=(3, 3))
        _, grad = smooth_penalty_and_grad(net, X)
        g_fd = fd_param_grad(
            lambda n: sum(float(np.sum(n.jacobian(x) ** 2)) for x in X), net)
        np.testing.assert_allclose(grad, g_fd, atol=5e-6)

    def test_multiagent_concatenation(self):
        rng = np.random.default_rng(3)
        pol = MultiAgentPolicy((tiny_net(rng, (3, 4, 1)), tiny_net(rng, (3, 2, 1))))
        X = rng.normal(size=(5, 3))
        Gout = rng.normal(size=(5, 2))
        g = grad_from_output_grads(pol, X, Gout)
        g_fd = fd_param_grad(lambda n: float(np.sum(Gout * n.forward(X))), pol)
        np.testing.assert_allclose(g, g_fd, atol=1e-7)

    def test_logprob_rows_match_fd(self):
        rng = np.random.default_rng(4)
        net = tiny_net(rng)
        X = rng.normal(size=(3, 3))
        U = rng.normal(size=(3, 2))
        std = 0.4
        rows = logprob_grad_rows(net, X, U, std)

        def logp(n, t):
            mu = n.forward(X[t])
            return float(-np.sum((U[t] - mu) ** 2) / (2 * std**2))

        for t in range(3):
            np.testing.assert_allclose(rows[t], fd_param_grad(lambda n: logp(n, t), net),
                                       atol=1e-6)

    def test_param_grad_penalty_value(self):
        rng = np.random.default_rng(5)
        net = tiny_net(rng, (2, 3, 1))
        x = rng.normal(size=2)
        val = param_grad_penalty(net, x[None, :])
        # direct: squared norm of d pi / d theta via FD on the single output
        theta = net.param_vector()
        g = np.zeros_like(theta)
        step = 1e-6
        for i in range(theta.size):
            up = theta.copy(); up[i] += step
            dn = theta.copy(); dn[i] -= step
            g[i] = (net.with_params(up).forward(x)[0]
                    - net.with_params(dn).forward(x)[0]) / (2 * step)
        assert val == pytest.approx(float(g @ g), rel=1e-5, abs=1e-8)


class TestAdvantages:
    def test_discounted_returns(self):
        r = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose(discounted_returns(r, 0.5),
                                   [1 + 0.5 * (2 + 0.5 * 3), 2 + 1.5, 3.0])

    def test_two_state_deterministic_mdp_advantage(self):
        # deterministic 2-state chain: s0 -> s1 -> s1 (absorbing), rewards
        # r(s0) = 1, r(s1) = 0.5; value function exactly linear in one-hot
        # features, so the least-squares baseline recovers it and advantages
        # match r + rho V(s') - V(s) to machine precision (here 0: on-policy).
        rho = 0.9
        T = 40
        states = np.zeros((T, 2))
        rewards = np.empty(T)
        states[0] = [1.0, 0.0]
        rewards[0] = 1.0
        for t in range(1, T):
            states[t] = [0.0, 1.0]
            rewards[t] = 0.5
        returns, adv = compute_advantages(states, rewards, [slice(0, T)], rho)
        # brute-force value of s1 over the remaining horizon varies with time,
        # so check the exact identity on the truncated-return definition
        V_fit_s1 = returns[1:][np.argsort(np.abs(np.arange(1, T) - T // 2))[:1]]
        # the advantage of the executed action under the fitted baseline:
        # adv_t = G_t - V(s_t) and G_t = r_t + rho G_{t+1}
        np.testing.assert_allclose(returns[:-1], rewards[:-1] + rho * returns[1:],
                                   atol=1e-10)
        # baseline is exact for state s0 (single visit): zero advantage there
        assert adv[0] == pytest.approx(0.0, abs=1e-10)

    def test_exact_linear_value_recovery(self):
        # two trajectories over two one-hot states with state-constant returns:
        # the linear baseline interpolates exactly, advantages vanish
        rho = 1.0
        states = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        rewards = np.array([2.0, 1.0, 2.0, 1.0])
        returns, adv = compute_advantages(states, rewards,
                                          [slice(0, 2), slice(2, 4)], rho)
        np.testing.assert_allclose(returns, [3.0, 1.0, 3.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(adv, 0.0, atol=1e-10)


def make_batch(rng, net, n=20, std=0.3):
    X = rng.normal(size=(n, net.n_in))
    mu = net.forward(X)
    U = mu + std * rng.normal(size=mu.shape)
    rewards = rng.normal(size=n)
    returns, adv = compute_advantages(X, rewards, [slice(0, n)], 0.95)
    return RolloutBatch(states=X, actions=U, rewards=rewards, returns=returns,
                        advantages=adv, logprob_mean=mu, traj_slices=[slice(0, n)],
                        std=std)


class TestSurrogate:
    def test_identity_policy_sums_advantages(self):
        rng = np.random.default_rng(6)
        net = tiny_net(rng)
        batch = make_batch(rng, net)
        assert surrogate_loss(batch, net) == pytest.approx(float(batch.advantages.sum()))

    def test_zero_advantages(self):
        rng = np.random.default_rng(7)
        net = tiny_net(rng)
        batch = make_batch(rng, net)
        batch.advantages[:] = 0.0
        assert surrogate_loss(batch, net) == 0.0

    def test_hand_built_ratios(self):
        rng = np.random.default_rng(8)
        net = tiny_net(rng, (2, 1))
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        mu_old = net.forward(X)
        U = mu_old + np.array([[0.2], [-0.1]])
        adv = np.array([2.0, -1.0])
        batch = RolloutBatch(states=X, actions=U, rewards=adv, returns=adv,
                             advantages=adv, logprob_mean=mu_old,
                             traj_slices=[slice(0, 2)], std=0.5)
        shifted = net.with_params(net.param_vector() * 0.9)
        mu_new = shifted.forward(X)
        ratios = np.exp((np.sum((U - mu_old) ** 2, 1) - np.sum((U - mu_new) ** 2, 1))
                        / (2 * 0.25))
        assert surrogate_loss(batch, shifted) == pytest.approx(float(ratios @ adv))


class TestPenalties:
    def test_constant_policy_zero_smooth(self):
        net = PolicyNet((np.zeros((1, 2)),), (np.zeros(1),), np.ones(2, dtype=bool))
        rng = np.random.default_rng(9)
        batch = make_batch(rng, net)
        l_exp, l_smo = smoothness_penalties(batch, net)
        assert l_smo == 0.0

    def test_matched_actions_zero_explore(self):
        # constant actions equal to the constant policy output: zero penalty
        net = PolicyNet((np.zeros((1, 2)),), (np.zeros(1),), np.ones(2, dtype=bool))
        X = np.zeros((4, 2))
        U = np.zeros((4, 1))
        batch = RolloutBatch(states=X, actions=U, rewards=np.zeros(4),
                             returns=np.zeros(4), advantages=np.zeros(4),
                             logprob_mean=net.forward(X), traj_slices=[slice(0, 4)],
                             std=0.1)
        l_exp, _ = smoothness_penalties(batch, net)
        assert l_exp == 0.0

    def test_linear_policy_closed_form(self):
        K = np.array([[0.5, -1.0]])
        net = PolicyNet((K,), (np.zeros(1),), np.ones(2, dtype=bool))
        X = np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 1.0]])
        U = np.array([[0.3], [0.1], [-0.2]])
        batch = RolloutBatch(states=X, actions=U, rewards=np.zeros(3),
                             returns=np.zeros(3), advantages=np.zeros(3),
                             logprob_mean=net.forward(X), traj_slices=[slice(0, 3)],
                             std=0.1)
        l_exp, l_smo = smoothness_penalties(batch, net)
        mu = X @ K.T
        expect_exp = float(np.sum((U[:-1] - mu[1:]) ** 2))
        assert l_exp == pytest.approx(expect_exp)
        assert l_smo == pytest.approx(3 * float(np.sum(K**2)))


class TestNaturalStep:
    def test_cg_matches_direct_solve(self):
        rng = np.random.default_rng(10)
        A = rng.normal(size=(8, 8))
        H = A @ A.T + 0.5 * np.eye(8)
        b = rng.normal(size=8)
        x, ok = conjugate_gradient(lambda v: H @ v, b, iters=100, tol=1e-12)
        assert ok
        np.testing.assert_allclose(x, np.linalg.solve(H, b), atol=1e-8)

    def test_identity_fisher_direction(self):
        # H = I: direction is the gradient, step sqrt(2 delta / ||g||^2)
        g = np.array([3.0, 4.0])
        d, ok = conjugate_gradient(lambda v: v, g, iters=10, tol=1e-12)
        assert ok
        np.testing.assert_allclose(d, g)

    def test_kl_never_exceeds_budget(self):
        rng = np.random.default_rng(11)
        net = tiny_net(rng)
        batch = make_batch(rng, net, n=40)
        cfg = TrainConfig(iters=1, horizon_steps=4, substeps=1, delta_kl=5e-3,
                          w1=1e-3, w2=1e-3)
        new_net, info, _ = natural_step(net, batch, cfg)
        if info.accepted:
            assert info.kl <= 5e-3 * (1 + 1e-9)
            assert mean_kl(new_net, net, batch.states, batch.std) <= 5e-3 * (1 + 1e-9)

    def test_zero_kl_budget_no_step(self):
        rng = np.random.default_rng(12)
        net = tiny_net(rng)
        batch = make_batch(rng, net, n=30)
        cfg = TrainConfig(iters=1, delta_kl=1e-18)
        new_net, info, _ = natural_step(net, batch, cfg)
        np.testing.assert_allclose(new_net.param_vector(), net.param_vector(),
                                   atol=1e-7)


def small_power_cfg(**kw):
    base = dict(iters=8, n_rollouts=2, horizon_steps=30, substeps=4, h=5e-3,
                discount=0.98, w1=1e-4, w2=1e-4, l_cert=0.5, delta_kl=5e-3,
                std_init=0.2, seed=3, x0_std=0.1, reward_scale=1e-3,
                checkpoint_every=4)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_hard_threshold_invariant_every_iteration(self):
        bench = build_power(4, "chain")
        from gradcert.learner import default_policy
        net = default_policy(bench, hidden=4, rng=np.random.default_rng(0), scale=1.5)
        res = train(bench, net, small_power_cfg(mode="hard_threshold"))
        for row in res.history:
            assert row["lipschitz"] <= 0.5 * (1 + 1e-9)
        assert lipschitz_upper(res.net) <= 0.5 * (1 + 1e-9)

    def test_determinism_same_seed(self):
        bench = build_power(3, "chain")
        from gradcert.learner import default_policy
        net = default_policy(bench, hidden=3, rng=np.random.default_rng(1))
        r1 = train(bench, net, small_power_cfg(iters=4))
        r2 = train(bench, net, small_power_cfg(iters=4))
        np.testing.assert_array_equal(r1.column("mean_reward"), r2.column("mean_reward"))
        np.testing.assert_array_equal(r1.net.param_vector(), r2.net.param_vector())

    def test_soft_penalty_adapts_w2(self):
        bench = build_power(3, "chain")
        from gradcert.learner import default_policy
        net = default_policy(bench, hidden=4, rng=np.random.default_rng(2), scale=3.0)
        res = train(bench, net, small_power_cfg(mode="soft_penalty", l_cert=0.2,
                                                iters=4))
        w2s = res.column("w2")
        assert w2s[-1] > small_power_cfg().w2  # violations doubled the weight

    def test_checkpoints_and_monitor(self):
        bench = build_power(3, "chain")
        from gradcert.learner import default_policy
        net = default_policy(bench, hidden=3, rng=np.random.default_rng(4))
        res = train(bench, net, small_power_cfg(iters=8, checkpoint_every=4))
        assert set(res.checkpoints) == {0, 4, 8}
        assert len(res.monitor) == 8
        bounds = res.monitor.sign_pattern()
        assert bounds.shape == (3, 6)


class TestPenaltyWeightSizing:
    def test_weights_put_penalties_in_band(self):
        from gradcert.learner import suggest_penalty_weights, smoothness_penalties
        rng = np.random.default_rng(15)
        net = tiny_net(rng, (3, 5, 2))
        batch = make_batch(rng, net, n=60)
        w1, w2 = suggest_penalty_weights(batch, net, target=0.03)
        sur = abs(float(batch.advantages.sum()))
        l_exp, l_smo = smoothness_penalties(batch, net)
        assert 0.01 * sur <= w1 * l_exp <= 0.05 * sur
        assert 0.01 * sur <= w2 * l_smo <= 0.05 * sur
