import numpy as np
import pytest

from nonexp_hjb.discount import DiscountModel
from nonexp_hjb.hjb import (DivergentObjective, SolverConfig, TrainingDiverged, anneal_offset,
                            hjb_residual, learning_rate, policy, q_values, solution_grid, train)
from nonexp_hjb.tasks import constant_reward_task, investment_task, line_task
from nonexp_hjb.valuenet import ValueNet

CONST = constant_reward_task(0.1)
LINE = line_task()
INV = investment_task()
HYP = DiscountModel.hyperbolic(3.0, 1.0)
EXP = DiscountModel.exponential(0.2)


def constant_net(state_dim, c=0.0, width=4):
    """Network whose output is exactly ``c``: zero weights, output bias ``c``."""
    net = ValueNet(state_dim, width, params=np.zeros(ValueNet(state_dim, width).params.size))
    p = net.params.copy()
    p[-1] = c
    net.params = p
    return net


class AnalyticNet:
    """Stand-in with the network interface and V = a + b t, exact derivatives."""

    def __init__(self, a, b, state_dim=1):
        self.a, self.b, self.state_dim = a, b, state_dim

    def eval_with_derivatives(self, x, t, pairs=None, keep_cache=False):
        from nonexp_hjb.valuenet import DerivativeBundle
        n = len(x)
        t = np.broadcast_to(np.asarray(t, float), (n,))
        return DerivativeBundle(value=(self.a + self.b * t)[:, None],
                                grad_x=np.zeros((n, self.state_dim, 1)),
                                dV_dt=np.full((n, 1), self.b),
                                hess_xx=np.zeros((n, self.state_dim, self.state_dim, 1)),
                                cache=None, chain=None)


def test_q_values_constant_net():
    net = constant_net(1, 0.7)
    x = np.array([[0.2], [-0.6]])
    q = q_values(net, HYP, LINE, x, np.array([0.0, 3.0]))
    assert np.allclose(q, LINE.reward_table(x))


def test_investment_q_difference_constant_net():
    net = constant_net(2, 1.0)
    q = q_values(net, HYP, INV, np.array([[0.5, 0.4]]), 1.0)[0]
    assert q[0] - q[1] == pytest.approx(0.1)


def test_residual_examples():
    x = np.linspace(0, 1, 7)[:, None]
    t = np.linspace(0, 10, 7)
    # V = 0.05 (1 + t) solves the hyperbolic constant-reward problem exactly
    e, _ = hjb_residual(AnalyticNet(0.05, 0.05), HYP, CONST, x, t)
    assert np.allclose(e, 0.0, atol=1e-15)
    e, _ = hjb_residual(constant_net(1, 0.5), EXP, CONST, x, t)
    assert np.allclose(e, 0.0, atol=1e-15)
    e, u = hjb_residual(constant_net(1, 0.0), HYP, LINE, np.array([[0.5]]), 0.0)
    assert e[0] == pytest.approx(0.5) and LINE.actions[u[0]] == "stay"


def test_ties_go_to_lowest_index():
    _, u = hjb_residual(constant_net(1, 0.3), HYP, CONST, np.array([[0.5]]), 1.0)
    assert u[0] == 0


def test_argmax_invariant_under_positive_scaling():
    rng = np.random.default_rng(0)
    net = ValueNet(1, 8, rng=rng)
    x = rng.uniform(-1, 1, (200, 1))
    t = rng.uniform(0, 10, 200)
    q = q_values(net, HYP, LINE, x, t)
    assert np.array_equal(np.argmax(q, axis=1), np.argmax(3.7 * q, axis=1))
    assert np.array_equal(np.argmax(q, axis=1), policy(net, HYP, LINE, x, t))


def test_stay_action_has_no_diffusion_term():
    rng = np.random.default_rng(1)
    net = ValueNet(1, 8, rng=rng)
    x = np.array([[0.1]])
    b = net.eval_with_derivatives(x, np.array([2.0]), pairs=[(0, 0)]).squeeze()
    q = q_values(net, HYP, LINE, x, 2.0)[0]
    assert q[1] == pytest.approx(LINE.reward(x[0], "stay") + b.dV_dt[0])


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(batch_size=0)
    with pytest.raises(ValueError):
        SolverConfig(episodes=10, anneal_episodes=20)
    with pytest.raises(ValueError):
        SolverConfig(precision="float16")
    with pytest.raises(ValueError, match="unknown"):
        SolverConfig.from_dict({"batchsize": 3})
    c = SolverConfig.full("investment")
    assert (c.episodes, c.batch_size, c.lr, c.lam_reparam, c.anneal_offset_init,
            c.anneal_episodes) == (125_000, 10_000, 0.003, 0.2, 50.0, 50_000)
    assert SolverConfig.full("line").episodes == 100_000
    assert SolverConfig.from_dict(c.to_dict()) == c


def test_anneal_schedule():
    c = SolverConfig(episodes=100, anneal_episodes=40, anneal_offset_init=50.0)
    offs = [anneal_offset(c, k) for k in range(100)]
    assert offs[0] == 50.0
    assert all(a > b for a, b in zip(offs[:40], offs[1:41]))
    assert all(o == 0.0 for o in offs[40:])


def test_learning_rate_schedule():
    c = SolverConfig(episodes=100, anneal_episodes=40)
    assert all(learning_rate(c, k) == 0.003 for k in range(100))
    d = SolverConfig(episodes=100, anneal_episodes=40, lr_final=3e-5)
    assert learning_rate(d, 39) == 0.003
    assert learning_rate(d, 99) == pytest.approx(3e-5)


def test_divergent_discount_refused():
    with pytest.raises(DivergentObjective, match="divergent objective"):
        train(DiscountModel.hyperbolic(0.8, 1.0), INV, SolverConfig(episodes=2, batch_size=4,
                                                                    anneal_episodes=1))


def test_training_deterministic_and_decreasing():
    cfg = SolverConfig(episodes=300, batch_size=64, anneal_episodes=100, width=16, seed=3)
    a = train(HYP, LINE, cfg)
    b = train(HYP, LINE, cfg)
    assert np.array_equal(a.net.params, b.net.params)
    assert np.array_equal(a.loss_history, b.loss_history)
    assert np.all(np.isfinite(a.loss_history))
    assert a.offsets[0] == 50.0 and a.offsets[-1] == 0.0


def test_training_divergence_keeps_last_finite_state():
    cfg = SolverConfig(episodes=50, batch_size=16, anneal_episodes=0, width=8, seed=0,
                       precision="float64")
    bad = ValueNet(1, 8, rng=np.random.default_rng(0))
    seen = []

    def poison(k, loss, net):
        seen.append(net.params.copy())
        if k == 4:
            p = net.params.copy()
            p[-1] = 1e200  # finite parameters, overflowing loss
            net.params = p

    with pytest.raises(TrainingDiverged) as info:
        train(EXP, CONST, cfg, net=bad, callback=poison)
    assert info.value.episode == 5
    assert np.all(np.isfinite(info.value.last_finite.params))
    expected = seen[-1].copy()
    expected[-1] = 1e200
    assert np.array_equal(info.value.last_finite.params, expected)


def test_exponential_training_converges_quickly():
    cfg = SolverConfig(episodes=3000, batch_size=256, anneal_episodes=0, width=16, seed=0)
    res = train(EXP, CONST, cfg)
    x = np.full((11, 1), 0.5)
    t = np.linspace(0, 10, 11)
    assert np.allclose(res.net.value(x, t), 0.5, rtol=0.02)


def test_solution_grid_shapes():
    net = ValueNet(2, 8, rng=np.random.default_rng(0))
    axes = [np.linspace(0, 1, 3), np.linspace(0, 1, 4)]
    g = solution_grid(net, HYP, INV, axes, np.linspace(0, 10, 5))
    assert g["V"].shape == (3, 4, 5) and g["Q"].shape == (3, 4, 5, 2) and g["policy"].shape == (3, 4, 5)
