import numpy as np
import pytest
from conftest import AffineField, constant_value_net

from nonexp_hjb.discount import DiscountModel
from nonexp_hjb.hjb import DivergentObjective
from nonexp_hjb.irl import SwitchDatum
from nonexp_hjb.oracle import (GridSpec, OracleError, backward_induction, choose_horizon, compare,
                               fd_theta_gradient)
from nonexp_hjb.tasks import constant_reward_task, line_task, piecewise_task

CONST = constant_reward_task(0.1)
LINE = line_task()
HYP = DiscountModel.hyperbolic(3.0, 1.0)


@pytest.fixture(scope="module")
def line_grid():
    return backward_induction(LINE, DiscountModel.hyperbolic(5.0, 1.0), GridSpec(n_states=101))


def test_constant_hyperbolic_value():
    sol = backward_induction(CONST, HYP, GridSpec(n_states=3, dt=0.01, t_max=50.0))
    assert np.allclose(sol.V[..., 0], 0.05, atol=0.002)
    # later times follow 0.05 (1 + t)
    assert np.allclose(sol.V[:, -1], 0.05 * 11, rtol=0.01)


def test_constant_exponential_value():
    sol = backward_induction(CONST, DiscountModel.exponential(0.2), GridSpec(n_states=3))
    assert np.allclose(sol.V, 0.5, atol=0.005)


def test_refuses_divergent_discount():
    with pytest.raises(DivergentObjective):
        backward_induction(CONST, DiscountModel.hyperbolic(1.0, 1.0), GridSpec(n_states=3))


def test_first_order_in_time_step():
    vals = []
    for dt in (0.02, 0.01, 0.005):
        sol = backward_induction(CONST, HYP, GridSpec(n_states=2, dt=dt, t_max=40.0))
        vals.append(sol.V[0, 0])
    ratio = (vals[0] - vals[1]) / (vals[1] - vals[2])
    assert ratio == pytest.approx(2.0, rel=0.1)


def test_affine_reward_shift():
    """Adding c to every reward shifts values by c times the discounted step sum."""
    base_cfg = dict(LINE.config)
    shifted_cfg = dict(base_cfg, reward_x={"dim": 0, "breakpoints": [
        [x, r + 0.25] for x, r in base_cfg["reward_x"]["breakpoints"]]})
    shifted = piecewise_task(shifted_cfg)
    d = DiscountModel.hyperbolic(5.0, 1.0)
    spec = GridSpec(n_states=41, dt=0.01, t_max=30.0)
    a = backward_induction(LINE, d, spec)
    b = backward_induction(shifted, d, spec)
    # the tail value uses the reward bounds midpoint, which also shifts by c
    steps = np.arange(3000) * 0.01
    ref = 0.25 * (0.01 * np.sum(d.survival(steps)) + d.survival(30.0) * d.tail_integral(30.0))
    assert np.allclose(b.V[..., 0] - a.V[..., 0], ref, atol=1e-10)


def test_tail_bound_soundness():
    d = DiscountModel.hyperbolic(5.0, 1.0)
    r_lo, r_hi = LINE.reward_bounds()
    T = choose_horizon(d, r_lo, r_hi, 10.0, 1e-3)
    spec = GridSpec(n_states=41)
    a = backward_induction(LINE, d, spec)
    b = backward_induction(LINE, d, GridSpec(n_states=41, t_max=2 * T))
    scale = max(abs(r_lo), abs(r_hi)) * d.tail_integral(10.0)
    assert np.max(np.abs(a.V[..., 0] - b.V[..., 0])) < 2e-3 * scale


def test_deterministic(line_grid):
    again = backward_induction(LINE, DiscountModel.hyperbolic(5.0, 1.0), GridSpec(n_states=101))
    assert np.array_equal(again.V, line_grid.V)


def test_compare_with_self(line_grid):
    rep = compare(line_grid, line_grid)
    assert rep.rmse == 0.0 and rep.agreement == 1.0


def test_compare_rejects_wrong_net(line_grid):
    rep = compare(_NetLike(constant_value_net(1, 0.0), line_grid.discount), line_grid)
    assert rep.agreement < 0.9


class _NetLike:
    def __init__(self, net, discount):
        from nonexp_hjb.hjb import NetSolution
        self.sol = NetSolution(net, discount, LINE)

    def value(self, x, t):
        return self.sol.value(x, t)

    def policy(self, x, t):
        return self.sol.policy(x, t)


def test_richardson_flags_coarse_grid():
    d = DiscountModel.hyperbolic(5.0, 1.0)
    coarse = backward_induction(LINE, d, GridSpec(n_states=5, richardson=True))
    assert coarse.coarse
    fine = backward_induction(LINE, d, GridSpec(n_states=201, richardson=True))
    assert not fine.coarse and fine.richardson_error < 0.02


def test_line_policy_structure(line_grid):
    pol = line_grid.policy_at
    assert LINE.actions[pol([[-0.5]], 0.0)[0]] == "left"
    assert LINE.actions[pol([[0.8]], 0.0)[0]] == "stay"
    # at x = 0.5 the agent first stays, later heads for the larger reward on the left
    assert LINE.actions[pol([[0.5]], 0.0)[0]] == "stay"
    assert LINE.actions[pol([[0.5]], 8.0)[0]] == "left"


def test_grid_interpolation_beyond_storage_rejected(line_grid):
    with pytest.raises(OracleError):
        line_grid.value([[0.0]], 50.0)


# -- finite-difference theta gradient ---------------------------------------------------

DATA = [SwitchDatum([0.2], "stay", "right", 1.0), SwitchDatum([-0.3], "left", "stay", 2.0)]


def _fake_solve(d):
    """Slope of V in x is affine in theta, so F is quadratic and central differences are exact."""
    a0, b0 = d.theta
    return AffineField([0.0], [0.0], [[0.3 * a0 - 0.7 * b0 + 0.05]])


def test_fd_gradient_exact_for_quadratic_dependence():
    from nonexp_hjb.irl import switch_objective

    theta = np.array([3.0, 1.0])
    g = fd_theta_gradient(LINE, HYP, DATA, theta, h=0.05, solve=_fake_solve)
    # reference: small-step differences of the same objective
    eps = 1e-6
    ref = []
    for j in range(2):
        e = np.eye(2)[j] * eps
        fp = np.sum(switch_objective(_fake_solve(HYP.with_theta(theta + e)), HYP, LINE, DATA))
        fm = np.sum(switch_objective(_fake_solve(HYP.with_theta(theta - e)), HYP, LINE, DATA))
        ref.append((fp - fm) / (2 * eps))
    assert np.allclose(g, ref, rtol=1e-5)


def test_fd_gradient_empty_data_is_zero():
    g = fd_theta_gradient(LINE, HYP, [], [3.0, 1.0], solve=_fake_solve)
    assert np.array_equal(g, [0.0, 0.0])


def test_fd_gradient_antisymmetric():
    flip = lambda d: _fake_solve(d.with_theta(2 * np.array([3.0, 1.0]) - d.theta))
    g = fd_theta_gradient(LINE, HYP, DATA, [3.0, 1.0], solve=_fake_solve)
    g_flip = fd_theta_gradient(LINE, HYP, DATA, [3.0, 1.0], solve=flip)
    assert np.allclose(g_flip, -g)


def test_fd_gradient_names_failing_offset():
    def broken(d):
        if d.theta[1] > 1.0:
            raise FloatingPointError("boom")
        return _fake_solve(d)

    with pytest.raises(OracleError, match=r"1\.05"):
        fd_theta_gradient(LINE, HYP, DATA, [3.0, 1.0], solve=broken)
    with pytest.raises(ValueError):
        fd_theta_gradient(LINE, HYP, DATA, [3.0, 1.0], h=0.0, solve=_fake_solve)
