"""Independent reference solutions.

:func:`backward_induction` solves the discrete-time Bellman recursion

    V(x, t) = max_u { R(x, u, t) dt + S(t + dt)/S(t) E[V(X', t + dt)] }

on a state grid with multilinear interpolation, clamped Euler transitions and
a three-point Gauss-Hermite rule for the Brownian increment.  The terminal
slice uses the constant-reward tail value, and the horizon is pushed out until
that approximation is negligible over the stored time window.

:func:`fd_theta_gradient` differentiates the switch objective with respect to
the discount parameters by re-solving the forward problem at ``theta +- h``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator

from .discount import DiscountModel, Verdict, check_well_defined
from .hjb import DivergentObjective
from .tasks import TaskModel

log = logging.getLogger(__name__)

_GH_NODES = np.array([-math.sqrt(3.0), 0.0, math.sqrt(3.0)])
_GH_WEIGHTS = np.array([1.0, 4.0, 1.0]) / 6.0


class OracleError(RuntimeError):
    pass


@dataclass
class GridSpec:
    """Resolution and horizon of a backward-induction run.

    ``n_states`` is the node count per state dimension.  ``t_max=None`` picks
    the horizon from the tail bound so that the terminal approximation
    contributes at most ``eps_tail`` (relative to the value scale) on
    ``[0, t_save]``.  Values are stored every ``save_every`` steps up to
    ``t_save``.
    """

    n_states: int | tuple = 201
    dt: float = 0.01
    t_max: float | None = None
    t_save: float = 10.0
    save_every: int = 10
    eps_tail: float = 1e-3
    richardson: bool = False
    richardson_tol: float = 0.02

    def per_dim(self, state_dim: int) -> tuple:
        if np.isscalar(self.n_states):
            return (int(self.n_states),) * state_dim
        if len(self.n_states) != state_dim:
            raise ValueError("n_states must give one count per state dimension")
        return tuple(int(n) for n in self.n_states)


@dataclass
class GridSolution:
    """Backward-induction result.

    ``V`` has shape ``(*n_states, n_times)``; ``Q`` adds a trailing action
    axis and is expressed as a reward rate (comparable with the continuous
    Q values of the collocation solver); ``policy`` holds action indices.
    """

    axes: list
    times: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray
    dt: float
    t_max: float
    task_name: str
    discount: DiscountModel
    coarse: bool = False
    richardson_error: float | None = None
    _interp: dict = field(default_factory=dict, repr=False)

    @property
    def state_dim(self) -> int:
        return len(self.axes)

    def nodes(self, t_probe: float | None = None):
        """All ``(x, t)`` grid nodes with ``t <= t_probe`` and their array index."""
        ti = np.flatnonzero(self.times <= (self.times[-1] if t_probe is None else t_probe) + 1e-12)
        mesh = np.meshgrid(*self.axes, self.times[ti], indexing="ij")
        x = np.stack([m.ravel() for m in mesh[:-1]], axis=-1)
        t = mesh[-1].ravel()
        index = (Ellipsis, ti)
        return x, t, index

    def _interpolator(self, name, method):
        key = (name, method)
        if key not in self._interp:
            data = getattr(self, name)
            self._interp[key] = RegularGridInterpolator(
                (*self.axes, self.times), data, method=method, bounds_error=False, fill_value=None)
        return self._interp[key]

    def _points(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        if np.any(t > self.times[-1] + 1e-9):
            raise OracleError(f"grid solution only stored up to t={self.times[-1]:g}")
        return np.column_stack([x, t])

    def value(self, x, t):
        return self._interpolator("V", "linear")(self._points(x, t))

    def q(self, x, t):
        pts = self._points(x, t)
        return np.stack([
            RegularGridInterpolator((*self.axes, self.times), self.Q[..., a], method="linear",
                                    bounds_error=False, fill_value=None)(pts)
            for a in range(self.Q.shape[-1])], axis=-1)

    def policy_at(self, x, t):
        return np.rint(self._interpolator("policy", "nearest")(self._points(x, t))).astype(int)

    # uniform interface with NetSolution
    def policy_fn(self, x, t):
        return self.policy_at(x, t)

    def q_gap(self):
        """Gap between the best and second-best action value at every node."""
        q = np.sort(self.Q, axis=-1)
        return q[..., -1] - q[..., -2]


def _interp_matrix(points: np.ndarray, axes: list) -> sparse.csr_matrix:
    """Sparse multilinear interpolation weights from grid values to ``points``."""
    n_pts, d = points.shape
    shape = tuple(len(a) for a in axes)
    lo_idx, frac = [], []
    for k, a in enumerate(axes):
        p = np.clip(points[:, k], a[0], a[-1])
        i = np.clip(np.searchsorted(a, p, side="right") - 1, 0, len(a) - 2)
        lo_idx.append(i)
        frac.append((p - a[i]) / (a[i + 1] - a[i]))
    rows, cols, vals = [], [], []
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(n_pts)
        idx = []
        for k, c in enumerate(corner):
            w = w * (frac[k] if c else 1.0 - frac[k])
            idx.append(lo_idx[k] + c)
        cols.append(np.ravel_multi_index(idx, shape))
        rows.append(np.arange(n_pts))
        vals.append(w)
    m = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n_pts, int(np.prod(shape))))
    m.eliminate_zeros()
    return m


def _transition_matrix(task: TaskModel, u: int, x: np.ndarray, axes: list, dt: float, t: float):
    """``E[V(X')]`` as a sparse operator on grid values for action ``u``."""
    f = task.drift(x, u, t)
    g = task.dispersion(x, u, t)
    active = [j for j in range(g.shape[-1]) if np.any(g[..., j] != 0)]
    mean = x + f * dt
    total = None
    for combo in itertools.product(range(3), repeat=len(active)):
        w = 1.0
        shift = np.zeros_like(x)
        for j, c in zip(active, combo):
            w *= _GH_WEIGHTS[c]
            shift += g[..., j] * (math.sqrt(dt) * _GH_NODES[c])
        m = w * _interp_matrix(task.clamp(mean + shift), axes)
        total = m if total is None else total + m
    return total.tocsr()


def _tail_value(discount: DiscountModel, r_lo: float, r_hi: float, t: float) -> float:
    return 0.5 * (r_lo + r_hi) * float(discount.tail_integral(t))


def choose_horizon(discount: DiscountModel, r_lo: float, r_hi: float, t_save: float,
                   eps_tail: float) -> float:
    """Smallest horizon (on a doubling search refined by bisection) meeting the tail bound."""
    scale = max(abs(r_lo), abs(r_hi)) * float(discount.tail_integral(t_save))
    spread = 0.5 * (r_hi - r_lo)
    if spread == 0 or scale == 0:
        return t_save + 1.0

    def err(T):
        return discount.conditional_survival(t_save, T) * spread * float(discount.tail_integral(T))

    target = eps_tail * scale
    hi = t_save + 1.0
    while err(hi) > target:
        hi = 2 * hi
        if hi > 1e7:
            raise OracleError("tail bound cannot be met; the horizon would exceed 1e7")
    lo = t_save
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if err(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


def backward_induction(task: TaskModel, discount: DiscountModel, spec: GridSpec | None = None) -> GridSolution:
    """Discrete-time dynamic programming on a uniform state grid."""
    spec = spec or GridSpec()
    r_lo, r_hi = task.reward_bounds()
    if check_well_defined(discount, r_hi) != Verdict.WELL_DEFINED:
        raise DivergentObjective(f"divergent objective: {discount} (alpha0 <= 1)")
    if spec.dt <= 0:
        raise ValueError("dt must be positive")
    discount = discount.with_offset(0.0)
    dt = spec.dt
    t_max = spec.t_max
    if t_max is None:
        t_max = choose_horizon(discount, r_lo, r_hi, spec.t_save, spec.eps_tail)
    n_steps = int(math.ceil(t_max / dt - 1e-9))
    t_max = n_steps * dt
    save_steps = int(round(min(spec.t_save, t_max) / dt))
    save_idx = list(range(0, save_steps + 1, spec.save_every))

    axes = [np.linspace(lo, hi, n) for lo, hi, n in
            zip(task.state_lo, task.state_hi, spec.per_dim(task.state_dim))]
    if any(len(a) < 2 for a in axes):
        raise ValueError("need at least two nodes per dimension")
    shape = tuple(len(a) for a in axes)
    x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, task.state_dim)
    n_a = task.n_actions
    rewards = task.reward_table(x)
    ops = [_transition_matrix(task, u, x, axes, dt, 0.0) for u in range(n_a)]

    V = np.full(len(x), _tail_value(discount, r_lo, r_hi, t_max))
    n_save = len(save_idx)
    V_out = np.empty((len(x), n_save))
    Q_out = np.empty((len(x), n_save, n_a))
    pol_out = np.empty((len(x), n_save), dtype=np.int64)
    slot = {k: i for i, k in enumerate(save_idx)}
    Q = np.empty((len(x), n_a))
    for k in range(n_steps - 1, -1, -1):
        t = k * dt
        lam = discount.conditional_survival(t, t + dt)
        for u in range(n_a):
            Q[:, u] = rewards[:, u] * dt + lam * (ops[u] @ V)
        V = Q.max(axis=1)
        if k in slot:
            i = slot[k]
            V_out[:, i] = V
            pol_out[:, i] = np.argmax(Q, axis=1)
            Q_out[:, i] = (Q - V[:, None]) / dt + float(discount.hazard(t)) * V[:, None]
        if not np.all(np.isfinite(V)):
            raise OracleError(f"non-finite value at t={t:g}")
    times = np.array(save_idx) * dt
    sol = GridSolution(axes, times, V_out.reshape(shape + (n_save,)),
                       Q_out.reshape(shape + (n_save, n_a)), pol_out.reshape(shape + (n_save,)),
                       dt, t_max, task.name, discount)
    if spec.richardson:
        fine_n = tuple(2 * (n - 1) + 1 for n in shape)
        fine_spec = GridSpec(n_states=fine_n, dt=dt, t_max=t_max, t_save=spec.t_save,
                             save_every=spec.save_every, eps_tail=spec.eps_tail, richardson=False)
        fine = backward_induction(task, discount, fine_spec)
        sub = tuple(slice(None, None, 2) for _ in shape)
        diff = np.max(np.abs(fine.V[sub + (0,)] - sol.V[..., 0]))
        vrange = float(np.ptp(fine.V[..., 0])) or 1.0
        sol.richardson_error = float(diff / vrange)
        sol.coarse = sol.richardson_error > spec.richardson_tol
        if sol.coarse:
            log.warning("state grid %s looks too coarse: relative Richardson error %.3g",
                        shape, sol.richardson_error)
    return sol


@dataclass
class ComparisonReport:
    rmse: float
    value_range: float
    agreement: float
    n_nodes: int
    n_compared: int

    @property
    def relative_rmse(self) -> float:
        return self.rmse / self.value_range if self.value_range > 0 else 0.0

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "value_range": self.value_range,
                "relative_rmse": self.relative_rmse, "agreement": self.agreement,
                "n_nodes": self.n_nodes, "n_compared": self.n_compared}


def compare(solution, grid: GridSolution, t_probe: float = 8.0,
            switch_margin: float = 5e-3) -> ComparisonReport:
    """Value RMSE and policy agreement of ``solution`` on the grid nodes.

    ``solution`` needs ``value(x, t)`` and ``policy(x, t)`` (or
    ``policy_at``).  Nodes where the grid's best two actions are within
    ``switch_margin`` (reward-rate units) are left out of the agreement.
    """
    x, t, index = grid.nodes(t_probe)
    v_grid = grid.V[index].ravel()
    pol_grid = grid.policy[index].ravel()
    gap = grid.q_gap()[index].ravel()
    v = np.asarray(solution.value(x, t)).ravel()
    pol_fn = getattr(solution, "policy_at", None) or solution.policy
    pol = np.asarray(pol_fn(x, t)).ravel()
    keep = gap >= switch_margin
    rmse = float(np.sqrt(np.mean((v - v_grid) ** 2)))
    agreement = float(np.mean(pol[keep] == pol_grid[keep])) if keep.any() else 1.0
    return ComparisonReport(rmse, float(np.ptp(v_grid)), agreement, len(v), int(keep.sum()))


def fd_theta_gradient(task: TaskModel, discount: DiscountModel, data, theta, h: float = 0.05,
                      config=None, solve=None) -> np.ndarray:
    """Central differences of the summed switch objective over ``theta``.

    Every component needs two full forward solves with the same seed, so
    sampling noise is shared between the ``+h`` and ``-h`` runs.  ``solve``
    may replace the default ``hjb.train`` call (signature
    ``solve(discount) -> ValueNet``).
    """
    from .hjb import train
    from .irl import switch_objective

    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float)
    if len(data) == 0:
        return np.zeros_like(theta)
    if solve is None:
        def solve(d):
            return train(d, task, config).net

    grad = np.zeros_like(theta)
    for j in range(len(theta)):
        vals = []
        for sign in (+1, -1):
            th = theta.copy()
            th[j] += sign * h
            d = discount.with_theta(th)
            try:
                net = solve(d)
            except Exception as exc:
                raise OracleError(f"forward solve failed at theta={th.tolist()}: {exc}") from exc
            vals.append(float(np.sum(switch_objective(net, d, task, data))))
        grad[j] = (vals[0] - vals[1]) / (2 * h)
    return grad
