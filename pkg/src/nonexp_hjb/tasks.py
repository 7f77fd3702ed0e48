"""Controlled SDE tasks ``dX = f(X, u, t) dt + G(X, u, t) dW`` with a finite action set.

All task functions are vectorized: ``x`` has shape ``(..., state_dim)`` and
``t`` broadcasts against ``x[..., 0]``.  Actions may be given by label or by
index into :attr:`TaskModel.actions`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

_BOUND_TOL = 1e-9


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskModel:
    """A controlled SDE with constant per-action drift and dispersion.

    ``reward_x`` maps states of shape ``(..., n)`` to a state reward of shape
    ``(...)``; the total reward rate is ``reward_x(x) + reward_u[u]``.
    ``drift_vectors`` has shape ``(n_actions, n)`` and ``dispersions`` shape
    ``(n_actions, n, m)``.
    """

    name: str
    actions: tuple
    state_lo: np.ndarray
    state_hi: np.ndarray
    drift_vectors: np.ndarray
    dispersions: np.ndarray
    reward_x: Callable[[np.ndarray], np.ndarray]
    reward_u: np.ndarray
    reward_bounds_hint: tuple | None = None
    config: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.state_lo)
        if len(self.actions) < 2:
            raise TaskError("a task needs at least two actions")
        if len(set(self.actions)) != len(self.actions):
            raise TaskError("action labels must be unique")
        if self.drift_vectors.shape != (len(self.actions), n):
            raise TaskError(f"drift table must have shape {(len(self.actions), n)}")
        if self.dispersions.ndim != 3 or self.dispersions.shape[:2] != (len(self.actions), n):
            raise TaskError("dispersion table must have shape (n_actions, n, m)")
        if np.any(self.state_hi <= self.state_lo):
            raise TaskError("state_hi must exceed state_lo")

    # -- basic properties ----------------------------------------------
    @property
    def state_dim(self) -> int:
        return len(self.state_lo)

    @property
    def noise_dim(self) -> int:
        return self.dispersions.shape[2]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def diffusion(self) -> np.ndarray:
        """Per-action ``G G^T``, shape ``(n_actions, n, n)``."""
        return np.einsum("aim,ajm->aij", self.dispersions, self.dispersions)

    @property
    def hessian_pairs(self) -> list[tuple[int, int]]:
        """Index pairs ``(k, l)``, ``k <= l``, where some action has nonzero diffusion."""
        d = np.any(self.diffusion != 0, axis=0)
        n = self.state_dim
        return [(k, l) for k in range(n) for l in range(k, n) if d[k, l] or d[l, k]]

    def action_index(self, u) -> int:
        if isinstance(u, (int, np.integer)):
            if not 0 <= u < self.n_actions:
                raise TaskError(f"action index {u} out of range for task {self.name!r}")
            return int(u)
        try:
            return self.actions.index(u)
        except ValueError:
            raise TaskError(f"unknown action {u!r} for task {self.name!r}") from None

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.state_dim,):
            raise TaskError(f"state must have trailing dimension {self.state_dim}, got {x.shape}")
        if np.any(x < self.state_lo - _BOUND_TOL) or np.any(x > self.state_hi + _BOUND_TOL):
            raise TaskError(f"state outside task bounds [{self.state_lo}, {self.state_hi}]")
        return x

    def clamp(self, x) -> np.ndarray:
        return np.clip(x, self.state_lo, self.state_hi)

    # -- model functions -----------------------------------------------
    def drift(self, x, u, t=0.0) -> np.ndarray:
        x = self.check_state(x)
        return np.broadcast_to(self.drift_vectors[self.action_index(u)], x.shape).copy()

    def dispersion(self, x, u, t=0.0) -> np.ndarray:
        x = self.check_state(x)
        g = self.dispersions[self.action_index(u)]
        return np.broadcast_to(g, x.shape[:-1] + g.shape).copy()

    def reward(self, x, u, t=0.0):
        x = self.check_state(x)
        r = np.asarray(self.reward_x(x), dtype=float) + self.reward_u[self.action_index(u)]
        return float(r) if r.ndim == 0 else r

    def reward_table(self, x) -> np.ndarray:
        """Rewards for every action, shape ``x.shape[:-1] + (n_actions,)``."""
        x = self.check_state(x)
        return np.asarray(self.reward_x(x), dtype=float)[..., None] + self.reward_u

    def effective_drift_table(self, x) -> np.ndarray:
        """Drift for every action with outward components removed on the boundary.

        States are clamped to the box, so pushing against a face moves nothing;
        shape ``x.shape[:-1] + (n_actions, n)``.
        """
        x = np.asarray(x, dtype=float)
        f = np.broadcast_to(self.drift_vectors, x.shape[:-1] + self.drift_vectors.shape)
        at_hi = (x >= self.state_hi - _BOUND_TOL)[..., None, :]
        at_lo = (x <= self.state_lo + _BOUND_TOL)[..., None, :]
        blocked = (at_hi & (f > 0)) | (at_lo & (f < 0))
        return np.where(blocked, 0.0, f)

    def reward_bounds(self, n_grid: int = 201) -> tuple[float, float]:
        """``(inf, sup)`` of the reward over the box and actions."""
        if self.reward_bounds_hint is not None:
            return self.reward_bounds_hint
        axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(self.state_lo, self.state_hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.state_dim)
        r = self.reward_table(pts)
        return float(r.min()), float(r.max())

    def sample_states(self, n: int, lam_reparam: float, rng: np.random.Generator,
                      boundary_fraction: float = 0.0):
        """Uniform states and exponentially distributed times.

        Returns ``(x, t, y)`` with ``y ~ U(0, 1)`` and ``t = -log(1 - y) / lam``.
        With ``boundary_fraction > 0`` the first ``round(fraction * n)`` states
        are pushed onto a randomly chosen face of the box, so the residual also
        sees the blocked drift that only acts there.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= boundary_fraction <= 1.0:
            raise ValueError("boundary_fraction must lie in [0, 1]")
        x = rng.uniform(self.state_lo, self.state_hi, size=(n, self.state_dim))
        y = rng.uniform(size=n)
        m = int(round(boundary_fraction * n))
        if m:
            dims = rng.integers(self.state_dim, size=m)
            faces = np.where(rng.uniform(size=m) < 0.5, self.state_lo[dims], self.state_hi[dims])
            x[np.arange(m), dims] = faces
        t = -np.log1p(-y) / lam_reparam
        return x, t, y

    def to_config(self) -> dict:
        if not self.config:
            raise TaskError(f"task {self.name!r} has no structured config")
        return dict(self.config)


# -- built-in tasks -------------------------------------------------------

def piecewise_task(config: dict) -> TaskModel:
    """Task from a structured config.

    Keys: ``name``, ``state_lo``, ``state_hi``, ``actions``, ``drift``
    (action -> vector), ``dispersion`` (action -> matrix, or scalar for 1-D),
    ``reward_x`` (``{"dim": k, "breakpoints": [[x, r], ...]}``, linearly
    interpolated along coordinate ``k``) and ``reward_u`` (action -> value).
    """
    try:
        lo = np.atleast_1d(np.asarray(config["state_lo"], dtype=float))
        hi = np.atleast_1d(np.asarray(config["state_hi"], dtype=float))
        actions = tuple(config["actions"])
        n = len(lo)
        drift = np.array([np.broadcast_to(np.asarray(config["drift"][a], float), (n,))
                          for a in actions])
        disp = []
        for a in actions:
            g = np.asarray(config["dispersion"].get(a, 0.0), dtype=float)
            if g.ndim == 0:
                g = np.eye(n) * g
            disp.append(g.reshape(n, -1))
        disp = np.array(disp)
        rx = config["reward_x"]
        dim = int(rx.get("dim", 0))
        bp = np.asarray(rx["breakpoints"], dtype=float)
        ru = np.array([float(config.get("reward_u", {}).get(a, 0.0)) for a in actions])
    except KeyError as exc:
        raise TaskError(f"task config missing field {exc.args[0]!r}") from None
    if bp.ndim != 2 or bp.shape[1] != 2 or np.any(np.diff(bp[:, 0]) <= 0):
        raise TaskError("reward_x.breakpoints must be increasing [x, r] pairs")
    xs, rs = bp[:, 0].copy(), bp[:, 1].copy()

    def reward_x(x):
        return np.interp(x[..., dim], xs, rs)

    # piecewise-linear reward: extremes sit on breakpoints or bounds
    probe = np.concatenate([xs, [lo[dim], hi[dim]]])
    probe = probe[(probe >= lo[dim]) & (probe <= hi[dim])]
    rvals = np.interp(probe, xs, rs)
    bounds = (float(rvals.min() + ru.min()), float(rvals.max() + ru.max()))
    return TaskModel(config.get("name", "custom"), actions, lo, hi, drift, disp, reward_x, ru,
                     reward_bounds_hint=bounds, config=dict(config))


def line_task(move_cost: float = -0.1) -> TaskModel:
    """Point on ``[-1, 1]`` moved left/right with unit speed or kept in place.

    State reward: 0.5 for ``x >= 0.5``, ``x`` on ``[0, 0.5)``, 0 on
    ``[-0.95, 0)`` and ``-60 x - 57`` below -0.95.  Moving costs
    ``move_cost`` per unit time and diffuses with dispersion 0.05.
    """
    return piecewise_task({
        "name": "line",
        "state_lo": [-1.0], "state_hi": [1.0],
        "actions": ["left", "stay", "right"],
        "drift": {"left": [-1.0], "stay": [0.0], "right": [1.0]},
        "dispersion": {"left": 0.05, "stay": 0.0, "right": 0.05},
        "reward_x": {"dim": 0, "breakpoints": [[-1.0, 3.0], [-0.95, 0.0], [0.0, 0.0],
                                                 [0.5, 0.5], [1.0, 0.5]]},
        "reward_u": {"left": move_cost, "stay": 0.0, "right": move_cost},
    })


def investment_task() -> TaskModel:
    """Account balance and interest rate on ``[0, 1]^2``; spend or invest income.

    Spending pays 0.1 per unit time, investing grows the balance at rate 0.1.
    Interest pays ``balance * rate`` and the rate diffuses with dispersion 0.01.
    """
    drift = np.array([[0.0, 0.0], [0.1, 0.0]])
    g = np.array([[0.0, 0.0], [0.0, 0.01]])
    return TaskModel(
        name="investment",
        actions=("spend", "invest"),
        state_lo=np.zeros(2), state_hi=np.ones(2),
        drift_vectors=drift,
        dispersions=np.stack([g, g]),
        reward_x=lambda x: x[..., 0] * x[..., 1],
        reward_u=np.array([0.1, 0.0]),
        reward_bounds_hint=(0.0, 1.1),
    )


def constant_reward_task(reward: float = 0.1) -> TaskModel:
    """Drift- and noise-free 1-D task paying a constant reward for either action."""
    return piecewise_task({
        "name": "constant",
        "state_lo": [0.0], "state_hi": [1.0],
        "actions": ["a", "b"],
        "drift": {"a": [0.0], "b": [0.0]},
        "dispersion": {"a": 0.0, "b": 0.0},
        "reward_x": {"dim": 0, "breakpoints": [[0.0, reward], [1.0, reward]]},
        "reward_u": {},
    })


_BUILTIN = {
    "line": line_task,
    "investment": investment_task,
    "invest": investment_task,
    "constant": constant_reward_task,
}


def get_task(name: str, **kwargs) -> TaskModel:
    """Built-in task by name, or a JSON config file path."""
    if name in _BUILTIN:
        return _BUILTIN[name](**kwargs)
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return piecewise_task(json.loads(path.read_text()))
    raise TaskError(f"unknown task {name!r}; choose from {sorted(_BUILTIN)} or a .json config")


def task_names() -> Sequence[str]:
    return sorted(_BUILTIN)
