"""Euler-Maruyama rollouts under a time-dependent policy and switch extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .discount import DiscountModel
from .tasks import TaskModel


@dataclass
class Trajectory:
    """One simulated path.

    ``times`` and ``states`` have one entry per visited time point (``K + 1``
    for ``K`` steps); ``actions``, ``rewards`` and the optional per-action
    ``q`` values have one entry per step, taken at the start of the step.
    ``rewards`` are reward rates.
    """

    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dt: float
    termination_time: float | None = None
    q: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def action_runs(self, min_length: int = 1) -> list[tuple[int, int]]:
        """Run-length encoding ``[(action, length), ...]`` ignoring runs shorter than ``min_length``."""
        runs = []
        for a in self.actions:
            if runs and runs[-1][0] == a:
                runs[-1][1] += 1
            else:
                runs.append([int(a), 1])
        kept = [r for r in runs if r[1] >= min_length]
        merged = []
        for a, n in kept:
            if merged and merged[-1][0] == a:
                merged[-1][1] += n
            else:
                merged.append([a, n])
        return [tuple(r) for r in merged]


def em_step(task: TaskModel, x, u, t, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One clamped Euler-Maruyama step for a single action."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = task.check_state(x)
    f = task.drift(x, u, t)
    g = task.dispersion(x, u, t)
    xi = rng.standard_normal(x.shape[:-1] + (task.noise_dim,))
    return task.clamp(x + f * dt + math.sqrt(dt) * np.einsum("...ij,...j->...i", g, xi))


def _em_batch(task, x, u_idx, dt, xi):
    f = task.drift_vectors[u_idx]
    g = task.dispersions[u_idx]
    return task.clamp(x + f * dt + math.sqrt(dt) * np.einsum("bij,bj->bi", g, xi))


def _policy_eval(policy, x, t):
    """Action indices and (if available) Q values for a batch."""
    if hasattr(policy, "q"):
        q = np.asarray(policy.q(x, t))
        return np.argmax(q, axis=1), q
    return np.asarray(policy(x, t), dtype=int).reshape(len(x)), None


def rollout_batch(policy, task: TaskModel, discount: DiscountModel, x0, t0: float,
                  horizon: float, dt: float, rng: np.random.Generator,
                  terminate: bool = True) -> list[Trajectory]:
    """Simulate several trajectories in lockstep.

    ``policy`` is either an object with ``q(x, t) -> (B, n_actions)`` (the
    greedy action is taken) or a callable ``(x, t) -> action indices``.  With
    ``terminate=True`` each path stops at a termination time drawn from the
    discount's survival function conditioned on survival to ``t0``.
    """
    if dt <= 0 or horizon < 0:
        raise ValueError("need dt > 0 and horizon >= 0")
    x = task.check_state(np.atleast_2d(np.asarray(x0, dtype=float))).copy()
    B = len(x)
    n_steps = int(round(horizon / dt))
    sim_discount = discount.with_offset(0.0)
    if terminate:
        u = rng.uniform(size=B)
        T = sim_discount.inverse_survival((1.0 - u) * sim_discount.survival(t0))
        T = np.atleast_1d(T)
    else:
        T = np.full(B, np.inf)
    times = t0 + dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, B, task.state_dim))
    states[0] = x
    actions = np.empty((n_steps, B), dtype=np.int64)
    rewards = np.empty((n_steps, B))
    qs = None
    alive_steps = np.full(B, n_steps)
    for k in range(n_steps):
        t = times[k]
        a, q = _policy_eval(policy, x, np.full(B, t))
        if q is not None:
            if qs is None:
                qs = np.empty((n_steps, B, q.shape[1]))
            qs[k] = q
        actions[k] = a
        rewards[k] = task.reward_table(x)[np.arange(B), a]
        xi = rng.standard_normal((B, task.noise_dim))
        x = _em_batch(task, x, a, dt, xi)
        states[k + 1] = x
        # a path ends with the step during which its termination time falls
        ended = (T <= times[k + 1]) & (alive_steps == n_steps)
        alive_steps[ended] = k + 1
    out = []
    for b in range(B):
        K = alive_steps[b]
        out.append(Trajectory(
            times=times[:K + 1].copy(), states=states[:K + 1, b].copy(),
            actions=actions[:K, b].copy(), rewards=rewards[:K, b].copy(), dt=dt,
            termination_time=float(T[b]) if T[b] <= times[-1] else None,
            q=None if qs is None else qs[:K, b].copy(),
        ))
    return out


def rollout(policy, task: TaskModel, discount: DiscountModel, x0, t0: float = 0.0,
            horizon: float = 10.0, dt: float = 0.01, rng: np.random.Generator | None = None,
            terminate: bool = True) -> Trajectory:
    """Single-trajectory wrapper around :func:`rollout_batch`."""
    rng = np.random.default_rng() if rng is None else rng
    x0 = np.asarray(x0, dtype=float).reshape(1, task.state_dim)
    return rollout_batch(policy, task, discount, x0, t0, horizon, dt, rng, terminate)[0]


def extract_switches(traj: Trajectory, task: TaskModel | None = None, interpolate: bool = True,
                     drop_blocked: bool = True):
    """Switch data from a trajectory.

    A switch is recorded between steps ``i`` and ``i + 1`` when the action
    changes.  Its state and time are interpolated along the step to where the
    Q-value gap of the two actions crosses zero if Q values were recorded
    (and ``interpolate`` is set); otherwise the step midpoint is used.

    With ``drop_blocked`` (and a task), switches made on a face of the box
    where one of the two actions pushes outward are skipped.  Those are forced
    by the wall rather than by indifference between the actions, so they carry
    no information about the discount.
    """
    from .irl import SwitchDatum

    out = []
    a = traj.actions
    labels = task.actions if task is not None else None
    for i in np.flatnonzero(a[:-1] != a[1:]):
        um, up = int(a[i]), int(a[i + 1])
        if drop_blocked and task is not None:
            eff = task.effective_drift_table(traj.states[i + 1])
            if not np.array_equal(eff[[um, up]], task.drift_vectors[[um, up]]):
                continue
        s = 0.5
        if interpolate and traj.q is not None:
            g0 = traj.q[i, um] - traj.q[i, up]
            g1 = traj.q[i + 1, um] - traj.q[i + 1, up]
            if g0 != g1:
                s = float(np.clip(g0 / (g0 - g1), 0.0, 1.0))
        x = traj.states[i] + s * (traj.states[i + 1] - traj.states[i])
        t = traj.times[i] + s * (traj.times[i + 1] - traj.times[i])
        out.append(SwitchDatum(tuple(float(v) for v in x),
                               labels[um] if labels else um,
                               labels[up] if labels else up, float(t)))
    return out


def generate_irl_dataset(policy, task: TaskModel, discount: DiscountModel, n_traj: int,
                         noise_std: float, rng: np.random.Generator, horizon: float = 10.0,
                         dt: float = 0.01, terminate: bool = False):
    """Switch data from rollouts started at uniformly random states at ``t = 0``.

    Switch times are perturbed by ``N(0, noise_std**2)`` and clamped at 0;
    states are kept as observed.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    from .irl import SwitchDatum

    x0 = rng.uniform(task.state_lo, task.state_hi, size=(n_traj, task.state_dim))
    trajs = rollout_batch(policy, task, discount, x0, 0.0, horizon, dt, rng, terminate)
    data = [d for tr in trajs for d in extract_switches(tr, task)]
    if noise_std > 0 and data:
        eps = rng.normal(0.0, noise_std, size=len(data))
        data = [SwitchDatum(d.x, d.u_minus, d.u_plus, max(0.0, d.t + e)) for d, e in zip(data, eps)]
    return data
