# %% [markdown]
# # A preference reversal on a line
#
# An agent moves on [-1, 1].  The reward rate is large in a narrow pocket at
# the left wall, zero in the middle and 0.5 on a plateau from x = 0.5 to the
# right wall; moving costs 0.1 per unit time.  A hyperbolic agent starting at
# x = 0 first heads for the nearby plateau.  As time passes its hazard rate
# falls, the distant pocket becomes worth the trip, and it turns around.
#
# The value network is trained by residual minimization of the HJB equation
# and checked against a backward-induction grid solution.
#
#     python demos/02_line_preference_reversal.py           # about 4 minutes
#     python demos/02_line_preference_reversal.py --quick   # about 1 minute, rougher
#
# The quick run is too short to place the decision boundary next to x = 0
# reliably, so its agent may wait at the start instead of heading right.

# %%
import argparse
import time

import numpy as np

from nonexp_hjb import oracle, sim
from nonexp_hjb.discount import DiscountModel
from nonexp_hjb.hjb import NetSolution, SolverConfig, train
from nonexp_hjb.tasks import line_task

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()

task = line_task()
hyp = DiscountModel.hyperbolic(5.0, 1.0)
episodes = 15_000 if args.quick else 60_000
config = SolverConfig(episodes=episodes, batch_size=500, anneal_episodes=episodes // 3, lam_reparam=0.5)

# %% [markdown]
# ## Training
#
# Annealing starts from a far-sighted discount (alpha0 shifted up by 50) and
# moves linearly to the target.  A tenth of every batch sits exactly on the
# walls so the network learns that pushing into a wall does nothing.

# %%
start = time.perf_counter()
result = train(hyp, task, config)
print(f"trained {episodes} episodes in {time.perf_counter() - start:.0f} s, "
      f"final loss {result.final_loss:.2e}")
solution = NetSolution(result.net, hyp, task)

# %% [markdown]
# ## Comparison with dynamic programming
#
# The grid oracle steps backward in time on 101 states.  Agreement counts the
# nodes where both solutions choose the same action (near-ties excluded).

# %%
grid = oracle.backward_induction(task, hyp, oracle.GridSpec(n_states=101))
report = oracle.compare(solution, grid, t_probe=8.0)
print(f"policy agreement {report.agreement:.3f}, value RMSE / range {report.relative_rmse:.3f}")

xs = np.linspace(-1, 1, 41)
for t in (0.0, 1.0, 2.0, 4.0):
    net_row = "".join("LSR"[a] for a in solution.policy(xs[:, None], np.full(41, t)))
    grid_row = "".join("LSR"[a] for a in grid.policy_at(xs[:, None], t))
    print(f"t={t:3.1f}  net {net_row}\n        grid {grid_row}")

# %% [markdown]
# ## Rolling out the policy
#
# Runs shorter than five steps are noise from the diffusion while moving.

# %%
for seed in range(3):
    tr = sim.rollout(solution, task, hyp, [0.0], 0.0, 10.0, 0.01, np.random.default_rng(seed),
                     terminate=False)
    runs = [(task.actions[a], n) for a, n in tr.action_runs(min_length=5)]
    print(f"seed {seed}:", " -> ".join(f"{name} x{n}" for name, n in runs))

# %% [markdown]
# ## The exponential agent does not turn around
#
# With a constant hazard the optimal action depends on the state only.

# %%
exp = DiscountModel.exponential(5.0)
exp_net = train(exp, task, SolverConfig(episodes=episodes // 3, batch_size=500, anneal_episodes=0,
                                        lam_reparam=0.5)).net
exp_sol = NetSolution(exp_net, exp, task)
pol = np.array([exp_sol.policy(xs[:, None], np.full(41, t)) for t in np.linspace(0, 10, 21)])
print("exponential policy constant in time at", f"{np.mean(np.all(pol == pol[0], axis=0)):.2f}",
      "of states; t=0 row:", "".join("LSR"[a] for a in pol[0]))
