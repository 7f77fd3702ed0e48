# %% [markdown]
# # Recovering the discount from observed switches
#
# In the investment task the state is (balance b, interest rate i).  Spending
# pays b now; investing pays a little less now but grows the balance.  A
# hyperbolic agent with alpha0 = 3, beta0 = 1 spends early and switches to
# investing later.  Given only where and when such switches happen, can we
# tell which discount produced them?
#
# At a switch the two actions are equally good, so the squared Q-gap
#     F = (Q(x, spend, t) - Q(x, invest, t))^2
# vanishes under the true parameters.  Its gradient in (alpha0, beta0) needs
# dV/dtheta, which a second network learns from the differentiated HJB
# equation.
#
#     python demos/03_recovering_the_discount.py           # about 12 minutes
#     python demos/03_recovering_the_discount.py --quick   # about 4 minutes, rougher

# %%
import argparse
import time

import numpy as np

from nonexp_hjb import sim
from nonexp_hjb.discount import DiscountModel
from nonexp_hjb.hjb import NetSolution, SolverConfig, train
from nonexp_hjb.irl import grid_scan, switch_objective, total_gradient, train_sensitivity
from nonexp_hjb.tasks import investment_task

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
args = parser.parse_args()
scale = 3 if args.quick else 1

task = investment_task()
truth = DiscountModel.hyperbolic(3.0, 1.0)
clock = time.perf_counter()

# %% [markdown]
# ## Data from a simulated agent

# %%
net = train(truth, task, SolverConfig(episodes=60_000 // scale, batch_size=500,
                                      anneal_episodes=20_000 // scale, lam_reparam=0.5)).net
agent = NetSolution(net, truth, task)
data = sim.generate_irl_dataset(agent, task, truth, n_traj=200, noise_std=0.0,
                                rng=np.random.default_rng(0))
print(f"{len(data)} switches from 200 trajectories ({time.perf_counter() - clock:.0f} s so far)")
print("first few:", [(tuple(round(v, 3) for v in d.x), d.u_minus, d.u_plus, round(d.t, 3)) for d in data[:3]])
print(f"mean F under the generating discount: {switch_objective(net, truth, task, data).mean():.2e}")

# %% [markdown]
# ## The gradient away from the truth
#
# Solve at a wrong guess, alpha0 = 2.5, by continuing from the fitted network,
# then train the sensitivity network there.  The descent direction should
# point back toward (3, 1).

# %%
guess = DiscountModel.hyperbolic(2.5, 1.0)
warm = SolverConfig(episodes=20_000 // scale, batch_size=500, anneal_episodes=0, lam_reparam=0.5,
                    lr=0.001, lr_final=1e-5)
guess_net = train(guess, task, warm, net=net.copy()).net
sens = train_sensitivity(guess_net, guess, task,
                         SolverConfig(episodes=10_000 // scale, batch_size=500, anneal_episodes=0,
                                      lam_reparam=0.5, lr_final=1e-5)).net
g = total_gradient(guess_net, sens, guess, task, data)
print(f"at (2.5, 1): mean F {switch_objective(guess_net, guess, task, data).mean():.2e}, "
      f"dF/dtheta {np.round(g, 4)}, descent direction {np.round(-g / np.linalg.norm(g), 3)}")

# %% [markdown]
# ## A small landscape
#
# Each node of a 3 x 3 grid continues from its neighbour's networks, which is
# far cheaper than solving every node from scratch.

# %%
grid = [(a, b) for a in (2.5, 3.0, 3.5) for b in (0.6, 1.0, 1.4)]
short = SolverConfig(episodes=4_000 // scale, batch_size=500, anneal_episodes=0, lam_reparam=0.5,
                     lr=0.001, lr_final=1e-5)
rows = grid_scan(task, data, grid, short, sens_config=short, warm_config=short, init_net=net)
print("alpha0  beta0   mean F     descent direction")
for r in rows:
    d = -np.array([r.dF_dalpha0, r.dF_dbeta0])
    print(f"{r.alpha0:5.2f}  {r.beta0:5.2f}  {r.F:9.2e}  {np.round(d / np.linalg.norm(d), 2)}")
best = min(rows, key=lambda r: r.F)
print(f"smallest F at ({best.alpha0:g}, {best.beta0:g}); total {time.perf_counter() - clock:.0f} s")
