"""
Differentiating a rollout
=========================

Simulate a batch of episodes for the 10-agent desk fleet, run the reverse
sweep through devices and power flow, and look at what the proximal
surrogate caches: observations, old outputs and output-space gradients.
"""

import numpy as np

from gradmap import devices, feeder, policy, rollout, scenario, trainer
from gradmap.rollout import DualState

fleet = devices.load_bundled_fleet("desk10")
net = feeder.load_bundled_feeder("small4bus")
sc = scenario.desk_scenario(fleet.ids)
env = rollout.Environment(fleet, net, sc.dt)
print("agents:", {k: len(i) for k, i in fleet.idx.items()})

pols = policy.init_policies(fleet.n_agents, np.random.default_rng(0))
duals = DualState(lambda_volt=50.0, lambda_bend=100.0, lambda_hend=50.0)
batch = rollout.simulate_batch(pols, env, sc, batch_size=8, seed=(0, 1), duals=duals)

print("mean cost per episode ($):", round(batch.cost_mean, 3))
print("channel means:", {c: round(float(v), 4) for c, v in zip(rollout.CHANNELS, batch.channel_means)})
print("cached g_a shape (episodes, steps, agents):", batch.g_a.shape)

# g_sigma is the action gradient times the sampled noise, exactly
print("g_sigma == g_a * eps:", np.array_equal(batch.g_sigma, batch.g_a * batch.eps))

# %%
# At the caching parameters the surrogate's gradient is the Lagrangian
# gradient (up to the sample/episode normalisation), whatever the penalty.
_, g_sur = trainer.surrogate_loss(pols, batch, beta=1000.0, tau=0.0)
g_lag = trainer.lagrangian_gradient(pols, batch)
scale = batch.n_samples / batch.g_mu.shape[0]
err = max(np.max(np.abs(a * scale - b)) / np.max(np.abs(b)) for a, b in zip(g_sur.arrays(), g_lag.arrays()))
print(f"surrogate vs Lagrangian parameter gradient: max relative difference {err:.1e}")

# a few proximal steps move the outputs; the trust metric measures how far
adam = trainer.Adam(5e-3)
theta = pols
for _ in range(40):
    _, g = trainer.surrogate_loss(theta, batch, beta=200.0, tau=0.01)
    theta = adam.step(theta, g)
print("trust metric after 40 inner steps:", round(trainer.trust_metric(theta, batch), 4))
