"""
Searching for uncertain weather
===============================

ActiveRL picks the next training level by climbing the critic's MC-dropout
uncertainty about the first observation, minus a penalty on the distance
from the base level.  The climb is a projected extragradient method on the
Lagrangian of the box constraints.  Here we train a small agent for a few
short episodes and look at where the search sends it for several penalty
weights.
"""

import numpy as np

from uedhvac.ou_weather import synthetic_base_year
from uedhvac.ued import PPOConfig, SearchConfig, Trainer, TrainConfig, active_search, critic_uncertainty

base = synthetic_base_year()
cfg = TrainConfig(strategy="active_rl", seed=0, total_steps=6 * 24 * 14, episode_steps=24 * 14,
                  normalizer_episodes=2, ppo=PPOConfig(hidden=(64, 64), minibatch=112),
                  search=SearchConfig(n_iters=30))
trainer = Trainer(cfg, base)
for rec in trainer.run():
    print(f"episode {rec['episode']}: phi {np.round(rec['phi'], 2)}  value loss {rec['value_loss']:.3f}")

###############################################################################
# A heavier distance penalty keeps the proposal close to phi0 = 0.

unc = critic_uncertainty(trainer.policy, trainer.s0, passes=10, dropout=0.1, anchor=trainer.anchor)
scale = trainer.policy.normalizer.std[:5]
for gamma in (0.0, 0.5, 5.0):
    search = SearchConfig(n_iters=60, gamma=gamma)
    phi = active_search(unc, trainer.phi0, search, np.random.default_rng(0),
                        lower=trainer.lower, upper=trainer.upper, scale=scale)
    print(f"gamma {gamma:3.1f}: |phi - phi0| in normalized units = {np.linalg.norm(phi / scale):.3f}")
