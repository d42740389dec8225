"""
A fidelity jump
===============

Policies are trained on hourly steps.  As a stand-in for deployment we rerun
them on the same building at 15 minute steps, holding each decision for four
sub-steps, and compare annual rewards.  Both runs simulate the same 8760
hours.
"""

from uedhvac.eval_harness import (
    ConstantController,
    NetworkController,
    RandomController,
    RBCController,
    build_suite,
    sim2real_eval,
)
from uedhvac.ou_weather import synthetic_base_year
from uedhvac.ued import Trainer, TrainConfig

base = synthetic_base_year()
suite = {k: v for k, v in build_suite().items() if k in ("phi0", "phi3_heatwave")}

untrained = Trainer(TrainConfig(seed=0), base).policy
controllers = [RBCController(), ConstantController(24.0, 21.0), RandomController(),
               NetworkController(untrained, "untrained")]

for c in controllers:
    for r in sim2real_eval(c, base, suite, seeds=(0, 1, 2)):
        print(f"{c.name:16s} {r.env:14s} hourly {r.reward_lo:9.1f}  15-min {r.reward_hi:9.1f}  "
              f"change {r.relative_change:+.2%}  hours {r.hours_lo:.0f}/{r.hours_hi:.0f}")
