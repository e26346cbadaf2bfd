"""
Training the desk fleet
=======================

Train GradMAP and GradMA on the 10-agent, 21-day hourly scenario with the
same number of environment-gradient evaluations, then compare held-out
costs with the rule-based baseline. Takes about half a minute.

Pass an output directory to keep logs, checkpoints and traces::

    python demos/train_desk.py out/
"""

import sys

import numpy as np

from gradmap import devices, feeder, rollout, scenario, trainer

out = sys.argv[1] if len(sys.argv) > 1 else None
fleet = devices.load_bundled_fleet("desk10")
net = feeder.load_bundled_feeder("small4bus")
sc = scenario.desk_scenario(fleet.ids)
env = rollout.Environment(fleet, net, sc.dt)

naive = trainer.naive_baseline(env, sc)
print(f"naive baseline: {naive.total_cost:.2f} $ over {len(sc.test_days)} test days")

results = {}
for mode in ("gradma", "gradmap"):
    cfg = trainer.desk_config(mode, seed=0, eval_every_primal=True)
    res = trainer.train(cfg, fleet, net, sc, out_dir=None if out is None else f"{out}/{mode}")
    m = trainer.evaluate(res.policies, env, sc)
    curve = np.array([r["eval_cost"] for r in res.log])
    results[mode] = curve
    print(f"{mode:8s} final {m.total_cost:.2f} $, best {curve.min():.2f} at call {curve.argmin() + 1}, "
          f"Bend {m.bend:.3f}, Hend {m.hend:.3f}")

# %%
# Calls needed by GradMAP to match GradMA's best evaluation cost.
target = results["gradma"].min()
hit = np.flatnonzero(results["gradmap"] <= target)
print("GradMAP first reaches it at call", hit[0] + 1 if hit.size else "never")
for k in (1, 5, 10, 25, 50):
    print(f"call {k:2d}: gradma {results['gradma'][k - 1]:8.2f}   gradmap {results['gradmap'][k - 1]:8.2f}")
