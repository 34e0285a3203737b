"""Can the desk model memorise 32 shapes?

Trains the 64 px, four-level model on 32 synthetic samples with the
default optimiser settings and prints the training-set NME as it goes. The
acceptance gate is NME <= 0.02 after 2000 steps; always predicting the mean
shape scores about 0.08. Takes roughly 15 minutes on one core.

    python3 demos/04_overfit.py [steps]
"""

import sys
import time

from aggmesh.experiments import desk_task, mean_shape_nme, overfit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
task = desk_task()
print(f"mean-shape baseline NME {mean_shape_nme(task):.4f}")
t0 = time.perf_counter()
_, final = overfit(task, steps, eval_every=100,
                   on_eval=lambda s, v: print(f"step {s:5d}  NME {v:.4f}  {time.perf_counter() - t0:6.0f} s",
                                              flush=True))
print(f"final training NME {final:.4f}")
