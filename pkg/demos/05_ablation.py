"""Does the aggregation grid help?

Trains the desk model three ways: with the full nested grid, with only the
encoder outputs bridged to the decoder ("shallow"), and with no image
features reaching the decoder apart from the embedding ("none"). Each runs
for the same number of steps from the same seeds; lower final loss is
better. Three seeds at 1000 steps take about 40 minutes on one core.

    python3 demos/05_ablation.py [steps] [seeds, comma separated]
"""

import sys

import numpy as np

from aggmesh.experiments import ablation, ablation_means, desk_task

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
seeds = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [7, 8, 9]
results = ablation(desk_task(), ("full", "shallow", "none"), seeds, steps,
                   on_result=lambda r: print(f"{r.mode:8s} seed {r.seed}: loss {r.loss:.4f}  NME {r.nme:.4f}  "
                                             f"({r.seconds:.0f} s)", flush=True))
for mode, mean in ablation_means(results).items():
    spread = np.std([r.loss for r in results if r.mode == mode])
    print(f"{mode:8s} mean loss {mean:.4f} +- {spread:.4f}")
