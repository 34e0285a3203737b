"""Building a mesh hierarchy for the decoder.

The decoder starts from 16 vertices and up-samples level by level. Each
level's vertex count matches the square of an encoder feature map width, so
a 64 px input with four levels needs meshes of 1024, 256, 64 and 16
vertices. Quadric edge collapses produce the coarse meshes; the selection
matrix picks surviving vertices and the barycentric matrix interpolates
back up.

    python3 demos/02_mesh_hierarchy.py [out_dir]
"""

import sys

import numpy as np

from aggmesh.graph import is_connected
from aggmesh.sampling import build_hierarchy, save_hierarchy
from aggmesh.shapes import fibonacci_sphere

template = fibonacci_sphere(1024, 0.6)
h = build_hierarchy(template, [1024, 256, 64, 16])

for k, (mesh, lmax) in enumerate(zip(h.levels, h.lambda_max)):
    print(f"level {k}: {mesh.n_vertices:5d} vertices, {len(mesh.faces):5d} faces, "
          f"lambda_max {lmax:.3f}, connected {is_connected(mesh.adjacency)}")

# round trip a smooth function through down- then up-sampling
signal = template.vertices[:, :1] ** 2
for k, pair in enumerate(h.pairs):
    down = pair.q_down @ signal
    back = pair.q_up @ down
    print(f"{h.counts[k]} -> {h.counts[k + 1]} -> {h.counts[k]}: "
          f"mean |f - Q_u Q_d f| = {np.abs(back - signal).mean():.4f}")
    signal = down

q_up = h.pairs[0].q_up
print(f"Q_u rows sum to 1: {np.allclose(np.asarray(q_up.sum(axis=1)).ravel(), 1.0)}, "
      f"at most {np.diff(q_up.tocsr().indptr).max()} nonzeros per row")

if len(sys.argv) > 1:
    print("wrote", save_hierarchy(h, sys.argv[1]))
