"""Watch the query masks shrink from Z0 (everything) to the final iteration.

A tiny model is trained for a few dozen steps on two phantoms, then the
decoder is run once with recording on.  For each iteration we print how
many voxels each query claims and how much attention mass lands inside
the previous mask.

    python demos/coarse_to_fine.py
"""

import numpy as np

from vxf.config import RunConfig
from vxf.run import build_model, synth_cases, train
from vxf.tensor import as_tensor, no_grad

cases = synth_cases("vessel_tumor", 2, 42, (16, 16, 16))
cfg = RunConfig(crop=[16, 16, 16], base_channels=4, depth=2, d_dec=32, num_queries=6,
                decoder_heads=2, steps=60, lr=3e-3, log_every=0, out_dir="demo_c2f")
model = train(cfg, cases=cases)["model"]

with no_grad():
    pyramid = model.unet(as_tensor(cases[0].image))
    snaps = model.decoder.refine(pyramid, record=True)
for t, snap in enumerate(snaps):
    sizes = snap.Z.sum(axis=1)
    line = f"Z{t}: voxels per query {sizes.tolist()}"
    if snap.affinities:
        w = snap.affinities[0]["weights"]
        line += f"  | max attention row sum {w.sum(axis=1).max():.3f}"
    print(line)

untrained = build_model(cfg)
with no_grad():
    first = untrained.forward(cases[0].image).snapshots[0]
assert (first.Z == 1).all(), "zero queries give an all-foreground first mask"
print("untrained Z0 covers every voxel:", bool(np.all(first.Z == 1)))
