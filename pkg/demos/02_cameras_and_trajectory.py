"""Camera conditioning: Plücker rays, Fourier features and the novel-view ellipse.

Run: python3 demos/02_cameras_and_trajectory.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from sparsesplat import io
from sparsesplat.camera_geom import camera_embeddings, fit_trajectory, plucker_from_camera, sample_pose, trajectory_angles
from sparsesplat.render import rasterize
from sparsesplat.synthetic import object_scene, ring_cameras, rng_stream

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/02")
out.mkdir(parents=True, exist_ok=True)

# Three input cameras on an elliptical path around the object.
inputs = ring_cameras(3, radius=3.5, semi_b=2.0, height=1.0, phase=0.4, width=64, img_height=64)
for c in inputs:
    r = plucker_from_camera(c)
    print("center", np.round(c.center, 3), "ray d", np.round(r.direction, 3), "moment", np.round(r.moment, 3))

# These cameras aim at the origin, so their axis rays pass through it and the moment o x d is zero.

# Each camera becomes a 78-number vector (the raw 6-d ray plus 6 sine/cosine bands).
geo = camera_embeddings(inputs)
print("embedding matrix", geo.shape)

# Three points fix a circle only, so the fit falls back to one; with more views it finds the ellipse.
tr3 = fit_trajectory(inputs, target=[0, 0, 0])
tr8 = fit_trajectory(ring_cameras(8, radius=3.5, semi_b=2.0, height=1.0, phase=0.4), target=[0, 0, 0])
print(f"3 views: a={tr3.semi_a:.3f} b={tr3.semi_b:.3f}   8 views: a={tr8.semi_a:.3f} b={tr8.semi_b:.3f}")

# Novel poses are drawn in an order that spreads them around the loop early on.
angles = trajectory_angles(60)
print("first six angles (deg):", np.round(np.degrees(angles[:6]), 1))

scene = object_scene(rng_stream(1, "demo"), n=1500)
for j, th in enumerate(angles[:6]):
    cam = sample_pose(tr3, th, inputs[0])
    io.write_png(out / f"novel_{j}.png", rasterize(scene, cam).rgb)
io.write_json(out / "trajectory.json", tr3.to_dict())
print(f"six novel renders and the trajectory written to {out}")
