"""Render a synthetic object, then look at where the renderer is unsure.

Run: python3 demos/01_render_and_confidence.py [OUT_DIR]
"""
import sys
from pathlib import Path

import numpy as np

from sparsesplat import io
from sparsesplat.render import confidence_map, enhancer_confidence, normalize_confidence_for_display, rasterize
from sparsesplat.synthetic import object_scene, ring_cameras, rng_stream

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

# A sphere of splats sitting on a floor, seen from a ring of four cameras.
scene = object_scene(rng_stream(0, "demo"), n=2000)
cams = ring_cameras(4, radius=4.0, height=1.0, width=96, img_height=96)
print(f"scene: {len(scene)} splats, cameras: {len(cams)}")

# Thin the scene to a tenth. This stands in for a model fitted from very few views.
sparse = scene.subset(np.arange(0, len(scene), 10))

for i, cam in enumerate(cams):
    full = rasterize(scene, cam)
    thin = rasterize(sparse, cam)
    conf = confidence_map(thin)
    # zero confidence exactly where nothing was composited
    assert np.all(conf[thin.n_contrib == 0] == 0)
    io.write_png(out / f"full_{i}.png", full.rgb)
    io.write_png(out / f"sparse_{i}.png", thin.rgb)
    io.write_png(out / f"conf_{i}.png", np.repeat(normalize_confidence_for_display(conf)[..., None], 3, -1))
    enh = enhancer_confidence(thin, sparse, cam)
    print(f"view {i}: empty pixels {np.mean(thin.n_contrib == 0):5.1%}  "
          f"mean confidence full={confidence_map(full).mean():7.2f} sparse={conf.mean():7.2f}  "
          f"footprint heuristic mean={enh.mean():.3g}")

# The confidence is large where many splats stack up, and zero where the render is empty.
# A refiner conditioned on it knows which pixels it may repaint.
print(f"images written to {out}")
