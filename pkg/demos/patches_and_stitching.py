"""
Farthest point sampling, patch extraction, and stitching
========================================================

A cloud is covered with fixed-size local patches seeded in farthest-point
order. Each patch lives in its own unit-sphere frame; stitching averages
the per-patch world coordinates back into one cloud. With the identity
applied to every patch, stitching reproduces the input exactly.
"""
import numpy as np

from noisetrans import Sphere, sample_surface
from noisetrans.spatial import extract_patches, farthest_point_sample, stitch_patches

cloud = sample_surface(Sphere(1.0), 500, seed=0).coords

picks = farthest_point_sample(cloud, 8)
print("farthest-point seeds:", picks.tolist())

patches = extract_patches(cloud, patch_size=64)
print(f"{len(patches)} patches of 64 points cover all {len(cloud)} points")
for p in patches[:3]:
    radius = np.sqrt((p.local_coords ** 2).sum(axis=1)).max()
    print(f"  seed {p.seed_index:4d}  scale {p.scale:.4f}  local max norm {radius:.4f}")

# identity round trip: stitch the untouched local coordinates
restored = stitch_patches(patches, [p.local_coords for p in patches], len(cloud))
print("stitch identity max error:", np.abs(restored - cloud).max())

# deeper coverage gives each point several estimates to average
dense = extract_patches(cloud, patch_size=64, min_coverage=3)
print(f"min_coverage=3 needs {len(dense)} patches")
