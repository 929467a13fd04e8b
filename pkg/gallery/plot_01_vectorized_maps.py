"""
Vectorized map elements
=======================

Build a tiny map by hand, resample it, clip it to the perception range and
look at the vertex orderings that count as "the same" element.
"""
import numpy as np

from rcvmap.map_model import (
    MapClass,
    PerceptionRange,
    clip_element,
    make_map,
    normalize_points,
    permutation_group,
    resample_polyline,
)

rng = PerceptionRange()  # +-30 m square around the junction
print(rng)

# a bent divider with uneven vertex spacing becomes 20 equally spaced points
bent = [(-25, -3), (-10, -3), (0, 0), (12, 6)]
pts = resample_polyline(bent, 20, False)
print("spacing:", np.round(np.linalg.norm(np.diff(pts, axis=0), axis=1)[:3], 3))

# a boundary running past the edge of the range is clipped and resampled
clipped = clip_element(MapClass.BOUNDARY, [(0, 10), (50, 10)], False, rng, 20)
print("clipped end:", clipped.points[-1])

# polygons (crossings) have 2n equivalent orderings, polylines just 2
print(len(permutation_group(20, True)), len(permutation_group(20, False)))

vmap = make_map(
    [(MapClass.DIVIDER, bent, False), (MapClass.PED_CROSSING, [(5, 5), (9, 5), (9, 9), (5, 9)], True)],
    rng,
    scene_id="hand_made",
)
for el in vmap.elements:
    print(el.class_id.name, el.num_points, "closed" if el.is_closed else "open")

# the network works in [0, 1] coordinates
print(normalize_points(vmap.elements[1].points[:2], rng))
