"""
Chamfer AP
==========

Score noisy copies of the ground truth at the three Chamfer thresholds.
"""
import numpy as np

from rcvmap.evalkit import ScoredElement, chamfer_distance, evaluate, gt_as_predictions
from rcvmap.map_model import MapElement
from rcvmap.synthworld import generate_scene

print(chamfer_distance([(0, 0)], [(3, 4)]))  # 5.0

gts = [generate_scene(s)[0] for s in range(4)]
print("perfect:", evaluate([gt_as_predictions(g) for g in gts], gts).mAP)

rng = np.random.default_rng(1)
for sigma in (0.2, 0.6, 1.2):
    preds = []
    for g in gts:
        noisy = [
            ScoredElement(MapElement(e.class_id, np.clip(e.points + rng.normal(0, sigma, e.points.shape), -30, 30), e.is_closed),
                          float(rng.random()))
            for e in g.elements
        ]
        preds.append(noisy)
    rep = evaluate(preds, gts)
    taus = {k: round(v, 3) for k, v in rep.per_threshold["divider"].items()}
    print(f"sigma {sigma}: mAP {rep.mAP:.3f}  divider per tau {taus}")
