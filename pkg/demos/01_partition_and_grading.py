"""Walk through how proposals become positives, negatives and IoU groups."""

import numpy as np

from regionprompt import geometry, synthdata

# A tiny scene by hand: one ground truth and three proposals around it.
gt = geometry.ProposalRecord("g0", "im0", geometry.Box(0, 0, 10, 10), geometry.GROUND_TRUTH, "cat")
props = [
    geometry.ProposalRecord("p0", "im0", geometry.Box(1, 0, 11, 10), geometry.REGION_PROPOSAL),
    geometry.ProposalRecord("p1", "im0", geometry.Box(4, 0, 14, 10), geometry.REGION_PROPOSAL),
    geometry.ProposalRecord("p2", "im0", geometry.Box(30, 30, 40, 40), geometry.REGION_PROPOSAL),
]
for p in props:
    print(p.id, "IoU with g0 =", round(geometry.iou(p.box, gt.box), 3))

part = geometry.partition(props, [gt], 0.5)
print("positives:", [r.id for r in part.positives])
print("negatives:", [r.id for r in part.negatives])

# The synthetic benchmark has thousands of these; grade its positives.
_, table, records = synthdata.gen_benchmark(seed=0)
proposals, gts = geometry.split_kinds(records)
part = geometry.partition(proposals, gts, 0.5)
for g in geometry.grade(part, 0.5, 1.0, 0.1):
    ious = np.array([m.max_iou for m in g.members])
    print(f"group [{g.lo:.1f}, {g.hi:.1f}]  n={len(ious):4d}  mean IoU={ious.mean():.3f}")
print(len(part.negatives), "background proposals")
