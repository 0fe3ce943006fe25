"""Crafted single-scene evaluation cases with AP/APH worked out by hand on the 101-point grid."""
import math

from conquer.geometry import Box3D
from conquer.inference import Detection


def gt(x, cls=1, heading=0.0, size=1.0):
    return Box3D(x, 0.0, 0.0, size, size, 1.5, heading, class_id=cls)


def hit(g, score, dheading=0.0):
    return Detection(g.replace(heading=g.heading + dheading), score, g.class_id)


def miss(x, score, cls=1):
    return Detection(Box3D(x, 20.0, 0.0, 1.0, 1.0, 1.5, 0.0, class_id=cls), score, cls)


def _cases():
    g0, g1 = gt(0.0), gt(5.0)
    v0 = gt(0.0, cls=0, size=4.0)
    return {
        # two exact detections at score 1: every grid point has precision 1
        "perfect": ([hit(g0, 1.0), hit(g1, 1.0)], [g0, g1], 1, 1.0, 1.0),
        # TP ranked above the FP: precision 1 is reached at recall 1
        "tp_first": ([hit(g0, 0.9), miss(3.0, 0.8)], [g0], 1, 1.0, 1.0),
        # FP ranked first: recall 1 only at precision 1/2
        "fp_first": ([miss(3.0, 0.9), hit(g0, 0.8)], [g0], 1, 0.5, 0.5),
        # TP, FP, TP over two GTs: grid points r <= 0.5 see precision 1 (51 of them),
        # the other 50 see 2/3; APH scales the second TP by heading weight 1/2 -> (1 + 1/2)/3
        "interleaved": ([hit(g0, 0.9), miss(3.0, 0.8), hit(g1, 0.7, math.pi / 2)], [g0, g1], 1,
                        (51 + 50 * 2 / 3) / 101, (51 + 50 * 0.5) / 101),
        # one of two vehicles found with a quarter-turn heading error (square footprint keeps IoU = 1)
        "half_recall_heading": ([hit(v0, 0.6, math.pi / 2)], [v0, gt(9.0, cls=0, size=4.0)], 0,
                                51 / 101, 0.5 * 51 / 101),
    }


CASES = _cases()
