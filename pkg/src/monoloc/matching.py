"""Traffic-light to detection association by reprojected center distance.

Greedy nearest-first assignment with a pixel gate, persistence of established
associations while the light stays in the frustum, and an epistemic
uncertainty cap on admitted detections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .evidential import nig_uncertainties
from .geometry import CameraIntrinsics, Pose6D, Z_MIN

DEFAULT_GATE_PX = 30.0


@dataclass
class Association:
    light_id: int
    detection_index: int
    center_distance_px: float
    frame_established: int


@dataclass
class AssociationTable:
    """Current-frame associations plus per-light establishment history."""

    active: list = field(default_factory=list)
    history: dict = field(default_factory=dict)   # light_id -> frame established
    frame: int = -1


def detection_center_and_variance(det):
    """Box center (px) and variance of the center (px^2) per axis.

    The center of an axis is the mean of two independent edge estimates, so
    its variance is the sum of the edge aleatoric variances over 4.
    """
    gam = np.array([e.gamma for e in det.edges])
    ua = np.array([nig_uncertainties(e)[0] for e in det.edges])
    center = np.array([(gam[0] + gam[2]) / 2.0, (gam[1] + gam[3]) / 2.0])
    var = np.array([(ua[0] + ua[2]) / 4.0, (ua[1] + ua[3]) / 4.0])
    return center, var


def match(visible, detections, pose: Pose6D, cam: CameraIntrinsics,
          table: AssociationTable, gate_px: float = DEFAULT_GATE_PX,
          max_epistemic: float = math.inf) -> AssociationTable:
    """Associate visible map lights with detections for one frame.

    Established lights are re-claimed first (nearest unclaimed detection
    within the gate of their current reprojection), then remaining lights are
    matched greedily in ascending center distance. Associations of lights no
    longer in the frustum are dropped. Detections whose mean epistemic
    uncertainty exceeds the cap are ignored entirely.
    """
    table.frame += 1
    frame = table.frame

    visible_ids = {tl.id for tl in visible.lights}
    table.history = {lid: est for lid, est in table.history.items() if lid in visible_ids}
    previously = set(table.history)

    reproj = {}
    for tl in visible.lights:
        pc = geometry.world_points_to_camera(pose, tl.position.reshape(1, 3))[0]
        if pc[2] <= Z_MIN:
            continue
        reproj[tl.id] = np.array([cam.fx * pc[0] / pc[2] + cam.cx,
                                  cam.fy * pc[1] / pc[2] + cam.cy])

    usable = []
    for idx, det in enumerate(detections):
        ue = np.mean([nig_uncertainties(e)[1] for e in det.edges])
        if ue <= max_epistemic:
            usable.append((idx, detection_center_and_variance(det)[0]))

    pairs = []
    for lid in sorted(reproj):
        for idx, center in usable:
            d = float(np.linalg.norm(center - reproj[lid]))
            if d <= gate_px:
                pairs.append((d, lid, idx))
    pairs.sort()

    active = []
    claimed_lights = set()
    claimed_dets = set()
    # persistence first: established lights get priority over new ones
    for established_only in (True, False):
        for d, lid, idx in pairs:
            if (lid in previously) != established_only:
                continue
            if lid in claimed_lights or idx in claimed_dets:
                continue
            claimed_lights.add(lid)
            claimed_dets.add(idx)
            est = table.history.get(lid, frame)
            table.history[lid] = est
            active.append(Association(lid, idx, d, est))

    active.sort(key=lambda a: a.light_id)
    table.active = active
    return table


def matched_constraints(table: AssociationTable, visible, detections):
    """(light position, detection center, center variance) per association."""
    by_id = {tl.id: tl for tl in visible.lights}
    out = []
    for assoc in table.active:
        center, var = detection_center_and_variance(detections[assoc.detection_index])
        out.append((by_id[assoc.light_id].position, center, var))
    return out
