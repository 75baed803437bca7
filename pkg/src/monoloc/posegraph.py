"""Sliding-window pose graph over lane-border, traffic-light and odometry
constraints.

Error terms:

* lane border (unary, scalar): cost-map value at the reprojected map point,
  weighted by the squared border-band probability;
* traffic light (unary, 2-vector): detection center minus reprojection,
  weighted by the inverse detection-center variance;
* odometry (binary, 6-vector): chart difference between the estimated and
  measured relative pose, weighted by the inverse delta covariance.

Perception terms are robustified with the Cauchy kernel via iteratively
reweighted least squares; odometry terms stay quadratic. The solver is a
damped Gauss-Newton (Levenberg-Marquardt) over the stacked 6N increment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .costmap import CostMap
from .geometry import CAM_FROM_BODY, CameraIntrinsics, Pose6D, Z_MIN


class NoConstraints(Exception):
    pass


class NumericalFailure(Exception):
    """Normal equations unrecoverable; hold the last pose and coast."""


class NonMonotonicTimestamp(Exception):
    pass


@dataclass(frozen=True)
class OdometryDelta:
    """Measured relative motion body k -> k+1 with an SPD 6x6 covariance."""

    delta: Pose6D
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (6, 6):
            raise ValueError("covariance must be 6x6")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        cov = cov.copy()
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    step_norm_tol: float = 1e-6
    rel_cost_tol: float = 1e-9
    out_of_image_cost: float | None = None   # None: image diagonal in pixels
    window_size: int = 10
    robust: bool = True
    max_damping: float = 1e12

    def __post_init__(self):
        if self.step_norm_tol <= 0 or self.rel_cost_tol <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")


@dataclass
class FrameData:
    """Per-frame constraint inputs for one pose."""

    timestamp: float
    cost_map: CostMap | None = None
    lane_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    light_matches: list = field(default_factory=list)   # (pos, center, var)
    odom_from_prev: OdometryDelta | None = None


@dataclass
class PoseState:
    pose: Pose6D
    frame: FrameData
    odom_from_prev: OdometryDelta | None


class PoseGraphProblem:
    """Window of timestamped poses with their constraints."""

    def __init__(self, cam: CameraIntrinsics):
        self.cam = cam
        self.states: list[PoseState] = []

    @property
    def poses(self):
        return [s.pose for s in self.states]


# ---------------------------------------------------------------------------
# error terms

def cauchy(x: float):
    """Robust kernel rho(x) = log(1 + x) and its derivative 1/(1 + x)."""
    if np.any(np.asarray(x) < 0):
        raise ValueError("cauchy expects a nonnegative weighted squared error")
    return np.log1p(x), 1.0 / (1.0 + x)


def _point_jacobian_blocks(pts_body):
    """(n, 3, 6) derivative of the camera-frame point w.r.t. the pose chart."""
    n = len(pts_body)
    m = np.zeros((n, 3, 6))
    m[:, :, :3] = -np.eye(3)
    # rotation block is skew(X_body): X_body(d) ~ X_body - dt + X_body x dtheta
    m[:, 0, 4] = -pts_body[:, 2]
    m[:, 0, 5] = pts_body[:, 1]
    m[:, 1, 3] = pts_body[:, 2]
    m[:, 1, 5] = -pts_body[:, 0]
    m[:, 2, 3] = -pts_body[:, 1]
    m[:, 2, 4] = pts_body[:, 0]
    return np.einsum("ij,njk->nik", CAM_FROM_BODY, m)


def lane_border_residuals(pose: Pose6D, cm: CostMap, lane_points, cam: CameraIntrinsics,
                          out_of_image_cost: float | None = None):
    """Cost-map residuals of reprojected lane points.

    Returns (residuals (n,), jacobians (n, 6), omegas (n,), active (n,)).
    Points behind the camera or outside the interpolable interior carry the
    out-of-image penalty with a zero Jacobian and unit weight.
    """
    pts = np.asarray(lane_points, dtype=float).reshape(-1, 3)
    n = len(pts)
    oob = cam.diagonal if out_of_image_cost is None else out_of_image_cost
    res = np.full(n, oob)
    jac = np.zeros((n, 6))
    omega = np.ones(n)
    active = np.zeros(n, dtype=bool)
    if n == 0:
        return res, jac, omega, active
    pts_body = pose.apply_inverse(pts)
    pts_cam = pts_body @ CAM_FROM_BODY.T
    uv, in_front = geometry.project_points(cam, pts_cam)
    vals, grads, interior = cm.sample_many(uv)
    ok = in_front & interior
    if ok.any():
        res[ok] = vals[ok]
        omega[ok] = cm.info_at(uv[ok])
        z = pts_cam[ok, 2]
        jp = np.zeros((int(ok.sum()), 2, 3))
        jp[:, 0, 0] = cam.fx / z
        jp[:, 0, 2] = -cam.fx * pts_cam[ok, 0] / z ** 2
        jp[:, 1, 1] = cam.fy / z
        jp[:, 1, 2] = -cam.fy * pts_cam[ok, 1] / z ** 2
        blocks = _point_jacobian_blocks(pts_body[ok])
        jac[ok] = np.einsum("ni,nij,njk->nk", grads[ok], jp, blocks)
    active[ok] = True
    return res, jac, omega, active


def traffic_light_residuals(pose: Pose6D, matches, cam: CameraIntrinsics):
    """Pixel residuals of matched lights.

    Returns (residuals (m, 2), omegas (m, 2) diagonal, jacobians (m, 2, 6),
    kept (len(matches),) mask); lights behind the camera are skipped.
    """
    kept = np.zeros(len(matches), dtype=bool)
    res, omg, jac = [], [], []
    for i, (pos, center, var) in enumerate(matches):
        pos = np.asarray(pos, dtype=float).reshape(3)
        pt_body = pose.apply_inverse(pos)
        pt_cam = CAM_FROM_BODY @ pt_body
        if pt_cam[2] <= Z_MIN:
            continue
        kept[i] = True
        uv = np.array([cam.fx * pt_cam[0] / pt_cam[2] + cam.cx,
                       cam.fy * pt_cam[1] / pt_cam[2] + cam.cy])
        res.append(np.asarray(center, dtype=float) - uv)
        omg.append(1.0 / np.asarray(var, dtype=float))
        jp = geometry.project_jacobian(cam, pt_cam)
        block = _point_jacobian_blocks(pt_body[None, :])[0]
        jac.append(-jp @ block)
    if not res:
        return (np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2, 6)), kept)
    return np.array(res), np.array(omg), np.array(jac), kept


def odometry_residual(p_k: Pose6D, p_k1: Pose6D, delta: OdometryDelta):
    """Chart residual of the estimated relative pose against the measurement."""
    rel = p_k.inverse().compose(p_k1)
    e = geometry.boxminus(rel, delta.delta)
    return e, np.linalg.inv(delta.covariance)


def odometry_jacobians(p_k: Pose6D, p_k1: Pose6D, delta: OdometryDelta):
    """Analytic (6x6, 6x6) derivatives of the odometry residual w.r.t. the
    chart increments of p_k and p_k1."""
    r_rel = p_k.rotation_matrix().T @ p_k1.rotation_matrix()
    t_rel = p_k.rotation_matrix().T @ (p_k1.translation - p_k.translation)
    r_d = delta.delta.rotation_matrix()
    phi = geometry.quat_log(geometry.quat_mul(
        geometry.quat_conj(delta.delta.rotation),
        geometry.quat_mul(geometry.quat_conj(p_k.rotation), p_k1.rotation)))
    jr_inv = geometry.so3_right_jacobian_inverse(phi)
    jk = np.zeros((6, 6))
    jk1 = np.zeros((6, 6))
    jk[:3, :3] = -r_d.T
    jk[:3, 3:] = r_d.T @ geometry.skew(t_rel)
    jk[3:, 3:] = -jr_inv @ r_rel.T
    jk1[:3, :3] = r_d.T @ r_rel
    jk1[3:, 3:] = jr_inv
    return jk, jk1


# ---------------------------------------------------------------------------
# assembly and Levenberg-Marquardt

def _has_unary(states):
    for s in states:
        if s.frame.cost_map is not None and len(s.frame.lane_points) > 0:
            return True
        if s.frame.light_matches:
            return True
    return False


def _count_constraints(states):
    n = 0
    for i, s in enumerate(states):
        if s.frame.cost_map is not None:
            n += len(s.frame.lane_points)
        n += len(s.frame.light_matches)
        if i > 0 and s.odom_from_prev is not None:
            n += 1
    return n


def evaluate_cost(problem: PoseGraphProblem, cfg: SolverConfig, poses=None) -> float:
    """Total (robustified) cost of the window at the given poses."""
    poses = problem.poses if poses is None else poses
    cost = 0.0
    for i, state in enumerate(problem.states):
        cost += _frame_cost(poses[i], state.frame, problem.cam, cfg)
        if i > 0 and state.odom_from_prev is not None:
            e, omega = odometry_residual(poses[i - 1], poses[i], state.odom_from_prev)
            cost += float(e @ omega @ e)
    return cost


def _frame_cost(pose, frame, cam, cfg):
    cost = 0.0
    if frame.cost_map is not None and len(frame.lane_points) > 0:
        r, _, w, _ = lane_border_residuals(pose, frame.cost_map, frame.lane_points,
                                           cam, cfg.out_of_image_cost)
        x = w * r * r
        cost += float(np.log1p(x).sum()) if cfg.robust else float(x.sum())
    if frame.light_matches:
        res, omg, _, _ = traffic_light_residuals(pose, frame.light_matches, cam)
        x = (res * res * omg).sum(axis=1)
        cost += float(np.log1p(x).sum()) if cfg.robust else float(x.sum())
    return cost


def _assemble(problem, poses, cfg):
    n = len(poses)
    H = np.zeros((6 * n, 6 * n))
    b = np.zeros(6 * n)
    cost = 0.0
    cam = problem.cam
    for i, state in enumerate(problem.states):
        frame = state.frame
        sl = slice(6 * i, 6 * i + 6)
        if frame.cost_map is not None and len(frame.lane_points) > 0:
            r, J, w_info, active = lane_border_residuals(
                poses[i], frame.cost_map, frame.lane_points, cam, cfg.out_of_image_cost)
            x = w_info * r * r
            if cfg.robust:
                cost += float(np.log1p(x).sum())
                w_rob = 1.0 / (1.0 + x)
            else:
                cost += float(x.sum())
                w_rob = np.ones_like(x)
            w = w_rob * w_info
            H[sl, sl] += np.einsum("n,ni,nj->ij", w, J, J)
            b[sl] += np.einsum("n,ni->i", w * r, J)
        if frame.light_matches:
            res, omg, J, _ = traffic_light_residuals(poses[i], frame.light_matches, cam)
            x = (res * res * omg).sum(axis=1)
            if cfg.robust:
                cost += float(np.log1p(x).sum())
                w_rob = 1.0 / (1.0 + x)
            else:
                cost += float(x.sum())
                w_rob = np.ones_like(x)
            wo = w_rob[:, None] * omg
            H[sl, sl] += np.einsum("nc,nci,ncj->ij", wo, J, J)
            b[sl] += np.einsum("nc,nci->i", wo * res, J)
        if i > 0 and state.odom_from_prev is not None:
            e, omega = odometry_residual(poses[i - 1], poses[i], state.odom_from_prev)
            jk, jk1 = odometry_jacobians(poses[i - 1], poses[i], state.odom_from_prev)
            cost += float(e @ omega @ e)
            sp = slice(6 * (i - 1), 6 * i)
            H[sp, sp] += jk.T @ omega @ jk
            H[sp, sl] += jk.T @ omega @ jk1
            H[sl, sp] += jk1.T @ omega @ jk
            H[sl, sl] += jk1.T @ omega @ jk1
            b[sp] += jk.T @ omega @ e
            b[sl] += jk1.T @ omega @ e
    return H, b, cost


def solve(problem: PoseGraphProblem, cfg: SolverConfig, trace: list | None = None):
    """Optimize the window in place.

    Returns (poses, final_cost, iterations, converged); iterations counts
    linear-system solves. Accepted steps never increase the robustified cost.
    """
    if not problem.states:
        raise NoConstraints("empty problem")
    if _count_constraints(problem.states) == 0:
        raise NoConstraints("no constraints in the window")
    # without absolute (unary) constraints the gauge is free: anchor pose 0
    anchor_first = not _has_unary(problem.states)
    free = np.arange(6 * len(problem.states))
    if anchor_first:
        free = free[6:]

    poses = list(problem.poses)
    lam = cfg.initial_damping
    iterations = 0
    converged = False
    H, b, cost = _assemble(problem, poses, cfg)
    if not math.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")

    for _ in range(cfg.max_iterations):
        if np.abs(b[free]).max(initial=0.0) < 1e-14:
            converged = True
            break
        accepted = False
        while lam <= cfg.max_damping:
            Hd = H[np.ix_(free, free)] + lam * np.eye(len(free))
            try:
                step_free = np.linalg.solve(Hd, -b[free])
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            iterations += 1
            if not np.all(np.isfinite(step_free)):
                lam *= cfg.damping_up
                continue
            if np.linalg.norm(step_free) < cfg.step_norm_tol:
                converged = True
                break
            step = np.zeros(6 * len(poses))
            step[free] = step_free
            trial = [geometry.boxplus(p, step[6 * i:6 * i + 6])
                     for i, p in enumerate(poses)]
            trial_cost = evaluate_cost(problem, cfg, trial)
            if math.isfinite(trial_cost) and trial_cost <= cost:
                rel_dec = (cost - trial_cost) / max(cost, 1e-300)
                if rel_dec < cfg.rel_cost_tol:
                    # improvement below tolerance is noise: discard and stop
                    converged = True
                    break
                poses = trial
                cost = trial_cost
                lam = max(lam * cfg.damping_down, 1e-15)
                accepted = True
                if trace is not None:
                    trace.append({"cost": cost, "step_norm": float(np.linalg.norm(step_free)),
                                  "damping": lam})
                break
            lam *= cfg.damping_up
        if converged:
            break
        if not accepted:
            raise NumericalFailure("no acceptable step within damping budget")
        H, b, cost = _assemble(problem, poses, cfg)

    for state, pose in zip(problem.states, poses):
        state.pose = pose
    return poses, cost, iterations, converged


def slide_window(problem: PoseGraphProblem, frame: FrameData,
                 init_pose: Pose6D | None = None) -> PoseGraphProblem:
    """Append a frame (dead-reckoning init) and drop the oldest beyond N.

    The dropped pose takes its unary constraints and the dangling odometry
    factor with it; no marginal prior is kept.
    """
    if problem.states:
        if frame.timestamp <= problem.states[-1].frame.timestamp:
            raise NonMonotonicTimestamp(
                f"timestamp {frame.timestamp} not after "
                f"{problem.states[-1].frame.timestamp}")
        if init_pose is None:
            last = problem.states[-1].pose
            init_pose = last.compose(frame.odom_from_prev.delta) \
                if frame.odom_from_prev is not None else last
        problem.states.append(PoseState(init_pose, frame, frame.odom_from_prev))
    else:
        if init_pose is None:
            raise ValueError("first frame needs an explicit initial pose")
        problem.states.append(PoseState(init_pose, frame, None))
    return problem


def trim_window(problem: PoseGraphProblem, window_size: int) -> PoseGraphProblem:
    while len(problem.states) > window_size:
        problem.states.pop(0)
        problem.states[0].odom_from_prev = None
    return problem


def localize_single_frame(frame: FrameData, init: Pose6D, cam: CameraIntrinsics,
                          cfg: SolverConfig | None = None) -> Pose6D:
    """Optimize one pose from perception constraints only (no odometry).

    Relocalization inits can be far off, where the Cauchy kernel saturates and
    suppresses exactly the residuals that carry the capture information, so a
    quadratic warm-up pass precedes the robust solve (graduated robustness).
    The warm-up is skipped when the config itself is non-robust.
    """
    cfg = cfg or SolverConfig()
    problem = PoseGraphProblem(cam)
    problem.states.append(PoseState(init, frame, None))
    if cfg.robust:
        try:
            solve(problem, replace(cfg, robust=False, window_size=1))
        except NumericalFailure:
            problem.states[0].pose = init
    poses, _, _, _ = solve(problem, replace(cfg, window_size=1))
    return poses[0]
