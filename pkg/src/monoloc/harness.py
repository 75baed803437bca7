"""Experiment harness: scenario configs, noise injection, end-to-end runs,
per-DoF error statistics and CSV artifacts.

Error conventions: translation errors are expressed in the ground-truth body
frame (lon = forward, lat = left, z = up); rotation errors are ZYX Euler
angles of the relative rotation, reported in degrees. A single-frame trial is
a success iff |lat| < 0.5 m and |yaw| < 2.5 deg (strict inequalities).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import costmap, geometry, map_model, matching, perception_sim, posegraph, scenarios
from .geometry import CameraIntrinsics, Pose6D
from .perception_sim import NoiseProfile
from .posegraph import FrameData, OdometryDelta, PoseGraphProblem, SolverConfig

FRAMES_HEADER = "t,lon,lat,z,yaw,pitch,roll,n_lb,n_tl,iters,converged"
SUCCESS_LAT_M = 0.5
SUCCESS_YAW_DEG = 2.5
ODOM_COV_FLOOR = 1e-4          # declared sd floor so covariances stay SPD
ABLATE_CHOICES = ("uncertainty", "cauchy", "lights", "borders")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str
    map_path: Path
    trajectory_path: Path
    cam: CameraIntrinsics
    noise: NoiseProfile
    odom_sd_v: tuple = (0.0, 0.0, 0.0)      # m/s per body axis
    odom_sd_w: tuple = (0.0, 0.0, 0.0)      # rad/s per body axis
    odom_bias_v: tuple = (0.0, 0.0, 0.0)    # m/s deterministic bias
    occlude_lights_until: int = 0
    delta_t: float = 0.5                    # m, single-frame uniform bound
    delta_r: float = 2.5                    # deg, single-frame uniform bound
    frames: int = 25
    perturbations: int = 1
    gate_px: float = 30.0
    prob_weight: float = 1.0
    blur_radius: int = 3
    d_max: float = 50.0
    lane_spacing: float = 0.5
    window: int = 10
    max_iterations: int = 50
    seed: int = 1

    def solver_config(self, robust=True) -> SolverConfig:
        return SolverConfig(max_iterations=self.max_iterations,
                            window_size=self.window, robust=robust)


_FLOAT_KEYS = {"fx", "fy", "cx", "cy", "border_alpha_peak", "border_width_px",
               "class_noise_sd", "bbox_center_sd_px", "bbox_var_scale",
               "detect_dropout_prob", "delta_t", "delta_r", "gate_px",
               "prob_weight", "d_max", "lane_spacing"}
_INT_KEYS = {"width", "height", "frames", "perturbations", "window",
             "max_iterations", "seed", "occlude_lights_until", "blur_radius"}
_VEC_KEYS = {"odom_sd_v", "odom_sd_w", "odom_bias_v"}


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    raw: dict = {"clutter_line": []}
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _FLOAT_KEYS:
                raw[key] = float(value)
            elif key in _INT_KEYS:
                raw[key] = int(value)
            elif key in _VEC_KEYS:
                vec = tuple(float(v) for v in value.split())
                if len(vec) != 3:
                    raise ValueError("expected 3 components")
                raw[key] = vec
            elif key == "clutter_line":
                vals = [float(v) for v in value.split()]
                if len(vals) % 3 != 0 or len(vals) < 6:
                    raise ValueError("expected a flat list of 3D points")
                raw["clutter_line"].append(np.array(vals).reshape(-1, 3))
            elif key in ("mode", "map", "trajectory"):
                raw[key] = value
            else:
                raise ValueError(f"unknown key '{key}'")
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc

    for req in ("mode", "map", "trajectory"):
        if req not in raw:
            raise ConfigError(f"{path}: missing required key '{req}'")
    if raw["mode"] not in ("single-frame", "sequence"):
        raise ConfigError(f"{path}: mode must be single-frame or sequence")

    base = path.parent
    map_path = (base / raw["map"]).resolve()
    traj_path = (base / raw["trajectory"]).resolve()
    for p in (map_path, traj_path):
        if not p.exists():
            raise ConfigError(f"{path}: referenced file does not exist: {p}")

    try:
        cam = CameraIntrinsics(raw.get("fx", 300.0), raw.get("fy", 300.0),
                               raw.get("cx", 160.0), raw.get("cy", 100.0),
                               raw.get("width", 320), raw.get("height", 200))
        noise = NoiseProfile(
            border_alpha_peak=raw.get("border_alpha_peak", 37.0),
            border_width_px=raw.get("border_width_px", 3.0),
            class_noise_sd=raw.get("class_noise_sd", 0.0),
            bbox_center_sd_px=raw.get("bbox_center_sd_px", 0.0),
            bbox_var_scale=raw.get("bbox_var_scale", 1.0),
            detect_dropout_prob=raw.get("detect_dropout_prob", 0.0),
            clutter_lines=tuple(raw["clutter_line"]),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    kwargs = {k: raw[k] for k in
              ("odom_sd_v", "odom_sd_w", "odom_bias_v", "occlude_lights_until",
               "delta_t", "delta_r", "frames", "perturbations", "gate_px",
               "prob_weight", "blur_radius", "d_max", "lane_spacing", "window",
               "max_iterations", "seed") if k in raw}
    return ScenarioConfig(mode=raw["mode"], map_path=map_path,
                          trajectory_path=traj_path, cam=cam, noise=noise, **kwargs)


# ---------------------------------------------------------------------------
# errors and results

def pose_errors(truth: Pose6D, estimate: Pose6D):
    """(lon, lat, z) m in the truth body frame and (yaw, pitch, roll) deg."""
    e_body = truth.apply_inverse(estimate.translation)
    r_err = truth.rotation_matrix().T @ estimate.rotation_matrix()
    yaw = math.atan2(r_err[1, 0], r_err[0, 0])
    pitch = math.asin(max(-1.0, min(1.0, -r_err[2, 0])))
    roll = math.atan2(r_err[2, 1], r_err[2, 2])
    return (float(e_body[0]), float(e_body[1]), float(e_body[2]),
            math.degrees(yaw), math.degrees(pitch), math.degrees(roll))


@dataclass(frozen=True)
class FrameResult:
    t: float
    lon: float
    lat: float
    z: float
    yaw: float
    pitch: float
    roll: float
    n_lb: int
    n_tl: int
    iters: int
    converged: bool

    @property
    def success(self) -> bool:
        return abs(self.lat) < SUCCESS_LAT_M and abs(self.yaw) < SUCCESS_YAW_DEG


def write_frames_csv(path, results) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FRAMES_HEADER + "\n")
        for r in results:
            floats = ",".join(f"{v:.17g}" for v in
                              (r.t, r.lon, r.lat, r.z, r.yaw, r.pitch, r.roll))
            fh.write(f"{floats},{r.n_lb},{r.n_tl},{r.iters},{int(r.converged)}\n")


def read_frames_csv(path):
    results = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != FRAMES_HEADER:
            raise ValueError(f"unexpected frames.csv header: {header}")
        for line in fh:
            f = line.strip().split(",")
            results.append(FrameResult(
                t=float(f[0]), lon=float(f[1]), lat=float(f[2]), z=float(f[3]),
                yaw=float(f[4]), pitch=float(f[5]), roll=float(f[6]),
                n_lb=int(f[7]), n_tl=int(f[8]), iters=int(f[9]),
                converged=bool(int(f[10]))))
    return results


def sequence_summary(results):
    """RMSE and MAE per DoF over the frame errors."""
    cols = np.array([[r.lon, r.lat, r.z, r.yaw, r.pitch, r.roll] for r in results])
    rmse = np.sqrt((cols ** 2).mean(axis=0))
    mae = np.abs(cols).mean(axis=0)
    return {"rmse": tuple(rmse), "mae": tuple(mae)}


def write_sequence_summary_csv(path, summary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stat,lon,lat,z,yaw,pitch,roll\n")
        for stat in ("rmse", "mae"):
            fh.write(stat + "," + ",".join(f"{v:.17g}" for v in summary[stat]) + "\n")


def single_frame_summary(results):
    """Success rate (%) and mean absolute errors over successes; longitudinal
    direction excluded (unobservable in single images)."""
    n = len(results)
    succ = [r for r in results if r.success]
    sr = 100.0 * len(succ) / n if n else 0.0
    if succ:
        cols = np.abs(np.array([[r.lat, r.z, r.yaw, r.pitch, r.roll] for r in succ]))
        means = tuple(cols.mean(axis=0))
    else:
        means = (math.nan,) * 5
    return {"sr": sr, "lat": means[0], "z": means[1], "yaw": means[2],
            "pitch": means[3], "roll": means[4]}


def write_single_frame_summary_csv(path, summary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stat,sr,lat,z,yaw,pitch,roll\n")
        fh.write("mean," + ",".join(
            f"{summary[k]:.17g}" for k in ("sr", "lat", "z", "yaw", "pitch", "roll")) + "\n")


# ---------------------------------------------------------------------------
# odometry emulation (velocity-based motion model)

def emulate_odometry(times, poses, sd_v=(0, 0, 0), sd_w=(0, 0, 0),
                     bias_v=(0, 0, 0), seed=0):
    """Noisy relative-pose measurements from a ground-truth trajectory.

    Each true step is decomposed into body-frame linear and angular velocity,
    perturbed with zero-mean Gaussian noise (plus an optional deterministic
    velocity bias) and recomposed. Covariances reflect the declared sds with
    a small floor so they stay positive definite.
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses")
    rng = np.random.default_rng(seed)
    sd_v = np.asarray(sd_v, dtype=float)
    sd_w = np.asarray(sd_w, dtype=float)
    bias_v = np.asarray(bias_v, dtype=float)
    deltas = []
    for k in range(len(poses) - 1):
        dt = float(times[k + 1] - times[k])
        if dt <= 0:
            raise ValueError("timestamps must be strictly increasing")
        rel = poses[k].inverse().compose(poses[k + 1])
        v = rel.translation / dt
        w = geometry.quat_log(rel.rotation) / dt
        if sd_v.any() or bias_v.any():
            v = v + bias_v + rng.normal(0.0, 1.0, 3) * sd_v
        if sd_w.any():
            w = w + rng.normal(0.0, 1.0, 3) * sd_w
        meas = Pose6D(v * dt, geometry.quat_exp(w * dt))
        sds = np.concatenate([np.maximum(sd_v, ODOM_COV_FLOOR) * dt,
                              np.maximum(sd_w, ODOM_COV_FLOOR) * dt])
        deltas.append(OdometryDelta(meas, np.diag(sds ** 2)))
    return deltas


# ---------------------------------------------------------------------------
# experiment runners

def _parse_ablate(ablate):
    if not ablate:
        return frozenset()
    tokens = frozenset(t.strip() for t in str(ablate).split(",") if t.strip())
    bad = tokens - set(ABLATE_CHOICES)
    if bad:
        raise ConfigError(f"unknown ablation(s): {sorted(bad)}")
    return tokens


def _load_scene(cfg: ScenarioConfig):
    semantic_map = map_model.load_map(cfg.map_path)
    times, poses = scenarios.load_trajectory(cfg.trajectory_path)
    return semantic_map, times, poses


def _frame_noise(cfg, frame_seed, occlusion_rects=()):
    return replace(cfg.noise, rng_seed=int(frame_seed),
                   occlusion_rects=tuple(occlusion_rects))


def _build_cost_map(render, cfg, ablate):
    """Cost map per the active border mode; None when the frame has none."""
    if "borders" in ablate:
        return None
    try:
        return costmap.cost_map_from_raster(
            render.dirichlet, w_p=cfg.prob_weight, blur_radius=cfg.blur_radius,
            use_uncertainty="uncertainty" not in ablate)
    except (costmap.EmptyMask, costmap.DegenerateInput):
        return None


def _frame_constraints(cfg, semantic_map, render, est_pose, table, ablate):
    vis = map_model.visible_subset(semantic_map, est_pose, cfg.cam,
                                   d_max=cfg.d_max, spacing=cfg.lane_spacing)
    matches = []
    if "lights" not in ablate and render.detections:
        table = matching.match(vis, list(render.detections), est_pose, cfg.cam,
                               table, gate_px=cfg.gate_px)
        matches = matching.matched_constraints(table, vis, list(render.detections))
    return vis, matches, table


def _light_occlusions(semantic_map, truth, cam, pad_px=30.0):
    """Occlusion rectangles covering every light's true image region."""
    rects = []
    for tl in semantic_map.traffic_lights:
        pc = geometry.world_points_to_camera(truth, tl.position.reshape(1, 3))[0]
        if pc[2] <= geometry.Z_MIN:
            continue
        u = cam.fx * pc[0] / pc[2] + cam.cx
        v = cam.fy * pc[1] / pc[2] + cam.cy
        rects.append((u - pad_px, v - pad_px, u + pad_px, v + pad_px))
    return tuple(rects)


def run_single_frame_experiment(cfg: ScenarioConfig, out_dir=None, ablate=None,
                                seed=None):
    """Relocalization from uniformly perturbed poses, one frame at a time.

    Returns (results, summary); summary reports the success rate and
    mean absolute errors over successful trials only.
    """
    if cfg.mode != "single-frame":
        raise ConfigError("config mode must be single-frame")
    ablate = _parse_ablate(ablate)
    seed = cfg.seed if seed is None else seed
    semantic_map, times, poses = _load_scene(cfg)
    idx = np.unique(np.linspace(0, len(poses) - 1, cfg.frames).astype(int))
    seed_seq = np.random.SeedSequence(seed)
    frame_seeds = seed_seq.generate_state(len(idx) * cfg.perturbations * 2,
                                          dtype=np.uint64)
    rng = np.random.default_rng(seed_seq.spawn(1)[0])
    robust = "cauchy" not in ablate
    results = []
    trial = 0
    for i in idx:
        truth = poses[i]
        for _ in range(cfg.perturbations):
            noise = _frame_noise(cfg, frame_seeds[trial])
            trial += 1
            render = perception_sim.render_scene(semantic_map, truth, cfg.cam, noise)
            cm = _build_cost_map(render, cfg, ablate)
            dt = rng.uniform(-cfg.delta_t, cfg.delta_t, size=3)
            dr = np.radians(rng.uniform(-cfg.delta_r, cfg.delta_r, size=3))
            init = geometry.boxplus(truth, np.concatenate([dt, dr]))
            vis, matches, _ = _frame_constraints(
                cfg, semantic_map, render, init, matching.AssociationTable(), ablate)
            lane_points = vis.lane_points if cm is not None else np.zeros((0, 3))
            frame = FrameData(timestamp=float(times[i]), cost_map=cm,
                              lane_points=lane_points, light_matches=matches)
            problem = PoseGraphProblem(cfg.cam)
            posegraph.slide_window(problem, frame, init_pose=init)
            scfg = replace(cfg.solver_config(robust=robust), window_size=1)
            try:
                if robust:   # quadratic warm-up widens the capture range
                    try:
                        posegraph.solve(problem, replace(scfg, robust=False))
                    except posegraph.NumericalFailure:
                        problem.states[0].pose = init
                solved, _, iters, converged = posegraph.solve(problem, scfg)
                est = solved[0]
            except (posegraph.NoConstraints, posegraph.NumericalFailure):
                est, iters, converged = init, 0, False
            lon, lat, z, yaw, pitch, roll = pose_errors(truth, est)
            results.append(FrameResult(float(times[i]), lon, lat, z, yaw, pitch,
                                       roll, len(lane_points), len(matches),
                                       iters, converged))
    summary = single_frame_summary(results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_frames_csv(out / "frames.csv", results)
        write_single_frame_summary_csv(out / "summary.csv", summary)
    return results, summary


def run_sequence_experiment(cfg: ScenarioConfig, out_dir=None, ablate=None,
                            seed=None):
    """Sequential sliding-window localization over the whole trajectory.

    Per frame: emulate odometry, render perception, build the cost map, match
    lights, slide the window and solve. Solver failures hold the last pose and
    coast on odometry, flagged as unconverged.
    """
    if cfg.mode != "sequence":
        raise ConfigError("config mode must be sequence")
    ablate = _parse_ablate(ablate)
    seed = cfg.seed if seed is None else seed
    semantic_map, times, poses = _load_scene(cfg)
    seed_seq = np.random.SeedSequence(seed)
    odom_seed, render_base = seed_seq.generate_state(2, dtype=np.uint64)
    deltas = emulate_odometry(times, poses, cfg.odom_sd_v, cfg.odom_sd_w,
                              cfg.odom_bias_v, seed=int(odom_seed))
    frame_seeds = np.random.SeedSequence(int(render_base)).generate_state(
        len(poses), dtype=np.uint64)
    robust = "cauchy" not in ablate
    scfg = cfg.solver_config(robust=robust)
    perception_off = {"borders", "lights"} <= ablate

    problem = PoseGraphProblem(cfg.cam)
    table = matching.AssociationTable()
    results = []
    for k, truth in enumerate(poses):
        occl = _light_occlusions(semantic_map, truth, cfg.cam) \
            if k < cfg.occlude_lights_until else ()
        noise = _frame_noise(cfg, frame_seeds[k], occl)
        render = perception_sim.render_scene(semantic_map, truth, cfg.cam, noise)
        cm = _build_cost_map(render, cfg, ablate)
        if k == 0:
            est_pred = truth
            odom = None
        else:
            odom = deltas[k - 1]
            est_pred = problem.states[-1].pose.compose(odom.delta)
        vis, matches, table = _frame_constraints(
            cfg, semantic_map, render, est_pred, table, ablate)
        lane_points = vis.lane_points if cm is not None else np.zeros((0, 3))
        frame = FrameData(timestamp=float(times[k]), cost_map=cm,
                          lane_points=lane_points, light_matches=matches,
                          odom_from_prev=odom)
        posegraph.slide_window(problem, frame,
                               init_pose=truth if k == 0 else None)
        posegraph.trim_window(problem, cfg.window)
        iters, converged = 0, True
        if not perception_off:
            try:
                _, _, iters, converged = posegraph.solve(problem, scfg)
            except posegraph.NoConstraints:
                converged = True      # dead-reckoned init is the solution
            except posegraph.NumericalFailure:
                converged = False     # hold pose, coast on odometry
        est = problem.states[-1].pose
        lon, lat, z, yaw, pitch, roll = pose_errors(truth, est)
        results.append(FrameResult(float(times[k]), lon, lat, z, yaw, pitch, roll,
                                   len(lane_points), len(matches), iters, converged))
    summary = sequence_summary(results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_frames_csv(out / "frames.csv", results)
        write_sequence_summary_csv(out / "summary.csv", summary)
    return results, summary


def run_calibration_check(cfg: ScenarioConfig, out_dir=None, seed=None,
                          max_frames=40, bins=10):
    """Render frames along the trajectory and report the simulator's own
    (ECE, ENCE) against its ground truth."""
    seed = cfg.seed if seed is None else seed
    semantic_map, times, poses = _load_scene(cfg)
    idx = np.unique(np.linspace(0, len(poses) - 1, max_frames).astype(int))
    frame_seeds = np.random.SeedSequence(seed).generate_state(len(idx),
                                                              dtype=np.uint64)
    renders = [perception_sim.render_scene(semantic_map, poses[i], cfg.cam,
                                           _frame_noise(cfg, frame_seeds[j]))
               for j, i in enumerate(idx)]
    ece_val, ence_val = perception_sim.calibration_fidelity(
        renders, [r.truth for r in renders], bins=bins)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "calibration.csv", "w", encoding="utf-8") as fh:
            fh.write("metric,value\n")
            fh.write(f"ece,{ece_val:.17g}\n")
            fh.write(f"ence,{ence_val:.17g}\n")
    return ece_val, ence_val
