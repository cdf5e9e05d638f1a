"""Benchmark suites: scenario generation, training, evaluation, ablations,
Kalman-filter trajectory fusion and visualization artifacts.

Every run is a pure function of its configuration; reports, checkpoints
and images are byte-identical across reruns with the same seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import harness as H
from . import registration as reg
from .checkpoint import ParamSet, load_params, save_params
from .geometry import Pose2, compose
from .metrics import FrameRecord, compute_metrics, emit_heatmap, frames_csv
from .worldgen import (
    ScenarioSpec,
    make_scenario,
    save_scenario,
    straight_corridor_map,
)

CONFIG_VERSION = 1


@dataclass(frozen=True)
class SuiteConfig:
    seed: int = 0
    mode: str = "fine"  # fine | reloc
    n_train: int = 500
    n_eval: int = 100
    window_size: float = 16.0
    resolution: float = 0.25
    occlusion_fraction: float = 0.3
    noise_sigma: float = 0.1
    feature_mode: str = "encoded"
    precision: str = "f64"
    steps: int = 600
    batch_size: int = 2
    learning_rate: float = 0.005
    # solution-space used while training (coarser for speed); evaluation
    # always uses the mode's fine lattice
    train_nx: int = 10
    train_ny: int = 10
    train_nphi: int = 5

    def scenario_spec(self, seed: int) -> ScenarioSpec:
        return ScenarioSpec(
            seed=seed,
            window_size=self.window_size,
            resolution=self.resolution,
            perturb_mode=self.mode,
            occlusion_fraction=self.occlusion_fraction,
            noise_sigma=self.noise_sigma,
        )


def eval_omega(mode: str) -> reg.SolutionSpaceConfig:
    if mode == "fine":
        return reg.SolutionSpaceConfig()
    # desk-scale relocalization envelope (+-8 m / +-10 deg) with margin
    return reg.SolutionSpaceConfig(
        half_x=9.0, half_y=9.0, half_phi_deg=11.0, nx=36, ny=36, nphi=22
    )


def eval_belief(mode: str) -> reg.BeliefConfig:
    if mode == "fine":
        return reg.BeliefConfig()
    return reg.BeliefConfig(
        x=reg.BeliefGrid(-9.0, 9.0, 36),
        y=reg.BeliefGrid(-9.0, 9.0, 36),
        phi=reg.BeliefGrid(-math.radians(11.0), math.radians(11.0), 22),
    )


def pipeline_configs(cfg: SuiteConfig):
    """(train-time, eval-time) pipeline configurations."""
    belief = eval_belief(cfg.mode)
    omega = eval_omega(cfg.mode)
    base = H.PipelineConfig(
        feature_mode=cfg.feature_mode,
        precision=cfg.precision,
        belief=belief,
        omega=omega,
    )
    train_omega = replace(
        omega, nx=cfg.train_nx, ny=cfg.train_ny, nphi=cfg.train_nphi
    )
    return replace(base, omega=train_omega), base


def train_scenarios(cfg: SuiteConfig):
    return [
        make_scenario(cfg.scenario_spec(cfg.seed * 1_000_003 + 17 + i), i)
        for i in range(cfg.n_train)
    ]


def eval_scenarios(cfg: SuiteConfig):
    base = cfg.seed * 1_000_003 + 900_001
    return [
        make_scenario(cfg.scenario_spec(base + i), i) for i in range(cfg.n_eval)
    ]


def suite_config_to_dict(cfg: SuiteConfig) -> dict:
    return {"format_version": CONFIG_VERSION, "kind": "suite", "suite": asdict(cfg)}


def suite_config_from_dict(d: dict) -> SuiteConfig:
    if d.get("format_version") != CONFIG_VERSION:
        raise ValueError(f"unsupported config format_version {d.get('format_version')!r}")
    return SuiteConfig(**d.get("suite", {}))


def load_suite_config(path) -> SuiteConfig:
    with open(path, "r", encoding="utf-8") as f:
        return suite_config_from_dict(json.load(f))


def save_suite_config(cfg: SuiteConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(suite_config_to_dict(cfg), f, sort_keys=True, indent=1)
        f.write("\n")


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_scenes(
    scenes, params: ParamSet, pipe_cfg: H.PipelineConfig, uncertainty_source: str = "registration"
):
    """Run the forward pass per scene and collect world-frame records."""
    records = []
    results = []
    for scn in scenes:
        tgt = H.scene_targets(scn)
        res = H.forward(tgt.obs, tgt.map_window, params, pipe_cfg)
        est = H.estimate_world_pose(scn.init_pose, res.refined)
        if uncertainty_source == "registration" and res.posterior is not None:
            u = res.posterior.entropies
        else:
            u = res.belief.entropies
        records.append(
            FrameRecord(est, scn.gt_pose, u, u_decoder=res.belief.entropies)
        )
        results.append(res)
    return records, results


def _write(path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def loss_curve_csv(curve) -> str:
    if not curve:
        return "step,total\n"
    keys = [k for k in curve[0] if k != "step"]
    lines = ["step," + ",".join(keys)]
    for entry in curve:
        lines.append(str(entry["step"]) + "," + ",".join(f"{entry[k]:.9g}" for k in keys))
    return "\n".join(lines) + "\n"


def run_gen(cfg: SuiteConfig, out_dir, count: int | None = None) -> list:
    os.makedirs(out_dir, exist_ok=True)
    n = count if count is not None else cfg.n_eval
    scenes = [make_scenario(cfg.scenario_spec(cfg.seed * 1_000_003 + 17 + i), i) for i in range(n)]
    for i, scn in enumerate(scenes):
        save_scenario(scn, os.path.join(out_dir, f"scenario_{i:04d}.json"))
    summary = [f"scenarios {len(scenes)}", f"mode {cfg.mode}", f"seed {cfg.seed}"]
    _write(os.path.join(out_dir, "gen_summary.txt"), "\n".join(summary) + "\n")
    return scenes


def run_train(cfg: SuiteConfig, out_dir, ablation: str = "s1"):
    """Train on the suite's training scenarios; writes checkpoint and curve."""
    os.makedirs(out_dir, exist_ok=True)
    train_pipe, _ = pipeline_configs(cfg)
    train_pipe = H.ablation_pipeline_config(train_pipe, ablation)
    scenes = train_scenarios(cfg)
    targets = [H.scene_targets(s) for s in scenes]
    n_cells = H.assoc_cells(targets[0].obs, train_pipe)
    params = H.init_pipeline_params(n_cells, train_pipe, seed=cfg.seed)
    tc = H.TrainConfig(
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        seed=cfg.seed,
    )
    tc = H.ablation_train_config(tc, ablation)
    params, curve = H.train(targets, params, train_pipe, tc)
    save_params(params, os.path.join(out_dir, "checkpoint.txt"))
    _write(os.path.join(out_dir, "loss_curve.csv"), loss_curve_csv(curve))
    _write(
        os.path.join(out_dir, "train_summary.txt"),
        f"ablation {ablation}\nsteps {tc.steps}\nscenes {len(scenes)}\n"
        f"loss_first {curve[0]['total']:.9g}\nloss_last {curve[-1]['total']:.9g}\n",
    )
    return params, curve


def run_eval(
    cfg: SuiteConfig,
    out_dir,
    params: ParamSet | None = None,
    checkpoint: str | None = None,
    untrained: bool = False,
    ablation: str = "s1",
    tag: str = "eval",
):
    """Evaluate held-out scenarios; writes metrics, per-frame table, summary."""
    os.makedirs(out_dir, exist_ok=True)
    _, eval_pipe = pipeline_configs(cfg)
    eval_pipe = H.ablation_pipeline_config(eval_pipe, ablation)
    scenes = eval_scenarios(cfg)
    if params is None:
        if untrained or cfg.feature_mode == "raw":
            tgt0 = H.scene_targets(scenes[0])
            n_cells = H.assoc_cells(tgt0.obs, eval_pipe)
            params = H.init_pipeline_params(n_cells, eval_pipe, seed=cfg.seed)
        elif checkpoint is None:
            raise ValueError(
                "no checkpoint given and training disabled; pass --checkpoint, "
                "run the train subcommand first, or evaluate with --untrained"
            )
        else:
            params = load_params(checkpoint)
    records, _ = evaluate_scenes(scenes, params, eval_pipe)
    report = compute_metrics(records)
    _write(os.path.join(out_dir, f"{tag}_metrics.txt"), report.to_text() + "\n")
    _write(os.path.join(out_dir, f"{tag}_frames.csv"), frames_csv(records))
    return report, records


def run_ablation_suite(cfg: SuiteConfig, out_dir) -> dict:
    """Train and evaluate the four ablation configurations on shared scenes."""
    os.makedirs(out_dir, exist_ok=True)
    reports = {}
    for ab in ("s1", "s2", "s3", "s4"):
        sub = os.path.join(out_dir, ab)
        params, _ = run_train(cfg, sub, ablation=ab)
        report, _ = run_eval(cfg, sub, params=params, ablation=ab, tag=ab)
        reports[ab] = report
    lines = ["ablation  lateral_mae  longitudinal_mae  orientation_mae"]
    for ab, rep in reports.items():
        lines.append(
            f"{ab:<9s} {rep.mae['lateral']:.9g}  {rep.mae['longitudinal']:.9g}  "
            f"{rep.mae['orientation']:.9g}"
        )
    _write(os.path.join(out_dir, "ablation_comparison.txt"), "\n".join(lines) + "\n")
    return reports


# --------------------------------------------------------------------------
# Kalman-filter trajectory suite
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KfSuiteConfig:
    seed: int = 0
    n_frames: int = 200
    dt: float = 0.5
    speed: float = 4.0
    window_size: float = 16.0
    resolution: float = 0.25
    cluster_spacing: float = 12.0
    # cluster-free stretches producing longitudinally degenerate windows
    gaps: tuple = ((90.0, 150.0), (250.0, 310.0))


def corridor_trajectory(cfg: KfSuiteConfig):
    """Ground-truth poses along a straight corridor plus the vector map."""
    length = cfg.n_frames * cfg.speed * cfg.dt + 40.0
    clusters = []
    y = 10.0
    while y < length - 5.0:
        if not any(lo <= y <= hi for lo, hi in cfg.gaps):
            clusters.append(y)
        y += cfg.cluster_spacing
    vmap = straight_corridor_map(length, clusters)
    poses = []
    for i in range(cfg.n_frames):
        yy = 12.0 + i * cfg.speed * cfg.dt
        xx = 0.4 * math.sin(yy / 40.0)
        poses.append(Pose2(xx, yy, 0.05 * math.sin(yy / 60.0)))
    return vmap, poses, clusters


def run_kf_suite(cfg: KfSuiteConfig, out_dir) -> dict:
    """Compare raw per-frame measurements, a fixed-covariance filter and the
    entropy-weighted filter on a partially degenerate corridor."""
    os.makedirs(out_dir, exist_ok=True)
    vmap, poses, _ = corridor_trajectory(cfg)
    pipe = H.PipelineConfig(feature_mode="raw")
    params = H.init_pipeline_params(0, pipe, seed=cfg.seed)
    from .worldgen import rasterize, sample_perturbation

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x4B46)))
    measurements, beliefs = [], []
    degenerate = []
    for gt in poses:
        offset = sample_perturbation("fine", rng)
        init = compose(gt, offset)
        obs = rasterize(vmap, gt, cfg.window_size, cfg.resolution)
        mw = rasterize(vmap, init, cfg.window_size, cfg.resolution)
        res = H.forward(obs, mw, params, pipe)
        est = H.estimate_world_pose(init, res.refined)
        measurements.append(est)
        beliefs.append(res.posterior)
        degenerate.append(res.posterior.u_y > 0.8 * math.log(len(res.posterior.py.data)))

    mean_u = tuple(float(np.mean([b.entropies[d] for b in beliefs])) for d in range(3))
    widths = beliefs[0].bin_widths()
    fixed_std = tuple(H.entropy_to_std(mean_u[d], widths[d]) for d in range(3))

    def run_filter(use_entropy: bool):
        state = H.kf_init(measurements[0])
        track = [state.x[:3].copy()]
        for z, belief in zip(measurements[1:], beliefs[1:]):
            state = H.kf_step(
                state,
                cfg.dt,
                z,
                belief,
                fixed_std=None if use_entropy else fixed_std,
            )
            track.append(state.x[:3].copy())
        return np.array(track)

    track_entropy = run_filter(True)
    track_fixed = run_filter(False)
    track_raw = np.array([[m.x, m.y, m.phi] for m in measurements])
    gt_arr = np.array([[g.x, g.y, g.phi] for g in poses])

    def pos_rmse(track):
        d = track[:, :2] - gt_arr[:, :2]
        return float(np.sqrt((d**2).sum(axis=1).mean()))

    out = {
        "rmse_raw": pos_rmse(track_raw),
        "rmse_fixed": pos_rmse(track_fixed),
        "rmse_entropy": pos_rmse(track_entropy),
        "degenerate_fraction": float(np.mean(degenerate)),
    }
    lines = [f"{k} {v:.9g}" for k, v in out.items()]
    _write(os.path.join(out_dir, "kf_summary.txt"), "\n".join(lines) + "\n")
    rows = ["frame,gt_x,gt_y,meas_x,meas_y,kf_x,kf_y,u_y"]
    for i in range(cfg.n_frames):
        rows.append(
            f"{i},{gt_arr[i,0]:.9g},{gt_arr[i,1]:.9g},{track_raw[i,0]:.9g},"
            f"{track_raw[i,1]:.9g},{track_entropy[i,0]:.9g},{track_entropy[i,1]:.9g},"
            f"{beliefs[i].u_y:.9g}"
        )
    _write(os.path.join(out_dir, "kf_frames.csv"), "\n".join(rows) + "\n")
    return out


# --------------------------------------------------------------------------
# visualization artifacts
# --------------------------------------------------------------------------


def run_viz(cfg: SuiteConfig, out_dir, checkpoint: str | None = None):
    """Emit inspection heatmaps and a cost-volume dump for one scenario."""
    os.makedirs(out_dir, exist_ok=True)
    _, pipe = pipeline_configs(cfg)
    scn = make_scenario(cfg.scenario_spec(cfg.seed * 1_000_003 + 17), 0)
    tgt = H.scene_targets(scn)
    if checkpoint is not None:
        params = load_params(checkpoint)
    else:
        n_cells = H.assoc_cells(tgt.obs, pipe)
        params = H.init_pipeline_params(n_cells, pipe, seed=cfg.seed)
    res = H.forward(tgt.obs, tgt.map_window, params, pipe)

    emit_heatmap(tgt.obs.values.max(axis=2), os.path.join(out_dir, "observation.pgm"))
    emit_heatmap(tgt.map_window.values.max(axis=2), os.path.join(out_dir, "map_window.pgm"))
    u = res.internals["uncertainty"].values.data
    emit_heatmap(u, os.path.join(out_dir, "perceptual_uncertainty.pgm"))
    s_uncert = res.internals["s_uncert"]
    if s_uncert is not None:
        emit_heatmap(s_uncert.data, os.path.join(out_dir, "similarity_uncertainty_aware.pgm"))
    if res.internals["volume"] is not None:
        vol = res.internals["volume"].d_cost.data
        emit_heatmap(vol.min(axis=2), os.path.join(out_dir, "cost_min_over_phi.pgm"))
        reg.save_cost_volume(os.path.join(out_dir, "cost_volume.bin"), vol)
    lines = [
        f"gt_offset {scn.offset.x:.9g} {scn.offset.y:.9g} {scn.offset.phi:.9g}",
        f"coarse {res.coarse.x:.9g} {res.coarse.y:.9g} {res.coarse.phi:.9g}",
        f"refined {res.refined.x:.9g} {res.refined.y:.9g} {res.refined.phi:.9g}",
    ]
    _write(os.path.join(out_dir, "viz_summary.txt"), "\n".join(lines) + "\n")
