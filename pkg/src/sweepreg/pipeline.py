"""End-to-end orchestration: pose-supervised training, sweep-to-volume
registration, evaluation reports, similarity heatmap export, and ablations.

Every run writes a ``run.json`` manifest with its full resolved configuration
so artifacts can be reproduced byte-for-byte; nothing here embeds timestamps.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import engine
from .engine import Adam, Tensor
from .featnet import (DescriptorGrid, FeatureNet, NetworkConfig, extract_features,
                      load_checkpoint, save_checkpoint)
from .geometry import (Correspondence3D, FrameGeometry, NoConsensusError, RansacConfig,
                       RigidPose, fuse_sweep_matches, pose_error, ransac_pose)
from .matchcore import (MatchSet, dual_softmax, extract_matches, ground_truth_weights,
                        matching_loss, similarity)
from .synthdata import (PhantomSample, augment_noise, augment_polycrop,
                        augment_random_crop, ClassBalancedSampler, derive_ground_truth,
                        load_dataset_index, load_sample)

logger = logging.getLogger(__name__)


class TrainingDivergedError(Exception):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; "
                         f"last checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    data_dir: str = ""
    variant: str = "standard"
    descriptor_dim: int = 32
    steps: int = 2000
    learning_rate: float = 1e-3
    seed: int = 0
    beta: float = 1.0
    sink_policy: str = "outside_only"
    temperature: float = 1.0
    polycrop_enabled: bool = True
    polycrop_min_coverage: float = 0.6
    noise_sigma: float = 0.02
    crop_enabled: bool = True
    crop_min_keep: float = 0.75
    class_balance_ratio: float = 0.5
    checkpoint_interval: int = 1000
    match_threshold: float = 0.2
    require_mutual: bool = True
    log_every: int = 25

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def thread_count() -> int:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        if os.environ.get(var, "").isdigit():
            return int(os.environ[var])
    return os.cpu_count() or 1


def write_run_manifest(out_dir: str | Path, kind: str, config: dict) -> Path:
    doc = {"kind": kind, "config": config, "thread_count": thread_count()}
    path = Path(out_dir) / "run.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


class MatchModel:
    """Both descriptor nets plus the learned sink score."""

    def __init__(self, net_config: NetworkConfig, seed: int = 0):
        self.net_config = net_config
        self.seed = seed
        self.us_net = FeatureNet(net_config, 2, seed)
        self.mr_net = FeatureNet(net_config, 3, seed)
        self.alpha = engine.parameter(np.zeros(()))

    def params(self) -> dict[str, Tensor]:
        out = {f"us_net.{k}": v for k, v in self.us_net.params.items()}
        out.update({f"mr_net.{k}": v for k, v in self.mr_net.params.items()})
        out["matcher.alpha"] = self.alpha
        return out

    def save(self, path: str | Path, step: int, extra: dict | None = None) -> Path:
        manifest = {"net_config": self.net_config.to_dict(), "rng_seed": self.seed,
                    "step": step}
        manifest.update(extra or {})
        save_checkpoint(path, self.params(), manifest)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> tuple["MatchModel", dict]:
        arrays, manifest = load_checkpoint(path)
        model = cls(NetworkConfig.from_dict(manifest["net_config"]),
                    manifest.get("rng_seed", 0))
        model.us_net.load_state({k[len("us_net."):]: v for k, v in arrays.items()
                                 if k.startswith("us_net.")})
        model.mr_net.load_state({k[len("mr_net."):]: v for k, v in arrays.items()
                                 if k.startswith("mr_net.")})
        model.alpha = engine.parameter(arrays["matcher.alpha"])
        return model, manifest


# ---------------------------------------------------------------------------
# training

def train(config: TrainConfig, out_dir: str | Path) -> Path:
    """Pose-only supervised training; returns the final checkpoint directory.

    Each step draws one (sample, frame) pair, applies crop/noise/mask
    augmentations, and minimizes the soft-assignment NLL between the frame
    and the full volume.  Deterministic given (config, dataset).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = load_dataset_index(config.data_dir)
    samples = [load_sample(Path(config.data_dir) / e["id"]) for e in index["samples"]]
    if not samples:
        raise ValueError(f"no samples in dataset {config.data_dir}")
    sampler = ClassBalancedSampler([s.sweep_class for s in samples],
                                   config.class_balance_ratio)
    net_config = NetworkConfig.from_variant(config.variant,
                                            descriptor_dim=config.descriptor_dim)
    model = MatchModel(net_config, config.seed)
    params = model.params()
    opt = Adam(params, lr=config.learning_rate)
    history: list[tuple[int, float]] = []
    last_ckpt: str | None = None

    for step in range(1, config.steps + 1):
        rng = np.random.default_rng([config.seed, 2, step])
        si = sampler.draw(rng)
        sample = samples[si]
        k = int(rng.integers(0, len(sample.frames)))
        frame = sample.frames[k]
        geom = sample.frame_geometries[k]
        if config.crop_enabled:
            frame, geom, _ = augment_random_crop(frame, geom, rng, config.crop_min_keep)
        if config.noise_sigma > 0:
            frame = augment_noise(frame, config.noise_sigma, rng)
        if config.polycrop_enabled:
            frame, _ = augment_polycrop(frame, rng, config.polycrop_min_coverage)

        opt.zero_grad()
        mr_grid = extract_features(sample.mr_volume, model.mr_net, sample.spacing_mm)
        us_grid = extract_features(frame, model.us_net, geom.pixel_spacing_mm)
        assignment = dual_softmax(similarity(us_grid, mr_grid, model.alpha),
                                  config.temperature)
        corrs = derive_ground_truth(sample, k, us_grid, mr_grid, frame_geometry=geom)
        weights = ground_truth_weights(corrs, config.beta, config.sink_policy,
                                       us_grid.n_cells, mr_grid.grid_dims)
        loss = matching_loss(assignment, weights)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(step, last_ckpt)
        loss.backward()
        opt.step()
        history.append((step, loss_val))
        if step % config.log_every == 0 or step == 1:
            logger.info("step %d/%d loss=%.4f alpha=%.3f skipped=%d",
                        step, config.steps, loss_val, model.alpha.item(),
                        opt.skipped_steps)
        if config.checkpoint_interval > 0 and step % config.checkpoint_interval == 0 \
                and step != config.steps:
            ckpt = out / f"checkpoint_step{step:06d}"
            model.save(ckpt, step, {"train_config": config.to_dict()})
            last_ckpt = str(ckpt)

    final = out / "checkpoint_final"
    model.save(final, config.steps, {"train_config": config.to_dict(),
                                     "skipped_steps": opt.skipped_steps})
    with open(out / "losses.csv", "w") as fh:
        fh.write("step,loss\n")
        for step, val in history:
            fh.write(f"{step},{val:.6f}\n")
    logger.info("training done: %d steps, final loss %.4f -> %s",
                config.steps, history[-1][1], final)
    return final


# ---------------------------------------------------------------------------
# registration

@dataclass
class RegistrationResult:
    pose: RigidPose
    mode: str
    frame_indices: list[int]
    match_sets: list[MatchSet]
    fused: list[Correspondence3D]
    inlier_indices: list[int]

    @property
    def n_matches(self) -> int:
        return sum(len(ms.entries) for ms in self.match_sets)

    def to_dict(self) -> dict:
        return {"pose": self.pose.to_matrix().tolist(), "mode": self.mode,
                "frame_indices": self.frame_indices,
                "per_frame_matches": [len(ms.entries) for ms in self.match_sets],
                "n_fused": len(self.fused), "n_inliers": len(self.inlier_indices)}


def match_frames(model: MatchModel, sample: PhantomSample,
                 frame_indices: Sequence[int], threshold: float,
                 require_mutual: bool, temperature: float
                 ) -> tuple[list[tuple[MatchSet, FrameGeometry, DescriptorGrid]],
                            DescriptorGrid]:
    mr_grid = extract_features(sample.mr_volume, model.mr_net, sample.spacing_mm)
    per_frame = []
    for k in frame_indices:
        us_grid = extract_features(sample.frames[k], model.us_net,
                                   sample.frame_geometries[k].pixel_spacing_mm)
        assignment = dual_softmax(similarity(us_grid, mr_grid, model.alpha), temperature)
        matches = extract_matches(assignment, threshold, require_mutual)
        per_frame.append((matches, sample.frame_geometries[k], us_grid))
    return per_frame, mr_grid


def register(checkpoint: str | Path, case_dir: str | Path, mode: str = "all",
             match_threshold: float | None = None, require_mutual: bool | None = None,
             ransac: RansacConfig | None = None,
             frame_indices: Sequence[int] | None = None) -> RegistrationResult:
    """Estimate the rigid sweep-to-volume pose for one case.

    ``mode`` is "all" (fuse every frame) or "single" (middle frame only).
    Matching defaults come from the checkpoint's training configuration.
    """
    if mode not in ("all", "single"):
        raise ValueError(f"mode must be 'all' or 'single', got {mode!r}")
    model, manifest = MatchModel.load(checkpoint)
    tc = manifest.get("train_config", {})
    threshold = tc.get("match_threshold", 0.2) if match_threshold is None else match_threshold
    mutual = tc.get("require_mutual", True) if require_mutual is None else require_mutual
    temperature = tc.get("temperature", 1.0)
    sample = load_sample(case_dir)
    if frame_indices is None:
        frame_indices = list(range(len(sample.frames))) if mode == "all" \
            else [len(sample.frames) // 2]
    # normalized so the fused correspondence order, and with it the seeded
    # RANSAC draw sequence, does not depend on caller enumeration order
    frame_indices = sorted({int(k) for k in frame_indices})
    per_frame, mr_grid = match_frames(model, sample, frame_indices, threshold,
                                      mutual, temperature)
    fused = fuse_sweep_matches(per_frame, mr_grid)
    if len(fused) < 3:
        raise NoConsensusError(
            f"only {len(fused)} matches across {len(frame_indices)} frames",
            {"per_frame": [len(ms.entries) for ms, _, _ in per_frame],
             "threshold": threshold})
    pose, inliers = ransac_pose(fused, ransac or RansacConfig())
    return RegistrationResult(pose=pose, mode=mode, frame_indices=list(frame_indices),
                              match_sets=[ms for ms, _, _ in per_frame], fused=fused,
                              inlier_indices=inliers)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class CaseResult:
    sample_id: str
    mode: str
    success: bool
    rot_deg: float = float("nan")
    trans_mm: float = float("nan")
    n_matches: int = 0
    n_inliers: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "mode": self.mode, "success": self.success,
                "rot_deg": None if not self.success else round(self.rot_deg, 6),
                "trans_mm": None if not self.success else round(self.trans_mm, 6),
                "n_matches": self.n_matches, "n_inliers": self.n_inliers,
                "error": self.error}


def _fmt_stat(values: Sequence[float]) -> str:
    if not len(values):
        return "n/a"
    arr = np.asarray(values, dtype=np.float64)
    return f"{arr.mean():.1f} ± {arr.std(ddof=0):.1f} ({np.median(arr):.1f})"


@dataclass
class EvalReport:
    cases: list[CaseResult]
    modes: tuple[str, ...]
    gates: tuple[tuple[float, float], ...]
    checkpoint: str

    def for_mode(self, mode: str) -> list[CaseResult]:
        return [c for c in self.cases if c.mode == mode]

    def successes(self, mode: str) -> list[CaseResult]:
        return [c for c in self.for_mode(mode) if c.success]

    def metric_values(self, mode: str, metric: str) -> list[float]:
        return [getattr(c, metric) for c in self.successes(mode)]

    def gate_rate(self, mode: str, gate: tuple[float, float]) -> float:
        cases = self.for_mode(mode)
        if not cases:
            return float("nan")
        ok = [c for c in cases if c.success and c.rot_deg < gate[0] and c.trans_mm < gate[1]]
        return len(ok) / len(cases)

    def failure_count(self, mode: str) -> int:
        return sum(1 for c in self.for_mode(mode) if not c.success)

    def render(self) -> str:
        width = 22
        cols = {"all": "All frames", "single": "Single frame"}
        header = "metric".ljust(width) + "".join(
            cols.get(m, m).rjust(20) for m in self.modes)
        lines = [header, "-" * len(header)]
        for label, metric in (("Rot. error (deg)", "rot_deg"),
                              ("Trans. error (mm)", "trans_mm")):
            row = label.ljust(width)
            for m in self.modes:
                row += _fmt_stat(self.metric_values(m, metric)).rjust(20)
            lines.append(row)
        for gate in self.gates:
            row = f"< {gate[0]:g} deg & < {gate[1]:g} mm".ljust(width)
            for m in self.modes:
                row += f"{100.0 * self.gate_rate(m, gate):.1f}%".rjust(20)
            lines.append(row)
        row = "failures".ljust(width)
        for m in self.modes:
            row += f"{self.failure_count(m)}/{len(self.for_mode(m))}".rjust(20)
        lines.append(row)
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        agg = {}
        for m in self.modes:
            vals = {metric: self.metric_values(m, metric)
                    for metric in ("rot_deg", "trans_mm")}
            agg[m] = {
                metric: None if not v else {"mean": float(np.mean(v)),
                                            "std": float(np.std(v)),
                                            "median": float(np.median(v))}
                for metric, v in vals.items()}
        return {"checkpoint": self.checkpoint, "modes": list(self.modes),
                "gates": [list(g) for g in self.gates],
                "aggregates": agg,
                "gate_rates": {m: {f"{g[0]:g}deg_{g[1]:g}mm": self.gate_rate(m, g)
                                   for g in self.gates} for m in self.modes},
                "failures": {m: self.failure_count(m) for m in self.modes},
                "cases": [c.to_dict() for c in self.cases]}

    def digest(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()


def _reference_points(sample: PhantomSample) -> np.ndarray:
    """World positions of every frame's center pixel: a sweep-intrinsic point
    set for translation error, independent of what was matched."""
    pts = []
    for frame, geom in zip(sample.frames, sample.frame_geometries):
        center = [(frame.shape[0] - 1) / 2, (frame.shape[1] - 1) / 2]
        pts.append(geom.pixel_to_world([center])[0])
    return np.asarray(pts)


def evaluate(checkpoint: str | Path, data_dir: str | Path,
             sample_ids: Sequence[str] | None = None,
             modes: tuple[str, ...] = ("all", "single"),
             gates: tuple[tuple[float, float], ...] = ((10.0, 10.0), (15.0, 20.0)),
             ransac: RansacConfig | None = None,
             match_threshold: float | None = None,
             out_dir: str | Path | None = None,
             register_fn: Callable[..., RegistrationResult] | None = None) -> EvalReport:
    """Register every case in both modes and aggregate pose errors.

    ``register_fn(checkpoint, case_dir, mode)`` can be injected for testing;
    it defaults to :func:`register`.
    """
    if sample_ids is None:
        index = load_dataset_index(data_dir)
        sample_ids = [e["id"] for e in index["samples"]]
    reg = register_fn or (lambda ck, case, mode: register(
        ck, case, mode, ransac=ransac, match_threshold=match_threshold))
    cases = []
    for sid in sample_ids:
        case_dir = Path(data_dir) / sid
        sample = load_sample(case_dir)
        if sample.gt_registration is None:
            raise ValueError(f"case {sid} has no ground-truth pose; cannot evaluate")
        refs = _reference_points(sample)
        for mode in modes:
            try:
                result = reg(str(checkpoint), str(case_dir), mode)
                rot, trans = pose_error(result.pose, sample.gt_registration, refs)
                cases.append(CaseResult(
                    sample_id=sid, mode=mode, success=True, rot_deg=rot, trans_mm=trans,
                    n_matches=getattr(result, "n_matches", 0),
                    n_inliers=len(getattr(result, "inlier_indices", []))))
            except NoConsensusError as exc:
                cases.append(CaseResult(sample_id=sid, mode=mode, success=False,
                                        error=str(exc)))
            logger.info("eval %s [%s]: %s", sid, mode,
                        "ok" if cases[-1].success else f"failed ({cases[-1].error})")
    report = EvalReport(cases=cases, modes=modes, gates=gates, checkpoint=str(checkpoint))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "cases").mkdir(parents=True, exist_ok=True)
        for c in cases:
            (out / "cases" / f"{c.sample_id}_{c.mode}.json").write_text(
                json.dumps(c.to_dict(), sort_keys=True, indent=2) + "\n")
        (out / "report.txt").write_text(report.render())
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# heatmap export

def _write_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def export_heatmap(checkpoint: str | Path, case_dir: str | Path, frame_index: int,
                   us_cell: int, out_dir: str | Path,
                   match_threshold: float | None = None) -> dict:
    """Export one US cell's similarity row over the volume grid.

    Writes the raw scores as a 3D tensor container, two orthogonal uint8 PGM
    slices through the best cell (the matched cell marked at full white), and
    a JSON summary.  Returns the summary dict.
    """
    model, manifest = MatchModel.load(checkpoint)
    tc = manifest.get("train_config", {})
    threshold = tc.get("match_threshold", 0.2) if match_threshold is None else match_threshold
    sample = load_sample(case_dir)
    if not 0 <= frame_index < len(sample.frames):
        raise ValueError(f"frame index {frame_index} out of range "
                         f"[0, {len(sample.frames)})")
    per_frame, mr_grid = match_frames(model, sample, [frame_index], threshold,
                                      tc.get("require_mutual", True),
                                      tc.get("temperature", 1.0))
    matches, _, us_grid = per_frame[0]
    if not 0 <= us_cell < us_grid.n_cells:
        raise ValueError(f"us cell {us_cell} out of range [0, {us_grid.n_cells})")
    sim = similarity(us_grid, mr_grid, model.alpha)
    row = np.asarray(sim.values.data[us_cell, :mr_grid.n_cells], dtype=np.float32)
    heat = row.reshape(mr_grid.grid_dims)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .cmt import write_cmt
    write_cmt(out / "heatmap.cmt", heat)
    best_flat = int(row.argmax())
    best = np.unravel_index(best_flat, mr_grid.grid_dims)
    lo, hi = float(heat.min()), float(heat.max())
    den = (hi - lo) if hi > lo else 1.0
    norm = ((heat - lo) / den * 250.0).astype(np.uint8)
    slice0 = norm[best[0], :, :].copy()
    slice0[best[1], best[2]] = 255
    slice1 = norm[:, best[1], :].copy()
    slice1[best[0], best[2]] = 255
    _write_pgm(out / "slice_axis0.pgm", slice0)
    _write_pgm(out / "slice_axis1.pgm", slice1)
    row_match = next((m for m in matches.entries if m.us_cell == us_cell), None)
    summary = {
        "frame_index": int(frame_index), "us_cell": int(us_cell),
        "us_grid_dims": list(us_grid.grid_dims), "mr_grid_dims": list(mr_grid.grid_dims),
        "argmax_cell": best_flat, "argmax_index": [int(b) for b in best],
        "match": None if row_match is None else {"mr_cell": row_match.mr_cell,
                                                 "confidence": row_match.confidence},
        "score_min": lo, "score_max": hi}
    (out / "heatmap.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# ablation

@dataclass
class AblationArm:
    name: str
    polycrop_enabled: bool
    variant: str


DEFAULT_ARMS = (AblationArm("no_polycrop_standard", False, "standard"),
                AblationArm("polycrop_standard", True, "standard"),
                AblationArm("polycrop_small", True, "small"))


@dataclass
class AblationReport:
    arms: list[str]
    reports: dict[str, EvalReport]
    high_error_gate: tuple[float, float]
    well_init_gate: tuple[float, float]
    mode: str = "all"

    def high_error_rate(self, arm: str) -> float:
        cases = self.reports[arm].for_mode(self.mode)
        bad = [c for c in cases if (not c.success) or c.rot_deg > self.high_error_gate[0]
               or c.trans_mm > self.high_error_gate[1]]
        return len(bad) / len(cases) if cases else float("nan")

    def well_init_rate(self, arm: str) -> float:
        cases = self.reports[arm].for_mode(self.mode)
        good = [c for c in cases if c.success and c.rot_deg < self.well_init_gate[0]
                and c.trans_mm < self.well_init_gate[1]]
        return len(good) / len(cases) if cases else float("nan")

    def render(self) -> str:
        width = 26
        header = "metric".ljust(width) + "".join(a.rjust(24) for a in self.arms)
        lines = [header, "-" * len(header)]
        for label, metric in (("Rot. error (deg)", "rot_deg"),
                              ("Trans. error (mm)", "trans_mm")):
            row = label.ljust(width)
            for a in self.arms:
                row += _fmt_stat(self.reports[a].metric_values(self.mode, metric)).rjust(24)
            lines.append(row)
        g = self.high_error_gate
        row = f"> {g[0]:g} deg or > {g[1]:g} mm".ljust(width)
        for a in self.arms:
            row += f"{100.0 * self.high_error_rate(a):.1f}%".rjust(24)
        lines.append(row)
        g = self.well_init_gate
        row = f"< {g[0]:g} deg & < {g[1]:g} mm".ljust(width)
        for a in self.arms:
            row += f"{100.0 * self.well_init_rate(a):.1f}%".rjust(24)
        lines.append(row)
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"arms": self.arms, "mode": self.mode,
                "high_error_gate": list(self.high_error_gate),
                "well_init_gate": list(self.well_init_gate),
                "high_error_rate": {a: self.high_error_rate(a) for a in self.arms},
                "well_init_rate": {a: self.well_init_rate(a) for a in self.arms},
                "reports": {a: r.to_dict() for a, r in self.reports.items()}}


def ablation_run(base_config: TrainConfig, eval_data_dir: str | Path,
                 out_dir: str | Path, arms: Sequence[AblationArm] = DEFAULT_ARMS,
                 high_error_gate: tuple[float, float] = (50.0, 50.0),
                 well_init_gate: tuple[float, float] = (25.0, 25.0),
                 modes: tuple[str, ...] = ("all",),
                 ransac: RansacConfig | None = None) -> AblationReport:
    """Train one model per arm (shared seed and data) and compare eval runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for arm in arms:
        cfg = replace(base_config, polycrop_enabled=arm.polycrop_enabled,
                      variant=arm.variant)
        logger.info("ablation arm %s: variant=%s polycrop=%s",
                    arm.name, arm.variant, arm.polycrop_enabled)
        ckpt = train(cfg, out / "arms" / arm.name)
        reports[arm.name] = evaluate(ckpt, eval_data_dir, modes=modes,
                                     gates=(high_error_gate, well_init_gate),
                                     ransac=ransac,
                                     out_dir=out / "arms" / arm.name / "eval")
    report = AblationReport(arms=[a.name for a in arms], reports=reports,
                            high_error_gate=high_error_gate,
                            well_init_gate=well_init_gate, mode=modes[0])
    (out / "report.txt").write_text(report.render())
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    return report
