"""Two-stage optimization: geometry under joint image/point SDS, then appearance refinement."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint as ckpt
from .adaptive import (
    DensifyConfig, DensifyEvent, GradAccumulator, KdTree, accumulate, densify_compactness, prune,
    split_by_gradient,
)
from .camera import Camera, look_at_camera, orbit_position, sample_poses
from .config import LossWeights, StageConfig, TrainConfig, config_hash
from .gaussians import (
    OPACITY_MAX, OPACITY_MIN, GaussianCloud, SceneNormalization, blob_scene, fit_normalization, sigmoid,
)
from .grad import ParamGrads, backward
from .guidance import (
    KIND_IMAGE, KIND_POINTS, Condition, DiracImageOracle, DiracPointOracle, ExternalScoreProvider,
    NoiseSchedule, NullProvider, ddpm_schedule, sds_image_grad, sds_point_grad,
)
from .optim import Adam
from .rasterizer import PRODUCTION, BackgroundModel, RenderSettings, render

log = logging.getLogger(__name__)

STREAMS = ("camera", "image_noise", "point_noise", "split")


class NonFiniteError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass
class Streams:
    """One generator per purpose, so changing how one is consumed never shifts the others."""

    camera: np.random.Generator
    image_noise: np.random.Generator
    point_noise: np.random.Generator
    split: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        seqs = np.random.SeedSequence(seed).spawn(len(STREAMS))
        return cls(*[np.random.Generator(np.random.PCG64(s)) for s in seqs])

    def state_json(self) -> str:
        return json.dumps({n: getattr(self, n).bit_generator.state for n in STREAMS}, sort_keys=True)

    @classmethod
    def from_state_json(cls, text: str) -> "Streams":
        states = json.loads(text)
        out = cls.from_seed(0)
        for n in STREAMS:
            getattr(out, n).bit_generator.state = states[n]
        return out


def _flat_grads(grads: ParamGrads) -> dict:
    out = {name: grads.group(name) for name in ParamGrads.GROUPS}
    out["background"] = grads.d_background
    return out


def _params(cloud: GaussianCloud, background: BackgroundModel) -> dict:
    return dict(cloud.params(), background=background.params)


# --- regularizers -------------------------------------------------------------

def mean_regularizer(cloud: GaussianCloud, mode: str = "deviation") -> tuple[float, np.ndarray]:
    """Sum of ||p_i - ref_i||; ref is the snapshot (deviation) or the origin (literal)."""
    p = cloud.positions.astype(np.float64)
    if mode == "deviation":
        if cloud.snapshot_positions is None:
            raise ValueError("deviation mode needs snapshot positions")
        diff = p - cloud.snapshot_positions.astype(np.float64)
    elif mode == "literal":
        diff = p
    else:
        raise ValueError(f"unknown mean_mode {mode!r}")
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    grad = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
    return float(norm.sum()), grad


def opacity_regularizer(cloud: GaussianCloud, frozen_dist: Optional[np.ndarray] = None):
    """Sum of sg(||p_i||) * o_i. Returns (value, d_positions, d_opacity_logits).

    The distance weight is a constant under differentiation, so d_positions is
    identically zero. Pass ``frozen_dist`` to pin the weights, e.g. when
    probing the term with finite differences.
    """
    p = cloud.positions.astype(np.float64)
    dist = np.linalg.norm(p, axis=1, keepdims=True) if frozen_dist is None else np.reshape(frozen_dist, (-1, 1))
    o = np.clip(sigmoid(cloud.opacity_logits.astype(np.float64)), OPACITY_MIN, OPACITY_MAX)
    inside = (o > OPACITY_MIN) & (o < OPACITY_MAX)
    d_logit = np.where(inside, dist * o * (1.0 - o), 0.0)
    return float((dist * o).sum()), np.zeros_like(p), d_logit


# --- per-step gradient assembly ------------------------------------------------

def _image_sds(cloud, background, provider, cams, rng, schedule, scale, settings, acc, token):
    total = ParamGrads.zeros(len(cloud), background.params.size)
    sq = 0.0
    for cam in cams:
        out = render(cloud, cam, background, settings)
        t = schedule.sample_t(rng)
        eps = rng.standard_normal(out.color.shape)
        g = sds_image_grad(provider, out.color.astype(np.float64), t, eps, schedule, Condition(token, cam))
        sq += float(np.mean(g * g))
        grads = backward(out.tape, scale * g, cloud=cloud)
        if acc is not None:
            accumulate(acc, grads)
        total.add_(grads, 1.0 / len(cams))
    return total, sq / len(cams)


def geometry_step(cloud: GaussianCloud, background: BackgroundModel, image_provider, point_provider,
                  weights: LossWeights, cams: list[Camera], streams: Streams, schedule: NoiseSchedule,
                  normalization: SceneNormalization, settings: RenderSettings = PRODUCTION,
                  acc: Optional[GradAccumulator] = None, token=None) -> tuple[ParamGrads, dict]:
    """Image SDS through the renderer for every camera plus one point-SDS draw on normalized positions."""
    grads, sq = _image_sds(cloud, background, image_provider, cams, streams.image_noise, schedule,
                           weights.lambda_sds, settings, acc, token)
    metrics = {"sds_image": sq, "sds_point": 0.0}
    if point_provider is not None:
        p = normalization.apply(cloud.positions.astype(np.float64))
        t = schedule.sample_t(streams.point_noise)
        eps = streams.point_noise.standard_normal(p.shape)
        gp = sds_point_grad(point_provider, p, t, eps, schedule, Condition(token))
        metrics["sds_point"] = float(np.mean(gp * gp))
        # d/dp of a function of (p - c) / s
        grads.d_positions += weights.lambda_3d * gp / normalization.scale
    return grads, metrics


def refine_step(cloud: GaussianCloud, background: BackgroundModel, image_provider, weights: LossWeights,
                cams: list[Camera], streams: Streams, schedule: NoiseSchedule, mean_mode: str = "deviation",
                settings: RenderSettings = PRODUCTION, acc: Optional[GradAccumulator] = None,
                token=None) -> tuple[ParamGrads, dict]:
    grads, sq = _image_sds(cloud, background, image_provider, cams, streams.image_noise, schedule,
                           weights.lambda_sds, settings, acc, token)
    mean_val, mean_grad = mean_regularizer(cloud, mean_mode)
    op_val, op_dpos, op_dlogit = opacity_regularizer(cloud)
    grads.d_positions += weights.lambda_mean * mean_grad + weights.lambda_opacity * op_dpos
    grads.d_opacity_logits += weights.lambda_opacity * op_dlogit
    metrics = {"sds_image": sq, "mean_reg": mean_val, "opacity_reg": op_val}
    return grads, metrics


# --- adaptive control schedule ---------------------------------------------------

def run_density_control(cloud: GaussianCloud, acc: GradAccumulator, optimizer: Adam, cfg: DensifyConfig,
                        step: int, image_width: int, rng: np.random.Generator,
                        iteration: Optional[int] = None) -> tuple[GaussianCloud, GradAccumulator, list]:
    """Apply whichever of split, compactness and prune fall due at ``step`` (1-based, stage-local)."""
    events = []
    it = step if iteration is None else iteration
    densify = cfg.densify_until == 0 or step <= cfg.densify_until
    groups = GaussianCloud.PARAM_GROUPS

    def record(op, before, after, detail):
        ev = DensifyEvent(it, op, before, after, detail)
        events.append(ev)
        log.info("densify %s", ev.to_json())

    if densify and step % cfg.split_interval == 0:
        n0 = len(cloud)
        cloud, parent, detail = split_by_gradient(cloud, acc, cfg, rng)
        optimizer.remap(parent, groups)
        acc = acc.reset(len(cloud))
        record("split", n0, len(cloud), detail)
    if densify and step % cfg.compact_interval == 0:
        n0 = len(cloud)
        cloud, parent, detail = densify_compactness(cloud, cfg)
        optimizer.remap(parent, groups)
        acc = acc.reset(len(cloud))
        record("compactness", n0, len(cloud), detail)
    if step % cfg.prune_interval == 0:
        n0 = len(cloud)
        cloud, keep, detail = prune(cloud, cfg, acc.max_screen_radius, image_width)
        optimizer.remap(keep, groups)
        acc = acc.remap(keep)
        acc.max_screen_radius[:] = 0
        opac = np.clip(sigmoid(cloud.opacity_logits[:, 0].astype(np.float64)), OPACITY_MIN, OPACITY_MAX)
        detail["min_opacity"] = float(opac.min())
        record("prune", n0, len(cloud), detail)
    return cloud, acc, events


# --- training state and checkpoints ----------------------------------------------

@dataclass
class TrainState:
    cloud: GaussianCloud
    background: BackgroundModel
    optimizer: Adam
    acc: GradAccumulator
    streams: Streams
    normalization: SceneNormalization
    iteration: int = 0
    stage: str = "geometry"
    # "none" until the geometry stage finishes or is explicitly skipped
    provenance: str = "none"
    point_target: Optional[np.ndarray] = None
    camera: Optional[Camera] = None
    config_hash: str = ""

    def to_sections(self) -> dict:
        s = {name: arr for name, arr in self.cloud.params().items()}
        if self.cloud.snapshot_positions is not None:
            s["snapshot"] = self.cloud.snapshot_positions
        bg = self.background
        s["background"] = bg.params
        s["background_meta"] = json.dumps({"kind": bg.kind, "width": bg.width, "color": bg.color.tolist()})
        s["adam.step"] = np.array([self.optimizer.step])
        s["adam.lrs"] = json.dumps(self.optimizer.lrs, sort_keys=True)
        for name in sorted(self.optimizer.m):
            s["adam.m." + name] = self.optimizer.m[name]
            s["adam.v." + name] = self.optimizer.v[name]
        s["acc.grad_sum"] = self.acc.grad_sum
        s["acc.counts"] = self.acc.counts
        s["acc.max_radius"] = self.acc.max_screen_radius
        s["iteration"] = np.array([self.iteration])
        s["stage"] = self.stage
        s["provenance"] = self.provenance
        s["rng"] = self.streams.state_json()
        s["norm.center"] = np.asarray(self.normalization.center, np.float32)
        s["norm.scale"] = np.array([self.normalization.scale], np.float32)
        if self.point_target is not None:
            s["point_target"] = self.point_target
        if self.camera is not None:
            s["camera"] = self.camera.to_kv()
        s["config_hash"] = self.config_hash
        return s

    @classmethod
    def from_sections(cls, s: dict) -> "TrainState":
        cloud = GaussianCloud(**{k: s[k] for k in GaussianCloud.PARAM_GROUPS}, snapshot_positions=s.get("snapshot"))
        meta = json.loads(s["background_meta"])
        bg = BackgroundModel(meta["kind"], meta["width"], meta["color"],
                             params=s["background"] if meta["kind"] == "mlp" else None)
        opt = Adam(json.loads(s["adam.lrs"]), step=int(s["adam.step"][0]))
        for key in s:
            if key.startswith("adam.m."):
                name = key[len("adam.m."):]
                opt.m[name], opt.v[name] = s[key], s["adam.v." + name]
        return cls(
            cloud=cloud, background=bg, optimizer=opt,
            acc=GradAccumulator(s["acc.grad_sum"], s["acc.counts"], s["acc.max_radius"]),
            streams=Streams.from_state_json(s["rng"]),
            normalization=SceneNormalization(s["norm.center"].astype(np.float64), float(s["norm.scale"][0])),
            iteration=int(s["iteration"][0]), stage=s["stage"], provenance=s["provenance"],
            point_target=s.get("point_target"),
            camera=Camera.from_kv(s["camera"]) if "camera" in s else None,
            config_hash=s["config_hash"],
        )

    def save(self, path):
        ckpt.save(path, self.to_sections())

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_sections(ckpt.load(path))


def load_target(source: str) -> GaussianCloud:
    """Dirac target scene: ``synthetic:blobs`` or a path to a Gaussian PLY."""
    if source == "synthetic:blobs":
        return blob_scene()
    from .io import read_gaussians

    return read_gaussians(source)


def initial_state(cfg: TrainConfig, cloud: GaussianCloud) -> TrainState:
    cloud = cloud.astype(np.float32)
    bgc = cfg.background
    background = BackgroundModel(bgc.kind, bgc.width, bgc.color, seed=cfg.seed, dtype=np.float32)
    norm = fit_normalization(cloud.positions)
    # stored in float32 so a resumed run sees exactly the same transform
    norm = SceneNormalization(norm.center.astype(np.float32).astype(np.float64),
                              float(np.float32(norm.scale)))
    point_target = None
    if cfg.guidance.point == "dirac":
        target = load_target(cfg.guidance.target)
        tpos = target.positions.astype(np.float64)
        _, idx = KdTree(tpos).query(cloud.positions.astype(np.float64), 1)
        point_target = norm.apply(tpos[idx[:, 0]]).astype(np.float32)
    return TrainState(
        cloud=cloud, background=background, optimizer=Adam(cfg.geometry.learning_rates()),
        acc=GradAccumulator.zeros(len(cloud)), streams=Streams.from_seed(cfg.seed), normalization=norm,
        provenance="geometry-skipped" if cfg.geometry.iterations == 0 else "none",
        point_target=point_target, config_hash=config_hash(cfg),
    )


def build_providers(cfg: TrainConfig, state: TrainState, schedule: NoiseSchedule):
    g = cfg.guidance
    if g.image == "dirac":
        target = load_target(g.target)
        target_bg = BackgroundModel.constant(cfg.background.color)
        image = DiracImageOracle(lambda cam: render(target, cam, target_bg).color.astype(np.float64), schedule)
    elif g.image == "null":
        image = NullProvider()
    elif g.image == "external":
        image = ExternalScoreProvider(g.host, g.port, KIND_IMAGE)
    else:
        raise ValueError(f"unknown image provider {g.image!r}")
    if g.point == "dirac":
        point = DiracPointOracle(state.point_target.astype(np.float64), schedule)
    elif g.point == "null":
        point = NullProvider()
    elif g.point == "external":
        point = ExternalScoreProvider(g.host, g.point_port, KIND_POINTS)
    else:
        raise ValueError(f"unknown point provider {g.point!r}")
    return image, point


def enter_refine(state: TrainState, cfg: TrainConfig):
    if state.provenance not in ("geometry", "geometry-skipped"):
        raise StageOrderError("refinement needs a finished (or explicitly skipped) geometry stage")
    state.stage = "refine"
    state.cloud = state.cloud.with_snapshot()
    state.optimizer = Adam(cfg.refine.learning_rates())
    state.acc = GradAccumulator.zeros(len(state.cloud))


@dataclass
class TrainResult:
    state: TrainState
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def cloud(self) -> GaussianCloud:
        return self.state.cloud


def checkpoint_path(out_dir, iteration: int) -> Path:
    return Path(out_dir) / f"ckpt_{iteration:06d}.gsck"


def train(cfg: TrainConfig, cloud: Optional[GaussianCloud] = None, out_dir=None, resume=None,
          refine_from=None, stop_after: Optional[int] = None, providers=None,
          settings: RenderSettings = PRODUCTION) -> TrainResult:
    """Run the geometry stage then the refinement stage.

    Start from ``cloud``, continue an interrupted run with ``resume`` (same
    config), or start refinement alone from the checkpoint of an earlier
    geometry run with ``refine_from``. ``stop_after`` halts once that global
    iteration is done. Iterations are numbered globally: geometry runs 1..G
    and refinement G+1..G+R.
    """
    schedule = ddpm_schedule(cfg.guidance.T, cfg.guidance.beta_min, cfg.guidance.beta_max, cfg.guidance.t_range)
    if resume is not None:
        state = TrainState.load(resume)
        if state.config_hash != config_hash(cfg):
            raise ValueError("checkpoint was written under a different configuration")
    elif refine_from is not None:
        state = TrainState.load(refine_from)
        enter_refine(state, cfg)
        state.iteration = cfg.geometry.iterations
        state.config_hash = config_hash(cfg)
    elif cloud is not None:
        state = initial_state(cfg, cloud)
    else:
        raise ValueError("train needs an initial cloud or a checkpoint to resume")
    image_provider, point_provider = providers if providers is not None else build_providers(cfg, state, schedule)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(state)
    n_geo, n_ref = cfg.geometry.iterations, cfg.refine.iterations
    total = n_geo + n_ref
    end = total if stop_after is None else min(total, stop_after)

    while state.iteration < end:
        k = state.iteration + 1
        if state.stage == "geometry" and k > n_geo:
            enter_refine(state, cfg)
        stage: StageConfig = cfg.geometry if state.stage == "geometry" else cfg.refine
        res = stage.resolution
        t0 = time.perf_counter()
        cams = sample_poses(cfg.camera, stage.batch, state.streams.camera, res, res)
        state.camera = cams[-1]
        if state.stage == "geometry":
            grads, metrics = geometry_step(state.cloud, state.background, image_provider, point_provider,
                                           stage.weights(), cams, state.streams, schedule, state.normalization,
                                           settings)
        else:
            grads, metrics = refine_step(state.cloud, state.background, image_provider, stage.weights(), cams,
                                         state.streams, schedule, stage.mean_mode, settings, acc=state.acc)
        if not grads.is_finite() or not all(np.isfinite(v) for v in metrics.values()):
            raise NonFiniteError(f"non-finite gradient or loss at iteration {k}; last checkpoint kept")
        state.optimizer.update(_params(state.cloud, state.background), _flat_grads(grads))
        if not all(np.all(np.isfinite(a)) for a in _params(state.cloud, state.background).values()):
            raise NonFiniteError(f"non-finite parameters after iteration {k}; last checkpoint kept")
        state.iteration = k
        if state.stage == "geometry" and k == n_geo:
            state.provenance = "geometry"
        events = []
        if state.stage == "refine":
            state.cloud, state.acc, events = run_density_control(
                state.cloud, state.acc, state.optimizer, cfg.densify, k - n_geo, res, state.streams.split, k)
        record = {"iter": k, "stage": state.stage, "N": len(state.cloud), **metrics,
                  "time_s": round(time.perf_counter() - t0, 4)}
        result.records.append(record)
        result.events.extend(events)
        if out is not None:
            if cfg.log_every and k % cfg.log_every == 0:
                with open(out / "train_log.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if events:
                with open(out / "events.jsonl", "a") as fh:
                    fh.writelines(ev.to_json() + "\n" for ev in events)
            if cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
                state.save(checkpoint_path(out, k))
    if out is not None and state.iteration == total:
        state.save(out / "final.gsck")
    return result


# --- evaluation helpers -------------------------------------------------------------

def turntable_cameras(n_frames: int, radius: float = 3.3, elevation: float = 15.0, fov_y: float = 50.0,
                      size: int = 128, look_at=(0.0, 0.0, 0.0)) -> list[Camera]:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return [look_at_camera(orbit_position(360.0 * k / n_frames, elevation, radius, look_at), look_at,
                           fov_y=fov_y, width=size, height=size)
            for k in range(n_frames)]


def render_turntable(cloud: GaussianCloud, background: BackgroundModel, n_frames: int, out_dir=None,
                     **camera_kw) -> list[np.ndarray]:
    """Sweep azimuth over a full circle; frame k sits at 360 k / n_frames degrees."""
    frames = [render(cloud, cam, background).color for cam in turntable_cameras(n_frames, **camera_kw)]
    if out_dir is not None:
        from .io import write_png

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        digits = max(4, len(str(n_frames - 1)))
        for k, img in enumerate(frames):
            write_png(out / f"frame_{k:0{digits}d}.png", img)
    return frames


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(image, np.float64) - np.asarray(target, np.float64)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def orbit_views(target: GaussianCloud, background: BackgroundModel, n: int, size: int = 128,
                radius: float = 3.3, fov_y: float = 50.0, elevations=(-5.0, 25.0), offset_deg: float = 0.0):
    """(camera, rendered target) pairs spaced evenly in azimuth, alternating elevation."""
    views = []
    for k in range(n):
        az = offset_deg + 360.0 * k / n
        cam = look_at_camera(orbit_position(az, elevations[k % len(elevations)], radius), (0, 0, 0),
                             fov_y=fov_y, width=size, height=size)
        views.append((cam, render(target, cam, background).color.astype(np.float64)))
    return views


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: dict = field(default_factory=lambda: StageConfig().learning_rates())
    densify: Optional[DensifyConfig] = None
    eval_every: int = 100
    seed: int = 0


@dataclass
class FitResult:
    cloud: GaussianCloud
    curve: list  # (iteration, mean held-out PSNR)
    events: list
    n_history: list


def reconstruction_fit(cloud: GaussianCloud, views: list, cfg: FitConfig, background: BackgroundModel,
                       heldout: Optional[list] = None,
                       callback: Optional[Callable[[int, GaussianCloud], None]] = None) -> FitResult:
    """Direct mean-squared image fitting through the full backward path.

    One view per iteration, drawn in shuffled epochs. Adaptive control runs on
    the ``cfg.densify`` cadence when given.
    """
    if len(views) < 2:
        raise ValueError("reconstruction_fit needs at least two target views")
    heldout = heldout if heldout is not None else views
    cloud = cloud.copy()
    rng = np.random.default_rng(cfg.seed)
    split_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(dict(cfg.lr))
    acc = GradAccumulator.zeros(len(cloud))
    curve, events, n_hist = [], [], []
    order: list[int] = []

    def evaluate(it):
        score = float(np.mean([psnr(render(cloud, cam, background).color, img) for cam, img in heldout]))
        curve.append((it, score))

    evaluate(0)
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views)))
        cam, target = views[order.pop()]
        out = render(cloud, cam, background)
        resid = out.color.astype(np.float64) - target
        grads = backward(out.tape, 2.0 * resid / resid.size, cloud=cloud)
        accumulate(acc, grads)
        opt.update(_params(cloud, background), _flat_grads(grads))
        if cfg.densify is not None:
            cloud, acc, evs = run_density_control(cloud, acc, opt, cfg.densify, it, cam.width, split_rng)
            events.extend(evs)
        n_hist.append(len(cloud))
        if callback is not None:
            callback(it, cloud)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            evaluate(it)
    return FitResult(cloud, curve, events, n_hist)
