"""Training of both stages and the three-step image -> mesh -> cloud -> mesh reconstruction."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .dataset import ShapeDataset, ground_truth_mesh, make_field
from .extraction import MiseConfig, OccupancyField, extract_mesh
from .geometry import Aabb, WORLD_HALF_EXTENT, PointCloud
from .metrics import MetricsReport, chamfer_l1, normal_consistency, volumetric_iou
from .models import OccupancyNetwork, stage_arch
from .nn import AdamState, adam_step, bce_loss, sigmoid
from .pointcloud import mesh_to_pointcloud

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class EmptySurfaceError(RuntimeError):
    pass


class EmptySurfaceWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 2000
    points_per_sample: int = 1024
    eval_every: int = 50
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.points_per_sample < 2:
            raise ValueError("points_per_sample must be >= 2")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)
    steps: int = 0
    first_losses: list = field(default_factory=list)


def stage_inputs(data, stage, idx=None):
    return data.silhouettes(idx) if stage == 1 else data.clouds(idx)


def evaluate_loss(net, data, stage, chunk=8):
    """Eval-mode BCE and accuracy at tau = 0.5 over every stored query of ``data``."""
    total, correct, count = 0.0, 0, 0
    for s in range(0, len(data), chunk):
        idx = list(range(s, min(s + chunk, len(data))))
        z = net.encode(stage_inputs(data, stage, idx))
        pts = np.stack([data[i].points for i in idx])
        lab = np.stack([data[i].labels for i in idx])
        logits, _ = net.decoder.forward(pts, z, mode="eval")
        p = sigmoid(logits[..., 0])
        loss, _ = bce_loss(p, lab)
        total += loss * lab.size
        correct += int(np.count_nonzero((p > 0.5) == (lab > 0.5)))
        count += lab.size
    return total / count, correct / count


def train_stage(stage, train_data, cfg=TrainConfig(), val_data=None, arch=None, on_eval=None):
    """Minibatch BCE training of encoder + decoder with Adam.

    Validation runs every ``cfg.eval_every`` steps (and after the last step);
    training stops after ``cfg.patience`` evaluations without a new best
    validation loss, and the best-validation weights are returned.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    arch = arch or stage_arch(stage)
    if arch["stage"] != stage:
        raise ValueError(f"architecture is for stage {arch['stage']}, not {stage}")
    val_data = val_data if val_data is not None else train_data
    net = OccupancyNetwork(arch, seed=cfg.seed)
    adam = AdamState.for_params(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng([cfg.seed, stage])
    meta = {"train_config": asdict(cfg), "n_train": len(train_data), "n_val": len(val_data)}

    inputs = stage_inputs(train_data, stage)
    # stage 2 draws one of each shape's ground-truth clouds per step when a bank is stored
    banks = train_data.cloud_banks() if stage == 2 else None
    points = np.stack([s.points for s in train_data.samples])
    labels = np.stack([s.labels for s in train_data.samples])
    n, q_pool = labels.shape
    bsz, q = min(cfg.batch_size, n), min(cfg.points_per_sample, q_pool)

    best = Checkpoint.from_network(net, adam, dict(meta, step=0))
    best_loss, since_best = np.inf, 0
    history, first_losses = [], []
    recent = []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        idx = np.arange(n) if bsz == n else np.sort(rng.choice(n, bsz, replace=False))
        sel = np.stack([rng.choice(q_pool, q, replace=False) for _ in idx]) if q < q_pool \
            else np.broadcast_to(np.arange(q_pool), (len(idx), q_pool))
        pts = np.take_along_axis(points[idx], sel[..., None], axis=1)
        lab = np.take_along_axis(labels[idx], sel, axis=1)
        if banks is not None and banks.shape[1] > 1:
            x = banks[idx, rng.integers(banks.shape[1], size=len(idx))]
        else:
            x = inputs[idx]
        loss, _ = net.loss_and_grad(x, pts, lab)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"stage {stage}: loss became {loss} at step {step}")
        adam_step(net.params, adam)
        recent.append(loss)
        if len(first_losses) < 10:
            first_losses.append(loss)

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val_loss, val_acc = evaluate_loss(net, val_data, stage)
            rec = {"step": step, "train_loss": float(np.mean(recent)),
                   "val_loss": val_loss, "val_acc": val_acc}
            recent = []
            history.append(rec)
            log.info(json.dumps(rec))
            if on_eval is not None:
                on_eval(rec)
            if val_loss < best_loss:
                best_loss, since_best = val_loss, 0
                best = Checkpoint.from_network(net, adam, dict(meta, step=step, val_loss=val_loss,
                                                               val_acc=val_acc))
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    return TrainResult(best, history, step, first_losses)


def train_stage1(data, cfg=TrainConfig(), **kw):
    return train_stage(1, data, cfg, **kw)


def train_stage2(data, cfg=TrainConfig(), **kw):
    return train_stage(2, data, cfg, **kw)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

class NetworkField(OccupancyField):
    """Eval-mode decoder field for one latent code."""

    def __init__(self, net, latent):
        self.net = net
        self.latent = np.asarray(latent, dtype=np.float64).reshape(1, -1)
        self.bounds = Aabb.cube(WORLD_HALF_EXTENT)

    def __call__(self, points):
        return self.net.predict(points, self.latent)


def _as_network(model):
    if isinstance(model, Checkpoint):
        return model.to_network()
    if isinstance(model, OccupancyNetwork):
        return model
    return ckpt_io.load(model).to_network()


def reconstruct_occnet(silhouette, stage1, mise=MiseConfig()):
    """Single-stage reconstruction: image encoder -> decoder field -> MISE -> marching cubes.

    An empty result (the field never rises above tau) is returned with an
    ``EmptySurfaceWarning``.
    """
    net = _as_network(stage1)
    if net.latent_dim != 256 or net.arch["encoder"] != "image":
        raise ValueError("stage-1 network must be an image encoder with a 256-d latent")
    z = net.encode(np.asarray(silhouette, dtype=np.float64)[None])
    mesh = extract_mesh(NetworkField(net, z), mise)
    if mesh.is_empty:
        warnings.warn("field never crossed tau; reconstruction is empty", EmptySurfaceWarning,
                      stacklevel=2)
    return mesh


def reconstruct_from_cloud(cloud, stage2, mise=MiseConfig()):
    net = _as_network(stage2)
    if net.latent_dim != 512 or net.arch["encoder"] != "pointnet":
        raise ValueError("stage-2 network must be a PointNet encoder with a 512-d latent")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    z = net.encode(pts[None])
    return extract_mesh(NetworkField(net, z), mise)


@dataclass
class PipelineConfig:
    stage1: object          # Checkpoint, OccupancyNetwork or path
    stage2: object
    mise: MiseConfig = MiseConfig()
    n_points: int = 300
    seed: int = 0


@dataclass
class DOccNetResult:
    final: object
    stage1_mesh: object
    cloud: PointCloud


def reconstruct_doccnet(silhouette, cfg):
    """Image -> stage-1 mesh -> 300-point cloud -> stage-2 mesh."""
    net1, net2 = _as_network(cfg.stage1), _as_network(cfg.stage2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySurfaceWarning)
        mesh1 = reconstruct_occnet(silhouette, net1, cfg.mise)
    if mesh1.is_empty:
        raise EmptySurfaceError("stage-1 produced no surface")
    cloud = mesh_to_pointcloud(mesh1, cfg.n_points, cfg.seed)
    final = reconstruct_from_cloud(cloud, net2, cfg.mise)
    return DOccNetResult(final, mesh1, cloud)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_run(pred, gt_spec, seed=0, n_samples=100_000, n_points=10_000,
                 gt_mise=MiseConfig(32, 2)):
    """IoU against the exact field, Chamfer / normal consistency against a fine GT mesh.

    The IoU box is the union of both shapes' bounds, so prediction mass away
    from the ground truth is counted.

    Each metric uses its own seed derived from ``seed``; within a surface
    metric both meshes share that seed.
    """
    gt_field = make_field(gt_spec)
    gt_mesh = ground_truth_mesh(gt_spec, gt_mise)
    s_iou, s_cd, s_nc = (int(x) for x in np.random.SeedSequence(seed).generate_state(3))
    iou = volumetric_iou(pred, gt_field, n_samples, s_iou)
    cd = chamfer_l1(pred, gt_mesh, n_points, s_cd)
    nc = normal_consistency(pred, gt_mesh, n_points, s_nc)
    return MetricsReport(float(iou), float(cd), float(nc), n_samples, n_points, int(seed))
