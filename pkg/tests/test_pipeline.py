import warnings

import numpy as np
import pytest

from doccnet import checkpoint as ck
from doccnet.dataset import ShapeDataset, ShapeSpec, ground_truth_mesh, overfit_specs
from doccnet.extraction import MiseConfig
from doccnet.geometry import TriangleMesh, open_edge_count
from doccnet.metrics import volumetric_iou
from doccnet.models import OccupancyNetwork, stage_arch
from doccnet.nn import AdamState, adam_step
from doccnet.pipeline import (EmptySurfaceError, EmptySurfaceWarning, PipelineConfig, TrainConfig,
                              TrainingDiverged, evaluate_run, reconstruct_doccnet,
                              reconstruct_from_cloud, reconstruct_occnet, train_stage)
from doccnet.pointcloud import mesh_to_pointcloud

SMALL = {1: {"widths": {"hidden": 16}, "blocks": 1},
         2: {"widths": {"hidden": 16, "pointnet": [16, 32, 64]}, "blocks": 1}}
FAST = TrainConfig(max_steps=150, points_per_sample=256, eval_every=50, lr=1e-3)
COARSE = MiseConfig(16, 1)


@pytest.fixture(scope="module")
def data():
    return ShapeDataset.from_specs(overfit_specs()[:2], seed=0, queries=512)


@pytest.fixture(scope="module")
def trained(data):
    return {s: train_stage(s, data, FAST, arch=stage_arch(s, reduced=SMALL[s])).checkpoint
            for s in (1, 2)}


# --- training ----------------------------------------------------------------

@pytest.mark.parametrize("stage", [1, 2])
def test_zero_steps_returns_initialisation(data, stage):
    arch = stage_arch(stage, reduced=SMALL[stage])
    res = train_stage(stage, data, TrainConfig(max_steps=0, seed=7), arch=arch)
    assert res.steps == 0 and res.history == []
    assert res.checkpoint.equal(ck.Checkpoint.from_network(OccupancyNetwork(arch, seed=7)))


@pytest.mark.parametrize("stage", [1, 2])
def test_training_is_bitwise_deterministic(data, stage):
    cfg = TrainConfig(max_steps=20, points_per_sample=64, eval_every=10, seed=3)
    arch = stage_arch(stage, reduced=SMALL[stage])
    a = train_stage(stage, data, cfg, arch=arch)
    b = train_stage(stage, data, cfg, arch=arch)
    assert ck.to_bytes(a.checkpoint) == ck.to_bytes(b.checkpoint)
    assert a.history == b.history


def test_stage2_cloud_bank_changes_training_only_through_inputs():
    specs = overfit_specs()[:2]
    single = ShapeDataset.from_specs(specs, seed=0, queries=256)
    bank = ShapeDataset.from_specs(specs, seed=0, queries=256, n_clouds=4)
    cfg = TrainConfig(max_steps=6, points_per_sample=64, eval_every=3, seed=1)
    arch = stage_arch(2, reduced=SMALL[2])
    a = train_stage(2, single, cfg, arch=arch)
    b = train_stage(2, bank, cfg, arch=arch)
    c = train_stage(2, bank, cfg, arch=arch)
    assert ck.to_bytes(b.checkpoint) == ck.to_bytes(c.checkpoint)
    assert a.first_losses != b.first_losses
    # stage 1 ignores the bank entirely
    arch1 = stage_arch(1, reduced=SMALL[1])
    assert ck.to_bytes(train_stage(1, single, cfg, arch=arch1).checkpoint) == \
        ck.to_bytes(train_stage(1, bank, cfg, arch=arch1).checkpoint)


@pytest.mark.parametrize("stage", [1, 2])
def test_frozen_minibatch_loss_decreases(data, stage):
    net = OccupancyNetwork(stage_arch(stage, reduced=SMALL[stage]), seed=0)
    adam = AdamState.for_params(net.params)
    inputs = data.silhouettes() if stage == 1 else data.clouds()
    pts = np.stack([s.points[:128] for s in data.samples])
    lab = np.stack([s.labels[:128] for s in data.samples])
    losses = []
    for _ in range(10):
        loss, _ = net.loss_and_grad(inputs, pts, lab)
        adam_step(net.params, adam)
        losses.append(loss)
    assert np.all(np.diff(losses) < 0), losses


def test_training_reaches_good_accuracy_and_logs(trained, data):
    res = train_stage(1, data, FAST, arch=stage_arch(1, reduced=SMALL[1]))
    assert [r["step"] for r in res.history] == [50, 100, 150]
    assert set(res.history[0]) == {"step", "train_loss", "val_loss", "val_acc"}
    assert res.history[-1]["val_acc"] > 0.9
    assert len(res.first_losses) == 10


def test_early_stopping_respects_patience(data):
    cfg = TrainConfig(max_steps=400, points_per_sample=32, eval_every=1, patience=1, lr=0.3)
    res = train_stage(1, data, cfg, arch=stage_arch(1, reduced=SMALL[1]))
    assert res.steps < 400
    best = min(r["val_loss"] for r in res.history)
    assert res.checkpoint.meta["val_loss"] == best


def test_divergence_aborts(data, monkeypatch):
    def nan_loss(self, *a, **k):
        return float("nan"), None
    monkeypatch.setattr(OccupancyNetwork, "loss_and_grad", nan_loss)
    with pytest.raises(TrainingDiverged, match="step 1"):
        train_stage(1, data, TrainConfig(max_steps=5), arch=stage_arch(1, reduced=SMALL[1]))


def test_train_config_validation(data):
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="empty"):
        train_stage(1, ShapeDataset([]))
    with pytest.raises(ValueError, match="stage 2"):
        train_stage(1, data, arch=stage_arch(2))


# --- reconstruction --------------------------------------------------------------

def test_untrained_occnet_gives_empty_mesh_with_warning(data):
    net = OccupancyNetwork(stage_arch(1, reduced=SMALL[1]), seed=0)
    with pytest.warns(EmptySurfaceWarning):
        mesh = reconstruct_occnet(data[0].silhouette, net, COARSE)
    assert mesh.is_empty


def test_doccnet_empty_stage1_is_an_error(data, trained):
    net = OccupancyNetwork(stage_arch(1, reduced=SMALL[1]), seed=0)
    with pytest.raises(EmptySurfaceError, match="stage-1 produced no surface"):
        reconstruct_doccnet(data[0].silhouette, PipelineConfig(net, trained[2], COARSE))


def test_latent_dims_checked(data, trained):
    with pytest.raises(ValueError, match="256"):
        reconstruct_occnet(data[0].silhouette, trained[2], COARSE)
    with pytest.raises(ValueError, match="512"):
        reconstruct_from_cloud(data[0].cloud, trained[1], COARSE)


def test_doccnet_structure_and_determinism(data, trained, tmp_path):
    cfg = PipelineConfig(trained[1], trained[2], COARSE, seed=5)
    a = reconstruct_doccnet(data[0].silhouette, cfg)
    assert not a.stage1_mesh.is_empty and not a.final.is_empty
    assert len(a.cloud.points) == 300
    assert open_edge_count(a.final) == 0
    b = reconstruct_doccnet(data[0].silhouette, cfg)
    assert np.array_equal(a.final.vertices, b.final.vertices)
    assert np.array_equal(a.final.triangles, b.final.triangles)
    # checkpoints loaded from disk give the same mesh
    p1, p2 = tmp_path / "1.ocfk", tmp_path / "2.ocfk"
    ck.save(p1, trained[1])
    ck.save(p2, trained[2])
    c = reconstruct_doccnet(data[0].silhouette, PipelineConfig(p1, p2, COARSE, seed=5))
    assert np.array_equal(a.final.vertices, c.final.vertices)


def relabel(mesh, rng, extra=5):
    """Same surface, shuffled vertex order plus unreferenced vertices."""
    n = len(mesh.vertices)
    perm = rng.permutation(n + extra)
    verts = np.empty((n + extra, 3))
    verts[perm[:n]] = mesh.vertices
    verts[perm[n:]] = rng.normal(size=(extra, 3))
    return TriangleMesh(verts, perm[mesh.triangles])


def subdivide(mesh):
    """Split every triangle into four at its edge midpoints (same surface, new connectivity)."""
    v, t = mesh.vertices, mesh.triangles
    mids = [(v[t[:, a]] + v[t[:, b]]) / 2 for a, b in ((0, 1), (1, 2), (2, 0))]
    n, m = len(v), len(t)
    ab, bc, ca = (n + k * m + np.arange(m) for k in range(3))
    tris = np.concatenate([np.stack([t[:, 0], ab, ca], 1), np.stack([ab, t[:, 1], bc], 1),
                           np.stack([ca, bc, t[:, 2]], 1), np.stack([ab, bc, ca], 1)])
    return TriangleMesh(np.concatenate([v, *mids]), tris)


def test_final_mesh_ignores_stage1_connectivity(data, trained):
    res = reconstruct_doccnet(data[0].silhouette, PipelineConfig(trained[1], trained[2], COARSE, seed=2))
    # the final mesh is a function of the cloud alone
    again = reconstruct_from_cloud(res.cloud, trained[2], COARSE)
    assert np.array_equal(again.vertices, res.final.vertices)
    # re-indexing the stage-1 mesh changes nothing, bitwise
    moved = relabel(res.stage1_mesh, np.random.default_rng(0))
    cloud = mesh_to_pointcloud(moved, 300, seed=2)
    np.testing.assert_array_equal(cloud.points, res.cloud.points)
    # a genuine re-triangulation draws different samples of the same surface;
    # the final meshes then agree up to sampling noise
    fine = subdivide(res.stage1_mesh)
    other = reconstruct_from_cloud(mesh_to_pointcloud(fine, 300, seed=2), trained[2], COARSE)
    assert volumetric_iou(other, res.final, 20_000, seed=0) > 0.9


# --- evaluation ----------------------------------------------------------------

@pytest.fixture(scope="module")
def box_gt():
    spec = ShapeSpec("box", {"half_extents": (0.3, 0.22, 0.26)}, rotation_z=0.4)
    return spec, ground_truth_mesh(spec, MiseConfig(32, 2))


def test_evaluate_run_self_comparison(box_gt):
    spec, mesh = box_gt
    r = evaluate_run(mesh, spec, seed=0)
    assert r.iou >= 0.99 and r.chamfer_l1 <= 1e-3 and r.normal_consistency >= 0.99
    assert r.to_dict()["n_samples"] == 100_000


def test_evaluate_run_translated_copy_is_worse(box_gt):
    spec, mesh = box_gt
    base = evaluate_run(mesh, spec, seed=1)
    moved = evaluate_run(mesh.transformed(offset=(0.1, 0, 0)), spec, seed=1)
    assert moved.iou < base.iou
    assert moved.chamfer_l1 > base.chamfer_l1
    assert moved.normal_consistency < base.normal_consistency


def test_evaluate_run_disjoint_and_open(box_gt):
    spec, mesh = box_gt
    far = mesh.transformed(offset=(2.0, 0, 0))
    assert evaluate_run(far, spec, seed=0, n_samples=10_000, n_points=1_000).iou == 0.0
    from doccnet.metrics import NotWatertightError
    opened = TriangleMesh(mesh.vertices, mesh.triangles[1:])
    with pytest.raises(NotWatertightError):
        evaluate_run(opened, spec, seed=0, n_samples=10_000, n_points=1_000)


def test_evaluate_run_deterministic(box_gt):
    spec, mesh = box_gt
    assert evaluate_run(mesh, spec, 4, 10_000, 1_000) == evaluate_run(mesh, spec, 4, 10_000, 1_000)


def test_evaluate_run_emits_no_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sphere = ShapeSpec("sphere", {"radius": 0.3})
        evaluate_run(ground_truth_mesh(sphere), sphere, 0, 10_000, 500)
