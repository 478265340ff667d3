"""Train both networks on the five overfit shapes, then compare the pipelines.

Stage 1 maps a 32x32 silhouette to a 256-d latent, and stage 2 maps a
300-point cloud to a 512-d latent. The D-OccNet route is: silhouette ->
stage-1 mesh -> 300-point cloud -> stage-2 mesh. The plain OccNet route stops
after the first mesh.

With the default small decoder this takes about a minute. Pass ``--full`` for
the full-size networks and the acceptance schedule (~15 minutes).

    python demos/two_stage_overfit.py [--full] [--out DIR]
"""
import argparse
import os
import time

from doccnet import checkpoint
from doccnet.dataset import ShapeDataset, overfit_specs
from doccnet.extraction import MiseConfig
from doccnet.meshio import write_cloud, write_mesh
from doccnet.models import stage_arch
from doccnet.pipeline import (PipelineConfig, TrainConfig, evaluate_run, reconstruct_doccnet,
                              reconstruct_occnet, train_stage)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true")
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    specs = overfit_specs()
    train = ShapeDataset.from_specs(specs, seed=0, queries=8192 if args.full else 2048,
                                n_clouds=16 if args.full else 4)
    val = ShapeDataset.from_specs(specs, seed=1, queries=4096 if args.full else 1024)
    if args.full:
        cfg, mise = TrainConfig(max_steps=2000, points_per_sample=128), MiseConfig(32, 2)
        archs = {s: stage_arch(s) for s in (1, 2)}
    else:
        cfg = TrainConfig(max_steps=400, points_per_sample=256, eval_every=100, lr=3e-3)
        mise = MiseConfig(32, 1)
        archs = {s: stage_arch(s, hidden=64, blocks=2) for s in (1, 2)}

    ckpts = {}
    for stage in (1, 2):
        t0 = time.perf_counter()
        res = train_stage(stage, train, cfg, val_data=val, arch=archs[stage])
        best = res.checkpoint.meta
        print(f"stage {stage}: {res.steps} steps in {time.perf_counter() - t0:.0f}s, "
              f"best step {best['step']} val acc {best['val_acc']:.4f}")
        ckpts[stage] = res.checkpoint
        checkpoint.save(os.path.join(args.out, f"stage{stage}.ocfk"), res.checkpoint)

    pc = PipelineConfig(ckpts[1], ckpts[2], mise)
    print(f"\n{'shape':9s} {'OccNet IoU/CD/NC':>26s}   {'D-OccNet IoU/CD/NC':>26s}")
    for spec, sample in zip(specs, train.samples):
        occ = reconstruct_occnet(sample.silhouette, ckpts[1], mise)
        d = reconstruct_doccnet(sample.silhouette, pc)
        a, b = evaluate_run(occ, spec), evaluate_run(d.final, spec)
        print(f"{spec.kind:9s} {a.iou:8.3f} {a.chamfer_l1:8.4f} {a.normal_consistency:8.3f}   "
              f"{b.iou:8.3f} {b.chamfer_l1:8.4f} {b.normal_consistency:8.3f}")
        write_mesh(os.path.join(args.out, f"{spec.kind}_occnet.obj"), occ)
        write_mesh(os.path.join(args.out, f"{spec.kind}_doccnet.obj"), d.final)
        write_cloud(os.path.join(args.out, f"{spec.kind}_cloud.xyz"), d.cloud)
    print(f"\nmeshes, clouds and checkpoints written to {args.out}/")


if __name__ == "__main__":
    main()
