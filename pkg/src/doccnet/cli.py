"""Command-line entry point: gen-data, train, reconstruct, mesh2pc, extract, eval.

Every option may also come from a TOML file given with ``--config``; its keys
are the long option names (dashes or underscores). Flags override the file,
unknown keys are rejected, and the resolved configuration is echoed as one
JSON line to the log before the command runs.

Exit status: 0 success, 1 domain error (empty surface, open mesh, divergence,
bad checkpoint), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("doccnet")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _tau(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("tau must be in (0,1)")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _kinds(text):
    from .dataset import KINDS

    kinds = tuple(k.strip() for k in str(text).split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"unknown shape kind(s) {bad}; choose from {','.join(KINDS)}")
    return kinds


# name -> (type, default, help, extra argparse kwargs).  A default of
# ``REQUIRED`` marks a mandatory option; paths listed in _INPUT_PATHS must exist.
REQUIRED = object()

_COMMON = {
    "seed": (int, None, "global seed (falls back to $OCFK_SEED, then 0)", {}),
    "threads": (_positive, 1, "BLAS / OpenMP threads (1 keeps runs bitwise reproducible)", {}),
    "log": (str, None, "append JSON-lines log records to this file", {}),
}

_MISE = {
    "r0": (_positive, 32, "initial MISE cells per axis (power of two)", {}),
    "steps": (_nonneg, 2, "MISE subdivision rounds", {}),
    "tau": (_tau, 0.5, "occupancy threshold", {}),
}

COMMANDS = {
    "gen-data": ("generate an analytic-shape dataset", {
        "kinds": (_kinds, "sphere,box,torus,cylinder,union", "comma-separated shape kinds", {}),
        "count": (_positive, 10, "shapes per kind", {}),
        "out": (str, REQUIRED, "output directory", {}),
        "queries": (_positive, 1024, "occupancy queries per shape", {}),
        "clouds": (_positive, 1, "ground-truth point clouds per shape (stage 2 draws one per step)", {}),
        "overfit": (bool, False, "write the five fixed overfit shapes instead of random ones", {}),
        "no_augment": (bool, False, "skip scale / crop-jitter augmentation", {}),
    }),
    "train": ("train one stage", {
        "stage": (int, REQUIRED, "1 = image encoder, 2 = PointNet encoder", {"choices": (1, 2)}),
        "data": (str, REQUIRED, "training dataset directory", {}),
        "val_data": (str, None, "validation dataset directory (default: the training set)", {}),
        "out": (str, REQUIRED, "output checkpoint", {}),
        "steps": (_nonneg, 2000, "maximum optimisation steps", {}),
        "batch_size": (_positive, 64, "shapes per minibatch", {}),
        "points_per_sample": (_positive, 1024, "queries drawn per shape and step", {}),
        "lr": (float, 1e-4, "Adam learning rate", {}),
        "eval_every": (_positive, 50, "steps between validation passes", {}),
        "patience": (_positive, 10, "validation passes without improvement before stopping", {}),
        "hidden": (_positive, 256, "decoder hidden width", {}),
        "blocks": (_positive, 5, "decoder residual blocks", {}),
    }),
    "reconstruct": ("reconstruct a mesh from a silhouette", {
        "mode": (str, "doccnet", "pipeline", {"choices": ("occnet", "doccnet")}),
        "image": (str, REQUIRED, "input silhouette (PGM)", {}),
        "ckpt1": (str, REQUIRED, "stage-1 checkpoint", {}),
        "ckpt2": (str, None, "stage-2 checkpoint (doccnet mode)", {}),
        "out": (str, REQUIRED, "output mesh (.obj or .off)", {}),
        "dump_intermediates": (str, None, "directory for stage-1 mesh and 300-point cloud", {}),
        "n_points": (_positive, 300, "points in the intermediate cloud", {}),
        **_MISE,
    }),
    "mesh2pc": ("convert a mesh to a point cloud", {
        "in": (str, REQUIRED, "input mesh", {}),
        "n": (_positive, 300, "number of points", {}),
        "out": (str, REQUIRED, "output cloud (.xyz or .ply)", {}),
    }),
    "extract": ("extract a mesh from an occupancy field", {
        "field": (str, REQUIRED, "sphere | box | torus | checkpoint:<path>:<latent-source>", {}),
        "out": (str, REQUIRED, "output mesh", {}),
        **_MISE,
    }),
    "eval": ("score a predicted mesh against an analytic ground truth", {
        "pred": (str, REQUIRED, "predicted mesh", {}),
        "gt": (str, REQUIRED, "ground-truth spec JSON (single spec or dataset spec.json)", {}),
        "gt_index": (_nonneg, 0, "sample index inside a dataset spec.json", {}),
        "samples": (_positive, 100_000, "IoU Monte-Carlo samples", {}),
        "points": (_positive, 10_000, "surface points for Chamfer / normal consistency", {}),
        "out": (str, None, "write the JSON report here (default: stdout only)", {}),
    }),
}

_INPUT_PATHS = {"data", "val_data", "image", "ckpt1", "ckpt2", "in", "pred", "gt"}


def _options(command):
    return dict(COMMANDS[command][1], **_COMMON, config=(str, None, "TOML config file", {}))


def build_parser():
    parser = _Parser(prog="doccnet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        for key, (typ, default, text, extra) in _options(name).items():
            flag = "--" + key.replace("_", "-")
            if default is not None and default is not REQUIRED and typ is not bool:
                text += f" (default {default})"
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS, help=text)
            else:
                p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS, help=text, **extra)
    return parser


def _read_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:      # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: {e}") from None


def _coerce(command, key, value):
    typ, _, _, extra = _options(command)[key]
    if typ is bool:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    try:
        v = typ(value) if typ is not _kinds or isinstance(value, str) else typ(",".join(value))
    except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
        raise UsageError(f"config key {key!r}: {e}") from None
    if "choices" in extra and v not in extra["choices"]:
        raise UsageError(f"config key {key!r}: {v!r} not in {extra['choices']}")
    return v


def parse_args(argv=None):
    """Parse ``argv`` into (command, resolved config dict); raises UsageError."""
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError("doccnet: a command is required (gen-data, train, reconstruct, "
                         "mesh2pc, extract, eval)")
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    opts = _options(command)

    resolved = {k: d for k, (_, d, _, _) in opts.items() if d is not REQUIRED}
    if flags.get("config"):
        doc = _read_toml(flags["config"])
        doc = doc.get(command, doc) if isinstance(doc.get(command), dict) else doc
        for raw, value in doc.items():
            key = raw.replace("-", "_")
            if key not in opts or key == "config":
                raise UsageError(f"unknown config key {raw!r} for {command}")
            resolved[key] = _coerce(command, key, value)
    resolved.update(flags)

    missing = [k for k, (_, d, _, _) in opts.items() if d is REQUIRED and k not in resolved]
    if missing:
        raise UsageError(f"{command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if resolved.get("seed") is None:
        env = os.environ.get("OCFK_SEED")
        try:
            resolved["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise UsageError(f"OCFK_SEED must be an integer, got {env!r}") from None
    if command == "reconstruct" and resolved["mode"] == "doccnet" and not resolved.get("ckpt2"):
        raise UsageError("reconstruct: --ckpt2 is required in doccnet mode")
    for key in _INPUT_PATHS & resolved.keys():
        if resolved[key] is not None and not os.path.exists(resolved[key]):
            raise UsageError(f"--{key.replace('_', '-')}: no such file or directory: {resolved[key]}")
    if command == "extract":
        _field_kind(resolved["field"])
    return command, resolved


# --- logging ------------------------------------------------------------------

class _JsonLines(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        return msg if msg.startswith("{") else json.dumps({"level": record.levelname, "msg": msg})


def _setup_logging(path):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    handlers = [logging.StreamHandler(sys.stderr)]
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        handlers.append(logging.FileHandler(path))
    for h in handlers:
        h.setFormatter(_JsonLines())
        log.addHandler(h)
    return handlers


def _limit_threads(n):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            return None
        return threadpool_limits(n)
    return None


# --- commands -------------------------------------------------------------------

def _mise(cfg):
    from .extraction import MiseConfig

    return MiseConfig(cfg["r0"], cfg["steps"], cfg["tau"])


def cmd_gen_data(cfg):
    from .dataset import ShapeDataset, make_specs, overfit_specs, save_dataset

    if cfg["overfit"]:
        specs = overfit_specs()
    else:
        specs = make_specs(cfg["kinds"], cfg["count"], cfg["seed"], augmented=not cfg["no_augment"])
    data = ShapeDataset.from_specs(specs, seed=cfg["seed"], queries=cfg["queries"], n_clouds=cfg["clouds"])
    save_dataset(cfg["out"], data, meta={"seed": cfg["seed"], "queries": cfg["queries"]})
    log.info(json.dumps({"event": "wrote", "path": cfg["out"], "samples": len(data)}))


def cmd_train(cfg):
    from . import checkpoint
    from .dataset import load_dataset
    from .models import stage_arch
    from .pipeline import TrainConfig, train_stage

    data = load_dataset(cfg["data"])
    val = load_dataset(cfg["val_data"]) if cfg["val_data"] else None
    tc = TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], max_steps=cfg["steps"],
                     points_per_sample=cfg["points_per_sample"], eval_every=cfg["eval_every"],
                     patience=cfg["patience"], seed=cfg["seed"])
    arch = stage_arch(cfg["stage"], hidden=cfg["hidden"], blocks=cfg["blocks"])
    res = train_stage(cfg["stage"], data, tc, val_data=val, arch=arch)
    checkpoint.save(cfg["out"], res.checkpoint)
    log.info(json.dumps({"event": "wrote", "path": cfg["out"], "steps": res.steps,
                         "best_step": res.checkpoint.meta.get("step")}))


def _load_ckpt(path):
    from . import checkpoint

    return checkpoint.load(path)


def cmd_reconstruct(cfg):
    import warnings

    from .geometry import PointCloud
    from .meshio import read_pgm, write_cloud, write_mesh
    from .pipeline import EmptySurfaceWarning, PipelineConfig, reconstruct_doccnet, reconstruct_occnet

    image = read_pgm(cfg["image"])
    mise = _mise(cfg)
    if cfg["mode"] == "occnet":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptySurfaceWarning)
            mesh = reconstruct_occnet(image, _load_ckpt(cfg["ckpt1"]), mise)
        for w in caught:
            log.warning(str(w.message))
    else:
        pc = PipelineConfig(_load_ckpt(cfg["ckpt1"]), _load_ckpt(cfg["ckpt2"]), mise,
                            n_points=cfg["n_points"], seed=cfg["seed"])
        res = reconstruct_doccnet(image, pc)
        mesh = res.final
        if cfg["dump_intermediates"]:
            d = cfg["dump_intermediates"]
            write_mesh(os.path.join(d, "stage1.obj"), res.stage1_mesh)
            write_cloud(os.path.join(d, "cloud.xyz"), PointCloud(res.cloud.points))
    write_mesh(cfg["out"], mesh)
    log.info(json.dumps({"event": "wrote", "path": cfg["out"], "vertices": len(mesh.vertices),
                         "triangles": len(mesh.triangles)}))


def cmd_mesh2pc(cfg):
    from .geometry import PointCloud
    from .meshio import read_mesh, write_cloud
    from .pointcloud import mesh_to_pointcloud

    cloud = mesh_to_pointcloud(read_mesh(cfg["in"]), cfg["n"], cfg["seed"])
    write_cloud(cfg["out"], PointCloud(cloud.points))
    log.info(json.dumps({"event": "wrote", "path": cfg["out"], "points": len(cloud.points)}))


_ANALYTIC = {
    "sphere": ("sphere", {"radius": 0.4}),
    "box": ("box", {"half_extents": (0.3, 0.25, 0.2)}),
    "torus": ("torus", {"major": 0.3, "minor": 0.12}),
}


def _field_kind(text):
    if text in _ANALYTIC:
        return text, None, None
    parts = text.split(":")
    if parts[0] != "checkpoint" or len(parts) != 3:
        raise UsageError(f"--field: expected sphere, box, torus or checkpoint:<path>:<latent-source>, "
                         f"got {text!r}")
    for p in parts[1:]:
        if p != "zeros" and not os.path.exists(p):
            raise UsageError(f"--field: no such file or directory: {p}")
    return "checkpoint", parts[1], parts[2]


def _checkpoint_field(ckpt_path, source):
    """Decoder field of a checkpoint; the latent comes from encoding ``source``
    (a PGM for stage 1, an XYZ / PLY cloud for stage 2) or is all zeros."""
    import numpy as np

    from .meshio import read_cloud, read_pgm
    from .pipeline import NetworkField

    net = _load_ckpt(ckpt_path).to_network()
    if source == "zeros":
        z = np.zeros((1, net.latent_dim))
    elif net.arch["encoder"] == "image":
        z = net.encode(read_pgm(source).astype(np.float64)[None])
    else:
        z = net.encode(read_cloud(source).points[None])
    return NetworkField(net, z)


def cmd_extract(cfg):
    from .dataset import ShapeSpec, make_field
    from .extraction import extract_mesh
    from .meshio import write_mesh

    kind, path, source = _field_kind(cfg["field"])
    if kind == "checkpoint":
        field = _checkpoint_field(path, source)
    else:
        field = make_field(ShapeSpec(*_ANALYTIC[kind]), smooth=True)
    mesh = extract_mesh(field, _mise(cfg))
    write_mesh(cfg["out"], mesh)
    log.info(json.dumps({"event": "wrote", "path": cfg["out"], "vertices": len(mesh.vertices),
                         "triangles": len(mesh.triangles)}))


def cmd_eval(cfg):
    from .dataset import load_specs
    from .meshio import atomic_write_text, read_mesh
    from .pipeline import evaluate_run

    try:
        spec = load_specs(cfg["gt"], cfg["gt_index"])
    except IndexError:
        raise UsageError(f"--gt-index {cfg['gt_index']} out of range for {cfg['gt']}") from None
    report = evaluate_run(read_mesh(cfg["pred"]), spec, cfg["seed"], cfg["samples"], cfg["points"])
    d = report.to_dict()
    text = json.dumps({k: d[k] for k in ("iou", "chamfer_l1", "normal_consistency", "n_samples",
                                          "seed")})
    if cfg["out"]:
        atomic_write_text(cfg["out"], text + "\n")
    print(text)


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "mesh2pc": cmd_mesh2pc, "extract": cmd_extract, "eval": cmd_eval}


def _domain_errors():
    from .checkpoint import CheckpointError
    from .metrics import EmptyMeshError, NotWatertightError
    from .pipeline import EmptySurfaceError, TrainingDiverged

    return (DomainError, CheckpointError, EmptyMeshError, NotWatertightError, EmptySurfaceError,
            TrainingDiverged, ValueError)


def main(argv=None):
    try:
        command, cfg = parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:           # --help
        return int(e.code or 0)

    handlers = _setup_logging(cfg.get("log"))
    limiter = _limit_threads(cfg["threads"])
    try:
        log.info(json.dumps({"event": "config", "command": command, "config": cfg}, default=list))
        domain = _domain_errors()
        try:
            HANDLERS[command](cfg)
        except UsageError as e:
            log.error(str(e))
            return 2
        except domain as e:
            log.error(f"{type(e).__name__}: {e}")
            return 1
        return 0
    finally:
        if limiter is not None:
            limiter.unregister()
        for h in handlers:
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
