"""Command-line entry point: generate / train / encode / reconstruct /
template / trajectory / eval / verify-c.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
writes a run manifest next to its outputs recording the effective
configuration, seed, version hash, timestamps, and produced files.
`--threads 1` makes all internal parallelism sequential for bitwise
reproducibility; the environment variable RDA_SEED overrides the configured
seed (an explicit --seed flag still wins).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

__version__ = "0.1.0"


def _version_hash() -> str:
    blob = __version__.encode()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


class Manifest:
    """Run manifest written atomically at start and finalized at end."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed):
        self.path = Path(out_dir) / "manifest.json"
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "version": __version__,
            "version_hash": _version_hash(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "finished": None,
            "outputs": [],
        }
        self._write()

    def _write(self):
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.path)

    def finish(self, outputs):
        self.data["outputs"] = sorted(str(o) for o in outputs)
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._write()


def _apply_threads(n: int | None):
    if n is None:
        return
    from . import _kernels

    _kernels.set_num_threads(n)


def _resolve_seed(args, config_seed: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("RDA_SEED")
    if env is not None:
        return int(env)
    return config_seed


# ---------------------------------------------------------------------------
# Dataset directory helpers
# ---------------------------------------------------------------------------

def _write_dataset(out: Path, pairs, points_per_shape):
    from .geometry import box_mesh
    from .meshio import write_obj, write_pointcloud

    out.mkdir(parents=True, exist_ok=True)
    specs = []
    files = []
    for i, (spec, sample) in enumerate(pairs):
        specs.append(spec.to_dict())
        pts_path = out / f"shape_{i:04d}.pts"
        obj_path = out / f"shape_{i:04d}.obj"
        write_pointcloud(sample, pts_path)
        write_obj(box_mesh(spec), obj_path)
        files.extend([pts_path, obj_path])
    spec_path = out / "specs.json"
    spec_path.write_text(json.dumps({"shapes": specs, "points_per_shape": points_per_shape}, indent=2) + "\n")
    files.append(spec_path)
    return files


def load_dataset(data_dir) -> list:
    """Surface samples of a generated dataset directory, in shape order."""
    from .meshio import read_pointcloud

    data_dir = Path(data_dir)
    samples = []
    for i, path in enumerate(sorted(data_dir.glob("shape_*.pts"))):
        samples.append(read_pointcloud(path, shape_id=i))
    if not samples:
        raise FileNotFoundError(f"no shape_*.pts files under {data_dir}")
    return samples


def load_eval_shapes(data_dir) -> list:
    from .evaluation import EvalShape
    from .meshio import read_obj, read_pointcloud

    data_dir = Path(data_dir)
    shapes = []
    for i, pts_path in enumerate(sorted(data_dir.glob("shape_*.pts"))):
        mesh = read_obj(pts_path.with_suffix(".obj"))
        shapes.append(EvalShape(i, mesh, read_pointcloud(pts_path, shape_id=i)))
    if not shapes:
        raise FileNotFoundError(f"no shapes under {data_dir}")
    return shapes


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(args) -> int:
    from .geometry import generate_box_dataset

    seed = _resolve_seed(args, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {"count": args.count, "dim": args.dim, "seed": seed, "points": args.points}
    manifest = Manifest(out, "generate", config, seed)
    pairs = generate_box_dataset(args.count, args.dim, seed, n_points=args.points)
    files = _write_dataset(out, pairs, args.points)
    manifest.finish(files)
    return 0


def _load_train_config(args):
    from .train import TrainConfig

    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = TrainConfig()
    if args.mode:
        cfg.mode = args.mode
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.seed = _resolve_seed(args, cfg.seed)
    return cfg


def _cmd_train(args) -> int:
    from .loss import LossBreakdown
    from .train import effective_lr, init_run, load_checkpoint, save_checkpoint, train_epoch

    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        state = load_checkpoint(args.resume)
        config = state.config
        # The architecture is fixed by the checkpoint; only the run length
        # may be extended on resume.
        if args.epochs is not None:
            config.epochs = args.epochs
        csv_mode = "a"
    else:
        config = _load_train_config(args)
        state = init_run(config, dataset)
        csv_mode = "w"
    manifest = Manifest(out, "train", config.to_dict(), config.seed)
    ckpt_path = out / "checkpoint.bin"
    log_path = out / "epochs.csv"
    with open(log_path, csv_mode, newline="") as log:
        if csv_mode == "w":
            log.write(
                "epoch,lr_latent,lr_template,lr_velocity,"
                + ",".join(LossBreakdown.FIELDS)
                + "\n"
            )
        while state.epoch < config.epochs:
            e = state.epoch
            bd = train_epoch(state, dataset)
            row = [
                e,
                effective_lr(config.lr_latent, e, config),
                effective_lr(config.lr_template, e, config),
                effective_lr(config.lr_velocity, e, config),
            ] + bd.as_row()
            log.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in row) + "\n")
            log.flush()
            if args.checkpoint_every and (e + 1) % args.checkpoint_every == 0:
                save_checkpoint(state, ckpt_path)
    save_checkpoint(state, ckpt_path)
    manifest.finish([ckpt_path, log_path])
    return 0


def _load_model(path):
    from .train import load_checkpoint

    return load_checkpoint(path)


def _load_latent(args, model):
    import numpy as np

    if args.latent:
        data = json.loads(Path(args.latent).read_text())
        return np.asarray(data["z"] if isinstance(data, dict) else data, dtype=float)
    if args.index is not None:
        return model.latents[args.index]
    raise SystemExit2("one of --latent or --index is required")


class SystemExit2(Exception):
    """Usage error raised past argparse (maps to exit code 2)."""


def _cmd_encode(args) -> int:
    from .infer import EncodeConfig, encode_shape
    from .meshio import read_obj, read_pointcloud
    from .geometry import sample_surface

    model = _load_model(args.checkpoint)
    path = Path(args.input)
    if path.suffix == ".obj":
        sample = sample_surface(read_obj(path), args.points, seed=_resolve_seed(args, 0))
    else:
        sample = read_pointcloud(path)
    config = EncodeConfig(
        iterations=args.iterations,
        seed=_resolve_seed(args, 0),
        n_mc=args.points,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out.parent, "encode", config.__dict__, config.seed)
    z, history = encode_shape(model, sample, config)
    out.write_text(
        json.dumps(
            {
                "shape_id": sample.shape_id,
                "z": z.tolist(),
                "d_rec": history[-1, 0],
                "loss": history[-1, 1],
            },
            indent=2,
        )
        + "\n"
    )
    manifest.finish([out])
    return 0


def _cmd_reconstruct(args) -> int:
    from .infer import reconstruct
    from .meshio import write_obj

    model = _load_model(args.checkpoint)
    z = _load_latent(args, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out.parent, "reconstruct", {"resolution": args.res}, model.config.seed)
    write_obj(reconstruct(model, z, args.res), out)
    manifest.finish([out])
    return 0


def _cmd_template(args) -> int:
    from .infer import export_template
    from .meshio import write_obj

    model = _load_model(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out.parent, "template", {"resolution": args.res}, model.config.seed)
    write_obj(export_template(model, args.res), out)
    manifest.finish([out])
    return 0


def _cmd_trajectory(args) -> int:
    from .infer import export_trajectory

    model = _load_model(args.checkpoint)
    z = _load_latent(args, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "trajectory", {"resolution": args.res}, model.config.seed)
    info = export_trajectory(model, z, out, args.res)
    manifest.finish(info["files"] + [info["manifest"], info["velocity_magnitudes"]])
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import noise_experiment
    from .infer import EncodeConfig

    model = _load_model(args.checkpoint)
    shapes = load_eval_shapes(args.data)
    seed = _resolve_seed(args, 0)
    config = EncodeConfig(iterations=args.iterations, n_mc=args.points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(
        out, "eval",
        {"noise": args.noise, "iterations": args.iterations, "points": args.points},
        seed,
    )
    stddevs = [0.0] + list(args.noise)
    reports = noise_experiment(model, shapes, stddevs, config, seed=seed, n_eval=args.eval_points)
    files = []
    for sd, report in reports.items():
        tag = "clean" if sd == 0.0 else f"noise_{sd:g}"
        csv_path = out / f"metrics_{tag}.csv"
        json_path = out / f"summary_{tag}.json"
        report.write_csv(csv_path)
        report.write_summary(json_path)
        files.extend([csv_path, json_path])
    manifest.finish(files)
    return 0


def _cmd_verify_c(args) -> int:
    from .evaluation import verify_norm_identity

    out = Path(args.out) if args.out else None
    lhs, rhs, rel_err = verify_norm_identity(
        "sine", args.res, eta=args.eta, use_analytic=not args.fd
    )
    print(f"lhs={lhs:.10g} rhs={rhs:.10g} rel_err={rel_err:.3e}")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(out, "verify-c", {"res": args.res, "eta": args.eta}, 0)
        result = out / "verify_c.json"
        result.write_text(json.dumps({"lhs": lhs, "rhs": rhs, "rel_err": rel_err}) + "\n")
        manifest.finish([result])
    return 0 if rel_err < 1e-3 else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasflow",
        description="Template-shape and diffeomorphic-flow learning on implicit representations.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap internal parallelism (1 = bitwise reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic box dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dim", type=int, choices=(2, 3), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=4000, help="surface samples per shape")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON config mirroring TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("riemannian", "pointwise"))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("encode", help="optimize a latent code for a shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".pts point cloud or .obj mesh")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=800)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_encode)

    for name, fn in (("reconstruct", _cmd_reconstruct), ("trajectory", _cmd_trajectory)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--latent", help="latent JSON from `encode`")
        p.add_argument("--index", type=int, default=None, help="training-shape latent index")
        p.add_argument("--res", type=int, default=None)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("template", help="extract the learned template mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_template)

    p = sub.add_parser("eval", help="reconstruction metrics, optionally under noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, nargs="*", default=[])
    p.add_argument("--iterations", type=int, default=800)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--eval-points", type=int, default=2048)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("verify-c", help="check the velocity-norm integral identity")
    p.add_argument("--res", type=int, default=256)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--fd", action="store_true", help="use stencil derivatives instead of analytic")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_verify_c)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.fn(args)
    except SystemExit2 as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
