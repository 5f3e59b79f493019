"""Encoding unseen shapes and exporting reconstructions and trajectories.

Encoding optimizes a latent code against a frozen model with Adam, following
the autodecoder strategy: the objective is the mean absolute implicit value
at the shape's surface points plus a small squared-norm pull on the code.
Reconstructions transport the template mesh through the reversed flow, which
preserves vertex correspondence with the template across all stages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import flow_backward, flow_forward, integrate_reverse
from .geometry import ScalarGrid, ShapeMesh, SurfaceSample
from .marching import marching_extract
from .meshio import write_obj
from .network import template_forward, template_backward, velocity_forward
from .train import AdamState, TrainState, rng_stream


class EmptyLevelSet(RuntimeError):
    """The template implicit function never crosses zero on the sampling grid."""


@dataclass
class EncodeConfig:
    iterations: int = 800
    lr: float = 5e-2
    lr_drop_at: int = 400
    lr_drop_factor: float = 0.1
    gamma: float = 1e-4
    init_std: float = 0.1
    seed: int = 0
    n_mc: int = 512

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def encode_shape(model: TrainState, sample: SurfaceSample, config: EncodeConfig):
    """Optimize a latent code for one shape against the frozen model.

    Returns ``(z, history)`` where ``history[it] = (d_rec, total)`` per
    iteration. All provided surface points are used when there are fewer
    than the per-iteration budget; otherwise a fresh random subset is drawn
    each iteration.
    """
    tpl, stack = model.template, model.stack
    rng = rng_stream(config.seed, "encode")
    z = rng.normal(0.0, config.init_std, size=stack.d_z)
    adam = AdamState.zeros(stack.d_z)
    points = sample.points
    history = np.zeros((config.iterations, 2))
    for it in range(config.iterations):
        lr = config.lr * (config.lr_drop_factor if it >= config.lr_drop_at else 1.0)
        if len(points) > config.n_mc:
            pts = points[rng.choice(len(points), size=config.n_mc, replace=False)]
        else:
            pts = points
        state = flow_forward(stack, pts, z, keep_tapes=True)
        value, _, tape = template_forward(tpl, state.positions[-1], need_grad=False)
        d_rec = float(np.abs(value).mean())
        total = d_rec + config.gamma * float(z @ z)
        if not np.isfinite(total):
            raise RuntimeError(f"non-finite encoding loss at iteration {it}")
        history[it] = (d_rec, total)
        bar_value = np.sign(value) / len(pts)
        _, bar_x = template_backward(
            tpl, tape, bar_value, None, need_x_grad=True, need_params=False
        )
        _, bar_z, _ = flow_backward(state, bar_endpoint=bar_x, need_params=False)
        bar_z = bar_z + 2.0 * config.gamma * z
        z = adam.step(z, bar_z, lr)
    return z, history


def _template_grid(model: TrainState, resolution: int) -> ScalarGrid:
    dim = model.template.dim
    grid = ScalarGrid((resolution,) * dim, np.zeros(resolution**dim))
    pts = grid.points()
    vals = np.empty(len(pts))
    for start in range(0, len(pts), 65536):
        chunk = pts[start : start + 65536]
        v, _, _ = template_forward(model.template, chunk, need_grad=False)
        vals[start : start + len(chunk)] = v
    grid.values = vals
    return grid


def default_resolution(dim: int) -> int:
    return 128 if dim == 2 else 64


def export_template(model: TrainState, resolution: int | None = None) -> ShapeMesh:
    """Zero-level extraction of the template implicit on a uniform grid."""
    resolution = resolution or default_resolution(model.template.dim)
    grid = _template_grid(model, resolution)
    mesh = marching_extract(grid, 0.0)
    if mesh.is_empty:
        raise EmptyLevelSet(
            "template level set is empty at resolution "
            f"{resolution} (value range [{grid.values.min():.3g}, {grid.values.max():.3g}])"
        )
    return mesh


def reconstruct(model: TrainState, z: np.ndarray, resolution: int | None = None) -> ShapeMesh:
    """Template mesh transported by the reversed flow; vertices stay in
    correspondence with the template mesh."""
    tmesh = export_template(model, resolution)
    traj = integrate_reverse(model.stack, tmesh.vertices, z)
    return ShapeMesh(traj.endpoint, tmesh.faces.copy())


def reverse_stage_velocities(model: TrainState, z: np.ndarray, positions: np.ndarray):
    """Per-stage velocity magnitudes at the reverse-trajectory vertex positions.

    Stage s of the reverse transport (template -> reconstruction) applies
    stage net K-1-s; returns an array (K, n) of magnitudes at the positions
    each step departs from.
    """
    K = model.stack.K
    out = np.zeros((K, positions.shape[1]))
    for s in range(K):
        v, _, _ = velocity_forward(model.stack, K - 1 - s, positions[s], z, need_jac=False)
        out[s] = np.linalg.norm(v, axis=1)
    return out


def export_trajectory(
    model: TrainState,
    z: np.ndarray,
    out_dir,
    resolution: int | None = None,
    stages=None,
) -> dict:
    """Write per-stage OBJ meshes, a stage manifest CSV, and velocity magnitudes.

    Stage 0 is the template mesh; stage K equals the reconstruction. ``stages``
    selects a subset of stage indices to export (default: all K+1).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmesh = export_template(model, resolution)
    traj = integrate_reverse(model.stack, tmesh.vertices, z)
    K = model.stack.K
    stages = list(range(K + 1)) if stages is None else sorted(set(int(s) for s in stages))
    if any(s < 0 or s > K for s in stages):
        raise ValueError(f"stage indices must lie in 0..{K}")
    files = {}
    for s in stages:
        path = out_dir / f"stage_{s:03d}.obj"
        write_obj(ShapeMesh(traj.positions[s], tmesh.faces), path)
        files[s] = path.name
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "time", "file"])
        for s in stages:
            writer.writerow([s, s / K, files[s]])
    mags = reverse_stage_velocities(model, z, traj.positions)
    with open(out_dir / "velocity_magnitudes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "vertex", "magnitude"])
        for s in range(K):
            for j in range(mags.shape[1]):
                writer.writerow([s, j, f"{mags[s, j]:.17g}"])
    return {
        "stages": len(stages),
        "manifest": str(out_dir / "manifest.csv"),
        "velocity_magnitudes": str(out_dir / "velocity_magnitudes.csv"),
        "files": [files[s] for s in stages],
    }
