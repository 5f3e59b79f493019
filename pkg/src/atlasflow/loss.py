"""Training objective terms and their exact parameter gradients.

Each public operation returns the scalar Monte Carlo estimate described by
its docstring. The internal ``*_term`` variants additionally accumulate
weight-scaled gradients into a ``TrainGrads`` sink; ``total_training_loss``
assembles the full per-batch objective from them.

Conventions fixed here:
  * the surface fidelity is E[|I| + tau * (1 - F_cos(grad_x I, n))],
  * the velocity norm integrates the Killing term plus eta times the squared
    field over the domain (reported as volume * MC mean, so closed-form
    integrals can be checked exactly) and averages the K stages,
  * the eikonal penalty backpropagates to template parameters only,
  * the pointwise baseline is the 0.25-Huber of stagewise displacements at
    stages that are multiples of floor(K/4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import flow_backward, flow_forward
from .geometry import SurfaceSample
from .network import (
    TemplateNet,
    VelocityNetStack,
    template_backward,
    template_forward,
    velocity_backward,
    velocity_forward,
)

HUBER_DELTA = 0.25
BCE_LOGIT_SCALE = 10.0
_COS_FLOOR = 1e-8


@dataclass
class LossWeights:
    """Scalar weights of the objective; ``preset`` selects per-dataset values."""

    sigma2: float = 0.025
    tau: float = 0.01
    lam: float = 0.005
    beta: float = 1.5
    alpha: float = 100.0
    eta: float = 0.05
    c_pw: float = 0.1
    gamma: float = 1e-4  # latent-norm weight, inference only

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"weight {name} must be non-negative")

    @classmethod
    def preset(cls, dataset: str) -> "LossWeights":
        if dataset == "rectangles":
            return cls(sigma2=0.025, eta=0.05)
        if dataset == "liver":
            return cls(sigma2=0.002, eta=50.0)
        raise ValueError(f"unknown preset {dataset!r}")


@dataclass
class LossBreakdown:
    """Raw (unweighted) objective terms plus their weighted total."""

    on_surface: float = 0.0
    normal_term: float = 0.0
    off_surface: float = 0.0
    eikonal: float = 0.0
    riemannian: float = 0.0
    pointwise: float = 0.0
    total: float = 0.0

    FIELDS = ("on_surface", "normal_term", "off_surface", "eikonal", "riemannian", "pointwise", "total")

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]

    def weighted_total(self, w: LossWeights) -> float:
        return (
            self.on_surface
            + w.tau * self.normal_term
            + w.beta * self.off_surface
            + w.lam * self.eikonal
            + w.sigma2 * self.riemannian
            + w.c_pw * self.pointwise
        )


@dataclass
class TrainGrads:
    """Gradient sink: template params, per-net velocity params, latent table."""

    template: list
    velocity: list
    latent: np.ndarray

    @classmethod
    def zeros(cls, tpl: TemplateNet, stack: VelocityNetStack, n_latents: int) -> "TrainGrads":
        return cls(
            [np.zeros_like(a) for a in tpl.param_arrays()],
            [[np.zeros_like(a) for a in net.param_arrays()] for net in stack.nets],
            np.zeros((n_latents, stack.d_z)),
        )

    def add_template(self, grads, scale=1.0):
        for acc, g in zip(self.template, grads):
            if g is not None:
                acc += scale * g

    def add_velocity(self, k, grads, scale=1.0):
        for acc, g in zip(self.velocity[k], grads):
            acc += scale * g


@dataclass
class MonteCarlo:
    """Point-selection policy for the stochastic loss estimates."""

    rng: np.random.Generator
    n: int = 512

    def select_surface(self, sample: SurfaceSample):
        m = len(sample.points)
        if m == 0:
            raise ValueError("empty surface sample")
        if m <= self.n:
            return sample.points, sample.normals
        idx = self.rng.choice(m, size=self.n, replace=False)
        return sample.points[idx], sample.normals[idx]

    def uniform(self, dim: int) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=(self.n, dim))


# ---------------------------------------------------------------------------
# Cosine similarity (the max-normalized form used by the surface fidelity)
# ---------------------------------------------------------------------------

def f_cos(a: np.ndarray, b: np.ndarray):
    """<a,b> / max(|a|, |b|, 1e-8); not the classical cosine."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    single = a.ndim == 1
    a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    denom = np.maximum(np.maximum(na, nb), _COS_FLOOR)
    val = (a2 * b2).sum(axis=1) / denom
    return float(val[0]) if single else val


def _f_cos_grad_a(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d f_cos / d a, rows; kink at the norm tie resolved toward the b-branch."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.maximum(np.maximum(na, nb), _COS_FLOOR)
    grad = b / denom[:, None]
    a_branch = na > np.maximum(nb, _COS_FLOOR)
    if np.any(a_branch):
        dots = (a * b).sum(axis=1)
        corr = (dots / denom**3)[:, None] * a
        grad = np.where(a_branch[:, None], grad - corr, grad)
    return grad


# ---------------------------------------------------------------------------
# Individual objective terms
# ---------------------------------------------------------------------------

def _surface_fidelity_term(
    tpl, stack, z, points, normals, tau, *, sink: TrainGrads | None = None,
    w_abs: float = 0.0, w_norm: float = 0.0, latent_row: int | None = None,
    keep_state: bool = False,
):
    """E|I(x,z,1)| and E[1 - F_cos(grad_x I, n)] over the given surface points."""
    need_normal = tau > 0 or w_norm != 0.0
    state = flow_forward(stack, points, z, need_jac=need_normal, keep_tapes=sink is not None)
    value, grad_f, tpl_tape = template_forward(tpl, state.positions[-1], need_grad=True)
    n = len(points)
    e_abs = float(np.abs(value).mean())
    e_norm = 0.0
    grad_i = None
    if need_normal:
        grad_i = np.einsum("nij,ni->nj", state.jacobians[-1], grad_f)
        e_norm = float((1.0 - f_cos(grad_i, normals)).mean())
    if sink is not None:
        bar_value = w_abs * np.sign(value) / n
        bar_grad_f = None
        bar_p = None
        if need_normal and w_norm != 0.0:
            bar_gi = (-w_norm / n) * _f_cos_grad_a(grad_i, normals)
            bar_p = grad_f[:, :, None] * bar_gi[:, None, :]
            bar_grad_f = np.einsum("nij,nj->ni", state.jacobians[-1], bar_gi)
        tpl_grads, bar_x = template_backward(
            tpl, tpl_tape, bar_value, bar_grad_f, need_x_grad=True
        )
        sink.add_template(tpl_grads.arrays)
        vel_grads, bar_z, _ = flow_backward(state, bar_endpoint=bar_x, bar_jac=bar_p)
        for k, g in enumerate(vel_grads):
            sink.add_velocity(k, g)
        if latent_row is not None:
            sink.latent[latent_row] += bar_z
    return (e_abs, e_norm, state) if keep_state else (e_abs, e_norm, None)


def on_surface_fidelity(
    tpl: TemplateNet,
    stack: VelocityNetStack,
    z: np.ndarray,
    sample: SurfaceSample,
    mc: MonteCarlo,
    tau: float,
) -> float:
    """Monte Carlo surface data term: E[|I| + tau * (1 - F_cos(grad_x I, n))]."""
    points, normals = mc.select_surface(sample)
    e_abs, e_norm, _ = _surface_fidelity_term(tpl, stack, z, points, normals, tau)
    return e_abs + tau * e_norm


def _off_surface_term(
    tpl, stack, z, points, alpha, *, sink=None, weight=0.0, latent_row=None,
    keep_state: bool = False,
):
    state = flow_forward(stack, points, z, need_jac=False, keep_tapes=sink is not None)
    value, _, tpl_tape = template_forward(tpl, state.positions[-1], need_grad=False)
    pen = np.exp(-alpha * np.abs(value))
    n = len(points)
    if sink is not None:
        bar_value = weight * (-alpha) * np.sign(value) * pen / n
        tpl_grads, bar_x = template_backward(
            tpl, tpl_tape, bar_value, None, need_x_grad=True
        )
        sink.add_template(tpl_grads.arrays)
        vel_grads, bar_z, _ = flow_backward(state, bar_endpoint=bar_x)
        for k, g in enumerate(vel_grads):
            sink.add_velocity(k, g)
        if latent_row is not None:
            sink.latent[latent_row] += bar_z
    return float(pen.mean()), (state if keep_state else None)


def off_surface_penalty(tpl, stack, z, domain_points, alpha: float) -> float:
    """MC mean of exp(-alpha |I(x,z,1)|) over the given domain points."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    value, _ = _off_surface_term(tpl, stack, z, np.atleast_2d(domain_points), alpha)
    return value


def _eikonal_term(tpl, points, *, sink=None, weight=0.0):
    value, grad, tape = template_forward(tpl, points, need_grad=True)
    gn = np.linalg.norm(grad, axis=1)
    loss = float(np.abs(gn - 1.0).mean())
    if sink is not None:
        n = len(points)
        safe = np.where(gn > 1e-12, gn, 1.0)
        bar_grad = (weight / n) * (np.sign(gn - 1.0) / safe)[:, None] * grad
        tpl_grads, _ = template_backward(tpl, tape, None, bar_grad)
        sink.add_template(tpl_grads.arrays)
    return loss


def eikonal_loss(tpl: TemplateNet, uniform_points, warped_surface_points) -> float:
    """Mean | ||grad f|| - 1 | over both point sets; template-only gradients.

    The warped surface points are treated as constants: no gradient flows
    back through the flow that produced them.
    """
    pts = np.concatenate(
        [np.atleast_2d(uniform_points), np.atleast_2d(warped_surface_points)], axis=0
    )
    return _eikonal_term(tpl, pts)


def _riemannian_term(stack, z, points, eta, *, sink=None, weight=0.0, latent_row=None):
    """(1/K) sum_k |domain| * mean(||Jv+Jv^T||_F^2 + eta ||v||^2) at the points."""
    n, d = points.shape
    volume = 2.0**d
    K = stack.K
    total = 0.0
    for k in range(K):
        v, jac, tape = velocity_forward(stack, k, points, z, need_jac=True)
        sym = jac + jac.transpose(0, 2, 1)
        killing = np.einsum("nij,nij->n", sym, sym)
        l2 = np.einsum("ni,ni->n", v, v)
        total += volume * float((killing + eta * l2).mean())
        if sink is not None:
            scale = weight * volume / (n * K)
            bar_jac = scale * 4.0 * sym
            bar_v = scale * 2.0 * eta * v
            grads, _, bar_z = velocity_backward(stack, tape, bar_v, bar_jac)
            sink.add_velocity(k, grads)
            if latent_row is not None:
                sink.latent[latent_row] += bar_z
    return total / K


def riemannian_regularizer(stack, z, domain_points, eta: float) -> float:
    """Stage-averaged velocity norm: Killing energy plus eta * L2, over the domain."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return _riemannian_term(stack, z, np.atleast_2d(domain_points), eta)


def huber(r: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def pointwise_stages(K: int) -> list:
    """Stage indices at which the pointwise baseline is evaluated."""
    if K < 4:
        raise ValueError("pointwise baseline requires K >= 4")
    step = K // 4
    return [step * i for i in range(1, K // step + 1)]


def _pointwise_from_states(states, weights_per_state, *, sink=None, weight=0.0,
                           latent_row=None):
    """Huber displacement loss over pre-integrated trajectories.

    ``weights_per_state`` are the point-count weights used to merge the mean
    over several point populations (surface and uniform samples).
    """
    K = states[0].stack.K
    stages = pointwise_stages(K)
    total = 0.0
    for state, pw in zip(states, weights_per_state):
        x0 = state.positions[0]
        n = len(x0)
        bar_stages = {}
        for s in stages:
            disp = state.positions[s] - x0
            r = np.linalg.norm(disp, axis=1)
            total += pw * float(huber(r).mean())
            if sink is not None:
                factor = np.where(r <= HUBER_DELTA, 1.0, HUBER_DELTA / np.where(r > 0, r, 1.0))
                bar_stages[s] = (weight * pw / n) * factor[:, None] * disp
        if sink is not None:
            vel_grads, bar_z, _ = flow_backward(state, bar_stages=bar_stages)
            for k, g in enumerate(vel_grads):
                sink.add_velocity(k, g)
            if latent_row is not None:
                sink.latent[latent_row] += bar_z
    return total


def pointwise_baseline_loss(stack, z, points, K: int | None = None) -> float:
    """Stagewise Huber displacement of the given points (mean over points,
    summed over the stage set)."""
    K = stack.K if K is None else K
    if K != stack.K:
        raise ValueError("K must match the stack stage count")
    state = flow_forward(stack, np.atleast_2d(points), z, need_jac=False)
    return _pointwise_from_states([state], [1.0])


def binary_cross_entropy(values, labels, scale: float = BCE_LOGIT_SCALE):
    """Numerically stable BCE between labels and sigmoid(scale * values)."""
    logits = scale * np.asarray(values, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    per = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())


def occupancy_bce_fidelity(
    tpl, stack, z, points, labels, scale: float = BCE_LOGIT_SCALE, *,
    sink: TrainGrads | None = None, weight: float = 0.0, latent_row: int | None = None,
) -> float:
    """BCE between occupancy labels and sigmoid(scale * I(x, z, 1))."""
    points = np.atleast_2d(points)
    y = np.asarray(labels, dtype=np.float64)
    state = flow_forward(stack, points, z, need_jac=False, keep_tapes=sink is not None)
    value, _, tpl_tape = template_forward(tpl, state.positions[-1], need_grad=False)
    out = binary_cross_entropy(value, y, scale)
    if sink is not None:
        n = len(points)
        p = 1.0 / (1.0 + np.exp(-scale * value))
        bar_value = weight * scale * (p - y) / n
        tpl_grads, bar_x = template_backward(tpl, tpl_tape, bar_value, None, need_x_grad=True)
        sink.add_template(tpl_grads.arrays)
        vel_grads, bar_z, _ = flow_backward(state, bar_endpoint=bar_x)
        for k, g in enumerate(vel_grads):
            sink.add_velocity(k, g)
        if latent_row is not None:
            sink.latent[latent_row] += bar_z
    return out


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

@dataclass
class BatchItem:
    index: int  # row in the latent table
    sample: SurfaceSample


def total_training_loss(
    batch: list,
    tpl: TemplateNet,
    stack: VelocityNetStack,
    latents: np.ndarray,
    weights: LossWeights,
    mode: str,
    mc: MonteCarlo,
    grads: TrainGrads | None = None,
) -> LossBreakdown:
    """Assemble the batch objective; exactly one deformation regularizer is active.

    Per shape: surface fidelity (with the normal-alignment part), the
    off-surface exponential penalty, and either the stage-averaged velocity
    norm (``mode="riemannian"``) or the stagewise Huber displacement of the
    surface and uniform samples (``mode="pointwise"``). The eikonal penalty
    is evaluated once per batch on fresh uniform points plus the batch's
    warped surface points (detached).
    """
    if mode not in ("riemannian", "pointwise"):
        raise ValueError(f"mode must be 'riemannian' or 'pointwise', got {mode!r}")
    if not batch:
        raise ValueError("empty batch")
    dim = tpl.dim
    B = len(batch)
    out = LossBreakdown()
    warped = []
    for item in batch:
        z = latents[item.index]
        pts, normals = mc.select_surface(item.sample)
        uni = mc.uniform(dim)
        e_abs, e_norm, surf_state = _surface_fidelity_term(
            tpl, stack, z, pts, normals, weights.tau,
            sink=grads, w_abs=1.0 / B, w_norm=weights.tau / B,
            latent_row=item.index, keep_state=True,
        )
        out.on_surface += e_abs / B
        out.normal_term += e_norm / B
        e_off, off_state = _off_surface_term(
            tpl, stack, z, uni, weights.alpha,
            sink=grads, weight=weights.beta / B, latent_row=item.index,
            keep_state=mode == "pointwise",
        )
        out.off_surface += e_off / B
        # Drawn in both modes so the randomness stream is mode-independent.
        quad = mc.uniform(dim)
        if mode == "riemannian":
            out.riemannian += (
                _riemannian_term(
                    stack, z, quad, weights.eta,
                    sink=grads, weight=weights.sigma2 / B, latent_row=item.index,
                )
                / B
            )
        else:
            n1, n2 = len(pts), len(uni)
            w1, w2 = n1 / (n1 + n2), n2 / (n1 + n2)
            out.pointwise += (
                _pointwise_from_states(
                    [surf_state, off_state], [w1, w2],
                    sink=grads, weight=weights.c_pw / B, latent_row=item.index,
                )
                / B
            )
        warped.append(surf_state.positions[-1])
    eik_pts = np.concatenate([mc.uniform(dim)] + warped, axis=0)
    out.eikonal = _eikonal_term(tpl, eik_pts, sink=grads, weight=weights.lam)
    out.total = out.weighted_total(weights)
    return out
