"""Euler integration of the stagewise velocity field and the deformed implicit.

The velocity is piecewise constant in time: stage net k acts on the interval
[(k-1)/K, k/K), so an Euler solve with exactly K steps applies each net once.
Forward integration transports points from data space toward template space
(the map whose composition with the template gives the implicit value);
reverse integration negates the field and visits the nets in reverse stage
order, transporting template geometry back to a reconstruction.

``flow_forward``/``flow_backward`` additionally propagate the Jacobian of the
transport map and pull cotangents back through the unrolled steps; stage
tapes are either kept from the forward pass or recomputed one stage at a
time during the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    TemplateNet,
    VelocityNetStack,
    template_forward,
    velocity_backward,
    velocity_forward,
)

_DOMAIN_TOL = 1e-12


class FlowDiverged(RuntimeError):
    """Raised when integration produces non-finite or out-of-domain points."""


def _project_step(x_next: np.ndarray, damped: bool):
    """Keep damped flows inside the closed domain.

    The continuous damped field cannot leave the domain, but an explicit
    Euler step can overshoot the boundary by a hair; the overshooting
    coordinate is projected back and treated as saturated (zero gradient)
    in the backward pass. Undamped stacks are left untouched so escapes
    abort loudly.
    """
    if not damped:
        return x_next, None
    clipped = np.clip(x_next, -1.0, 1.0)
    mask = clipped != x_next
    return clipped, (mask if mask.any() else None)


@dataclass
class FlowTrajectory:
    """Time-sampled positions of points transported by the stage field."""

    times: np.ndarray  # (K+1,)
    positions: np.ndarray  # (K+1, n, dim)

    @property
    def K(self) -> int:
        return len(self.times) - 1

    @property
    def endpoint(self) -> np.ndarray:
        return self.positions[-1]


def _check_state(x: np.ndarray, stage: int, enforce_domain: bool) -> None:
    if not np.all(np.isfinite(x)):
        raise FlowDiverged(f"non-finite positions after stage {stage}")
    if enforce_domain:
        m = np.abs(x).max()
        if m > 1.0 + _DOMAIN_TOL:
            raise FlowDiverged(
                f"points escaped the domain after stage {stage} (max |x| = {m:.6g})"
            )


def _mask_rows(bar_p: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the transport-Jacobian cotangent rows of saturated coordinates."""
    out = bar_p.copy()
    out[mask] = 0.0
    return out


@dataclass
class FlowState:
    """Forward integration record used by ``flow_backward``."""

    stack: VelocityNetStack
    z: np.ndarray
    positions: np.ndarray  # (K+1, n, dim)
    jacobians: np.ndarray | None  # (K+1, n, dim, dim) transport Jacobians
    n_stages: int
    tapes: list | None = None  # per-stage velocity tapes, when kept
    clip_masks: dict | None = None  # step index -> saturated-coordinate mask


def flow_forward(
    stack: VelocityNetStack,
    points: np.ndarray,
    z: np.ndarray,
    n_stages: int | None = None,
    need_jac: bool = False,
    enforce_domain: bool = True,
    keep_tapes: bool = False,
) -> FlowState:
    """Integrate points through stages 1..n_stages, optionally with Jacobians.

    ``keep_tapes`` trades memory for speed in a following ``flow_backward``
    (stage tapes are otherwise recomputed there).
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = x.shape
    K = stack.K
    n_stages = K if n_stages is None else n_stages
    positions = np.empty((n_stages + 1, n, d))
    positions[0] = x
    jacs = None
    if need_jac:
        jacs = np.empty((n_stages + 1, n, d, d))
        jacs[0] = np.eye(d)
    tapes = [] if keep_tapes else None
    clip_masks: dict = {}
    for k in range(n_stages):
        v, jac, tape = velocity_forward(stack, k, positions[k], z, need_jac=need_jac)
        if keep_tapes:
            tapes.append(tape)
        x_next, clip = _project_step(positions[k] + v / K, stack.damping_enabled)
        positions[k + 1] = x_next
        if clip is not None:
            clip_masks[k] = clip
        if need_jac:
            step = np.eye(d) + jac / K
            if clip is not None:
                step = step.copy()
                step[clip] = 0.0
            jacs[k + 1] = step @ jacs[k]
        _check_state(positions[k + 1], k + 1, enforce_domain)
    return FlowState(
        stack, np.asarray(z, dtype=np.float64), positions, jacs, n_stages, tapes,
        clip_masks or None,
    )


def flow_backward(
    state: FlowState,
    bar_endpoint: np.ndarray | None = None,
    bar_jac: np.ndarray | None = None,
    bar_stages: dict | None = None,
    need_params: bool = True,
):
    """Pull cotangents at the trajectory back to (stack params, z, start points).

    ``bar_endpoint`` is the cotangent of the final positions, ``bar_jac`` of
    the final transport Jacobian, and ``bar_stages`` maps stage index ->
    cotangent of the positions at that stage (0..n_stages). Stage tapes are
    recomputed, so memory stays at one stage's footprint.

    Returns ``(per_net_grads, bar_z, bar_x0)`` where ``per_net_grads`` is a
    list over all K nets (zeros for nets beyond ``n_stages``) in
    ``VelocityNet.param_arrays`` order, or None if ``need_params`` is false.
    """
    stack, z = state.stack, state.z
    K = stack.K
    n, d = state.positions.shape[1:]
    bar_stages = bar_stages or {}
    need_jac = bar_jac is not None

    bar_x = np.zeros((n, d))
    if bar_endpoint is not None:
        bar_x += bar_endpoint
    if state.n_stages in bar_stages:
        bar_x += bar_stages[state.n_stages]
    bar_P = np.array(bar_jac, dtype=np.float64) if need_jac else None

    grads = None
    if need_params:
        grads = [[np.zeros_like(a) for a in net.param_arrays()] for net in stack.nets]
    bar_z = np.zeros_like(z)

    for k in range(state.n_stages - 1, -1, -1):
        if state.clip_masks is not None and k in state.clip_masks:
            mask = state.clip_masks[k]
            bar_x = np.where(mask, 0.0, bar_x)
            if need_jac:
                bar_P = _mask_rows(bar_P, mask)
        if state.tapes is not None:
            tape = state.tapes[k]
            if need_jac and not tape.has_jac:
                raise ValueError("stored tapes lack Jacobians needed by bar_jac")
        else:
            _, _, tape = velocity_forward(stack, k, state.positions[k], z, need_jac=need_jac)
        bar_v = bar_x / K
        bar_J = None
        if need_jac:
            # P_{k+1} = (I + J/K) P_k
            bar_step = bar_P @ state.jacobians[k].transpose(0, 2, 1)
            bar_P = (np.eye(d) + tape_jac(tape) / K).transpose(0, 2, 1) @ bar_P
            bar_J = bar_step / K
        net_grads, bar_x_net, bar_z_net = velocity_backward(
            stack, tape, bar_v, bar_J, need_params=need_params
        )
        if need_params:
            for acc, g in zip(grads[k], net_grads):
                acc += g
        bar_z += bar_z_net
        bar_x = bar_x + bar_x_net
        if k in bar_stages:
            bar_x = bar_x + bar_stages[k]
    return grads, bar_z, bar_x


def tape_jac(tape) -> np.ndarray:
    """Damped spatial Jacobian (n, i, j) reconstructed from a velocity tape."""
    if tape.damp is not None:
        s, gh, _ = tape.damp
        g = s[:, None, None] * tape.graw + gh[:, :, None] * tape.vraw[:, None, :]
    else:
        g = tape.graw
    return g.transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# Public integration API
# ---------------------------------------------------------------------------

def integrate_forward(
    stack: VelocityNetStack, points: np.ndarray, z: np.ndarray
) -> FlowTrajectory:
    """Forward Euler transport: stage k moves x by v_k(x, z)/K, k = 1..K."""
    state = flow_forward(stack, points, z)
    times = np.arange(stack.K + 1) / stack.K
    return FlowTrajectory(times, state.positions)


def integrate_reverse(
    stack: VelocityNetStack, points: np.ndarray, z: np.ndarray
) -> FlowTrajectory:
    """Euler transport by the negated field in reversed stage order.

    This inverts ``integrate_forward`` exactly only in the continuous limit;
    the discrepancy decays like 1/K.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    K = stack.K
    positions = np.empty((K + 1, *x.shape))
    positions[0] = x
    for step, k in enumerate(range(K - 1, -1, -1)):
        v, _, _ = velocity_forward(stack, k, positions[step], z, need_jac=False)
        x_next, _ = _project_step(positions[step] - v / K, stack.damping_enabled)
        positions[step + 1] = x_next
        _check_state(positions[step + 1], step + 1, enforce_domain=True)
    times = np.arange(K + 1) / K
    return FlowTrajectory(times, positions)


def deformed_implicit(
    tpl: TemplateNet,
    stack: VelocityNetStack,
    x: np.ndarray,
    z: np.ndarray,
    t: float,
):
    """Implicit value of the transported template at grid time t in {0, 1/K, .., 1}.

    The value is the template composed with the transport map truncated at
    stage t*K; the spatial gradient chains the template gradient through the
    product of per-stage Euler Jacobians.
    """
    K = stack.K
    stage_float = t * K
    stage = int(round(stage_float))
    if abs(stage_float - stage) > 1e-9 or not 0 <= stage <= K:
        raise ValueError(f"t={t} is not on the stage grid (multiples of 1/{K})")
    single = np.asarray(x).ndim == 1
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    state = flow_forward(stack, pts, z, n_stages=stage, need_jac=True)
    value, grad_end, _ = template_forward(tpl, state.positions[-1], need_grad=True)
    # grad_x I = P^T (grad f at endpoint)
    grad = np.einsum("nij,ni->nj", state.jacobians[-1], grad_end)
    if single:
        return float(value[0]), grad[0]
    return value, grad
