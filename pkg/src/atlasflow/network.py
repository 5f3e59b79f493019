"""The two fixed network architectures and their exact derivatives.

A template network maps domain points to a clamped implicit value; a stack of
K latent-conditioned stationary networks supplies the piecewise-constant-in-
time velocity field. Both are plain ReLU multilayer perceptrons evaluated in
float64 numpy.

Forward passes propagate, next to the activations, the spatial derivative of
every activation with respect to the input point (arrays of shape
``(n, dim, width)``). Backward passes accept cotangents for the outputs *and*
for the spatial-derivative outputs, producing exact parameter gradients
including the mixed second-order terms needed by losses that involve spatial
Jacobians. ReLU derivative at 0 is taken as 0 and the output clamp treats its
boundary as saturated, so all derivatives are exact off those kinks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class TemplateNet:
    """Implicit template network: dim -> d_mu hidden layers -> 1, clamped output.

    ``weights[i]`` has shape (out, in); the layer at ``skip_index`` receives
    the original input concatenated to its hidden input.
    """

    weights: list
    biases: list
    skip_index: int
    clamp: float = 0.5

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class VelocityNet:
    """One stationary velocity network: (x, z) -> dim-vector (before damping).

    The latent code enters as a learned affine feature added to the first
    hidden layer's pre-activation.
    """

    wx: np.ndarray  # (w, dim)
    wz: np.ndarray  # (w, d_z)
    b0: np.ndarray  # (w,)
    hidden: list  # [(W, b), ...] with W (w, w)
    wo: np.ndarray  # (dim, w)
    bo: np.ndarray  # (dim,)

    @property
    def dim(self) -> int:
        return self.wx.shape[1]

    @property
    def d_z(self) -> int:
        return self.wz.shape[1]

    def param_arrays(self) -> list:
        out = [self.wx, self.wz, self.b0]
        for w, b in self.hidden:
            out.extend((w, b))
        out.extend((self.wo, self.bo))
        return out


@dataclass
class VelocityNetStack:
    """K stationary velocity nets plus the boundary damping scale."""

    nets: list
    eps: float = 0.05
    damping_enabled: bool = True

    @property
    def K(self) -> int:
        return len(self.nets)

    @property
    def dim(self) -> int:
        return self.nets[0].dim

    @property
    def d_z(self) -> int:
        return self.nets[0].d_z

    def param_arrays(self) -> list:
        out = []
        for net in self.nets:
            out.extend(net.param_arrays())
        return out


@dataclass
class ParamGradient:
    """Cotangents shaped like the parameter container they mirror."""

    arrays: list

    @classmethod
    def zeros_like(cls, container) -> "ParamGradient":
        return cls([np.zeros_like(a) for a in container.param_arrays()])

    def add_scaled(self, other, scale: float = 1.0) -> None:
        arrays = other.arrays if isinstance(other, ParamGradient) else other
        for mine, theirs in zip(self.arrays, arrays):
            mine += scale * theirs

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])


def flatten_params(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def assign_from_vector(arrays, vec: np.ndarray) -> None:
    offset = 0
    for a in arrays:
        a.flat[:] = vec[offset : offset + a.size]
        offset += a.size


# ---------------------------------------------------------------------------
# Boundary damping
# ---------------------------------------------------------------------------

def _smoothstep(t: np.ndarray):
    inside = (t > 0) & (t < 1)
    tc = np.clip(t, 0.0, 1.0)
    s = tc * tc * (3.0 - 2.0 * tc)
    sp = np.where(inside, 6.0 * t - 6.0 * t * t, 0.0)
    spp = np.where(inside, 6.0 - 12.0 * t, 0.0)
    return s, sp, spp


def damping_factors(x: np.ndarray, eps: float, need_hess: bool = False):
    """Value, gradient and (optionally) Hessian of the boundary damping field.

    The field is the smoothstep of the minimum per-axis distance to the
    domain boundary, scaled by ``eps``: 1 on the interior plateau, 0 on and
    outside the boundary, C^1 everywhere.
    """
    n, d = x.shape
    t_all = (1.0 - np.abs(x)) / eps
    i_star = np.argmin(t_all, axis=1)
    rows = np.arange(n)
    t = t_all[rows, i_star]
    s, sp, spp = _smoothstep(t)
    sgn = np.sign(x[rows, i_star])
    grad = np.zeros_like(x)
    grad[rows, i_star] = -sgn * sp / eps
    if not need_hess:
        return s, grad, None
    hess = np.zeros((n, d, d))
    hess[rows, i_star, i_star] = spp / (eps * eps)
    return s, grad, hess


def h_eps(x: np.ndarray, eps: float) -> float | np.ndarray:
    """Boundary damping value at one point or a batch of points."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s, _, _ = damping_factors(pts, eps)
    return float(s[0]) if np.asarray(x).ndim == 1 else s


# ---------------------------------------------------------------------------
# Augmented linear / ReLU steps (activation + spatial derivative)
# ---------------------------------------------------------------------------

def _lin_fwd(W, b, a, G):
    u = a @ W.T + b
    Gu = G @ W.T if G is not None else None
    return u, Gu


def _lin_bwd(W, a, G, bar_u, bar_Gu, need_params=True, need_inputs=True):
    w_bar = b_bar = bar_a = bar_G = None
    if need_params:
        w_bar = bar_u.T @ a
        if bar_Gu is not None:
            w_bar = w_bar + np.tensordot(bar_Gu, G, axes=([0, 1], [0, 1]))
        b_bar = bar_u.sum(axis=0)
    if need_inputs:
        bar_a = bar_u @ W
        bar_G = bar_Gu @ W if bar_Gu is not None else None
    return w_bar, b_bar, bar_a, bar_G


def _relu_fwd(u, Gu):
    r = u > 0
    h = np.where(r, u, 0.0)
    Gh = Gu * r[:, None, :] if Gu is not None else None
    return h, Gh, r


def _identity_basis(n, d, dtype=np.float64):
    return np.broadcast_to(np.eye(d, dtype=dtype), (n, d, d))


# ---------------------------------------------------------------------------
# Template network forward / backward
# ---------------------------------------------------------------------------

@dataclass
class TemplateTape:
    x: np.ndarray
    layer_inputs: list  # (a, G) per linear layer
    relu_masks: list  # per non-final layer
    clamp_mask: np.ndarray
    has_grad: bool


def template_forward(net: TemplateNet, x: np.ndarray, need_grad: bool = True):
    """Clamped implicit value, its spatial gradient, and the evaluation tape."""
    x = np.atleast_2d(np.asarray(x, dtype=net.weights[0].dtype))
    n, d = x.shape
    eye = _identity_basis(n, d, x.dtype)
    a, G = x, (eye if need_grad else None)
    inputs, masks = [], []
    last = net.n_layers - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        if i == net.skip_index and i not in (0, last):
            a = np.concatenate([a, x], axis=1)
            if need_grad:
                G = np.concatenate([G, eye], axis=2)
        inputs.append((a, G))
        u, Gu = _lin_fwd(W, b, a, G)
        if i < last:
            a, G, r = _relu_fwd(u, Gu)
            masks.append(r)
    s = u[:, 0]
    clamp_mask = np.abs(s) < net.clamp
    value = np.clip(s, -net.clamp, net.clamp)
    grad = Gu[:, :, 0] * clamp_mask[:, None] if need_grad else None
    tape = TemplateTape(x, inputs, masks, clamp_mask, need_grad)
    return value, grad, tape


def template_backward(
    net: TemplateNet,
    tape: TemplateTape,
    bar_value: np.ndarray | None,
    bar_grad: np.ndarray | None = None,
    need_x_grad: bool = False,
    need_params: bool = True,
):
    """Parameter gradients (and optionally input-point gradients) of the template.

    ``bar_value`` is the cotangent of the clamped output, ``bar_grad`` the
    cotangent of its spatial gradient. Under the saturated-clamp and fixed-
    mask conventions the input-point gradient receives no contribution from
    ``bar_grad`` (the network is locally affine in x).
    """
    if bar_grad is not None and not tape.has_grad:
        raise ValueError("tape was recorded without spatial gradients")
    n = len(tape.x)
    mc = tape.clamp_mask
    bar_u = (bar_value * mc)[:, None] if bar_value is not None else np.zeros((n, 1))
    bar_Gu = None
    if bar_grad is not None:
        bar_Gu = (bar_grad * mc[:, None])[:, :, None]

    grads: list = [None] * (2 * net.n_layers) if need_params else None
    bar_x = np.zeros_like(tape.x)
    last = net.n_layers - 1
    for i in range(last, -1, -1):
        a, G = tape.layer_inputs[i]
        w_bar, b_bar, bar_a, bar_G = _lin_bwd(
            net.weights[i], a, G, bar_u, bar_Gu, need_params=need_params
        )
        if need_params:
            grads[2 * i] = w_bar
            grads[2 * i + 1] = b_bar
        if i == net.skip_index and i not in (0, last):
            w_prev = bar_a.shape[1] - tape.x.shape[1]
            bar_x += bar_a[:, w_prev:]
            bar_a = bar_a[:, :w_prev]
            if bar_G is not None:
                bar_G = bar_G[:, :, :w_prev]
        if i == 0:
            bar_x += bar_a
            break
        r = tape.relu_masks[i - 1]
        bar_u = bar_a * r
        bar_Gu = bar_G * r[:, None, :] if bar_G is not None else None
    param_grad = ParamGradient(grads) if need_params else None
    return (param_grad, bar_x) if need_x_grad else (param_grad, None)


def template_eval(net: TemplateNet, x: np.ndarray):
    """Clamped value and exact spatial gradient at one point or a batch."""
    single = np.asarray(x).ndim == 1
    value, grad, _ = template_forward(net, x, need_grad=True)
    if single:
        return float(value[0]), grad[0]
    return value, grad


# ---------------------------------------------------------------------------
# Velocity network forward / backward
# ---------------------------------------------------------------------------

@dataclass
class VelocityTape:
    x: np.ndarray
    z: np.ndarray  # (n, d_z)
    layer_inputs: list
    relu_masks: list
    vraw: np.ndarray
    graw: np.ndarray | None  # (n, dim_spatial, dim_out)
    damp: tuple | None  # (value, grad, hess)
    has_jac: bool
    k: int


def _tile_latent(z, n):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return np.broadcast_to(z, (n, z.size))
    return z


def velocity_forward(
    stack: VelocityNetStack, k: int, x: np.ndarray, z: np.ndarray, need_jac: bool = True
):
    """Damped velocity and spatial Jacobian of stage net ``k`` (0-based).

    Returns ``(v, jac, tape)`` with ``jac[p, i, j] = d v_i / d x_j`` or
    ``jac=None`` when ``need_jac`` is false.
    """
    net = stack.nets[k]
    dtype = net.wx.dtype
    x = np.atleast_2d(np.asarray(x, dtype=dtype))
    n, d = x.shape
    zb = _tile_latent(z, n).astype(dtype, copy=False)
    a = np.concatenate([x, zb], axis=1)
    G = None
    if need_jac:
        G = np.concatenate(
            [_identity_basis(n, d, dtype), np.zeros((n, d, zb.shape[1]), dtype=dtype)],
            axis=2,
        )
    w0 = np.concatenate([net.wx, net.wz], axis=1)
    inputs, masks = [(a, G)], []
    u, Gu = _lin_fwd(w0, net.b0, a, G)
    a, G, r = _relu_fwd(u, Gu)
    masks.append(r)
    for W, b in net.hidden:
        inputs.append((a, G))
        u, Gu = _lin_fwd(W, b, a, G)
        a, G, r = _relu_fwd(u, Gu)
        masks.append(r)
    inputs.append((a, G))
    vraw, graw = _lin_fwd(net.wo, net.bo, a, G)

    damp = None
    if stack.damping_enabled:
        s, gh, hh = damping_factors(x, stack.eps, need_hess=need_jac)
        damp = (s, gh, hh)
        v = s[:, None] * vraw
        if need_jac:
            gdamped = s[:, None, None] * graw + gh[:, :, None] * vraw[:, None, :]
    else:
        v = vraw
        gdamped = graw
    jac = gdamped.transpose(0, 2, 1) if need_jac else None
    tape = VelocityTape(x, zb, inputs, masks, vraw, graw, damp, need_jac, k)
    return v, jac, tape


def velocity_backward(
    stack: VelocityNetStack,
    tape: VelocityTape,
    bar_v: np.ndarray | None,
    bar_jac: np.ndarray | None = None,
    need_params: bool = True,
):
    """Cotangent pull-back through one velocity net evaluation.

    Returns ``(param_grads, bar_x, bar_z)`` where ``param_grads`` is a list
    matching ``VelocityNet.param_arrays`` order (or None), ``bar_x`` has one
    row per input point and ``bar_z`` is summed over the batch.
    """
    net = stack.nets[tape.k]
    n, d = tape.x.shape
    if bar_jac is not None and not tape.has_jac:
        raise ValueError("tape was recorded without the spatial Jacobian")
    bar_G = bar_jac.transpose(0, 2, 1) if bar_jac is not None else None
    if bar_v is None:
        bar_v = np.zeros((n, d))

    bar_x = np.zeros((n, d))
    if tape.damp is not None:
        s, gh, hh = tape.damp
        bar_s = (bar_v * tape.vraw).sum(axis=1)
        bar_vraw = s[:, None] * bar_v
        if bar_G is not None:
            bar_s += (bar_G * tape.graw).sum(axis=(1, 2))
            bar_vraw = bar_vraw + (bar_G * gh[:, :, None]).sum(axis=1)
            bar_graw = s[:, None, None] * bar_G
            bar_gh = (bar_G * tape.vraw[:, None, :]).sum(axis=2)
            bar_x += np.einsum("na,nal->nl", bar_gh, hh)
        else:
            bar_graw = None
        bar_x += bar_s[:, None] * gh
    else:
        bar_vraw = bar_v
        bar_graw = bar_G

    grads: list = []
    a, G = tape.layer_inputs[-1]
    w_bar, b_bar, bar_a, bar_Gu = _lin_bwd(net.wo, a, G, bar_vraw, bar_graw)
    if need_params:
        grads = [w_bar, b_bar]
    for j in range(len(net.hidden) - 1, -1, -1):
        r = tape.relu_masks[j + 1]
        bar_u = bar_a * r
        bar_Gu = bar_Gu * r[:, None, :] if bar_Gu is not None else None
        W, _ = net.hidden[j]
        a, G = tape.layer_inputs[j + 1]
        w_bar, b_bar, bar_a, bar_Gu = _lin_bwd(W, a, G, bar_u, bar_Gu)
        if need_params:
            grads = [w_bar, b_bar] + grads
    r = tape.relu_masks[0]
    bar_u = bar_a * r
    bar_Gu = bar_Gu * r[:, None, :] if bar_Gu is not None else None
    a, G = tape.layer_inputs[0]
    w0 = np.concatenate([net.wx, net.wz], axis=1)
    w_bar, b_bar, bar_a, _ = _lin_bwd(w0, a, G, bar_u, bar_Gu)
    if need_params:
        grads = [w_bar[:, :d], w_bar[:, d:], b_bar] + grads
    bar_x += bar_a[:, :d]
    bar_z = bar_a[:, d:].sum(axis=0)
    return (grads if need_params else None), bar_x, bar_z


def velocity_eval(stack: VelocityNetStack, k: int, x: np.ndarray, z: np.ndarray):
    """Damped velocity and spatial Jacobian of the k-th stationary net (1-based)."""
    if not 1 <= k <= stack.K:
        raise IndexError(f"stage index {k} out of range 1..{stack.K}")
    single = np.asarray(x).ndim == 1
    v, jac, _ = velocity_forward(stack, k - 1, x, z, need_jac=True)
    if single:
        return v[0], jac[0]
    return v, jac


def backprop(net, tape, bar_out, bar_spatial=None) -> ParamGradient:
    """Reverse-mode parameter gradients from output and spatial-derivative cotangents.

    ``net`` is the container the tape was recorded against: a TemplateNet (tape
    from ``template_forward``) or a VelocityNetStack (tape from
    ``velocity_forward``; gradients land in the slots of the stage net the
    tape records, zeros elsewhere).
    """
    if isinstance(net, TemplateNet):
        if not isinstance(tape, TemplateTape):
            raise TypeError("tape does not belong to a template network")
        grad, _ = template_backward(net, tape, bar_out, bar_spatial)
        return grad
    if isinstance(net, VelocityNetStack):
        if not isinstance(tape, VelocityTape):
            raise TypeError("tape does not belong to a velocity net stack")
        grads, _, _ = velocity_backward(net, tape, bar_out, bar_spatial)
        out = ParamGradient.zeros_like(net)
        per_net = len(net.nets[tape.k].param_arrays())
        for i, g in enumerate(grads):
            out.arrays[tape.k * per_net + i][...] = g
        return out
    raise TypeError(f"unsupported container {type(net).__name__}")


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _uniform_fan_in(rng, shape):
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def _unit_directions(m: int, dim: int) -> np.ndarray:
    if dim == 2:
        angles = 2.0 * np.pi * np.arange(m) / m
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # Fibonacci sphere: quasi-uniform directions on S^2.
    idx = np.arange(m) + 0.5
    phi = np.arccos(1.0 - 2.0 * idx / m)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * idx
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
    )


def init_template(
    dim: int,
    d_mu: int,
    n_h: int,
    rng: np.random.Generator,
    clamp: float = 0.5,
    radius: float = 0.5,
    geometric: bool = True,
    hidden_noise: float = 0.02,
) -> TemplateNet:
    """Template net with N_h+2 linear layers and a middle skip connection.

    The geometric initialization makes the output approximate the inside-
    positive signed distance of a sphere with the given radius: the first
    layer projects onto evenly spread unit directions, middle layers start
    near the identity, and the final layer averages the rectified projections
    into ``radius - |x|``. Pure uniform fan-in init is available for tests.
    """
    n_layers = n_h + 2
    skip = n_layers // 2
    weights, biases = [], []
    for i in range(n_layers):
        fan_in = dim if i == 0 else d_mu
        if i == skip and i not in (0, n_layers - 1):
            fan_in += dim
        fan_out = 1 if i == n_layers - 1 else d_mu
        w = _uniform_fan_in(rng, (fan_out, fan_in))
        b = np.zeros(fan_out)
        if geometric:
            if i == 0:
                w = _unit_directions(d_mu, dim)
            elif i < n_layers - 1:
                base = np.zeros((fan_out, fan_in))
                base[:, :d_mu] = np.eye(d_mu)
                w = base + hidden_noise * w
            else:
                # Mean rectified projection ~ |x| / c_dim.
                c = np.pi if dim == 2 else 4.0
                w = np.full((1, d_mu), -c / d_mu)
                b = np.array([radius])
        else:
            b = rng.uniform(-1, 1, size=fan_out) / np.sqrt(fan_in)
        weights.append(np.ascontiguousarray(w, dtype=np.float64))
        biases.append(np.ascontiguousarray(b, dtype=np.float64))
    return TemplateNet(weights, biases, skip, clamp)


def init_velocity_stack(
    dim: int,
    d_z: int,
    d_vel: int,
    n_hidden: int,
    K: int,
    eps: float,
    rng: np.random.Generator,
) -> VelocityNetStack:
    """K stationary nets, all layers uniform fan-in initialized."""
    nets = []
    for _ in range(K):
        wx = _uniform_fan_in(rng, (d_vel, dim))
        wz = _uniform_fan_in(rng, (d_vel, d_z))
        b0 = rng.uniform(-1, 1, size=d_vel) / np.sqrt(dim + d_z)
        hidden = []
        for _ in range(n_hidden):
            hidden.append(
                (
                    _uniform_fan_in(rng, (d_vel, d_vel)),
                    rng.uniform(-1, 1, size=d_vel) / np.sqrt(d_vel),
                )
            )
        wo = _uniform_fan_in(rng, (dim, d_vel))
        bo = rng.uniform(-1, 1, size=dim) / np.sqrt(d_vel)
        nets.append(VelocityNet(wx, wz, b0, hidden, wo, bo))
    return VelocityNetStack(nets, eps=eps)


def make_linear_field_stack(
    A: np.ndarray, b: np.ndarray, K: int = 1, d_z: int = 4, eps: float = 0.05
) -> VelocityNetStack:
    """Stack whose every stage realizes v(x) = A x + b exactly (damping off).

    Uses the identity relu(u) - relu(-u) = u, so the field is reproduced
    exactly for all x; useful as a closed-form test oracle.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = A.shape[0]
    nets = []
    for _ in range(K):
        wx = np.concatenate([A, -A], axis=0)  # (2d, d)
        wz = np.zeros((2 * d, d_z))
        b0 = np.zeros(2 * d)
        wo = np.concatenate([np.eye(d), -np.eye(d)], axis=1)
        nets.append(VelocityNet(wx, wz, b0, [], wo, b.copy()))
    return VelocityNetStack(nets, eps=eps, damping_enabled=False)
