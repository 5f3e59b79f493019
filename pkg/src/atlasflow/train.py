"""Joint autodecoder training of template, velocity stack, and latent codes.

Three Adam optimizers (template parameters, all velocity-net parameters,
latent table) share a step schedule whose learning rates decay by 0.7 after
every 250 completed epochs. Latent codes are projected back onto the unit
ball after every step. All randomness is drawn from per-purpose streams
derived from (seed, purpose, epoch, batch), so runs are reproducible and a
resumed run is bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .loss import BatchItem, LossBreakdown, LossWeights, MonteCarlo, TrainGrads, total_training_loss
from .network import (
    TemplateNet,
    VelocityNetStack,
    assign_from_vector,
    flatten_params,
    init_template,
    init_velocity_stack,
)

CHECKPOINT_MAGIC = b"AFLW"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    def __init__(self, term: str, epoch: int, batch: int):
        super().__init__(f"non-finite loss term {term!r} at epoch {epoch}, batch {batch}")
        self.term = term


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by (seed, tags); strings hash via crc32."""
    key = tuple(
        zlib.crc32(t.encode()) if isinstance(t, str) else int(t) for t in tags
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


@dataclass
class TrainConfig:
    """All hyperparameters of a run; mirrors the JSON config file field-for-field."""

    epochs: int = 300
    batch_size: int = 10
    d_z: int = 32
    K: int = 10
    d_vel: int = 128
    d_mu: int = 64
    n_h: int = 5
    n_hidden_vel: int = 2
    eps: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    n_mc: int = 512
    lr_latent: float = 1e-3
    lr_template: float = 5e-4
    lr_velocity: float = 5e-4
    lr_decay: float = 0.7
    lr_decay_every: int = 250
    seed: int = 0
    mode: str = "riemannian"
    precision: str = "f64"
    dim: int = 2

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.mode not in ("riemannian", "pointwise"):
            raise ValueError(f"invalid mode {self.mode!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"invalid precision {self.precision!r}")
        for name in ("epochs", "batch_size", "d_z", "K", "d_vel", "d_mu", "n_mc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, dataset: str = "rectangles") -> "TrainConfig":
        """Full-scale hyperparameters (GPU-days of compute; not a desk default)."""
        return cls(
            epochs=4000 if dataset == "rectangles" else 3000,
            d_vel=512,
            d_mu=256,
            n_mc=5000,
            weights=LossWeights.preset(dataset),
            dim=3,
        )


def effective_lr(base: float, epoch: int, config: TrainConfig) -> float:
    """Learning rate after the 0.7-per-250-completed-epochs schedule."""
    return base * config.lr_decay ** (epoch // config.lr_decay_every)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def step(self, params_vec: np.ndarray, grad_vec: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad_vec
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad_vec * grad_vec
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params_vec - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    template: TemplateNet
    stack: VelocityNetStack
    latents: np.ndarray
    adam_template: AdamState
    adam_velocity: AdamState
    adam_latent: AdamState
    epoch: int
    config: TrainConfig


def project_latents(latents: np.ndarray) -> None:
    """Radially project rows with norm > 1 back onto the unit sphere, in place."""
    norms = np.linalg.norm(latents, axis=1)
    over = norms > 1.0
    if np.any(over):
        latents[over] /= norms[over, None]


def init_run(config: TrainConfig, dataset: list) -> TrainState:
    """Networks, latent table, and optimizer states, deterministic in the seed."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if config.batch_size > len(dataset):
        raise ValueError("batch_size exceeds dataset size")
    dim = config.dim
    tpl = init_template(
        dim, config.d_mu, config.n_h, rng_stream(config.seed, "init-template")
    )
    stack = init_velocity_stack(
        dim,
        config.d_z,
        config.d_vel,
        config.n_hidden_vel,
        config.K,
        config.eps,
        rng_stream(config.seed, "init-velocity"),
    )
    latents = rng_stream(config.seed, "init-latents").normal(
        0.0, 1.0 / np.sqrt(config.d_z), size=(len(dataset), config.d_z)
    )
    project_latents(latents)
    if config.precision == "f32":
        _cast_state_arrays(tpl, stack, np.float32)
        latents = latents.astype(np.float32)
    return TrainState(
        tpl,
        stack,
        latents,
        AdamState.zeros(sum(a.size for a in tpl.param_arrays())),
        AdamState.zeros(sum(a.size for a in stack.param_arrays())),
        AdamState.zeros(latents.size),
        epoch=0,
        config=config,
    )


def _cast_state_arrays(tpl, stack, dtype) -> None:
    tpl.weights = [w.astype(dtype) for w in tpl.weights]
    tpl.biases = [b.astype(dtype) for b in tpl.biases]
    for net in stack.nets:
        net.wx = net.wx.astype(dtype)
        net.wz = net.wz.astype(dtype)
        net.b0 = net.b0.astype(dtype)
        net.hidden = [(w.astype(dtype), b.astype(dtype)) for w, b in net.hidden]
        net.wo = net.wo.astype(dtype)
        net.bo = net.bo.astype(dtype)


def _first_nonfinite_term(bd: LossBreakdown) -> str | None:
    for name in LossBreakdown.FIELDS:
        if not np.isfinite(getattr(bd, name)):
            return name
    return None


def train_epoch(state: TrainState, dataset: list, config: TrainConfig | None = None) -> LossBreakdown:
    """One pass over shuffled mini-batches; returns the epoch-mean breakdown."""
    config = config or state.config
    e = state.epoch
    perm = rng_stream(config.seed, "shuffle", e).permutation(len(dataset))
    lr_t = effective_lr(config.lr_template, e, config)
    lr_v = effective_lr(config.lr_velocity, e, config)
    lr_z = effective_lr(config.lr_latent, e, config)
    mean = LossBreakdown()
    n_batches = 0
    for b, start in enumerate(range(0, len(dataset), config.batch_size)):
        idxs = perm[start : start + config.batch_size]
        batch = [BatchItem(int(i), dataset[int(i)]) for i in idxs]
        mc = MonteCarlo(rng_stream(config.seed, "mc", e, b), config.n_mc)
        grads = TrainGrads.zeros(state.template, state.stack, len(dataset))
        bd = total_training_loss(
            batch, state.template, state.stack, state.latents,
            config.weights, config.mode, mc, grads=grads,
        )
        bad = _first_nonfinite_term(bd)
        if bad is not None:
            raise NonFiniteLoss(bad, e, b)

        tpl_params = state.template.param_arrays()
        new_vec = state.adam_template.step(
            flatten_params(tpl_params), flatten_params(grads.template), lr_t
        )
        assign_from_vector(tpl_params, new_vec)

        vel_params = state.stack.param_arrays()
        vel_grad = flatten_params([g for net in grads.velocity for g in net])
        new_vec = state.adam_velocity.step(flatten_params(vel_params), vel_grad, lr_v)
        assign_from_vector(vel_params, new_vec)

        new_z = state.adam_latent.step(
            state.latents.ravel(), grads.latent.ravel(), lr_z
        )
        state.latents[...] = new_z.reshape(state.latents.shape)
        project_latents(state.latents)

        for name in LossBreakdown.FIELDS:
            setattr(mean, name, getattr(mean, name) + getattr(bd, name))
        n_batches += 1
    for name in LossBreakdown.FIELDS:
        setattr(mean, name, getattr(mean, name) / n_batches)
    state.epoch += 1
    return mean


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _state_arrays(state: TrainState) -> list:
    named = []
    for i, a in enumerate(state.template.param_arrays()):
        named.append((f"template/{i}", a))
    for k, net in enumerate(state.stack.nets):
        for i, a in enumerate(net.param_arrays()):
            named.append((f"velocity/{k}/{i}", a))
    named.append(("latents", state.latents))
    for group, adam in (
        ("template", state.adam_template),
        ("velocity", state.adam_velocity),
        ("latent", state.adam_latent),
    ):
        named.append((f"adam/{group}/m", adam.m))
        named.append((f"adam/{group}/v", adam.v))
    return named


def save_checkpoint(state: TrainState, path) -> None:
    """Single binary file: versioned header, config, f64 LE parameter arrays."""
    arrays = _state_arrays(state)
    header = {
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam_t": {
            "template": state.adam_template.t,
            "velocity": state.adam_velocity.t,
            "latent": state.adam_latent.t,
        },
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version = int(np.frombuffer(data[4:8], dtype=np.uint32)[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(data[8:16], dtype=np.uint64)[0])
    header = json.loads(data[16 : 16 + hlen].decode())
    config = TrainConfig.from_dict(header["config"])
    offset = 16 + hlen

    # Rebuild containers with the right shapes, then fill.
    n_latents = header["arrays"][
        [a["name"] for a in header["arrays"]].index("latents")
    ]["shape"][0]
    state = init_run(config, [None] * max(n_latents, config.batch_size))
    state.latents = np.zeros((n_latents, config.d_z), dtype=config.dtype)
    state.adam_latent = AdamState.zeros(state.latents.size)
    state.epoch = header["epoch"]
    state.adam_template.t = header["adam_t"]["template"]
    state.adam_velocity.t = header["adam_t"]["velocity"]
    state.adam_latent.t = header["adam_t"]["latent"]

    arrays = _state_arrays(state)
    for (name, arr), meta in zip(arrays, header["arrays"]):
        if name != meta["name"] or list(arr.shape) != meta["shape"]:
            raise ValueError(f"checkpoint layout mismatch at {meta['name']}")
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise ValueError("checkpoint truncated")
        vals = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset)
        arr[...] = vals.reshape(arr.shape).astype(arr.dtype)
        offset += nbytes
    if offset != len(data):
        raise ValueError("checkpoint has trailing bytes")
    return state
