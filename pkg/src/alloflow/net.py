"""Small MLP velocity field ``v(z, t)`` with manual backprop and Adam.

Parameter layout (flat float64 vector): for each linear layer in order, the
weight matrix ``W`` of shape ``(fan_out, fan_in)`` in row-major order followed
by its bias of shape ``(fan_out,)``. The first layer consumes ``[z, phi(t)]``
where ``phi(t)`` interleaves ``sin(2^k pi t), cos(2^k pi t)`` for
``k = 0 .. time_embed_dim/2 - 1``. Hidden layers apply the activation, the
output layer is linear and has width ``in_dim``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import NonFiniteError

CKPT_MAGIC = b"AFLW"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass
class NetConfig:
    in_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    time_embed_dim: int = 16
    activation: str = "silu"
    init_seed: int = 0

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.in_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a non-negative even integer")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """``(fan_in, fan_out)`` for every linear layer."""
        widths = [self.in_dim + self.time_embed_dim, *self.hidden_dims, self.in_dim]
        return list(zip(widths[:-1], widths[1:]))


def _sigmoid(x):
    # tanh form does not overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


_ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of shape ``(n, dim)`` for ``t`` of shape ``(n,)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class GradBuffer:
    """Gradient accumulator aligned with a net's flat parameter vector."""

    def __init__(self, size: int):
        self.grads = np.zeros(size)
        self.accumulation_count = 0

    def add(self, g: np.ndarray, count: int = 1) -> None:
        self.grads += g
        self.accumulation_count += count

    def zero(self) -> None:
        self.grads[:] = 0.0
        self.accumulation_count = 0

    def __len__(self):
        return len(self.grads)


class VelocityNet:
    def __init__(self, config: NetConfig, params: np.ndarray | None = None):
        self.config = config
        self.shapes = [(o, i) for i, o in config.layer_dims]
        self.param_count = sum(o * i + o for o, i in self.shapes)
        if params is None:
            params = self._init_params()
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} params, got {params.shape}")
        self.params = params.copy()
        self.meta: dict = {}
        self._act, self._act_grad = _ACTIVATIONS[config.activation]

    def _init_params(self) -> np.ndarray:
        # He fan-in scaling for weights, zero biases.
        rng = np.random.default_rng(self.config.init_seed)
        chunks = []
        for o, i in self.shapes:
            chunks.append(rng.standard_normal(o * i) * np.sqrt(2.0 / i))
            chunks.append(np.zeros(o))
        return np.concatenate(chunks)

    def new_grad_buffer(self) -> GradBuffer:
        return GradBuffer(self.param_count)

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``params``; a leading batch axis is preserved."""
        p = self.params if params is None else params
        lead = p.shape[:-1]
        out, k = [], 0
        for o, i in self.shapes:
            W = p[..., k:k + o * i].reshape(*lead, o, i)
            k += o * i
            b = p[..., k:k + o]
            k += o
            out.append((W, b))
        return out

    def _inputs(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        Z = np.atleast_2d(z)
        if Z.shape[-1] != self.config.in_dim:
            raise ValueError(f"input dim {Z.shape[-1]} != in_dim {self.config.in_dim}")
        T = np.broadcast_to(np.asarray(t, dtype=np.float64), (Z.shape[0],))
        X = np.concatenate([Z, time_features(T, self.config.time_embed_dim)], axis=1)
        return X, single

    def _run(self, X, params=None):
        pre, post = [], [X]
        h = X
        layers = self.layers(params)
        for li, (W, b) in enumerate(layers):
            a = h @ np.swapaxes(W, -1, -2) + b[..., None, :]
            pre.append(a)
            h = a if li == len(layers) - 1 else self._act(a)
            post.append(h)
        return pre, post

    def forward(self, z, t) -> np.ndarray:
        """Velocity at ``z`` (shape ``(d,)`` or ``(n, d)``) and time ``t``."""
        X, single = self._inputs(z, t)
        out = self._run(X)[1][-1]
        return out[0] if single else out

    __call__ = forward

    def forward_params(self, params: np.ndarray, z, t) -> np.ndarray:
        """Forward pass for a stack of parameter vectors of shape ``(k, P)``.

        Returns shape ``(k, n, d)``. Used for vectorised finite differences.
        """
        X, _ = self._inputs(z, t)
        return self._run(X, params)[1][-1]

    def backward(self, z, t, upstream, buf: GradBuffer | None = None) -> np.ndarray:
        """Vector-Jacobian product of ``upstream . forward(z, t)``.

        Accumulates the parameter gradient (summed over the batch) into
        ``buf`` and returns the gradient with respect to ``z``.
        """
        X, single = self._inputs(z, t)
        U = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if U.shape != (X.shape[0], self.config.in_dim):
            raise ValueError(f"upstream shape {U.shape} does not match output")
        pre, post = self._run(X)
        layers = self.layers()
        grads = []
        g = U
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            if li < len(layers) - 1:
                g = g * self._act_grad(pre[li])
            grads.append((g.sum(axis=0), g.T @ post[li]))
            g = g @ W
        if buf is not None:
            flat = []
            for gb, gW in reversed(grads):
                flat.append(gW.ravel())
                flat.append(gb)
            buf.add(np.concatenate(flat), count=X.shape[0])
        gz = g[:, : self.config.in_dim]
        return gz[0] if single else gz

    def copy(self) -> VelocityNet:
        other = VelocityNet(self.config, self.params)
        other.meta = dict(self.meta)
        return other


@dataclass
class AdamState:
    """Bias-corrected Adam with optional decoupled (AdamW) weight decay."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0


def adam_step(net: VelocityNet, buf: GradBuffer, state: AdamState) -> np.ndarray:
    """Apply one update in place, zero ``buf`` and return the parameter delta."""
    g = buf.grads
    if len(g) != net.param_count:
        raise ValueError("gradient buffer is not aligned with params")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NonFiniteError(f"non-finite gradient at parameter index {bad}")
    if state.m is None:
        state.m = np.zeros_like(net.params)
        state.v = np.zeros_like(net.params)
    state.step_count += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    delta = -state.lr * (state.m / bc1) / (np.sqrt(state.v / bc2) + state.eps)
    if state.weight_decay:
        delta -= state.lr * state.weight_decay * net.params
    net.params += delta
    buf.zero()
    return delta


# -- checkpoint format -------------------------------------------------------
# "AFLW" | u32 version | u32 in_dim | u32 n_layers | n_layers x (u32 fan_in,
# u32 fan_out) | float64 LE params | optional trailer: u32 len + UTF-8 JSON
# {"net": NetConfig, "meta": {...}}. The trailer carries the activation and
# init seed, which the header lacks, plus run metadata such as t_star.


def save(net: VelocityNet, meta: dict | None = None) -> bytes:
    cfg = net.config
    dims = cfg.layer_dims
    head = struct.pack("<4sIII", CKPT_MAGIC, CKPT_VERSION, cfg.in_dim, len(dims))
    head += b"".join(struct.pack("<II", i, o) for i, o in dims)
    trailer = {"net": asdict(cfg), "meta": net.meta if meta is None else meta}
    blob = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode()
    return head + net.params.astype("<f8").tobytes() + struct.pack("<I", len(blob)) + blob


def load(data: bytes, expect_in_dim: int | None = None) -> VelocityNet:
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    magic, version, in_dim, n_layers = struct.unpack_from("<4sIII", data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    if len(data) < off + 8 * n_layers:
        raise CheckpointError("truncated layer table")
    dims = [struct.unpack_from("<II", data, off + 8 * k) for k in range(n_layers)]
    off += 8 * n_layers
    if n_layers < 1 or dims[-1][1] != in_dim or dims[0][0] < in_dim:
        raise CheckpointError("layer table inconsistent with in_dim")
    count = sum(i * o + o for i, o in dims)
    if len(data) < off + 8 * count:
        raise CheckpointError("truncated parameter payload")
    params = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
    off += 8 * count
    extra = {}
    if len(data) > off:
        if len(data) < off + 4:
            raise CheckpointError("truncated config trailer")
        (n,) = struct.unpack_from("<I", data, off)
        if len(data) < off + 4 + n:
            raise CheckpointError("truncated config trailer")
        try:
            extra = json.loads(data[off + 4: off + 4 + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable config trailer: {e}") from None
    net_extra = extra.get("net", {})
    cfg = NetConfig(
        in_dim=in_dim,
        hidden_dims=[o for _, o in dims[:-1]],
        time_embed_dim=dims[0][0] - in_dim,
        activation=net_extra.get("activation", "silu"),
        init_seed=net_extra.get("init_seed", 0),
    )
    if expect_in_dim is not None and expect_in_dim != in_dim:
        raise CheckpointError(f"checkpoint in_dim {in_dim} != expected {expect_in_dim}")
    net = VelocityNet(cfg, params)
    net.meta = extra.get("meta", {})
    return net
