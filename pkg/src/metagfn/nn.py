"""Dense ReLU policy network with hand-written reverse-mode gradients.

All parameters live in one flat vector (weights row-major, then bias, layer by
layer, then ``log_z`` last); the per-layer arrays are views into it, so
``get_params``/``set_params`` and SGD updates are plain vector operations.

The forward/backward code only uses analytic operations plus a ReLU mask taken
from the real part, so a complex-valued parameter vector can be pushed through
:meth:`PolicyNet.backprop` for complex-step Hessian-vector products.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_HIDDEN = (256, 256, 256)

CHECKPOINT_MAGIC = b"MGFNCKPT"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def param_count(layer_dims: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:])) + 1


class PolicyNet:
    """MLP emitting forward-policy and backward-policy logits, plus a learnable log Z.

    ``layer_dims`` runs from the input width to the output width; the output
    is split evenly into the two heads.
    """

    def __init__(self, layer_dims: Sequence[int], theta: Optional[np.ndarray] = None):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2 or self.layer_dims[-1] % 2:
            raise ValueError("need at least input and output widths; output width must be even")
        n = param_count(self.layer_dims)
        if theta is None:
            theta = np.zeros(n)
        elif theta.shape != (n,):
            raise ValueError(f"parameter vector length {theta.shape} != {n}")
        self.theta = theta
        self._bind_views()
        self._version = 0
        self._cache = None

    @classmethod
    def build(cls, n_inputs: int, n_actions: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
              seed: int = 0, scheme: str = "uniform") -> "PolicyNet":
        return init_params(seed, (n_inputs, *hidden, 2 * n_actions), scheme)

    def _bind_views(self):
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            self.weights.append(self.theta[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.theta[off:off + b])
            off += b

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_actions(self) -> int:
        return self.layer_dims[-1] // 2

    @property
    def log_z(self):
        return self.theta[-1]

    @log_z.setter
    def log_z(self, value):
        self.theta[-1] = value
        self._version += 1

    def get_params(self) -> np.ndarray:
        return self.theta.copy()

    def set_params(self, params: np.ndarray):
        params = np.asarray(params)
        if params.shape != self.theta.shape:
            raise ValueError(f"parameter vector length {params.shape} != {self.theta.shape}")
        if params.dtype != self.theta.dtype:
            self.theta = params.astype(np.result_type(params.dtype, self.theta.dtype), copy=True)
            self._bind_views()
        else:
            self.theta[...] = params
        self._version += 1

    def update(self, grads: np.ndarray, lr: float):
        """In-place SGD step; same arithmetic as :func:`sgd_step`."""
        sgd_step(self.theta, grads, lr, out=self.theta)
        self._version += 1

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.layer_dims, self.theta.copy())

    def forward(self, x: np.ndarray):
        """Return ``(forward_logits, backward_logits)`` and cache the activations."""
        x = np.asarray(x)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.layer_dims[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.layer_dims[0]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                pre.append(z.real > 0)
                h = np.where(pre[-1], z, 0.0)
                acts.append(h)
            else:
                h = z
        self._cache = (self._version, acts, pre)
        a = self.n_actions
        pf, pb = h[:, :a], h[:, a:]
        if squeeze:
            return pf[0], pb[0]
        return pf, pb

    def backprop(self, d_pf: np.ndarray, d_pb: Optional[np.ndarray] = None, d_log_z=0.0) -> np.ndarray:
        """Gradient of a scalar loss w.r.t. every parameter.

        ``d_pf``/``d_pb`` are the loss gradients at the two logit heads for the
        rows of the last :meth:`forward` call; ``d_log_z`` is passed through to
        the log Z slot.
        """
        if self._cache is None:
            raise StaleCacheError("backprop called before forward")
        version, acts, pre = self._cache
        if version != self._version:
            raise StaleCacheError("parameters changed since the cached forward pass")
        d_pf = np.atleast_2d(d_pf)
        if d_pb is None:
            d_pb = np.zeros_like(d_pf)
        delta = np.concatenate([d_pf, np.atleast_2d(d_pb)], axis=1)
        if delta.shape[0] != acts[0].shape[0]:
            raise ValueError("upstream gradient rows do not match the cached forward pass")
        grad = np.zeros(self.theta.shape, dtype=np.result_type(self.theta, delta))
        views = PolicyNet(self.layer_dims, grad)
        for i in range(len(self.weights) - 1, -1, -1):
            views.weights[i][...] = acts[i].T @ delta
            views.biases[i][...] = delta.sum(axis=0)
            if i > 0:
                delta = np.where(pre[i - 1], delta @ self.weights[i].T, 0.0)
        grad[-1] = d_log_z
        return grad


def masked_log_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Log-probabilities over the legal entries; illegal entries get ``-inf``."""
    logits = np.asarray(logits, dtype=float)
    legal = np.asarray(legal, dtype=bool)
    if not legal.any(axis=-1).all():
        raise ValueError("action mask has no legal entry")
    masked = np.where(legal, logits, -np.inf)
    shift = masked.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(masked - shift), axis=-1, keepdims=True)) + shift
    return np.where(legal, masked - lse, -np.inf)


def block_log_softmax(logits):
    """Log-softmax along the last axis; complex-step safe (shift uses the real part)."""
    shift = logits.real.max(axis=-1, keepdims=True)
    e = np.exp(logits - shift)
    s = e.sum(axis=-1, keepdims=True)
    return logits - shift - np.log(s), e / s


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float, out: Optional[np.ndarray] = None) -> np.ndarray:
    if params.shape != grads.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}")
    if out is None:
        return params - lr * grads
    return np.subtract(params, lr * grads, out=out)


def clip_grad_norm(grads: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    """Rescale ``grads`` to at most ``max_norm`` (L2 of the real part); ``None`` disables."""
    if max_norm is None:
        return grads
    norm = float(np.linalg.norm(grads.real))
    if norm <= max_norm:
        return grads
    return grads * (max_norm / norm)


def get_params(net: PolicyNet) -> np.ndarray:
    return net.get_params()


def set_params(net: PolicyNet, params: np.ndarray):
    net.set_params(params)


def init_params(seed: int, layer_dims: Sequence[int], scheme: str = "uniform") -> PolicyNet:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; log Z starts at 0."""
    net = PolicyNet(layer_dims)
    if scheme == "zeros":
        return net
    if scheme != "uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for w, b in zip(net.weights, net.biases):
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return net


# -- checkpoints -----------------------------------------------------------
#
# bytes 0-7   magic "MGFNCKPT"
# bytes 8-11  uint32 LE format version
# bytes 12-15 uint32 LE header length H
# next H      UTF-8 JSON header, sorted keys: layer_dims, n_params, plus caller
#             metadata (fingerprint, seed, tag, ...)
# remainder   n_params float64 LE, in flat parameter order

def save_checkpoint(path, net: PolicyNet, **metadata) -> Path:
    path = Path(path)
    header = dict(metadata)
    header["layer_dims"] = list(net.layer_dims)
    header["n_params"] = net.n_params
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(net.theta, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return ``(net, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    theta = np.frombuffer(data[16 + hlen:], dtype="<f8").astype(float)
    if theta.size != header["n_params"] or theta.size != param_count(header["layer_dims"]):
        raise CheckpointError(f"{path}: parameter block has {theta.size} values, header says {header['n_params']}")
    return PolicyNet(header["layer_dims"], theta), header
