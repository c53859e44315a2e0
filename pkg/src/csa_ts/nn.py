"""Layers, loss, optimizer and weight files for the FCN backbone."""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .errors import BatchStatisticsError, ContractError, LabelError, ShapeError
from .tensor import Tensor

WEIGHTS_FORMAT = "csa-ts-weights/1"


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def parameter(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container: subclasses list parameter and buffer attribute names."""

    _params: tuple = ()
    _buffers: tuple = ()
    _children: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for child in self._children:
            yield from getattr(self, child).named_parameters(f"{prefix}{child}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for child in self._children:
            yield from getattr(self, child).named_buffers(f"{prefix}{child}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            _check_entry(state, name, p.shape)
            p.data = np.array(state[name], dtype=p.dtype, copy=True)
        for name, buf in self.named_buffers():
            _check_entry(state, name, buf.shape)
            self._set_buffer(name, np.array(state[name], dtype=buf.dtype, copy=True))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        owner = self
        *path, leaf = dotted.split(".")
        for part in path:
            owner = getattr(owner, part)
        setattr(owner, leaf, value)


def _check_entry(state: dict, name: str, shape: tuple) -> None:
    if name not in state:
        raise KeyError(f"missing entry {name!r} in state")
    if tuple(state[name].shape) != tuple(shape):
        raise ShapeError(f"{name}: stored shape {state[name].shape} != expected {shape}")


class ConvBlock(Module):
    """Same-padded 1-D convolution, batch norm, ReLU."""

    _params = ("kernel", "bias", "bn_gamma", "bn_beta")
    _buffers = ("bn_running_mean", "bn_running_var")

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        self.kernel = parameter(he_uniform(rng, (c_out, c_in, k), fan_in=c_in * k))
        self.bias = parameter(np.zeros(c_out))
        self.bn_gamma = parameter(np.ones(c_out))
        self.bn_beta = parameter(np.zeros(c_out))
        dtype = self.kernel.dtype
        self.bn_running_mean = np.zeros(c_out, dtype=dtype)
        self.bn_running_var = np.ones(c_out, dtype=dtype)
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return conv_block_forward(self, x, training)

    def forward_ntc(self, x: Tensor, training: bool) -> Tensor:
        """Same block on channels-last ``(N, T, C_in)`` input."""
        y = T.conv1d_same_ntc(x, self.kernel, self.bias)
        return T.relu(batch_norm(self, y, training))


def conv_block_forward(block: ConvBlock, x: Tensor, training: bool) -> Tensor:
    """conv1d_same -> batch norm -> ReLU on ``(N, C_in, T)`` input."""
    return block.forward_ntc(x.transpose(0, 2, 1), training).transpose(0, 2, 1)


def batch_norm(block: ConvBlock, y: Tensor, training: bool) -> Tensor:
    """Batch norm over every axis but the last (channels-last layout).

    Training mode normalises with the biased batch variance and folds the
    unbiased one into the running estimate; eval mode uses running stats.
    """
    c = y.shape[-1]
    rows = y.data.reshape(-1, c)
    count = rows.shape[0]
    gamma, beta = block.bn_gamma, block.bn_beta
    if training:
        if count < 2:
            raise BatchStatisticsError(f"batch norm needs N*T >= 2, got {count}")
        mean = rows.mean(axis=0)
        centered = rows - mean
        var = (centered * centered).mean(axis=0)
        m = block.bn_momentum
        block.bn_running_mean = (m * block.bn_running_mean + (1 - m) * mean).astype(y.dtype)
        block.bn_running_var = (m * block.bn_running_var + (1 - m) * var * (count / (count - 1))).astype(y.dtype)
    else:
        mean, var = block.bn_running_mean, block.bn_running_var
        centered = rows - mean
    inv_std = (1.0 / np.sqrt(var + block.bn_eps)).astype(y.dtype)
    xhat = centered * inv_std
    out = (xhat * gamma.data + beta.data).reshape(y.shape)

    def bw(g):
        g = g.reshape(-1, c)
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        g_xhat = g * gamma.data
        if training:
            gx = inv_std / count * (
                count * g_xhat - g_xhat.sum(axis=0) - xhat * (g_xhat * xhat).sum(axis=0)
            )
        else:
            gx = g_xhat * inv_std
        return gx.reshape(y.shape), g_gamma, g_beta

    return Tensor._from_op(out, (y, gamma, beta), bw, "batch_norm")


class Dense(Module):
    """Shared fully connected layer ``x @ W + b``."""

    _params = ("weight", "bias")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> np.ndarray:
    labels = np.asarray(labels)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]} at index {i} outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype or T.get_default_dtype())
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    target = Tensor(one_hot(labels, logits.shape[1], logits.dtype), dtype=logits.dtype)
    logp = T.log_softmax_axis(logits, axis=-1)
    return -(logp * target).sum() / logits.shape[0]


class Adam:
    """Adam with bias correction.  Gradients are left in place."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self._scratch = [np.empty_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} {p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        step_size = self.lr / c1
        inv_sqrt_c2 = 1.0 / np.sqrt(c2)
        for p, m, v, tmp in zip(self.params, self.m, self.v, self._scratch):
            g = p.grad
            m *= self.beta1
            np.multiply(g, 1 - self.beta1, out=tmp)
            m += tmp
            v *= self.beta2
            np.square(g, out=tmp)
            tmp *= 1 - self.beta2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= inv_sqrt_c2
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step_size
            p.data -= tmp


def adam_step(state: Adam, params=None) -> None:
    if params is not None and [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("adam_step: parameter list differs from the optimizer's")
    state.step()


def save_weights(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus JSON metadata to one ``.npz`` file."""
    payload = {f"w/{name}": np.asarray(a) for name, a in arrays.items()}
    payload["__format__"] = np.array(WEIGHTS_FORMAT)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    # fixed entry timestamps keep identical weights byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(payload):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, payload[key], allow_pickle=False)


def load_weights(path) -> tuple:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__format__" not in z.files or str(z["__format__"]) != WEIGHTS_FORMAT:
            raise ValueError(f"{path}: not a {WEIGHTS_FORMAT} file")
        meta = json.loads(str(z["__meta__"]))
        arrays = {k[2:]: z[k] for k in z.files if k.startswith("w/")}
    return arrays, meta
