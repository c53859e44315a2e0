"""Class-specific attention.

Training batches aggregate key/query features per class, turn their
similarities into one ``T x T`` attention map per class (optionally sharpened
by the class-differentiation step), and mix the value features with it.  The
latest per-class maps are kept as a global tensor so that test instances can
be processed without labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, LabelError, ShapeError, UnseenClassError
from .nn import Module, glorot_uniform, parameter
from .tensor import Tensor

UPDATE_POLICIES = ("latest", "ema")


@dataclass
class CsaBatchOutput:
    o_csa: Tensor  # (B, C, T, F)
    s: Tensor  # (C, T, T)
    s_cd: Tensor  # (C, T, T); equals ``s`` when the CD step is disabled
    attention: Tensor  # (C, T, T)
    present: np.ndarray  # bool (C,)


def _expect(t, shape: tuple, what: str) -> None:
    if tuple(t.shape) != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {tuple(t.shape)}")


class CsaModule(Module):
    _params = ("w_k", "w_q", "w_v", "sigma")
    _buffers = ("global_attention", "class_seen")

    def __init__(self, num_classes: int, num_steps: int, num_features: int = 128,
                 attn_features: int = 64, rng: np.random.Generator | None = None,
                 use_cd: bool = True, update_policy: str = "latest", ema_decay: float = 0.9):
        if num_classes < 2:
            raise ConfigurationError(f"class-specific attention needs C >= 2, got {num_classes}")
        if min(num_steps, num_features, attn_features) < 1:
            raise ConfigurationError("T, F and F_a must all be >= 1")
        if update_policy not in UPDATE_POLICIES:
            raise ConfigurationError(f"unknown attention update policy {update_policy!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        f, fa = num_features, attn_features
        self.w_k = parameter(glorot_uniform(rng, (f, fa), f, fa))
        self.w_q = parameter(glorot_uniform(rng, (f, fa), f, fa))
        self.w_v = parameter(glorot_uniform(rng, (f, f), f, f))
        self.sigma = parameter(np.zeros(()))
        dtype = self.w_k.dtype
        self.global_attention = np.full((num_classes, num_steps, num_steps), 1.0 / num_steps, dtype=dtype)
        self.class_seen = np.zeros(num_classes, dtype=bool)
        self.num_classes = num_classes
        self.num_steps = num_steps
        self.num_features = f
        self.attn_features = fa
        self.use_cd = use_cd
        self.update_policy = update_policy
        self.ema_decay = ema_decay

    def forward_train(self, l: Tensor, labels) -> CsaBatchOutput:
        return csa_forward_train(self, l, labels)

    def forward_eval(self, l: Tensor) -> Tensor:
        return csa_forward_eval(self, l)


def project(module: CsaModule, l: Tensor, which: str = "kqv"):
    """``K = L W_K``, ``Q = L W_Q``, ``V = L W_V`` for every (instance, time) row."""
    if l.ndim != 3 or l.shape[-1] != module.num_features:
        raise ShapeError(f"CSA input must be (B, T, {module.num_features}), got {l.shape}")
    weights = {"k": module.w_k, "q": module.w_q, "v": module.w_v}
    out = tuple(l @ weights[w] for w in which)
    return out if len(out) > 1 else out[0]


def class_aggregate(features: Tensor, labels, num_classes: int):
    """Per-class mean over the batch axis.

    Returns ``(per_class, present)``; absent classes get zero rows, which
    also keeps them off every gradient path.
    """
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {b}")
    if b and (labels.min() < 0 or labels.max() >= num_classes):
        i = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise LabelError(f"label {labels[i]} at index {i} outside [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes)
    present = counts > 0
    avg = np.zeros((num_classes, b), dtype=features.dtype)
    avg[labels, np.arange(b)] = 1.0
    avg[present] /= counts[present, None]
    flat = features.reshape(b, -1)
    per_class = (Tensor(avg, dtype=features.dtype) @ flat).reshape((num_classes,) + features.shape[1:])
    return per_class, present


def similarity(k_c: Tensor, q_c: Tensor) -> Tensor:
    """``S[c] = K^C[c] @ Q^C[c]^T``."""
    if k_c.shape != q_c.shape or k_c.ndim != 3:
        raise ShapeError(f"similarity: key {k_c.shape} and query {q_c.shape} must both be (C, T, F_a)")
    return k_c @ q_c.swapaxes(1, 2)


def class_differentiate(s: Tensor) -> Tensor:
    """``S_c + |S_c - mean of the other classes' slices|`` for every class."""
    c = s.shape[0]
    if c < 2:
        raise ConfigurationError(f"class differentiation needs C >= 2, got {c}")
    # S_c - mean_{c' != c} S_c' written as a mean of pairwise differences, so
    # equal slices give exactly zero instead of a rounding residue
    pairwise = T.expand_dims(s, 1) - T.expand_dims(s, 0)  # (C, C, T, T); diagonal is 0
    return s + T.abs_elem(pairwise.sum(axis=1) / (c - 1))


def attention_normalize(s_cd: Tensor) -> Tensor:
    """Softmax over key positions (last axis)."""
    return T.softmax_axis(s_cd, axis=-1)


def apply_attention(l: Tensor, v: Tensor, attention: Tensor, sigma: Tensor) -> Tensor:
    """``O[b, c] = L[b] + sigma * (A[c] @ V[b])`` with explicit class copies."""
    if l.ndim != 3 or l.shape != v.shape:
        raise ShapeError(f"apply_attention: L {l.shape} and V {v.shape} must match as (B, T, F)")
    b, t, f = l.shape
    c = attention.shape[0]
    if attention.shape != (c, t, t):
        raise ShapeError(f"apply_attention: attention {attention.shape} != (C, {t}, {t})")
    l_c = T.repeat(T.expand_dims(l, 1), c, axis=1)
    v_c = T.repeat(T.expand_dims(v, 1), c, axis=1)
    return l_c + sigma * (attention @ v_c)


def csa_forward_train(module: CsaModule, l: Tensor, labels) -> CsaBatchOutput:
    b, t, f = l.shape
    c, fa = module.num_classes, module.attn_features
    if b < 1:
        raise ShapeError("CSA needs a non-empty batch")
    k, q, v = project(module, l)
    _expect(k, (b, t, fa), "K")
    _expect(q, (b, t, fa), "Q")
    _expect(v, (b, t, f), "V")
    k_c, present = class_aggregate(k, labels, c)
    q_c, _ = class_aggregate(q, labels, c)
    _expect(k_c, (c, t, fa), "K^C")
    _expect(q_c, (c, t, fa), "Q^C")
    s = similarity(k_c, q_c)
    _expect(s, (c, t, t), "S")
    s_cd = class_differentiate(s) if module.use_cd else s
    _expect(s_cd, (c, t, t), "S^C")
    attention = attention_normalize(s_cd)
    _expect(attention, (c, t, t), "A^C")
    o = apply_attention(l, v, attention, module.sigma)
    _expect(o, (b, c, t, f), "O_CSA")
    update_global_attention(module, attention.data, present)
    return CsaBatchOutput(o_csa=o, s=s, s_cd=s_cd, attention=attention, present=present)


def update_global_attention(module: CsaModule, batch_attention: np.ndarray, present) -> None:
    """Copy (or blend, for the ``ema`` policy) batch slices of present classes."""
    batch_attention = np.asarray(batch_attention.data if isinstance(batch_attention, Tensor) else batch_attention)
    present = np.asarray(present, dtype=bool)
    _expect(batch_attention, module.global_attention.shape, "batch attention")
    for c in np.flatnonzero(present):
        new = batch_attention[c].astype(module.global_attention.dtype, copy=True)
        if module.update_policy == "ema" and module.class_seen[c]:
            d = module.ema_decay
            new = d * module.global_attention[c] + (1 - d) * new
        module.global_attention[c] = new
    module.class_seen |= present


def csa_forward_eval(module: CsaModule, l: Tensor) -> Tensor:
    """Label-free pass using the stored global attention; mutates nothing."""
    if not module.class_seen.all():
        missing = np.flatnonzero(~module.class_seen).tolist()
        raise UnseenClassError(f"global attention has no trained slice for classes {missing}")
    b, t, f = l.shape
    if t != module.num_steps:
        raise ShapeError(f"CSA was built for T={module.num_steps}, got T={t}")
    v = project(module, l, which="v")
    attention = Tensor(module.global_attention, dtype=l.dtype)
    o = apply_attention(l, v, attention, module.sigma)
    _expect(o, (b, module.num_classes, t, f), "O_CSA")
    return o
