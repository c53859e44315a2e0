"""FCN classifiers with and without class-specific attention."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .csa import CsaBatchOutput, CsaModule
from .errors import ContractError, ShapeError, UnsupportedVariantError
from .nn import ConvBlock, Dense, Module, glorot_uniform, load_weights, parameter, save_weights
from .tensor import Tensor

CHECKPOINT_KIND = "fcn-classifier"


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    CSA = "csa"
    CSA_NOCD = "csa-nocd"

    @property
    def uses_csa(self) -> bool:
        return self is not Variant.BASELINE


@dataclass
class ModelConfig:
    variant: Variant
    n_vars: int
    n_steps: int
    n_classes: int
    filters: tuple = (128, 256, 128)
    kernel_sizes: tuple = (8, 5, 3)
    attn_features: int = 64
    attn_update: str = "latest"
    class_names: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["variant"] = self.variant.value
        d["filters"] = list(self.filters)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["variant"] = Variant(d["variant"])
        d["filters"] = tuple(d["filters"])
        d["kernel_sizes"] = tuple(d["kernel_sizes"])
        return cls(**d)


class FcnBackbone(Module):
    _children = ("block1", "block2", "block3")

    def __init__(self, n_vars: int, rng: np.random.Generator, filters=(128, 256, 128), kernel_sizes=(8, 5, 3)):
        if len(filters) != 3 or len(kernel_sizes) != 3:
            raise ValueError("the FCN backbone has exactly three conv blocks")
        c_in = n_vars
        for i, (c_out, k) in enumerate(zip(filters, kernel_sizes), start=1):
            setattr(self, f"block{i}", ConvBlock(c_in, c_out, k, rng))
            c_in = c_out
        self.n_vars = n_vars
        self.out_features = filters[-1]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return backbone_forward(self, x, training)


def backbone_forward(backbone: FcnBackbone, x: Tensor, training: bool) -> Tensor:
    """Three conv blocks; returns ``L`` as ``(N, T, F)``.

    The blocks run channels-last, so the transpose to ``(N, T, F)`` happens
    on the input instead of the output.
    """
    if x.ndim != 3 or x.shape[1] != backbone.n_vars:
        raise ShapeError(f"expected input (N, {backbone.n_vars}, T), got {x.shape}")
    h = x.transpose(0, 2, 1)
    for name in backbone._children:
        h = getattr(backbone, name).forward_ntc(h, training)
    return h


class ClassSpecificHead(Module):
    """One weight vector and bias per class; logit ``c`` reads only slice ``c``."""

    _params = ("omega", "beta")

    def __init__(self, n_classes: int, n_features: int, rng: np.random.Generator):
        self.omega = parameter(glorot_uniform(rng, (n_classes, n_features, 1), n_features, 1))
        self.beta = parameter(np.zeros(n_classes))

    def __call__(self, g: Tensor) -> Tensor:
        return head_forward(self, g)


def head_forward(head: ClassSpecificHead, g: Tensor) -> Tensor:
    c, f, _ = head.omega.shape
    if g.ndim != 3 or g.shape[1:] != (c, f):
        raise ShapeError(f"head expects pooled features (N, {c}, {f}), got {g.shape}")
    return (g * head.omega.reshape(1, c, f)).sum(axis=-1) + head.beta


class FcnModel(Module):
    """FCN backbone with one of three output stages (see :class:`Variant`)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.variant = Variant(config.variant)
        rng = np.random.default_rng(seed)
        self.backbone = FcnBackbone(config.n_vars, rng, config.filters, config.kernel_sizes)
        f = self.backbone.out_features
        if self.variant.uses_csa:
            self.csa = CsaModule(
                config.n_classes, config.n_steps, f, config.attn_features, rng,
                use_cd=self.variant is Variant.CSA, update_policy=config.attn_update,
            )
            self.head = ClassSpecificHead(config.n_classes, f, rng)
            self._children = ("backbone", "csa", "head")
        else:
            self.csa = None
            self.head = Dense(f, config.n_classes, rng)
            self._children = ("backbone", "head")
        self.last_csa_output: CsaBatchOutput | None = None

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def forward(self, x, labels=None, training: bool = False) -> Tensor:
        return model_forward(self, x, labels, training)

    __call__ = forward

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        return predict(self, x, batch_size)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": CHECKPOINT_KIND, "config": self.config.to_dict(), "dtype": str(self.backbone.block1.kernel.dtype)}
        meta.update(extra_meta or {})
        save_weights(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "FcnModel":
        arrays, meta = load_weights(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path}: not a model checkpoint")
        with T.precision(meta.get("dtype", "float32")):
            model = cls(ModelConfig.from_dict(meta["config"]))
        model.load_state_dict(arrays)
        return model


def _as_input(x, model: FcnModel) -> Tensor:
    dtype = model.backbone.block1.kernel.dtype
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def model_forward(model: FcnModel, x, labels=None, training: bool = False) -> Tensor:
    """Logits ``(N, C)``.  CSA variants need labels in training mode only."""
    x = _as_input(x, model)
    l = model.backbone(x, training)
    if not model.variant.uses_csa:
        return model.head(T.reduce_mean_axis(l, 1))
    if training:
        if labels is None:
            raise ContractError("CSA training forward needs the batch labels")
        out = model.csa.forward_train(l, labels)
        model.last_csa_output = out
        o = out.o_csa
    else:
        o = model.csa.forward_eval(l)
    g = T.reduce_mean_axis(o, 2)
    return model.head(g)


def argmax_first(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the smallest index."""
    return np.argmax(logits, axis=-1)


def predict(model: FcnModel, x, batch_size: int = 64) -> np.ndarray:
    """Label-free predictions in eval mode.  Each instance is independent of the rest."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            logits = model_forward(model, x[start : start + batch_size], training=False)
            out.append(argmax_first(logits.data))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def dense_param_count(n_features: int, n_classes: int) -> int:
    return n_features * n_classes + n_classes


def csa_features(model: FcnModel, x, labels=None) -> tuple:
    """``(L, O_CSA)`` for a batch without touching model state.

    With labels the batch's own class attention is used (as during training);
    without, the stored global attention.  Batch norm uses running statistics.
    """
    from . import csa as csa_ops

    if not model.variant.uses_csa:
        raise UnsupportedVariantError("feature export needs a CSA variant")
    x = _as_input(x, model)
    with T.no_grad():
        l = model.backbone(x, training=False)
        if labels is None:
            return l, model.csa.forward_eval(l)
        k, q, v = csa_ops.project(model.csa, l)
        k_c, _ = csa_ops.class_aggregate(k, labels, model.n_classes)
        q_c, _ = csa_ops.class_aggregate(q, labels, model.n_classes)
        s = csa_ops.similarity(k_c, q_c)
        if model.csa.use_cd:
            s = csa_ops.class_differentiate(s)
        attention = csa_ops.attention_normalize(s)
        return l, csa_ops.apply_attention(l, v, attention, model.csa.sigma)
