"""Fixed-epoch training and evaluation of :class:`FcnModel`."""

from __future__ import annotations

import logging
import time

import numpy as np

from . import tensor as T
from .data import BatchPlan, TsDataset, batch_iter, check_training_split
from .evaluation import RunRecord, accuracy
from .model import FcnModel, ModelConfig, Variant
from .nn import Adam, cross_entropy_loss

log = logging.getLogger(__name__)


def build_model(variant, train: TsDataset, seed: int, attn_features: int = 64,
                attn_update: str = "latest", filters=(128, 256, 128)) -> FcnModel:
    config = ModelConfig(
        variant=Variant(variant),
        n_vars=train.n_vars,
        n_steps=train.n_steps,
        n_classes=train.n_classes,
        filters=tuple(filters),
        attn_features=attn_features,
        attn_update=attn_update,
        class_names=list(train.class_names),
    )
    return FcnModel(config, seed=seed)


def train_model(model: FcnModel, train: TsDataset, epochs: int, batch_size: int = 16,
                lr: float = 1e-3, seed: int = 0) -> list:
    """Train in place for exactly ``epochs`` epochs; returns mean loss per epoch."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    check_training_split(train)
    opt = Adam(model.parameters(), lr=lr)
    plan = BatchPlan(batch_size=batch_size, seed=seed)
    dtype = model.backbone.block1.kernel.dtype
    history = []
    for epoch in range(epochs):
        losses = []
        for xb, yb in batch_iter(train, plan, epoch):
            opt.zero_grad()
            logits = model.forward(T.Tensor(xb, dtype=dtype), yb, training=True)
            loss = cross_entropy_loss(logits, yb)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        if log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d loss %.5f", epoch + 1, history[-1])
    return history


def run_seed(variant, train: TsDataset, test: TsDataset, seed: int, epochs: int,
             batch_size: int = 16, lr: float = 1e-3, attn_features: int = 64,
             attn_update: str = "latest", filters=(128, 256, 128)) -> tuple:
    """Initialise, train and test one model; returns ``(RunRecord, model)``."""
    start = time.perf_counter()
    model = build_model(variant, train, seed, attn_features, attn_update, filters)
    train_model(model, train, epochs, batch_size, lr, seed)
    preds = model.predict(test.x)
    wall_ms = int(round((time.perf_counter() - start) * 1000))
    record = RunRecord(
        dataset=train.name,
        variant=Variant(variant).value,
        seed=seed,
        accuracy=accuracy(preds, test.labels),
        epochs=epochs,
        wall_ms=wall_ms,
        predictions=[int(p) for p in preds],
        labels=[int(y) for y in test.labels],
    )
    log.info("%s %s seed=%d acc=%.4f (%d ms)", record.dataset, record.variant, seed, record.accuracy, wall_ms)
    return record, model
