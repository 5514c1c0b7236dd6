"""Whole-model gradient verification against central finite differences."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import TRAIN
from .model import DuploModel, ModelConfig, TINY_PROFILE, VARIANT_FULL
from .rng import SeededRng


def build_tiny_model(num_classes: int = 2, num_timestamps: int = 3,
                     num_bands: int = 5, seed: int = 1) -> DuploModel:
    """Minimal float64 model sized for exhaustive finite-difference checks."""
    cfg = ModelConfig(num_classes=num_classes, num_timestamps=num_timestamps,
                      num_bands=num_bands, variant=VARIANT_FULL,
                      profile=TINY_PROFILE, dropout_rate=0.0)
    return DuploModel(cfg, SeededRng(seed), dtype=np.float64)


def full_model_gradcheck(model: DuploModel | None = None, batch_size: int = 4,
                         alpha1: float = 0.3, alpha2: float = 0.3,
                         h=(1e-4, 1e-6), seed: int = 7) -> dict[str, float]:
    """Max relative finite-difference error per parameter tensor.

    Runs the full training loss (all three heads) on one fixed random batch.
    Dropout must be disabled; batch-norm uses batch statistics, which are
    deterministic for a fixed batch.
    """
    if model is None:
        model = build_tiny_model()
    if model.dtype != np.float64:
        raise T.ContractError("gradcheck requires a float64 model")
    if model.config.dropout_rate != 0.0:
        raise T.ContractError("gradcheck requires dropout disabled")
    cfg = model.config
    rng = SeededRng(seed)
    x = rng.uniform_array((batch_size, cfg.num_timestamps, cfg.num_bands,
                           cfg.patch, cfg.patch), dtype=np.float64)
    y = np.array([rng.randint(cfg.num_classes) for _ in range(batch_size)])
    model.set_mode(TRAIN)

    def loss_fn(_p):
        out = model.forward(x)
        return model.total_loss(out, y, alpha1, alpha2)

    errors: dict[str, float] = {}
    for name, p in model.named_parameters():
        errors[name] = T.finite_diff_check(loss_fn, p, h=h)
    return errors
