"""Adam optimization, the training loop with validation-based snapshot
selection, model evaluation, and the four-variant ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import PatchSample
from .layers import INFER, TRAIN
from .metrics import MetricsReport, evaluate_predictions
from .model import (VARIANT_FULL, VARIANT_LABELS, VARIANTS, DuploModel,
                    ModelConfig, FULL_PROFILE, SMALL_PROFILE, WidthProfile)
from .rng import SeededRng
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one parameter set."""

    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: list[tuple[str, Tensor]]) -> None:
    """p <- p - lr * m_hat / (sqrt(v_hat) + eps) using accumulated gradients."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g.astype(np.float64) ** 2)
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 2e-4
    alpha1: float = 0.3
    alpha2: float = 0.3
    seed: int = 0
    variant: str = VARIANT_FULL
    profile: WidthProfile = field(default_factory=lambda: FULL_PROFILE)
    dropout_rate: float = 0.4

    @classmethod
    def small(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: narrow model, 30 epochs, faster learning rate."""
        base = dict(epochs=30, learning_rate=1e-3, profile=SMALL_PROFILE)
        base.update(overrides)
        return cls(**base)


def _stack_batch(samples: list[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.cube for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def build_model(config: TrainConfig, num_classes: int, num_timestamps: int,
                num_bands: int, rng: SeededRng, dtype=np.float32) -> DuploModel:
    mcfg = ModelConfig(num_classes=num_classes, num_timestamps=num_timestamps,
                       num_bands=num_bands, variant=config.variant,
                       profile=config.profile, dropout_rate=config.dropout_rate)
    return DuploModel(mcfg, rng, dtype=dtype)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


def best_epoch(history: list[EpochRecord]) -> EpochRecord:
    """Highest validation accuracy; ties resolved to the earlier epoch."""
    best = history[0]
    for rec in history[1:]:
        if rec.val_accuracy > best.val_accuracy:
            best = rec
    return best


def evaluate(model: DuploModel, samples: list[PatchSample],
             batch_size: int = 256) -> MetricsReport:
    """Metrics for a frozen model over a sample list (fused head decides)."""
    if not samples:
        raise TrainingError("cannot evaluate an empty split")
    if model.mode != INFER:
        raise T.ContractError("evaluate requires the model in inference mode")
    preds = predict_samples(model, samples, batch_size)
    y_true = np.array([s.label for s in samples], dtype=np.int64)
    return evaluate_predictions(y_true, preds, model.config.num_classes)


def predict_samples(model: DuploModel, samples: list[PatchSample],
                    batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(samples), batch_size):
        x, _ = _stack_batch(samples[i:i + batch_size])
        preds.append(model.predict(x))
    return np.concatenate(preds)


def train(model: DuploModel, parts: dict[str, list[PatchSample]],
          config: TrainConfig, rng: SeededRng | None = None,
          progress=None) -> tuple[DuploModel, list[EpochRecord]]:
    """Epoch loop with seeded shuffling; returns the snapshot with the best
    validation accuracy (ties go to the earlier epoch) and the history."""
    train_samples = parts.get("train", [])
    val_samples = parts.get("val", [])
    if not train_samples or not val_samples:
        raise TrainingError("train and val splits must be nonempty")
    if rng is None:
        rng = SeededRng(config.seed)

    adam = AdamState(learning_rate=config.learning_rate)
    params = model.trainable_parameters()
    history: list[EpochRecord] = []
    best_acc = -1.0
    best_state: dict[str, np.ndarray] = {}

    prev_checks = T.NAN_CHECKS
    T.NAN_CHECKS = True
    try:
        order = list(range(len(train_samples)))
        for epoch in range(1, config.epochs + 1):
            model.set_mode(TRAIN)
            rng.shuffle(order)
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = _stack_batch([train_samples[i] for i in idx])
                try:
                    out = model.forward(x)
                    loss = model.total_loss(out, y, config.alpha1, config.alpha2)
                except T.NumericsError as e:
                    raise TrainingError(
                        f"non-finite value at epoch {epoch}, step {start // config.batch_size}: {e}")
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingError(
                        f"NaN loss at epoch {epoch}, step {start // config.batch_size}")
                for _, p in params:
                    p.zero_grad()
                loss.backward()
                adam_step(adam, params)
                losses.append(loss_val)

            model.set_mode(INFER)
            val_acc = evaluate(model, val_samples).accuracy
            rec = EpochRecord(epoch, float(np.mean(losses)), val_acc)
            history.append(rec)
            if progress is not None:
                progress(rec)
            if val_acc > best_acc:
                best_acc = val_acc
                best_state = {n: arr.copy() for n, arr in model.state_entries()}
    finally:
        T.NAN_CHECKS = prev_checks

    model.load_state(best_state)
    model.set_mode(INFER)
    return model, history


def overfit_probe(model: DuploModel, samples: list[PatchSample],
                  config: TrainConfig, steps: int = 500,
                  target_loss: float = 0.01) -> list[float]:
    """Repeatedly fit one fixed batch; returns the per-step loss trace,
    stopping early once the target is reached."""
    x, y = _stack_batch(samples)
    params = model.trainable_parameters()
    adam = AdamState(learning_rate=config.learning_rate)
    model.set_mode(TRAIN)
    trace = []
    for _ in range(steps):
        out = model.forward(x)
        loss = model.total_loss(out, y, config.alpha1, config.alpha2)
        trace.append(loss.item())
        if trace[-1] < target_loss:
            break
        for _, p in params:
            p.zero_grad()
        loss.backward()
        adam_step(adam, params)
    return trace


def ablate(parts: dict[str, list[PatchSample]], config: TrainConfig,
           num_classes: int, num_timestamps: int, num_bands: int,
           progress=None) -> dict[str, MetricsReport]:
    """Train all four variants under identical seed and splits; report test
    metrics per variant, keyed by the conventional row labels."""
    results: dict[str, MetricsReport] = {}
    for variant in VARIANTS:
        cfg = replace(config, variant=variant)
        rng = SeededRng(cfg.seed)
        model = build_model(cfg, num_classes, num_timestamps, num_bands, rng)
        model, _ = train(model, parts, cfg, rng=rng, progress=progress)
        results[VARIANT_LABELS[variant]] = evaluate(model, parts["test"])
    return results


def format_ablation_table(results: dict[str, MetricsReport]) -> str:
    lines = ["variant\taccuracy\tfmeasure\tkappa"]
    for label, rep in results.items():
        lines.append(f"{label}\t{rep.accuracy:.4f}\t{rep.f1_weighted:.4f}\t{rep.kappa:.4f}")
    return "\n".join(lines) + "\n"
