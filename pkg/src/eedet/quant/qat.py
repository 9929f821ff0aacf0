"""Quantization-aware fine-tuning on top of the float training loop."""
from __future__ import annotations

from dataclasses import replace

from ..train import TrainConfig, TrainResult, train

QAT_DEFAULT_LR = 1e-2


def qat_config(cfg: TrainConfig | None = None, **overrides) -> TrainConfig:
    """A TrainConfig with the QAT learning-rate default unless one is given."""
    base = cfg or TrainConfig(initial_lr=QAT_DEFAULT_LR)
    return replace(base, **overrides) if overrides else base


def qat_train(model, train_ds, val_ds, cfg: TrainConfig, weights, bits=8, **kwargs) -> TrainResult:
    """Switch ``model`` to fake-quantized mode and fine-tune it in place.

    With ``bits >= 32`` quantization stays disabled and this is plain float training.
    """
    if bits < 32:
        model.enable_qat(bits)
    return train(model, train_ds, val_ds, cfg, weights, **kwargs)
