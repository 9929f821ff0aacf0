"""Affine quantizers, PACT clipping and batch-norm folding primitives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALE_FLOOR = 1e-8


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int = 8
    signed: bool = True

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    def quantize(self, x):
        q = round_half_away(np.asarray(x, np.float64) / self.scale) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(np.int64)

    def dequantize(self, q):
        return self.scale * (np.asarray(q, np.float64) - self.zero_point)

    def to_dict(self):
        return {"scale": float(self.scale), "zero_point": int(self.zero_point),
                "bits": self.bits, "signed": self.signed}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), int(d["zero_point"]), int(d["bits"]), bool(d["signed"]))


def minmax_params(w, bits=8) -> QuantParams:
    """Per-tensor affine parameters from the tensor range (zero always representable)."""
    lo = min(float(np.min(w)), 0.0)
    hi = max(float(np.max(w)), 0.0)
    levels = (1 << bits) - 1
    scale = max((hi - lo) / levels, SCALE_FLOOR)
    qmin = -(1 << (bits - 1))
    zp = int(np.clip(qmin - round_half_away(lo / scale), qmin, qmin + levels))
    return QuantParams(scale, zp, bits, signed=True)


def fakequant_weights(w, bits=8):
    """dequantize(quantize(w)) with min-max per-tensor params. Backward is identity (STE)."""
    if bits >= 32:
        return w
    qp = minmax_params(w, bits)
    return qp.dequantize(qp.quantize(w)).astype(w.dtype)


def pact_params(alpha, bits=8, signed=False) -> QuantParams:
    alpha = max(float(alpha), SCALE_FLOOR)
    levels = (1 << (bits - 1)) - 1 if signed else (1 << bits) - 1
    return QuantParams(alpha / levels, 0, bits, signed=signed)


def pact_forward(x, alpha, bits=8, signed=False):
    """Clip to [0, alpha] (or [-alpha, alpha]) and snap to the uniform grid.

    Returns ``(y, dy_dx_mask, dy_dalpha)`` where the masks implement the
    straight-through rules: unit slope inside the clip range, and
    ``dy/dalpha`` = 1 above the range (-1 below it for the signed variant).
    """
    alpha = float(alpha)
    lo = -alpha if signed else 0.0
    c = np.clip(x, lo, alpha)
    if bits < 32:
        s = pact_params(alpha, bits, signed).scale
        y = (round_half_away(c / s) * s).astype(x.dtype)
    else:
        y = c
    inside = (x > lo) & (x < alpha)
    dalpha = (x >= alpha).astype(x.dtype)
    if signed:
        dalpha = dalpha - (x <= -alpha).astype(x.dtype)
    return y, inside, dalpha


def pact_surrogate(x, alpha, signed=False):
    """Pre-quantization clamp used as the finite-difference surrogate for alpha."""
    return np.clip(x, -alpha if signed else 0.0, alpha)


def fold_batchnorm(weight, bias, gamma, beta, mean, var, eps=1e-5):
    """Fold an eval-mode BN into the preceding conv/linear weight and bias.

    ``weight`` has the output channel first. Returns ``(w_fold, b_fold)``.
    """
    denom = np.asarray(var, np.float64) + eps
    if np.any(denom <= 0) or np.any(~np.isfinite(denom)):
        raise FloatingPointError("batch-norm variance + eps underflows")
    scale = np.asarray(gamma, np.float64) / np.sqrt(denom)
    w = np.asarray(weight, np.float64) * scale.reshape((-1,) + (1,) * (np.ndim(weight) - 1))
    b = np.zeros_like(scale) if bias is None else np.asarray(bias, np.float64)
    b = (b - mean) * scale + beta
    return w.astype(np.asarray(weight).dtype), b.astype(np.asarray(weight).dtype)


def quantize_multiplier(m: float) -> tuple[int, int]:
    """Fixed-point form of a positive real multiplier: m ~= mantissa * 2**-(31 + shift).

    ``mantissa`` is an int32 in [2**30, 2**31). ``shift`` may be negative.
    """
    if m <= 0:
        raise ValueError("requantization multiplier must be positive")
    frac, exp = np.frexp(m)  # m = frac * 2**exp, frac in [0.5, 1)
    mant = int(round_half_away(frac * (1 << 31)))
    if mant == 1 << 31:
        mant //= 2
        exp += 1
    return mant, int(-exp)


def requantize(acc, mantissa: int, shift: int):
    """round_half_away(acc * mantissa / 2**(31 + shift)) in pure integer arithmetic."""
    acc = np.asarray(acc, np.int64)
    total = 31 + shift
    if total > 62:
        # |acc * mantissa| < 2**62 for accepted exports, so the result rounds to 0
        return np.zeros_like(acc)
    prod = acc * np.int64(mantissa)
    if total <= 0:
        return np.asarray(prod * (1 << -total), np.int64)
    half = 1 << (total - 1)
    mag = np.abs(prod)
    out = (mag + half) >> total
    return np.asarray(np.where(prod < 0, -out, out), np.int64)


def multiplier_value(mantissa: int, shift: int) -> float:
    return float(mantissa) * 2.0 ** (-(31 + shift))
