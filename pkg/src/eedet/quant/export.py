"""BN-folded int8 export, full-integer inference and its two oracles.

The export is a flat op list over named tensors. Three executors run it:

* ``"int"``: the deployment path. Integer accumulators, fixed-point requantization.
  Convolutions use a float64 GEMM as an exact integer engine: every partial sum
  is an integer bounded by the export-time accumulator check (< 2**31 << 2**53).
* ``"ref"``: a loop-based integer reference (int64 taps, Python-int requantization).
* ``"sim"``: float64 fake-quant simulation of the same export (real multipliers).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..gate import GateDecision
from ..io import FormatError, read_container, write_container
from ..nn import conv_out_size, softmax
from .ops import (QuantParams, fold_batchnorm, minmax_params, pact_params, quantize_multiplier,
                  requantize, round_half_away)

EXPORT_MAGIC = b"EEDINT8\0"
EXPORT_VERSION = 1
ACC_LIMIT = (1 << 31) - 1
INPUT_LEVELS = 255


class OverflowBoundError(ValueError):
    """Raised when a layer's worst-case accumulator could leave int32."""


@dataclass
class Int8Export:
    header: dict
    blobs: dict

    @property
    def ops(self):
        return self.header["ops"]

    @property
    def attach_layer(self):
        return self.header["attach_layer"]

    def save(self, path):
        header = {k: v for k, v in self.header.items() if k != "tensors"}
        order = [t["name"] for t in self.header["tensors"]] if "tensors" in self.header else list(self.blobs)
        kinds = {t["name"]: t["kind"] for t in self.header.get("tensors", [])}
        tensors = [(n, self.blobs[n], kinds.get(n, "weight" if n.endswith(".weight") else "bias")) for n in order]
        data = write_container(path, EXPORT_MAGIC, EXPORT_VERSION, header, tensors)
        # keep the in-memory header identical to what a load would produce
        _, self.header, _ = read_container(path, EXPORT_MAGIC)
        return data


def load_export(path) -> Int8Export:
    version, header, tensors = read_container(path, EXPORT_MAGIC)
    if version != EXPORT_VERSION:
        raise FormatError(f"unsupported export version {version}")
    return Int8Export(header, tensors)


# --------------------------------------------------------------------------
# export

def rounding_shift(v, n: int):
    """round_half_away(v / 2**n) for integer arrays, n >= 1."""
    v = np.asarray(v, np.int64)
    mag = (np.abs(v) + (1 << (n - 1))) >> n
    return np.where(v < 0, -mag, mag)


class _Exporter:
    def __init__(self, bits):
        self.bits = bits
        self.ops = []
        self.blobs = {}
        self.kinds = []
        self.scales = {}  # tensor name -> (scale, signed)

    def _blob(self, name, arr, kind):
        self.blobs[name] = arr
        self.kinds.append((name, kind))

    def _act_range(self, tensor):
        scale, signed = self.scales[tensor]
        return (127 if signed else 255), scale

    def weighted(self, kind, name, inp, w, b, out_pact, stride=1, pad=0, depthwise=False):
        """conv / depthwise / linear op; ``out_pact=None`` means dequantized int32 output."""
        w = np.asarray(w, np.float32)
        b = np.zeros(w.shape[0]) if b is None else np.asarray(b, np.float64)
        wqp = minmax_params(w, self.bits)
        wq = wqp.quantize(w)
        x_abs, s_in = self._act_range(inp)
        acc_scale = s_in * wqp.scale
        bq = round_half_away(b / acc_scale)
        if np.any(np.abs(bq) > ACC_LIMIT):
            raise OverflowBoundError(f"{name}: bias does not fit int32 at accumulator scale {acc_scale:.3g}")
        centered = np.abs(wq - wqp.zero_point).reshape(w.shape[0], -1).sum(axis=1)
        worst = int(np.max(centered * x_abs + np.abs(bq)))
        if worst > ACC_LIMIT:
            raise OverflowBoundError(f"{name}: worst-case accumulator {worst} exceeds int32")
        op = {"op": kind, "name": name, "input": inp, "output": name, "weight": f"{name}.weight",
              "bias": f"{name}.bias", "w_qp": wqp.to_dict(), "in_scale": s_in, "acc_scale": acc_scale,
              "stride": stride, "pad": pad, "depthwise": depthwise, "worst_acc": worst,
              "spec_bound": int(np.prod(w.shape[1:])) * 127 * 127}
        if out_pact is None:
            op["dequant"] = True
        else:
            signed = out_pact.signed
            qp = pact_params(float(out_pact.alpha.data[0]), self.bits, signed)
            mant, shift = quantize_multiplier(acc_scale / qp.scale)
            op.update(dequant=False, out_scale=qp.scale, signed=signed,
                      qmin=-127 if signed else 0, qmax=127 if signed else 255, mult=[mant, shift])
            self.scales[name] = (qp.scale, signed)
        self._blob(op["weight"], wq.astype(np.int8), "weight")
        self._blob(op["bias"], bq.astype(np.int32), "bias")
        self.ops.append(op)
        return name

    def conv_bn(self, name, inp, unit):
        conv, bn = unit.conv, unit.bn
        w, b = fold_batchnorm(conv.weight.data, None, bn.gamma.data, bn.beta.data,
                              bn.running_mean, bn.running_var, bn.eps)
        return self.weighted("conv", name, inp, w, b, unit.pact, conv.stride, conv.padding,
                             depthwise=type(conv).__name__ == "DepthwiseConv2d")

    def add(self, name, a, b, pact):
        sa, _ = self.scales[a]
        sb, _ = self.scales[b]
        qp = pact_params(float(pact.alpha.data[0]), self.bits, signed=True)
        ra, rb = sa / qp.scale, sb / qp.scale
        frac = 30 - int(np.ceil(np.log2(max(ra, rb))))
        if frac < 1:
            raise OverflowBoundError(f"{name}: residual rescale ratio too large")
        ma, mb = (int(round_half_away(r * (1 << frac))) for r in (ra, rb))
        self.ops.append({"op": "add", "name": name, "inputs": [a, b], "output": name, "mults": [ma, mb],
                         "frac": frac, "out_scale": qp.scale, "signed": True, "qmin": -127, "qmax": 127})
        self.scales[name] = (qp.scale, True)
        return name

    def gap(self, name, inp):
        s, signed = self.scales[inp]
        self.ops.append({"op": "gap", "name": name, "input": inp, "output": name, "out_scale": s})
        self.scales[name] = (s, signed)
        return name


def export_int8(model, tau=None) -> Int8Export:
    """Fold BN, quantize weights and biases, fix every requantization multiplier.

    The model must be in QAT mode (trained PACT clips define activation scales).
    """
    if not model.qat:
        raise ValueError("export needs a quantization-aware model (run QAT first)")
    bits = getattr(model, "input_bits", 8)
    if bits != 8:
        raise ValueError("only 8-bit export is supported")
    ex = _Exporter(bits)
    ex.scales["input"] = (1.0 / INPUT_LEVELS, False)
    t = ex.conv_bn("stem", "input", model.stem)
    for i, blk in enumerate(model.blocks, start=1):
        src = t
        for part in ("expand", "dw", "project"):
            u = getattr(blk, part)
            if u is not None:
                t = ex.conv_bn(f"layer{i}.{part}", t, u)
        if blk.use_res:
            t = ex.add(f"layer{i}.add", src, t, blk.add_pact)
        ex.ops[-1]["marks"] = f"layer{i}"
    n_backbone = len(ex.ops)
    heads = []
    for hi, layer in enumerate(model.head_layers):
        feat = _marked_output(ex.ops, f"layer{layer}")
        for kind, h in (("cls", model.cls_heads[hi]), ("loc", model.loc_heads[hi])):
            c = h.conv
            ex.weighted("conv", f"head{hi}.{kind}", feat, c.weight.data, c.bias.data, None, c.stride, c.padding)
        heads.append({"layer": layer, "cls": f"head{hi}.cls", "loc": f"head{hi}.loc"})
    n_heads = len(ex.ops)
    if model.branch is not None:
        br = model.branch
        t = _marked_output(ex.ops, f"layer{model.attach_layer}")
        t = ex.conv_bn("ee.conv1", t, br.conv1)
        t = ex.conv_bn("ee.conv2", t, br.conv2)
        t = ex.gap("ee.gap", t)
        t = ex.weighted("linear", "ee.fc1", t, br.fc1.fc.weight.data, br.fc1.fc.bias.data, br.fc1.pact)
        ex.weighted("linear", "ee.fc2", t, br.fc2.fc.weight.data, br.fc2.fc.bias.data, None)
    header = {"format": "eedet-int8", "config": model.config_dict(), "bits": bits,
              "input_scale": 1.0 / INPUT_LEVELS, "attach_layer": model.attach_layer,
              "num_layers": model.num_layers, "head_shapes": [list(s) for s in model.head_shapes()],
              "heads": heads, "tau": tau, "ops": ex.ops,
              "sections": {"backbone": [0, n_backbone], "heads": [n_backbone, n_heads],
                           "branch": [n_heads, len(ex.ops)]},
              "tensors": [{"name": n, "kind": k} for n, k in ex.kinds]}
    return Int8Export(header, ex.blobs)


def _marked_output(ops, mark):
    for op in ops:
        if op.get("marks") == mark:
            return op["output"]
    raise KeyError(mark)


# --------------------------------------------------------------------------
# executors

def _im2col(x, k, s, p):
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, s, p), conv_out_size(w, k, s, p)
    xt = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, ho, wo), x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _conv_gemm(x, w, stride, pad, depthwise):
    """Conv in float64 (exact for the integer-valued operands used here)."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    k = w.shape[-1]
    n, c, h, wd = x.shape
    if depthwise:
        ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((n, c, ho, wo))
        for i in range(k):
            for j in range(k):
                out += xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] \
                    * w[:, 0, i, j].reshape(1, c, 1, 1)
        return out
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = w.reshape(w.shape[0], -1) @ cols
    return out.reshape(w.shape[0], n, ho, wo).transpose(1, 0, 2, 3)


def _conv_ref(x, w, stride, pad, depthwise):
    """Tap-by-tap int64 convolution, one output channel at a time."""
    x = np.asarray(x, np.int64)
    w = np.asarray(w, np.int64)
    k = w.shape[-1]
    n, c, h, wd = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, w.shape[0], ho, wo), np.int64)
    for o in range(w.shape[0]):
        for i in range(k):
            for j in range(k):
                tap = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                if depthwise:
                    out[:, o] += tap[:, o] * w[o, 0, i, j]
                else:
                    for ci in range(c):
                        out[:, o] += tap[:, ci] * w[o, ci, i, j]
    return out


def _requant_ref(acc, mant, shift):
    total = 31 + shift

    def one(a):
        prod = int(a) * mant
        if total <= 0:
            return prod << -total
        q = (abs(prod) + (1 << (total - 1))) >> total
        return -q if prod < 0 else q
    return np.vectorize(one, otypes=[np.int64])(np.asarray(acc, np.int64))


def _centered_weight(ex, op):
    wqp = QuantParams.from_dict(op["w_qp"])
    return ex.blobs[op["weight"]].astype(np.int64) - wqp.zero_point, wqp


def _run_weighted(ex, op, x, impl):
    wc, wqp = _centered_weight(ex, op)
    bq = ex.blobs[op["bias"]].astype(np.int64)
    lin = op["op"] == "linear"
    if impl == "sim":
        w = wc * wqp.scale
        y = (x @ w.T) if lin else _conv_gemm(x, w, op["stride"], op["pad"], op["depthwise"])
        y = y + (bq * op["acc_scale"]).reshape((1, -1) + (() if lin else (1, 1)))
        if op["dequant"]:
            return y
        q = np.clip(round_half_away(y / op["out_scale"]), op["qmin"], op["qmax"])
        return q * op["out_scale"]
    if impl == "ref":
        if lin:
            acc = (np.asarray(x, np.int64)[:, :, None, None] * 1)
            acc = _conv_ref(acc, wc[:, :, None, None], 1, 0, False)[:, :, 0, 0]
        else:
            acc = _conv_ref(x, wc, op["stride"], op["pad"], op["depthwise"])
    else:
        if lin:
            acc = np.asarray(x, np.float64) @ wc.T.astype(np.float64)
        else:
            acc = _conv_gemm(x, wc, op["stride"], op["pad"], op["depthwise"])
        acc = np.rint(acc).astype(np.int64)
    acc = acc + bq.reshape((1, -1) + (() if lin else (1, 1)))
    if op["dequant"]:
        return acc
    mant, shift = op["mult"]
    q = _requant_ref(acc, mant, shift) if impl == "ref" else requantize(acc, mant, shift)
    return np.clip(q, op["qmin"], op["qmax"])


def _run_add(op, a, b, impl):
    if impl == "sim":
        q = np.clip(round_half_away((a + b) / op["out_scale"]), op["qmin"], op["qmax"])
        return q * op["out_scale"]
    ma, mb = op["mults"]
    if impl == "ref":
        f = op["frac"]
        v = np.vectorize(lambda x, y: int(x) * ma + int(y) * mb, otypes=[object])(a, b)
        q = np.vectorize(lambda t: (1 if t >= 0 else -1) * ((abs(t) + (1 << (f - 1))) >> f),
                         otypes=[np.int64])(v)
    else:
        q = rounding_shift(np.asarray(a, np.int64) * ma + np.asarray(b, np.int64) * mb, op["frac"])
    return np.clip(q, op["qmin"], op["qmax"])


def _run_gap(op, x, impl):
    if impl == "sim":
        s = op["out_scale"]
        # average grid indices, not values: 1/s is inexact, and the mean is often an exact .5 tie
        return round_half_away(np.rint(x / s).mean(axis=(2, 3))) * s
    hw = x.shape[2] * x.shape[3]
    tot = np.asarray(x, np.int64).sum(axis=(2, 3))
    mag = (2 * np.abs(tot) + hw) // (2 * hw)
    return np.where(tot < 0, -mag, mag)


def _run_ops(ex, ops, env, impl):
    for op in ops:
        kind = op["op"]
        if kind in ("conv", "linear"):
            env[op["output"]] = _run_weighted(ex, op, env[op["input"]], impl)
        elif kind == "add":
            a, b = (env[t] for t in op["inputs"])
            env[op["output"]] = _run_add(op, a, b, impl)
        elif kind == "gap":
            env[op["output"]] = _run_gap(op, env[op["input"]], impl)
        else:
            raise FormatError(f"unknown op {kind}")
    return env


def quantize_input(ex, images, impl="int"):
    x = np.asarray(images, np.float64)
    if x.ndim == 3:
        x = x[:, None]
    q = round_half_away(np.clip(x, 0.0, 1.0) * INPUT_LEVELS)
    return q * ex.header["input_scale"] if impl == "sim" else q.astype(np.int64)


@dataclass
class Int8Outputs:
    cls: np.ndarray | None
    loc: np.ndarray | None
    ee_logits: np.ndarray | None
    p_empty: np.ndarray | None
    skipped: np.ndarray | None = None


def _section(ex, name):
    a, b = ex.header["sections"][name]
    return ex.ops[a:b]


def _dequant_heads(ex, env, impl):
    k = ex.header["config"]["heads"]["num_classes"]
    by_name = {op["name"]: op for op in ex.ops}
    cls_out, loc_out = [], []
    for h in ex.header["heads"]:
        for key, dst, width in (("cls", cls_out, k), ("loc", loc_out, 4)):
            op = by_name[h[key]]
            v = env[h[key]]
            v = v if impl == "sim" else v * op["acc_scale"]
            n = v.shape[0]
            dst.append(v.transpose(0, 2, 3, 1).reshape(n, -1, width))
    return np.concatenate(cls_out, axis=1), np.concatenate(loc_out, axis=1)


def _dequant_logits(ex, env, impl):
    op = ex.ops[ex.header["sections"]["branch"][1] - 1]
    v = env[op["output"]]
    return v if impl == "sim" else v * op["acc_scale"]


def int8_forward(ex: Int8Export, images, impl="int", tau=None) -> Int8Outputs:
    """Run the export on a batch of images in [0, 1], shape (N, 1, H, W) or (N, H, W).

    With ``tau`` set, images whose dequantized softmax P(empty) >= tau stop after
    the branch: their rows of ``cls``/``loc`` are NaN and the backbone suffix and
    heads are not evaluated for them.
    """
    if impl not in ("int", "ref", "sim"):
        raise ValueError(f"unknown executor {impl!r}")
    env = {"input": quantize_input(ex, images, impl)}
    backbone = _section(ex, "backbone")
    branch = _section(ex, "branch")
    if not branch:
        _run_ops(ex, backbone + _section(ex, "heads"), env, impl)
        cls, loc = _dequant_heads(ex, env, impl)
        return Int8Outputs(cls, loc, None, None)
    mark = f"layer{ex.attach_layer}"
    cut = next(i for i, op in enumerate(backbone) if op.get("marks") == mark) + 1
    _run_ops(ex, backbone[:cut] + branch, env, impl)
    logits = _dequant_logits(ex, env, impl)
    p = softmax(np.asarray(logits, np.float64), axis=-1)[:, 1]
    keep = np.ones(len(p), bool) if tau is None else p < tau
    n = len(p)
    cls = loc = None
    if keep.any():
        sub = {k: v[keep] for k, v in env.items()}
        _run_ops(ex, backbone[cut:] + _section(ex, "heads"), sub, impl)
        c, l = _dequant_heads(ex, sub, impl)
        cls = np.full((n,) + c.shape[1:], np.nan)
        loc = np.full((n,) + l.shape[1:], np.nan)
        cls[keep], loc[keep] = c, l
    return Int8Outputs(cls, loc, logits, p, None if tau is None else ~keep)


def export_anchors(ex: Int8Export):
    from ..detection import generate_anchors
    hc = ex.header["config"]["heads"]
    return generate_anchors([tuple(s) for s in ex.header["head_shapes"]], hc["scales"], hc["aspect_ratios"])


def int8_gated_inference(ex: Int8Export, image, tau, impl="int") -> GateDecision:
    from ..detection import postprocess
    out = int8_forward(ex, np.asarray(image)[None], impl, tau=tau)
    p = float(out.p_empty[0])
    if out.skipped[0]:
        return GateDecision(p, True, [])
    return GateDecision(p, False, postprocess(out.cls[0], out.loc[0], export_anchors(ex)))


def score_dataset_int8(ex: Int8Export, dataset, impl="int", batch_size=32):
    """ScoreCache over a dataset (full pass, gating applied later by comparison)."""
    from ..detection import postprocess
    from ..gate import ScoreCache
    anchors = export_anchors(ex)
    probs, dets = [], []
    for s in range(0, len(dataset), batch_size):
        out = int8_forward(ex, dataset.tensor(slice(s, s + batch_size)), impl)
        if out.p_empty is not None:
            probs.append(out.p_empty)
        dets.extend(postprocess(c, l, anchors) for c, l in zip(out.cls, out.loc))
    return ScoreCache(np.concatenate(probs) if probs else None, dets)


def output_steps(ex: Int8Export):
    """Dequantization step of each dequantized output tensor (heads and logits)."""
    return {op["name"]: op["acc_scale"] for op in ex.ops if op.get("dequant")}


def clone_export(ex: Int8Export) -> Int8Export:
    return Int8Export(copy.deepcopy(ex.header), {k: v.copy() for k, v in ex.blobs.items()})
