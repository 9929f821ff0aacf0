"""Width-scalable inverted-residual backbone, two-scale SSD heads and an
early-exit (empty-frame) classification branch.

Layer indices ``l`` run 1..sum(stage_layer_counts); ``forward_to_layer(x, l)``
returns the activation after block ``l`` (the stem is part of every prefix).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .nn import (Add, BatchNorm, Conv2d, DepthwiseConv2d, GlobalAvgPool, Linear, Module,
                 Parameter, ReLU6, ShapeError)
from .quant.ops import fakequant_weights, pact_forward, pact_params, round_half_away

PACT_INIT = 6.0


def make_divisible(v: float, divisor: int = 8, min_value: int = 8) -> int:
    new_v = max(min_value, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass
class BackboneConfig:
    input_shape: tuple = (96, 128, 1)  # H, W, C
    width_multiplier: float = 1.0
    stage_layer_counts: tuple = (1, 2, 3, 4, 3)
    stage_channels: tuple = (16, 24, 32, 64, 96)
    stage_strides: tuple = (1, 2, 2, 2, 2)
    stage_expansion: tuple = (1, 6, 6, 6, 6)
    stem_channels: int = 32
    stem_stride: int = 2

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.stage_layer_counts = tuple(self.stage_layer_counts)
        self.stage_channels = tuple(self.stage_channels)
        self.stage_strides = tuple(self.stage_strides)
        self.stage_expansion = tuple(self.stage_expansion)
        if len(self.stage_layer_counts) != 5:
            raise ValueError("stage_layer_counts must have 5 entries")
        if self.width_multiplier <= 0:
            raise ValueError("width multiplier must be positive")

    @property
    def num_layers(self) -> int:
        return sum(self.stage_layer_counts)

    def channels(self, stage: int) -> int:
        return make_divisible(self.stage_channels[stage - 1] * self.width_multiplier)

    @property
    def stem_out(self) -> int:
        return make_divisible(self.stem_channels * self.width_multiplier)

    def stage_last_layer(self, stage: int) -> int:
        return sum(self.stage_layer_counts[:stage])

    def layers_of_stage(self, stage: int) -> list[int]:
        start = sum(self.stage_layer_counts[:stage - 1]) + 1
        return list(range(start, start + self.stage_layer_counts[stage - 1]))


@dataclass
class EEBranchConfig:
    attach_layer: int = 9
    mid_channels: int = 64
    fc_hidden: int = 64
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes != 2:
            raise ValueError("the early-exit branch is a 2-way (non-empty/empty) classifier")


@dataclass
class HeadConfig:
    num_classes: int = 3  # background + 2 object classes
    head_stages: tuple = (4, 5)
    scales: tuple = ((0.12, 0.2), (0.3, 0.45))
    aspect_ratios: tuple = ((0.75,), (0.75,))
    kernel_size: int = 3

    def __post_init__(self):
        self.head_stages = tuple(self.head_stages)
        self.scales = tuple(tuple(s) for s in self.scales)
        self.aspect_ratios = tuple(tuple(a) for a in self.aspect_ratios)
        if len(self.scales) != len(self.head_stages) or len(self.aspect_ratios) != len(self.head_stages):
            raise ValueError("one scale list and one ratio list per head")

    def anchors_per_cell(self, h: int) -> int:
        return len(self.scales[h]) * len(self.aspect_ratios[h])


def stage_of_layer(layer: int, config: BackboneConfig) -> int:
    if not 1 <= layer <= config.num_layers:
        raise ValueError(f"layer {layer} out of range 1..{config.num_layers}")
    total = 0
    for s, n in enumerate(config.stage_layer_counts, start=1):
        total += n
        if layer <= total:
            return s
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# quantization-aware building units

class PactAct(Module):
    """Learnable-clip activation used in place of ReLU6 (or as a signed output quantizer) during QAT."""

    kind = "PACT"

    def __init__(self, signed=False, alpha=PACT_INIT, bits=8):
        self.signed = signed
        self.bits = bits
        self.alpha = Parameter(np.array([alpha], np.float32), group="pact")
        self._cache = None

    def own_parameters(self):
        return {"alpha": self.alpha}

    def forward(self, x, train=False):
        y, inside, dalpha = pact_forward(x, float(self.alpha.data[0]), self.bits, self.signed)
        if train:
            self._cache = (inside, dalpha)
        return y

    def backward(self, grad):
        inside, dalpha = self._cache
        self.alpha.grad += np.array([(grad * dalpha).sum()], self.alpha.data.dtype)
        return grad * inside


class ConvBNAct(Module):
    """conv (no bias) -> BatchNorm -> optional ReLU6.

    In QAT mode the BN is frozen at its running statistics and folded into the
    conv weight, the folded weight is fake-quantized, and the activation is a
    PACT quantizer (unsigned for ReLU6 positions, signed otherwise).
    """

    kind = "ConvBNAct"

    def __init__(self, cin, cout, k=1, stride=1, depthwise=False, act=True, rng=None):
        if depthwise:
            if cin != cout:
                raise ValueError("depthwise conv keeps channel count")
            self.conv = DepthwiseConv2d(cin, k, stride, rng=rng)
        else:
            self.conv = Conv2d(cin, cout, k, stride, rng=rng)
        self.bn = BatchNorm(cout)
        self.act = ReLU6() if act else None
        self.has_act = act
        self.qat = False
        self.pact: Optional[PactAct] = None
        self.bits = 8

    def children(self):
        d = {"conv": self.conv, "bn": self.bn}
        if self.pact is not None:
            d["pact"] = self.pact
        return d

    def enable_qat(self, bits=8):
        self.qat = True
        self.bits = bits
        if self.pact is None:
            self.pact = PactAct(signed=not self.has_act, bits=bits)

    def output_shape(self, in_shape):
        return self.conv.output_shape(in_shape)

    def macs(self, in_shape):
        return self.conv.macs(in_shape)

    def folded(self):
        scale, shift = self.bn.scale_shift()
        w = self.conv.weight.data * scale.reshape(-1, 1, 1, 1).astype(self.conv.weight.data.dtype)
        return w, shift.astype(w.dtype), scale

    def forward(self, x, train=False):
        if not self.qat:
            y = self.bn.forward(self.conv.forward(x, train), train)
            return self.act.forward(y, train) if self.act is not None else y
        w, b, scale = self.folded()
        wq = fakequant_weights(w, self.bits)
        y = self.conv.forward(x, train, weight=wq, bias=b)
        if train:
            self._qcache = scale
        return self.pact.forward(y, train)

    def backward(self, grad):
        if not self.qat:
            if self.act is not None:
                grad = self.act.backward(grad)
            return self.conv.backward(self.bn.backward(grad))
        grad = self.pact.backward(grad)
        gx = self.conv.backward(grad)
        scale = self._qcache
        gwf, gb = self.conv.ext_weight_grad, self.conv.ext_bias_grad
        w = self.conv.weight.data
        inv = 1.0 / np.sqrt(self.bn.running_var + self.bn.eps)
        self.conv.weight.grad += gwf * scale.reshape(-1, 1, 1, 1)
        self.bn.gamma.grad += (gwf * w).sum(axis=(1, 2, 3)) * inv - gb * self.bn.running_mean * inv
        self.bn.beta.grad += gb
        return gx


class InvertedResidual(Module):
    kind = "InvertedResidual"

    def __init__(self, cin, cout, stride, expansion, rng=None):
        hidden = cin * expansion
        self.cin, self.cout, self.stride, self.expansion = cin, cout, stride, expansion
        self.expand = ConvBNAct(cin, hidden, 1, rng=rng) if expansion != 1 else None
        self.dw = ConvBNAct(hidden, hidden, 3, stride, depthwise=True, rng=rng)
        self.project = ConvBNAct(hidden, cout, 1, act=False, rng=rng)
        self.use_res = stride == 1 and cin == cout
        self.add = Add() if self.use_res else None
        self.add_pact: Optional[PactAct] = None
        self.qat = False

    def children(self):
        d = {}
        if self.expand is not None:
            d["expand"] = self.expand
        d["dw"] = self.dw
        d["project"] = self.project
        if self.add_pact is not None:
            d["add_pact"] = self.add_pact
        return d

    def units(self):
        return [u for u in (self.expand, self.dw, self.project) if u is not None]

    def enable_qat(self, bits=8):
        self.qat = True
        for u in self.units():
            u.enable_qat(bits)
        if self.use_res and self.add_pact is None:
            self.add_pact = PactAct(signed=True, bits=bits)

    def output_shape(self, in_shape):
        for u in self.units():
            in_shape = u.output_shape(in_shape)
        return in_shape

    def macs(self, in_shape):
        total = 0
        for u in self.units():
            total += u.macs(in_shape)
            in_shape = u.output_shape(in_shape)
        return total

    def forward(self, x, train=False):
        y = x
        for u in self.units():
            y = u.forward(y, train)
        if self.use_res:
            y = self.add.forward(x, y, train)
            if self.qat:
                y = self.add_pact.forward(y, train)
        return y

    def backward(self, grad):
        if self.use_res:
            if self.qat:
                grad = self.add_pact.backward(grad)
            g_skip, grad = self.add.backward(grad)
        for u in reversed(self.units()):
            grad = u.backward(grad)
        if self.use_res:
            grad = grad + g_skip
        return grad


class QLinear(Module):
    """Linear layer with optional ReLU6 and QAT fake-quantization."""

    kind = "QLinear"

    def __init__(self, cin, cout, act=True, rng=None):
        self.fc = Linear(cin, cout, rng=rng)
        self.act = ReLU6() if act else None
        self.has_act = act
        self.qat = False
        self.pact: Optional[PactAct] = None
        self.bits = 8

    def children(self):
        d = {"fc": self.fc}
        if self.pact is not None:
            d["pact"] = self.pact
        return d

    def enable_qat(self, bits=8):
        self.qat = True
        self.bits = bits
        if self.has_act and self.pact is None:
            self.pact = PactAct(signed=False, bits=bits)

    def output_shape(self, in_shape):
        return self.fc.output_shape(in_shape)

    def macs(self, in_shape):
        return self.fc.macs(in_shape)

    def forward(self, x, train=False):
        if not self.qat:
            y = self.fc.forward(x, train)
            return self.act.forward(y, train) if self.act is not None else y
        wq = fakequant_weights(self.fc.weight.data, self.bits)
        y = self.fc.forward(x, train, weight=wq)
        return self.pact.forward(y, train) if self.pact is not None else y

    def backward(self, grad):
        if not self.qat:
            if self.act is not None:
                grad = self.act.backward(grad)
            return self.fc.backward(grad)
        if self.pact is not None:
            grad = self.pact.backward(grad)
        gx = self.fc.backward(grad)
        if self.fc.ext_weight_grad is not None:
            self.fc.weight.grad += self.fc.ext_weight_grad
        return gx


class HeadConv(Module):
    """Prediction conv with bias; its int8 output is the dequantized int32 accumulator."""

    kind = "HeadConv"

    def __init__(self, cin, cout, k=3, rng=None):
        self.conv = Conv2d(cin, cout, k, 1, bias=True, rng=rng)
        self.qat = False
        self.bits = 8

    def children(self):
        return {"conv": self.conv}

    def enable_qat(self, bits=8):
        self.qat = True
        self.bits = bits

    def output_shape(self, in_shape):
        return self.conv.output_shape(in_shape)

    def macs(self, in_shape):
        return self.conv.macs(in_shape)

    def forward(self, x, train=False):
        if not self.qat:
            return self.conv.forward(x, train)
        return self.conv.forward(x, train, weight=fakequant_weights(self.conv.weight.data, self.bits))

    def backward(self, grad):
        gx = self.conv.backward(grad)
        if self.qat and self.conv.ext_weight_grad is not None:
            self.conv.weight.grad += self.conv.ext_weight_grad
        return gx


class QuantGAP(Module):
    """Global average pool; in QAT mode the mean is snapped back to the input grid."""

    kind = "GlobalAvgPool"

    def __init__(self):
        self.gap = GlobalAvgPool()
        self.grid_source: Optional[PactAct] = None
        self.qat = False

    def output_shape(self, in_shape):
        return self.gap.output_shape(in_shape)

    def macs(self, in_shape):
        return 0

    def forward(self, x, train=False):
        y = self.gap.forward(x, train)
        if self.qat and self.grid_source is not None and self.grid_source.bits < 32:
            s = pact_params(float(self.grid_source.alpha.data[0]), self.grid_source.bits).scale
            y = (round_half_away(y / s) * s).astype(y.dtype)
        return y

    def backward(self, grad):
        return self.gap.backward(grad)


class EEBranch(Module):
    kind = "EEBranch"

    def __init__(self, cin, cfg: EEBranchConfig, rng=None):
        self.conv1 = ConvBNAct(cin, cin, 3, 1, rng=rng)
        self.conv2 = ConvBNAct(cin, cfg.mid_channels, 3, 2, rng=rng)
        self.gap = QuantGAP()
        self.fc1 = QLinear(cfg.mid_channels, cfg.fc_hidden, act=True, rng=rng)
        self.fc2 = QLinear(cfg.fc_hidden, cfg.num_classes, act=False, rng=rng)
        self.seq = [self.conv1, self.conv2, self.gap, self.fc1, self.fc2]

    def children(self):
        return {"conv1": self.conv1, "conv2": self.conv2, "fc1": self.fc1, "fc2": self.fc2}

    def enable_qat(self, bits=8):
        for m in (self.conv1, self.conv2, self.fc1, self.fc2):
            m.enable_qat(bits)
        self.gap.qat = True
        self.gap.grid_source = self.conv2.pact

    def output_shape(self, in_shape):
        for m in self.seq:
            in_shape = m.output_shape(in_shape)
        return in_shape

    def macs(self, in_shape):
        total = 0
        for m in self.seq:
            total += m.macs(in_shape)
            in_shape = m.output_shape(in_shape)
        return total

    def forward(self, x, train=False):
        for m in self.seq:
            x = m.forward(x, train)
        return x

    def backward(self, grad):
        for m in reversed(self.seq):
            grad = m.backward(grad)
        return grad


# --------------------------------------------------------------------------
# the full graph

class ModelGraph(Module):
    kind = "ModelGraph"

    def __init__(self, backbone: BackboneConfig, ee: Optional[EEBranchConfig] = None,
                 heads: Optional[HeadConfig] = None, seed: int = 0):
        self.backbone_cfg = backbone
        self.ee_cfg = ee
        self.head_cfg = heads or HeadConfig()
        if ee is not None and not 1 <= ee.attach_layer <= backbone.num_layers:
            raise ValueError(f"attach layer {ee.attach_layer} outside 1..{backbone.num_layers}")
        rng = np.random.default_rng(seed)
        h, w, c = backbone.input_shape
        self.stem = ConvBNAct(c, backbone.stem_out, 3, backbone.stem_stride, rng=rng)
        self.blocks: list[InvertedResidual] = []
        cin = backbone.stem_out
        for s in range(1, 6):
            cout = backbone.channels(s)
            for i in range(backbone.stage_layer_counts[s - 1]):
                stride = backbone.stage_strides[s - 1] if i == 0 else 1
                self.blocks.append(InvertedResidual(cin, cout, stride, backbone.stage_expansion[s - 1], rng=rng))
                cin = cout
        self.layer_shapes = self._layer_shapes()
        self.head_layers = [backbone.stage_last_layer(s) for s in self.head_cfg.head_stages]
        self.cls_heads, self.loc_heads = [], []
        k = self.head_cfg.num_classes
        for hi, layer in enumerate(self.head_layers):
            a = self.head_cfg.anchors_per_cell(hi)
            ch = self.layer_shapes[layer][1]
            self.cls_heads.append(HeadConv(ch, a * k, self.head_cfg.kernel_size, rng=rng))
            self.loc_heads.append(HeadConv(ch, a * 4, self.head_cfg.kernel_size, rng=rng))
        self.branch = None
        if ee is not None:
            self.branch = EEBranch(self.layer_shapes[ee.attach_layer][1], ee, rng=rng)
        self.qat = False
        self.eval_counts: dict[str, int] = {}
        self._trace = None

    # structure ----------------------------------------------------------
    def children(self):
        d = {"stem": self.stem}
        for i, b in enumerate(self.blocks, start=1):
            d[f"layer{i}"] = b
        for i, (c, l) in enumerate(zip(self.cls_heads, self.loc_heads)):
            d[f"cls_head{i}"] = c
            d[f"loc_head{i}"] = l
        if self.branch is not None:
            d["ee"] = self.branch
        return d

    def _layer_shapes(self):
        h, w, c = self.backbone_cfg.input_shape
        shape = (1, c, h, w)
        shapes = {}
        shape = self.stem.output_shape(shape)
        shapes[0] = shape
        for i, b in enumerate(self.blocks, start=1):
            shape = b.output_shape(shape)
            shapes[i] = shape
        return shapes

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    @property
    def attach_layer(self) -> Optional[int]:
        return self.ee_cfg.attach_layer if self.ee_cfg is not None else None

    def head_shapes(self):
        return [tuple(self.layer_shapes[l][2:]) for l in self.head_layers]

    def num_anchors(self) -> int:
        return sum(h * w * self.head_cfg.anchors_per_cell(i) for i, (h, w) in enumerate(self.head_shapes()))

    def enable_qat(self, bits=8):
        self.qat = True
        for m in [self.stem, *self.blocks, *self.cls_heads, *self.loc_heads]:
            m.enable_qat(bits)
        if self.branch is not None:
            self.branch.enable_qat(bits)
        self.input_bits = bits

    def config_dict(self) -> dict:
        return {"backbone": asdict(self.backbone_cfg),
                "ee": asdict(self.ee_cfg) if self.ee_cfg is not None else None,
                "heads": asdict(self.head_cfg)}

    def parameter_groups(self):
        """Map parameter name -> group ('backbone', 'heads', 'branch', 'pact')."""
        groups = {}
        for name, p in self.named_parameters():
            if name.endswith("alpha"):
                groups[name] = "pact"
            elif name.startswith("ee."):
                groups[name] = "branch"
            elif "_head" in name:
                groups[name] = "heads"
            else:
                groups[name] = "backbone"
        return groups

    # forward ------------------------------------------------------------
    def _count(self, key, n=1):
        # counts images, not calls
        self.eval_counts[key] = self.eval_counts.get(key, 0) + n

    def _prepare_input(self, x):
        x = np.asarray(x)
        h, w, c = self.backbone_cfg.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ShapeError(f"model input must be (N, {c}, {h}, {w}), got {tuple(x.shape)}")
        if self.qat and getattr(self, "input_bits", 8) < 32:
            levels = (1 << self.input_bits) - 1
            x = (round_half_away(np.clip(x, 0.0, 1.0) * levels) / levels).astype(x.dtype)
        return x

    def forward_to_layer(self, x, layer: int, train=False):
        if not 1 <= layer <= self.num_layers:
            raise ValueError(f"layer {layer} out of range 1..{self.num_layers}")
        x = self._prepare_input(x)
        self._count("stem", x.shape[0])
        x = self.stem.forward(x, train)
        for i in range(1, layer + 1):
            self._count(f"layer{i}", x.shape[0])
            x = self.blocks[i - 1].forward(x, train)
        return x

    def forward_from_layer(self, feat, layer: int, train=False):
        """Resume the backbone after ``layer`` and run the SSD heads."""
        feats = {layer: feat}
        x = feat
        for i in range(layer + 1, self.num_layers + 1):
            self._count(f"layer{i}", x.shape[0])
            x = self.blocks[i - 1].forward(x, train)
            feats[i] = x
        return self._heads(feats, train)

    def _heads(self, feats, train=False):
        k = self.head_cfg.num_classes
        cls_out, loc_out = [], []
        for hi, layer in enumerate(self.head_layers):
            f = feats[layer]
            self._count(f"head{hi}", f.shape[0])
            c = self.cls_heads[hi].forward(f, train)
            l = self.loc_heads[hi].forward(f, train)
            n = c.shape[0]
            cls_out.append(c.transpose(0, 2, 3, 1).reshape(n, -1, k))
            loc_out.append(l.transpose(0, 2, 3, 1).reshape(n, -1, 4))
        return np.concatenate(cls_out, axis=1), np.concatenate(loc_out, axis=1)

    def forward_trace(self, x, train=False):
        """All backbone activations: {0: stem, 1..L: block outputs}."""
        x = self._prepare_input(x)
        self._count("stem", x.shape[0])
        x = self.stem.forward(x, train)
        trace = {0: x}
        for i, b in enumerate(self.blocks, start=1):
            self._count(f"layer{i}", x.shape[0])
            x = b.forward(x, train)
            trace[i] = x
        return trace

    def forward_branch(self, feat, train=False):
        if self.branch is None:
            return None
        self._count("ee", feat.shape[0])
        return self.branch.forward(feat, train)

    def forward_full(self, x, train=False):
        """Returns ``(cls_logits (N,A,K), loc (N,A,4), ee_logits (N,2) or None)``."""
        trace = self.forward_trace(x, train)
        cls, loc = self._heads(trace, train)
        ee = None
        if self.branch is not None:
            ee = self.forward_branch(trace[self.ee_cfg.attach_layer], train)
        if train:
            self._trace_shapes = {i: t.shape for i, t in trace.items()}
        return cls, loc, ee

    # backward -----------------------------------------------------------
    def backward(self, g_cls, g_loc, g_ee=None):
        """Backpropagate output gradients into every parameter's ``.grad``."""
        k = self.head_cfg.num_classes
        injected: dict[int, np.ndarray] = {}
        start = 0
        for hi, layer in enumerate(self.head_layers):
            shape = self._trace_shapes[layer]
            hf, wf = shape[2], shape[3]
            a = self.head_cfg.anchors_per_cell(hi)
            cnt = hf * wf * a
            n = g_cls.shape[0]
            gc = g_cls[:, start:start + cnt].reshape(n, hf, wf, a * k).transpose(0, 3, 1, 2)
            gl = g_loc[:, start:start + cnt].reshape(n, hf, wf, a * 4).transpose(0, 3, 1, 2)
            start += cnt
            g = self.cls_heads[hi].backward(np.ascontiguousarray(gc))
            g = g + self.loc_heads[hi].backward(np.ascontiguousarray(gl))
            injected[layer] = injected.get(layer, 0) + g
        if self.branch is not None and g_ee is not None:
            gb = self.branch.backward(g_ee)
            layer = self.ee_cfg.attach_layer
            injected[layer] = injected.get(layer, 0) + gb
        grad = None
        for i in range(self.num_layers, 0, -1):
            if i in injected:
                grad = injected[i] if grad is None else grad + injected[i]
            if grad is None:
                continue
            grad = self.blocks[i - 1].backward(grad)
        return self.stem.backward(grad)


def build_model(backbone: BackboneConfig, ee: Optional[EEBranchConfig] = None,
                heads: Optional[HeadConfig] = None, seed: int = 0) -> ModelGraph:
    for s in range(1, 6):
        if backbone.channels(s) < 8:
            raise ValueError("channel count below 8 after width scaling")
    return ModelGraph(backbone, ee, heads, seed)


# --------------------------------------------------------------------------
# analytic accounting

def _conv_bn_params(cin, cout, k, depthwise=False):
    w = k * k * cin if depthwise else k * k * cin * cout
    return w + 2 * cout


def branch_param_count(cin: int, cfg: EEBranchConfig = EEBranchConfig()) -> int:
    m, hdim = cfg.mid_channels, cfg.fc_hidden
    return (_conv_bn_params(cin, cin, 3) + _conv_bn_params(cin, m, 3)
            + m * hdim + hdim + hdim * cfg.num_classes + cfg.num_classes)


def analytic_param_count(backbone: BackboneConfig, ee: Optional[EEBranchConfig] = None,
                         heads: Optional[HeadConfig] = None) -> int:
    """Closed-form float-model parameter count (BN running stats excluded)."""
    heads = heads or HeadConfig()
    c_in = backbone.input_shape[2]
    total = _conv_bn_params(c_in, backbone.stem_out, 3)
    cin = backbone.stem_out
    chans = {}
    layer = 0
    for s in range(1, 6):
        cout = backbone.channels(s)
        t = backbone.stage_expansion[s - 1]
        for _ in range(backbone.stage_layer_counts[s - 1]):
            hidden = cin * t
            if t != 1:
                total += _conv_bn_params(cin, hidden, 1)
            total += _conv_bn_params(hidden, hidden, 3, depthwise=True)
            total += _conv_bn_params(hidden, cout, 1)
            cin = cout
            layer += 1
            chans[layer] = cout
    k = heads.num_classes
    kk = heads.kernel_size ** 2
    for hi, s in enumerate(heads.head_stages):
        ch = chans[backbone.stage_last_layer(s)]
        a = heads.anchors_per_cell(hi)
        total += kk * ch * a * k + a * k + kk * ch * a * 4 + a * 4
    if ee is not None:
        total += branch_param_count(chans[ee.attach_layer], ee)
    return total
