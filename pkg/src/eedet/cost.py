"""MAC/parameter accounting, early-exit path costs and an analytic latency model."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_CLOCK_HZ = 160e6


@dataclass
class LayerCost:
    name: str
    macs: int
    ops: int
    params: int
    output_shape: tuple


@dataclass
class CostReport:
    layers: list
    mac_full: int
    mac_static: int
    mac_ee: int | None
    mac_branch: int
    savings: float | None
    params_total: int
    attach_layer: int | None = None
    flags: list = field(default_factory=list)
    prefix_macs: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "macs", "ops", "params", "output_shape"])
            for l in self.layers:
                w.writerow([l.name, l.macs, l.ops, l.params, "x".join(map(str, l.output_shape))])


def _elementwise_ops(unit, out_shape) -> int:
    """Secondary count of element-wise work (BN affine, activations, adds)."""
    n = int(np.prod(out_shape[1:]))
    kind = type(unit).__name__
    if kind == "ConvBNAct":
        return n * (2 + (1 if unit.has_act else 0))
    if kind == "QLinear":
        return n * (2 if unit.has_act else 1)
    if kind == "HeadConv":
        return n
    return n


def _unit_costs(prefix, units, in_shape):
    rows = []
    for name, u in units:
        out = u.output_shape(in_shape)
        macs = u.macs(in_shape)
        params = sum(p.data.size for _, p in u.named_parameters() if not _.endswith("alpha"))
        rows.append(LayerCost(f"{prefix}{name}", int(macs), _elementwise_ops(u, out), int(params), tuple(out[1:])))
        in_shape = out
    return rows, in_shape


def _block_rows(idx, block, in_shape):
    units = []
    if block.expand is not None:
        units.append(("expand", block.expand))
    units += [("dw", block.dw), ("project", block.project)]
    rows, out = _unit_costs(f"layer{idx}.", units, in_shape)
    if block.use_res:
        rows.append(LayerCost(f"layer{idx}.add", 0, int(np.prod(out[1:])), 0, tuple(out[1:])))
    return rows, out


def count_macs(model) -> CostReport:
    """Per-layer MACs for one image. BN/ReLU6/GAP/softmax/add count as zero MACs."""
    h, w, c = model.backbone_cfg.input_shape
    shape = (1, c, h, w)
    rows, shape = _unit_costs("", [("stem", model.stem)], shape)
    prefix = {0: rows[0].macs}
    shapes = {0: shape}
    running = rows[0].macs
    for i, b in enumerate(model.blocks, start=1):
        r, shape = _block_rows(i, b, shape)
        rows += r
        running += sum(x.macs for x in r)
        prefix[i] = running
        shapes[i] = shape
    for hi, layer in enumerate(model.head_layers):
        # both heads read the same feature map
        rows += _unit_costs(f"head{hi}.", [("cls", model.cls_heads[hi])], shapes[layer])[0]
        rows += _unit_costs(f"head{hi}.", [("loc", model.loc_heads[hi])], shapes[layer])[0]
    mac_static = sum(r.macs for r in rows)
    mac_branch = 0
    mac_ee = None
    attach = model.attach_layer
    if model.branch is not None:
        br = model.branch
        r, _ = _unit_costs("ee.", [("conv1", br.conv1), ("conv2", br.conv2), ("gap", br.gap),
                                   ("fc1", br.fc1), ("fc2", br.fc2)], shapes[attach])
        rows += r
        mac_branch = sum(x.macs for x in r)
        mac_ee = prefix[attach] + mac_branch
    mac_full = mac_static + mac_branch
    report = CostReport(rows, mac_full, mac_static, mac_ee, mac_branch,
                        savings(mac_full, mac_ee) if mac_ee is not None else None,
                        model.num_parameters(), attach, prefix_macs=prefix)
    if mac_ee is not None and mac_ee > mac_full:
        report.flags.append("early-exit path costs more than the full pipeline")
    return report


def prefix_macs(model) -> dict:
    return count_macs(model).prefix_macs


def average_macs(mac_full, mac_ee, skip_rate) -> float:
    if not 0 <= skip_rate <= 1:
        raise ValueError("skip_rate must lie in [0, 1]")
    return skip_rate * mac_ee + (1 - skip_rate) * mac_full


def savings(mac_full, mac_ee) -> float:
    """Static saving 1 - mac_ee / mac_full; negative when exiting costs more."""
    if mac_full <= 0:
        raise ValueError("mac_full must be positive")
    return 1.0 - mac_ee / mac_full


def exceeds_static(mac_avg, mac_static) -> bool:
    return mac_avg > mac_static


@dataclass
class LatencyModel:
    efficiency: float = 1.0  # MAC / cycle
    clock_hz: float = DEFAULT_CLOCK_HZ

    def __post_init__(self):
        if self.efficiency <= 0 or self.clock_hz <= 0:
            raise ValueError("efficiency and clock must be positive")


def estimate_latency(macs, model: LatencyModel):
    """Returns (seconds, fps)."""
    if macs <= 0:
        raise ValueError("macs must be positive")
    sec = macs / (model.efficiency * model.clock_hz)
    return sec, 1.0 / sec


def average_fps(latencies) -> float:
    """Dataset throughput: 1 / mean latency (not the mean of per-frame FPS)."""
    return 1.0 / float(np.mean(latencies))


def gated_latency(mac_full, mac_ee, skip_rate, model: LatencyModel):
    """Mean latency and throughput when a fraction ``skip_rate`` of frames exits early."""
    lat_full, _ = estimate_latency(mac_full, model)
    lat_ee, _ = estimate_latency(mac_ee, model)
    mean = skip_rate * lat_ee + (1 - skip_rate) * lat_full
    return mean, 1.0 / mean
