"""High-level steps shared by the CLI, the experiment scripts and the acceptance suite."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .cost import average_macs, count_macs
from .data import generate_dataset
from .detection import LossWeights
from .gate import optimize_threshold, score_dataset
from .metrics import report_from_cache
from .model import EEBranchConfig, build_model
from .tpe import objective_J
from .train import train

log = logging.getLogger(__name__)

# named substreams of the root seed (shuffle = 1, augment = 2 and hpo = 4 live in train/tpe)
STREAM_INIT = 3
STREAM_DATA = 5
SPLITS = {"train": 0, "val": 1, "test": 2}


def substream_seed(seed: int, stream: int, *extra) -> int:
    return int(np.random.SeedSequence([seed, stream, *extra]).generate_state(1)[0])


def make_split(cfg: RunConfig, split: str):
    n = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}[split]
    return generate_dataset(cfg.data.scene, n, substream_seed(cfg.seed, STREAM_DATA, SPLITS[split]))


def make_datasets(cfg: RunConfig):
    return {s: make_split(cfg, s) for s in SPLITS}


def build_from_config(cfg: RunConfig, ee: EEBranchConfig | None | str = "config"):
    ee_cfg = cfg.ee if ee == "config" else ee
    return build_model(cfg.backbone, ee_cfg, cfg.heads, seed=substream_seed(cfg.seed, STREAM_INIT))


def train_config(cfg: RunConfig, **overrides):
    return replace(cfg.train, seed=cfg.seed, **overrides)


def fit(cfg: RunConfig, data, ee="config", log_path=None, weights=None, **train_overrides):
    """Build and train a model from ``cfg``; returns (model, TrainResult)."""
    model = build_from_config(cfg, ee)
    res = train(model, data["train"], data["val"], train_config(cfg, **train_overrides),
                weights or cfg.loss, log_path=log_path)
    return model, res


def select_threshold(model, val, cache=None):
    """(tau*, validation accuracy) by threshold search on the validation split."""
    cache = cache or score_dataset(model, val)
    return optimize_threshold(cache.p_empty, val.empty_labels())


def assess(model, val, test, tau=None):
    """tau* on validation, then gated and ungated reports plus costs on test."""
    if tau is None and model.branch is not None:
        tau, _ = select_threshold(model, val)
    cache = score_dataset(model, test)
    report = report_from_cache(cache, test, model.head_cfg.num_classes, tau)
    return report, cache, count_macs(model)


def hpo_evaluator(cfg: RunConfig, data, epochs=None):
    """Assignment -> (J, artifacts) using the real train/evaluate pipeline.

    J = mAP without early exit x static saving S(layer) x branch accuracy at tau*.
    """
    epochs = epochs or cfg.hpo.epochs

    def evaluate(a):
        ee = replace(cfg.ee or EEBranchConfig(), attach_layer=int(a["layer"]))
        weights = LossWeights(float(a["lam"]), cfg.loss.w0, float(a["w1"]))
        model, _ = fit(cfg, data, ee=ee, weights=weights, epochs=epochs, eval_every=epochs,
                       batch_size=int(a["batch_size"]), branch_lr=float(a["branch_lr"]))
        val_cache = score_dataset(model, data["val"])
        tau, acc = optimize_threshold(val_cache.p_empty, data["val"].empty_labels())
        rep = report_from_cache(val_cache, data["val"], model.head_cfg.num_classes, tau)
        s = count_macs(model).savings
        j = objective_J(rep.map_no_ee, s, acc)
        return j, {"map_no_ee": rep.map_no_ee, "savings": s, "ee_accuracy": acc, "tau": tau}
    return evaluate


@dataclass
class DeskResult:
    """Everything the desk-scale experiment produces, float and int8."""
    cfg: RunConfig
    data: dict
    model: object
    tau: float
    val_accuracy: float
    report: object
    cache: object
    cost: object
    mac_avg: float
    reduction: float
    qat_model: object = None
    export: object = None
    int8_tau: float | None = None
    int8_report: object = None
    int8_cache: object = None
    sim_cache: object = None
    timings: dict = field(default_factory=dict)


def desk_experiment(cfg: RunConfig | None = None, data=None, quantize=True, log_dir=None) -> DeskResult:
    """Train the early-exit detector, pick tau* on validation, evaluate on test,
    then (optionally) QAT fine-tune, export to int8 and evaluate the export."""
    from .quant.export import export_int8, score_dataset_int8
    cfg = cfg or RunConfig()
    data = data or make_datasets(cfg)
    timings = {}
    t0 = time.perf_counter()
    log_path = Path(log_dir) / "train_log.csv" if log_dir else None
    model, _ = fit(cfg, data, log_path=log_path)
    timings["train_s"] = time.perf_counter() - t0
    tau, val_acc = select_threshold(model, data["val"])
    report, cache, cost = assess(model, data["val"], data["test"], tau)
    mac_avg = average_macs(cost.mac_full, cost.mac_ee, report.skip_rate)
    res = DeskResult(cfg, data, model, tau, val_acc, report, cache, cost, mac_avg,
                     1.0 - mac_avg / cost.mac_static, timings=timings)
    if not quantize:
        return res
    t0 = time.perf_counter()
    qm = copy.deepcopy(model)
    qm.enable_qat(cfg.qat.bits)
    qlog = Path(log_dir) / "qat_log.csv" if log_dir else None
    train(qm, data["train"], data["val"], train_config(cfg, epochs=cfg.qat.epochs, initial_lr=cfg.qat.initial_lr),
          cfg.loss, log_path=qlog)
    timings["qat_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ex = export_int8(qm)
    # the deployed model picks its own threshold from its own validation scores
    val8 = score_dataset_int8(ex, data["val"], "int")
    tau8, _ = optimize_threshold(val8.p_empty, data["val"].empty_labels())
    ex.header["tau"] = tau8
    test8 = score_dataset_int8(ex, data["test"], "int")
    res.int8_report = report_from_cache(test8, data["test"], qm.head_cfg.num_classes, tau8)
    res.sim_cache = score_dataset_int8(ex, data["test"], "sim")
    res.qat_model, res.export, res.int8_tau, res.int8_cache = qm, ex, tau8, test8
    timings["int8_s"] = time.perf_counter() - t0
    return res


def desk_summary(res: DeskResult) -> dict:
    """JSON-ready numbers of a desk experiment."""
    r = res.report
    out = {"tau": res.tau, "val_ee_accuracy": res.val_accuracy, "map": r.map, "map_no_ee": r.map_no_ee,
           "ee_accuracy": r.ee_accuracy, "ee_fpr": r.ee_fpr, "skip_rate": r.skip_rate,
           "mac_full": res.cost.mac_full, "mac_static": res.cost.mac_static, "mac_ee": res.cost.mac_ee,
           "savings": res.cost.savings, "mac_avg": res.mac_avg, "mac_reduction": res.reduction,
           "timings": res.timings}
    if res.int8_report is not None:
        i8 = res.int8_report
        out["int8"] = {"tau": res.int8_tau, "map": i8.map, "map_no_ee": i8.map_no_ee,
                       "ee_accuracy": i8.ee_accuracy, "skip_rate": i8.skip_rate,
                       "skip_mismatches_vs_sim": int(np.sum((res.int8_cache.p_empty >= res.int8_tau)
                                                            != (res.sim_cache.p_empty >= res.int8_tau)))}
    return out
