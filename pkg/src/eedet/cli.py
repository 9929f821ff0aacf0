"""Command-line entry point: ``eedet <command> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 acceptance-check failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as C
from .cost import average_macs, count_macs, estimate_latency, gated_latency, LatencyModel
from .data import load_split, save_split
from .gate import best_operating_point, threshold_sweep, write_sweep_csv, score_dataset
from .io import load_checkpoint, save_checkpoint, sha256_file
from .metrics import report_from_cache
from .pipeline import build_from_config, make_datasets, select_threshold, train_config
from .train import train

log = logging.getLogger("eedet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers

def _dir_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _input_digest(path) -> str:
    p = Path(path)
    return _dir_digest(p) if p.is_dir() else sha256_file(p)


def provenance(cfg, inputs: dict) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.digest(),
            "inputs": {k: {"path": str(v), "sha256": _input_digest(v)} for k, v in inputs.items()}}


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _out_dir(args, cfg, name=None) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args, cfg, splits=("train", "val", "test")):
    root = Path(args.data or cfg.data.root)
    if not (root / "manifest.json").exists():
        raise UsageError(f"no dataset at {root} (run gen-data first)")
    return root, {s: load_split(root, s) for s in splits}


def _ckpt(args):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    if not Path(args.ckpt).exists():
        raise UsageError(f"checkpoint {args.ckpt} not found")
    return load_checkpoint(args.ckpt)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg):
    out = Path(args.out or cfg.data.root)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force)")
    tmp = Path(tempfile.mkdtemp(prefix=".gen-", dir=out.parent if out.parent.exists() else None))
    try:
        data = make_datasets(cfg)
        manifest = {"seed": cfg.seed, "splits": {}}
        for split, ds in data.items():
            save_split(ds, tmp, split)
            n_empty = int(ds.empty_labels().sum())
            manifest["splits"][split] = {"count": len(ds), "empty": n_empty,
                                         "empty_fraction": n_empty / max(len(ds), 1)}
        manifest["scene"] = C._jsonable(asdict(cfg.data.scene))
        _write_json(tmp / "manifest.json", manifest)
        if out.exists():
            shutil.rmtree(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(json.dumps(manifest["splits"]))


def _train_common(args, cfg, model, data_root, data, tcfg, weights, stem, extra_state):
    out = _out_dir(args, cfg)
    last = out / f"{stem}.last.ckpt"
    start, optim = 0, None
    if args.resume:
        if not last.exists():
            raise UsageError(f"--resume: no {last} to resume from")
        model, header, optim = load_checkpoint(last)
        start = int(header["state"]["epoch"])
        log.info("resuming at epoch %d", start)

    def on_epoch_end(epoch, m, opt):
        save_checkpoint(last, m, {"epoch": epoch, "seed": cfg.seed, **extra_state}, opt)

    res = train(model, data["train"], data["val"], tcfg, weights, log_path=out / f"{stem}_log.csv",
                start_epoch=start, optimizer_state=optim, on_epoch_end=on_epoch_end)
    state = {"epoch": tcfg.epochs, "seed": cfg.seed, **extra_state}
    if model.branch is not None:
        tau, acc = select_threshold(model, data["val"])
        state.update(tau_star=tau, val_ee_accuracy=acc)
    ckpt = out / f"{stem}.ckpt"
    save_checkpoint(ckpt, model, state)
    _write_json(out / f"{stem}_run.json", {"state": state, "epochs_run": res.epochs_run,
                                           "provenance": provenance(cfg, {"data": data_root})})
    print(json.dumps({"checkpoint": str(ckpt), **state}))


def cmd_train(args, cfg):
    if args.ee == "none":
        cfg = replace(cfg, ee=None)
    root, data = _load_data(args, cfg, ("train", "val"))
    model = build_from_config(cfg)
    weights = cfg.loss if model.branch is not None else replace(cfg.loss, lam=0.0)
    _train_common(args, cfg, model, root, data, train_config(cfg), weights, "model", {"qat": False})


def cmd_qat(args, cfg):
    if not args.source:
        raise UsageError("qat requires --from <float checkpoint>")
    if not Path(args.source).exists():
        raise UsageError(f"checkpoint {args.source} not found")
    model, header, _ = load_checkpoint(args.source)
    if header.get("qat"):
        raise UsageError("--from must be a float checkpoint")
    root, data = _load_data(args, cfg, ("train", "val"))
    if cfg.qat.bits < 32:
        model.enable_qat(cfg.qat.bits)
    tcfg = train_config(cfg, epochs=cfg.qat.epochs, initial_lr=cfg.qat.initial_lr)
    _train_common(args, cfg, model, root, data, tcfg, cfg.loss, "qat",
                  {"qat": cfg.qat.bits < 32, "bits": cfg.qat.bits, "from": str(args.source)})


def _resolve_tau(args, header, model):
    if model.branch is None:
        return None
    if args.tau is not None:
        if args.tau == "none":
            return None
        return float(args.tau)
    tau = header.get("state", {}).get("tau_star")
    if tau is None:
        raise UsageError("gated evaluation needs --tau or a checkpoint with a stored tau*")
    return tau


def cmd_eval(args, cfg):
    model, header, _ = _ckpt(args)
    root, data = _load_data(args, cfg, ("test",))
    tau = _resolve_tau(args, header, model)
    cache = score_dataset(model, data["test"])
    rep = report_from_cache(cache, data["test"], model.head_cfg.num_classes, tau)
    rep.metadata.update(model_sha256=sha256_file(args.ckpt), dataset_sha256=_dir_digest(root), tau=tau)
    out = _out_dir(args, cfg)
    body = {"report": rep.to_dict(), "provenance": provenance(cfg, {"checkpoint": args.ckpt, "data": root})}
    _write_json(out / "eval.json", body)
    print(json.dumps({"map": rep.map, "map_no_ee": rep.map_no_ee, "tau": tau,
                      "ee_accuracy": rep.ee_accuracy, "skip_rate": rep.skip_rate}))


def cmd_sweep(args, cfg):
    model, header, _ = _ckpt(args)
    if model.branch is None:
        raise UsageError("sweep needs a model with an early-exit branch")
    root, data = _load_data(args, cfg, ("test",))
    try:
        points = threshold_sweep(model, data["test"], cfg.sweep.taus)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out_dir(args, cfg)
    write_sweep_csv(points, out / "sweep.csv")
    cost = count_macs(model)
    base = args.map_baseline if args.map_baseline is not None else cfg.sweep.map_baseline
    if base is None:
        base = report_from_cache(score_dataset(model, data["test"]), data["test"], model.head_cfg.num_classes).map
    j, star = best_operating_point(points, base, cost.savings)
    _write_json(out / "sweep.json", {"points": [asdict(p) for p in points], "map_baseline": base,
                                     "star": {**asdict(star), "J": j},
                                     "provenance": provenance(cfg, {"checkpoint": args.ckpt, "data": root})})
    print(json.dumps({"rows": len(points), "star_tau": star.tau, "J": j}))


def cmd_hpo(args, cfg):
    from .model import BackboneConfig
    from .pipeline import hpo_evaluator
    from .tpe import SearchSpace, default_space, run_study, stub_objective
    stage = args.stage if args.stage is not None else cfg.hpo.stage
    if not 1 <= stage <= 5:
        raise UsageError("--stage must be 1..5")
    layers = cfg.backbone.layers_of_stage(stage)
    space = SearchSpace.from_dict(cfg.hpo.space) if cfg.hpo.space else default_space(layers)
    if args.stage is not None or not cfg.hpo.space:
        space.dims["layer"] = type(space.dims["layer"])(tuple(layers))
    n = args.trials if args.trials is not None else cfg.hpo.n_trials
    out = _out_dir(args, cfg)
    study = out / "study.jsonl"
    if study.exists() and not (args.resume or args.force):
        raise UsageError(f"{study} exists (use --resume or --force)")
    if study.exists() and args.force and not args.resume:
        study.unlink()
    if args.evaluator == "stub":
        evaluator, inputs = stub_objective, {}
    else:
        root, data = _load_data(args, cfg, ("train", "val"))
        evaluator, inputs = hpo_evaluator(cfg, data), {"data": root}
    _write_json(out / "study_config.json", {"seed": cfg.seed, "space": space.to_dict(), "n_trials": n,
                                            "stage": stage, "evaluator": args.evaluator})
    best, history = run_study(space, n, evaluator, seed=cfg.seed, path=study)
    if best is None:
        raise RuntimeError("every trial failed")
    a = best.assignment
    best_cfg = replace(cfg, ee=replace(cfg.ee or C.EEBranchConfig(), attach_layer=int(a["layer"])),
                       train=replace(cfg.train, batch_size=int(a["batch_size"]), branch_lr=float(a["branch_lr"])),
                       loss=replace(cfg.loss, lam=float(a["lam"]), w1=float(a["w1"])))
    _write_json(out / "best.json", {"trial": asdict(best), "provenance": provenance(cfg, inputs)})
    (out / "best_config.json").write_text(best_cfg.to_json())
    print(json.dumps({"trials": len(history), "best": best.number, "J": best.J, "assignment": a}))


def cmd_export(args, cfg):
    from .quant.export import OverflowBoundError, export_int8
    model, header, _ = _ckpt(args)
    if not header.get("qat"):
        raise UsageError("export needs a QAT checkpoint (run qat first)")
    try:
        ex = export_int8(model, tau=header.get("state", {}).get("tau_star"))
    except OverflowBoundError as e:
        raise RuntimeError(f"export blocked: {e}") from e
    ex.header["provenance"] = provenance(cfg, {"checkpoint": args.ckpt})
    out = _out_dir(args, cfg)
    ex.save(out / "model.int8")
    print(json.dumps({"export": str(out / "model.int8"), "ops": len(ex.ops),
                      "max_worst_acc": max(op.get("worst_acc", 0) for op in ex.ops)}))


def cmd_run_int8(args, cfg):
    from .quant.export import load_export, score_dataset_int8
    if not args.export or not Path(args.export).exists():
        raise UsageError("--export <model.int8> is required")
    ex = load_export(args.export)
    root, data = _load_data(args, cfg, ("test",))
    test = data["test"]
    tau = float(args.tau) if args.tau not in (None, "none") else ex.header.get("tau")
    k = ex.header["config"]["heads"]["num_classes"]
    cache = score_dataset_int8(ex, test, "int")
    rep = report_from_cache(cache, test, k, tau)
    model = _model_for_costs(ex)
    cost = count_macs(model)
    lat = LatencyModel(cfg.latency.efficiency, cfg.latency.clock_hz)
    body = {"report": rep.to_dict(), "cost": cost.to_dict(), "provenance": provenance(cfg, {"export": args.export,
                                                                                             "data": root})}
    if tau is not None and cost.mac_ee is not None:
        mac_avg = average_macs(cost.mac_full, cost.mac_ee, rep.skip_rate)
        mean_lat, fps = gated_latency(cost.mac_full, cost.mac_ee, rep.skip_rate, lat)
        body["latency"] = {"mac_avg": mac_avg, "mean_latency_s": mean_lat, "fps": fps,
                           "full_latency_s": estimate_latency(cost.mac_full, lat)[0],
                           "ee_latency_s": estimate_latency(cost.mac_ee, lat)[0]}
    else:
        sec, fps = estimate_latency(cost.mac_full, lat)
        body["latency"] = {"mac_avg": cost.mac_full, "mean_latency_s": sec, "fps": fps}
    mismatches = None
    if args.check_sim and tau is not None:
        sim = score_dataset_int8(ex, test, "sim")
        mismatches = int(np.sum((cache.p_empty >= tau) != (sim.p_empty >= tau)))
        body["sim_check"] = {"skip_mismatches": mismatches, "images": len(test)}
    out = _out_dir(args, cfg)
    _write_json(out / "int8_report.json", body)
    print(json.dumps({"map": rep.map, "map_no_ee": rep.map_no_ee, "skip_rate": rep.skip_rate,
                      **body["latency"], "skip_mismatches": mismatches}))
    if mismatches:
        raise CheckFailed(f"{mismatches} skip decisions differ from the fake-quant simulation")


def _model_for_costs(ex):
    from .io import model_from_config
    return model_from_config(ex.header["config"])


def cmd_report(args, cfg):
    out = _out_dir(args, cfg)
    body = {"provenance": provenance(cfg, {"checkpoint": args.ckpt} if args.ckpt else {})}
    if args.ckpt:
        model, header, _ = _ckpt(args)
        cost = count_macs(model)
        cost.to_json(out / "cost.json")
        cost.to_csv(out / "cost.csv")
        lat = LatencyModel(cfg.latency.efficiency, cfg.latency.clock_hz)
        body["cost"] = {"mac_full": cost.mac_full, "mac_static": cost.mac_static, "mac_ee": cost.mac_ee,
                        "savings": cost.savings, "params": cost.params_total, "flags": cost.flags,
                        "latency_full_s": estimate_latency(cost.mac_full, lat)[0]}
    failures = []
    if args.reference_check:
        from .reference import reference_checks
        checks = reference_checks()
        body["reference_checks"] = checks
        failures = [c["name"] for c in checks if not c["passed"]]
    _write_json(out / "report.json", body)
    print(json.dumps({k: v for k, v in body.items() if k != "provenance"}, default=_json_default))
    if failures:
        raise CheckFailed(f"reference checks failed: {failures}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "qat": cmd_qat, "eval": cmd_eval,
            "sweep": cmd_sweep, "hpo": cmd_hpo, "export": cmd_export, "run-int8": cmd_run_int8,
            "report": cmd_report}


def build_parser():
    p = _Parser(prog="eedet", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--single-thread", action="store_true", help="deterministic single-threaded BLAS")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--resume", action="store_true", help="resume an interrupted run")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--ckpt", help="checkpoint path")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--ee", choices=["config", "none"], default="config")
        if name == "qat":
            sp.add_argument("--from", dest="source", help="float checkpoint to fine-tune")
        if name in ("eval", "run-int8"):
            sp.add_argument("--tau", help="threshold, or 'none' to disable gating")
        if name == "run-int8":
            sp.add_argument("--export", help="int8 container")
            sp.add_argument("--check-sim", action="store_true",
                            help="exit 3 unless skip decisions match the fake-quant simulation")
        if name == "sweep":
            sp.add_argument("--map-baseline", type=float)
        if name == "hpo":
            sp.add_argument("--stage", type=int)
            sp.add_argument("--trials", type=int)
            sp.add_argument("--evaluator", choices=["pipeline", "stub"], default="pipeline")
        if name == "report":
            sp.add_argument("--reference-check", action="store_true",
                            help="exit 3 unless the cost/latency reference rows reproduce")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = C.load_config(args.config) if args.config else C.RunConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        ctx = contextlib.nullcontext()
        if args.single_thread:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=1)
        with ctx:
            COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except (UsageError, C.ConfigError) as e:
        print(f"eedet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckFailed as e:
        print(f"eedet: check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except Exception as e:  # runtime failures propagate as exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"eedet: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
