"""Desk-scale end-to-end run: train, gate, quantize, export, report.

    python scripts/desk_experiment.py --out runs/desk [--config cfg.json] [--epochs N]
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from eedet.config import RunConfig, load_config
from eedet.pipeline import desk_experiment, desk_summary
from eedet.io import save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, help="override the float training epochs")
    ap.add_argument("--no-quant", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.epochs:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        res = desk_experiment(cfg, quantize=not args.no_quant, log_dir=out)
    save_checkpoint(out / "model.ckpt", res.model, {"tau_star": res.tau})
    if res.export is not None:
        save_checkpoint(out / "qat.ckpt", res.qat_model, {"tau_star": res.int8_tau})
        res.export.save(out / "model.int8")
    summary = {"config": cfg.to_dict(), "results": desk_summary(res)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print(json.dumps(summary["results"], indent=2, default=float))


if __name__ == "__main__":
    main()
