"""Command line entry point: ``ucad {gen-data,train,eval,infer}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..encoder import EncoderConfig, init_encoder
from ..inference import DEFAULT_NEIGHBORS, DEFAULT_SIGMA, infer, write_heatmap
from ..memory import load, persist
from .dataset import read_image_pgm, read_test_sets, write_stream
from .protocol import evaluate_task, run_continual
from .synthetic import StreamConfig, gen_stream


def _config(path):
    return StreamConfig.from_dict(json.loads(Path(path).read_text()))


def _load_memory(path):
    mem = load(path)
    if mem.encoder_config is None:
        raise SystemExit(f"{path}: missing JSON sidecar with encoder settings")
    encoder = init_encoder(EncoderConfig.from_dict(mem.encoder_config))
    mem.check_encoder(encoder)
    return mem, encoder


def cmd_gen_data(args):
    cfg = _config(args.config)
    manifest = write_stream(gen_stream(cfg), args.out, cfg.to_dict())
    print(f"wrote {manifest}")


def cmd_train(args):
    cfg = _config(args.config)
    report = run_continual(cfg, oracle_routing=args.oracle_routing)
    size = persist(report.artifacts["memory"], args.out)
    Path(args.report).write_text(report.to_json())
    print(f"memory {args.out} ({size} bytes); average image AUROC {report.average_image_auroc:.4f}")


def cmd_eval(args):
    start = time.perf_counter()
    mem, encoder = _load_memory(args.memory)
    rows = []
    for j, (name, images, labels, masks) in enumerate(read_test_sets(args.data)):
        ev = evaluate_task(images, labels, masks, j, encoder, mem, args.neighbors, args.sigma)
        rows.append({"task_id": j, "name": name, "image_auroc": ev.image_auroc,
                     "pixel_aupr": ev.pixel_aupr, "selection_accuracy": ev.selection_accuracy})
    report = {
        "tasks": rows,
        "average_image_auroc": float(np.mean([r["image_auroc"] for r in rows])),
        "average_pixel_aupr": float(np.mean([r["pixel_aupr"] for r in rows])),
        "task_selection_accuracy": float(np.mean([r["selection_accuracy"] for r in rows])),
        "wall_clock_seconds": time.perf_counter() - start,
    }
    Path(args.report).write_text(json.dumps(report, indent=2))
    print(f"average image AUROC {report['average_image_auroc']:.4f}")


def cmd_infer(args):
    mem, encoder = _load_memory(args.memory)
    res = infer(read_image_pgm(args.image), encoder, mem, args.neighbors, args.sigma)
    write_heatmap(args.out, res.map, {"selected_task": res.selected_task,
                                      "image_score": res.image_score})
    print(f"task {res.selected_task}, score {res.image_score:.6f}")


def build_parser():
    p = argparse.ArgumentParser(prog="ucad", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic stream as PGM files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the continual protocol and save the memory")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--report", required=True)
    t.add_argument("--oracle-routing", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a generated data directory"),
                                 ("infer", cmd_infer, "write the anomaly heatmap of one image")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--memory", required=True)
        s.add_argument("--neighbors", type=int, default=DEFAULT_NEIGHBORS)
        s.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
        s.set_defaults(func=func)
        if name == "eval":
            s.add_argument("--data", required=True)
            s.add_argument("--report", required=True)
        else:
            s.add_argument("--image", required=True)
            s.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
