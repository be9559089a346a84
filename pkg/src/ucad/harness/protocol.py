"""Train-then-evaluate-all continual protocol and report emission."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..encoder import EncoderConfig, init_encoder
from ..inference import infer, write_heatmap
from ..memory import MemorySpace, build_task_entry, persist
from ..metrics import aupr, auroc, avg_fm
from ..scl import SclConfig
from .synthetic import gen_stream


def thread_count():
    try:
        return max(1, int(os.environ.get("UCAD_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    n = thread_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def encoder_config(cfg):
    return EncoderConfig(
        patch_size=cfg.patch_size,
        embed_dim=cfg.embed_dim,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        tap_layer=cfg.tap_layer,
        seed=cfg.encoder_seed,
    )


def scl_config(cfg):
    return SclConfig(
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )


@dataclass
class TaskEvaluation:
    image_auroc: float
    pixel_aupr: float
    selection_accuracy: float
    results: list = field(repr=False, default_factory=list)


def evaluate_task(images, labels, masks, task_id, encoder, memory, b, sigma, oracle=False):
    """Score one task's test set; image AUROC plus pixel AUPR pooled over all its images."""
    forced = task_id if oracle else None
    results = _map_ordered(lambda img: infer(img, encoder, memory, b, sigma, task=forced), images)
    scores = np.array([r.image_score for r in results])
    maps = np.stack([r.map for r in results])
    return TaskEvaluation(
        image_auroc=auroc(scores, labels),
        pixel_aupr=aupr(maps.ravel(), np.asarray(masks).ravel().astype(int)),
        selection_accuracy=float(np.mean([r.selected_task == task_id for r in results])),
        results=results,
    )


@dataclass
class MetricsReport:
    task_names: list
    image_auroc: list
    pixel_aupr: list
    average_image_auroc: float
    average_pixel_aupr: float
    avg_fm_image_auroc: float | None
    avg_fm_pixel_aupr: float | None
    image_auroc_matrix: list
    pixel_aupr_matrix: list
    selection_accuracy_matrix: list
    task_selection_accuracy: float
    config: dict
    oracle_routing: bool = False
    wall_clock_seconds: float = 0.0
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        return {
            "task_names": self.task_names,
            "image_auroc": self.image_auroc,
            "pixel_aupr": self.pixel_aupr,
            "average_image_auroc": self.average_image_auroc,
            "average_pixel_aupr": self.average_pixel_aupr,
            "avg_fm_image_auroc": self.avg_fm_image_auroc,
            "avg_fm_pixel_aupr": self.avg_fm_pixel_aupr,
            "image_auroc_matrix": self.image_auroc_matrix,
            "pixel_aupr_matrix": self.pixel_aupr_matrix,
            "selection_accuracy_matrix": self.selection_accuracy_matrix,
            "task_selection_accuracy": self.task_selection_accuracy,
            "oracle_routing": self.oracle_routing,
            "config": self.config,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _triangle(matrix):
    return [[matrix[l][j] for j in range(l + 1)] for l in range(len(matrix))]


def summarize(names, img_m, pix_m, sel_m, config, oracle=False, elapsed=0.0):
    """Build a report from lower-triangular matrices (row ``l`` = after task ``l``)."""
    n = len(names)
    final_img = [img_m[n - 1][j] for j in range(n)]
    final_pix = [pix_m[n - 1][j] for j in range(n)]
    final_sel = [sel_m[n - 1][j] for j in range(n)]
    return MetricsReport(
        task_names=list(names),
        image_auroc=final_img,
        pixel_aupr=final_pix,
        average_image_auroc=float(np.mean(final_img)),
        average_pixel_aupr=float(np.mean(final_pix)),
        avg_fm_image_auroc=avg_fm(img_m, n) if n >= 2 else None,
        avg_fm_pixel_aupr=avg_fm(pix_m, n) if n >= 2 else None,
        image_auroc_matrix=_triangle(img_m),
        pixel_aupr_matrix=_triangle(pix_m),
        selection_accuracy_matrix=_triangle(sel_m),
        task_selection_accuracy=float(np.mean(final_sel)),
        config=config,
        oracle_routing=oracle,
        wall_clock_seconds=elapsed,
    )


def run_continual(cfg, oracle_routing=False, stream=None, encoder=None):
    """Train on each task once, in order, re-evaluating every task seen so far after each.

    With ``oracle_routing`` the true task id replaces key-based selection.
    The returned report carries the final memory, encoder and last-row
    results in ``report.artifacts``.
    """
    start = time.perf_counter()
    stream = gen_stream(cfg) if stream is None else stream
    encoder = encoder or init_encoder(encoder_config(cfg))
    scl_cfg = scl_config(cfg)
    n = len(stream)
    grid = encoder.grid_shape(cfg.height, cfg.width)
    budget = cfg.knowledge_multiplier * grid[0] * grid[1]

    memory = MemorySpace.for_encoder(encoder)
    img_m = [[None] * n for _ in range(n)]
    pix_m = [[None] * n for _ in range(n)]
    sel_m = [[None] * n for _ in range(n)]
    traces = []
    last = {}
    for t, task in enumerate(stream):
        images, label_maps = task.train.read()
        entry, trace = build_task_entry(
            t, images, encoder, label_maps, scl_cfg, budget,
            name=task.name, created_step=t, return_trace=True,
        )
        task.train.seal()
        memory.append(entry)
        traces.append(trace)
        for j in range(t + 1):
            past = stream[j]
            ev = evaluate_task(past.test_images, past.test_labels, past.test_masks, j,
                               encoder, memory, cfg.neighbors, cfg.sigma, oracle_routing)
            img_m[t][j] = ev.image_auroc
            pix_m[t][j] = ev.pixel_aupr
            sel_m[t][j] = ev.selection_accuracy
            if t == n - 1:
                last[j] = ev.results

    report = summarize([s.name for s in stream], img_m, pix_m, sel_m, cfg.to_dict(),
                       oracle_routing, time.perf_counter() - start)
    report.artifacts = {"memory": memory, "encoder": encoder, "results": last, "loss_traces": traces}
    return report


def emit(report, out_dir):
    """Write ``report.json``, one heatmap PGM (+ JSON sidecar) per test image and the memory file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    written = {"report": out / "report.json", "heatmaps": []}
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    for task_id, results in sorted(report.artifacts.get("results", {}).items()):
        for i, r in enumerate(results):
            path = heat_dir / f"task{task_id:02d}_{i:03d}.pgm"
            write_heatmap(path, r.map, {"task": task_id, "index": i,
                                        "selected_task": r.selected_task,
                                        "image_score": r.image_score})
            written["heatmaps"].append(path)
    memory = report.artifacts.get("memory")
    if memory is not None:
        persist(memory, out / "memory.ucad")
        written["memory"] = out / "memory.ucad"
    return written
