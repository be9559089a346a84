"""On-disk layout for generated streams: PGM images plus a JSON manifest.

::

    out/manifest.json
    out/task00/train/000.pgm        8-bit image
    out/task00/train/000_labels.pgm structure labels (gray value = label)
    out/task00/test/000.pgm
    out/task00/test/000_mask.pgm    anomaly mask (255 = anomalous pixel)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..segmenter import read_label_pgm, write_label_pgm


def write_image_pgm(path, image):
    """Write a [0, 1] grayscale image as 8-bit binary PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError("PGM export handles single-channel images only")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


def read_image_pgm(path):
    """Read an 8-bit PGM into float64 values in [0, 1]."""
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_stream(stream, out_dir, config=None):
    """Write every task's train and test split; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for task in stream:
        base = out / f"task{task.task_id:02d}"
        (base / "train").mkdir(parents=True, exist_ok=True)
        (base / "test").mkdir(parents=True, exist_ok=True)
        images, label_maps = task.train.read()
        for i, (img, lab) in enumerate(zip(images, label_maps)):
            write_image_pgm(base / "train" / f"{i:03d}.pgm", img)
            write_label_pgm(base / "train" / f"{i:03d}_labels.pgm", lab)
        for i, (img, mask) in enumerate(zip(task.test_images, task.test_masks)):
            write_image_pgm(base / "test" / f"{i:03d}.pgm", img)
            write_label_pgm(base / "test" / f"{i:03d}_mask.pgm", mask.astype(np.uint8) * 255)
        tasks.append({
            "task_id": task.task_id,
            "name": task.name,
            "family": task.family,
            "train_count": len(images),
            "test_labels": [int(v) for v in task.test_labels],
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"config": config, "tasks": tasks}, indent=2))
    return manifest


def read_test_sets(data_dir):
    """Load each task's test split as ``(name, images, labels, masks)``."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for t in manifest["tasks"]:
        base = root / f"task{t['task_id']:02d}" / "test"
        n = len(t["test_labels"])
        images = np.stack([read_image_pgm(base / f"{i:03d}.pgm") for i in range(n)])
        masks = np.stack([read_label_pgm(base / f"{i:03d}_mask.pgm") > 127 for i in range(n)])
        out.append((t["name"], images, np.array(t["test_labels"]), masks))
    return out


def read_train_set(data_dir, task_id):
    """Load one task's training images and label maps."""
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    t = manifest["tasks"][task_id]
    base = root / f"task{task_id:02d}" / "train"
    n = t["train_count"]
    images = np.stack([read_image_pgm(base / f"{i:03d}.pgm") for i in range(n)])
    labels = np.stack([read_label_pgm(base / f"{i:03d}_labels.pgm") for i in range(n)])
    return images, labels
