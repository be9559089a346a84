"""Procedural texture task stream with pixel-annotated anomalies.

Every task is one texture family. An image is a guillotine partition of the
canvas into rectangles, each filled with a variant from the task's palette
(phases and offsets jittered per image). Anomalous test images get either a
square pasted from a foreign family or an additive scratch line.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

FAMILIES = ("stripes", "checker", "blobs", "value_noise", "gradient")

# periods are chosen not to divide the 8-pixel patch so every image shows many phases
DEFAULT_PALETTES = {
    "stripes": [
        {"frequency": 0.15, "angle": 0.0},
        {"frequency": 0.15, "angle": 90.0},
        {"frequency": 0.23, "angle": 45.0},
    ],
    "checker": [
        {"cell": 3, "low": 0.15, "high": 0.85},
        {"cell": 5, "low": 0.3, "high": 0.7},
    ],
    "blobs": [
        {"count": 10, "radius": 3.0, "base": 0.35},
        {"count": 6, "radius": 5.0, "base": 0.35},
    ],
    "value_noise": [
        {"scale": 4.0, "low": 0.7, "high": 1.0},
        {"scale": 6.0, "low": 0.7, "high": 1.0},
    ],
    "gradient": [
        {"angle": 0.0, "low": 0.0, "high": 0.25},
        {"angle": 90.0, "low": 0.0, "high": 0.25},
    ],
}


@dataclass
class TaskSpec:
    family: str
    palette: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown texture family {self.family!r}")
        if not self.palette:
            self.palette = [dict(p) for p in DEFAULT_PALETTES[self.family]]
        if not self.name:
            self.name = self.family


@dataclass
class AnomalySpec:
    kind: str = "mixed"  # "paste", "scratch" or "mixed"
    min_size: int = 14
    max_size: int = 22
    scratch_width: int = 2
    scratch_intensity: float = 0.5

    def __post_init__(self):
        if self.kind not in ("paste", "scratch", "mixed"):
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")


def _default_tasks():
    return [TaskSpec(f) for f in FAMILIES]


@dataclass
class StreamConfig:
    """Synthetic continual benchmark plus the model knobs used to run it."""

    num_tasks: int = 5
    tasks: list = field(default_factory=_default_tasks)
    train_count: int = 20
    test_normal: int = 10
    test_anomalous: int = 10
    height: int = 64
    width: int = 64
    min_regions: int = 2
    max_regions: int = 4
    noise: float = 0.01
    anomaly: AnomalySpec = field(default_factory=AnomalySpec)
    knowledge_multiplier: int = 1
    tap_layer: int = 3
    seed: int = 42
    # model
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    encoder_seed: int = 0
    epochs: int = 25
    batch_size: int = 8
    learning_rate: float = 0.0005
    momentum: float = 0.9
    neighbors: int = 3
    sigma: float = 4.0

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]
        if isinstance(self.anomaly, dict):
            self.anomaly = AnomalySpec(**self.anomaly)
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        if len(self.tasks) < self.num_tasks:
            raise ValueError(f"{self.num_tasks} tasks requested but only {len(self.tasks)} specified")
        self.tasks = self.tasks[: self.num_tasks]
        fams = [t.family for t in self.tasks]
        if len(set(fams)) != len(fams):
            raise ValueError("texture families must be distinct across tasks")
        if min(self.train_count, self.test_normal, self.test_anomalous) < 1:
            raise ValueError("sample counts must be >= 1")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image size must be divisible by patch_size")
        if self.knowledge_multiplier < 1:
            raise ValueError("knowledge_multiplier must be >= 1")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError("need 1 <= min_regions <= max_regions")
        if self.anomaly.max_size > min(self.height, self.width):
            raise ValueError("anomaly larger than the image")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneSpec:
    """Everything needed to render one image deterministically."""

    height: int
    width: int
    family: str
    rects: list  # (top, left, bottom, right) per region, a partition of the canvas
    region_params: list  # jittered palette entry + per-region render seed
    noise_seed: int
    noise: float
    anomaly: dict | None = None

    @property
    def regions(self):
        out = np.zeros((self.height, self.width), dtype=np.int64)
        for i, (t, l, b, r) in enumerate(self.rects):
            out[t:b, l:r] = i
        return out

    @property
    def is_anomalous(self):
        return self.anomaly is not None


def _coords(h, w):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def render_texture(family, params, h, w, rng):
    y, x = _coords(h, w)
    if family == "stripes":
        a = np.deg2rad(params["angle"])
        phase = params.get("phase", 0.0)
        v = 0.5 + 0.4 * np.sin(2 * np.pi * params["frequency"] * (x * np.cos(a) + y * np.sin(a)) + phase)
    elif family == "checker":
        c = params["cell"]
        ox, oy = params.get("offset", (0, 0))
        parity = ((x + ox) // c + (y + oy) // c) % 2
        v = np.where(parity > 0, params["high"], params["low"])
    elif family == "blobs":
        v = np.full((h, w), params["base"])
        for _ in range(params["count"]):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            v = v + 0.5 * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * params["radius"] ** 2))
    elif family == "value_noise":
        s = params["scale"]
        gh, gw = int(np.ceil(h / s)) + 2, int(np.ceil(w / s)) + 2
        lattice = rng.uniform(params["low"], params["high"], size=(gh, gw))
        fy, fx = y / s, x / s
        y0, x0 = np.floor(fy).astype(int), np.floor(fx).astype(int)
        ty, tx = fy - y0, fx - x0
        ty, tx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
        top = lattice[y0, x0] * (1 - tx) + lattice[y0, x0 + 1] * tx
        bot = lattice[y0 + 1, x0] * (1 - tx) + lattice[y0 + 1, x0 + 1] * tx
        v = top * (1 - ty) + bot * ty
    elif family == "gradient":
        a = np.deg2rad(params["angle"])
        proj = x * np.cos(a) + y * np.sin(a)
        proj = (proj - proj.min()) / max(np.ptp(proj), 1e-9)
        v = params["low"] + (params["high"] - params["low"]) * proj
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return np.clip(v, 0.0, 1.0)


def _jitter(family, params, rng):
    p = dict(params)
    if family == "stripes":
        p["phase"] = float(rng.uniform(0, 2 * np.pi))
        p["frequency"] = float(params["frequency"] * rng.uniform(0.95, 1.05))
    elif family == "checker":
        c = params["cell"]
        p["offset"] = [int(rng.integers(0, 2 * c)), int(rng.integers(0, 2 * c))]
    return p


def _partition(h, w, n, rng, min_side=16, align=1):
    rects = [(0, 0, h, w)]
    while len(rects) < n:
        rects.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        t, l, b, r = rects[0]
        horizontal = (b - t) >= (r - l)
        span = (b - t) if horizontal else (r - l)
        if span < 2 * min_side:
            break
        cut = int(rng.integers(min_side // align, (span - min_side) // align + 1)) * align
        rects.pop(0)
        if horizontal:
            rects += [(t, l, t + cut, r), (t + cut, l, b, r)]
        else:
            rects += [(t, l, b, l + cut), (t, l + cut, b, r)]
    rects.sort()
    return rects


def make_scene(cfg, task, rng, anomalous):
    h, w = cfg.height, cfg.width
    n = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    rects = _partition(h, w, n, rng, min_side=2 * cfg.patch_size, align=cfg.patch_size)
    offset = int(rng.integers(0, len(task.palette)))
    region_params = []
    for i in range(len(rects)):
        base = task.palette[(i + offset) % len(task.palette)]
        p = _jitter(task.family, base, rng)
        p["seed"] = int(rng.integers(0, 2**31))
        region_params.append(p)
    anomaly = None
    if anomalous:
        kind = cfg.anomaly.kind
        if kind == "mixed":
            kind = "paste" if rng.random() < 0.5 else "scratch"
        size = int(rng.integers(cfg.anomaly.min_size, cfg.anomaly.max_size + 1))
        if kind == "paste":
            foreign = [f for f in FAMILIES if f != task.family]
            fam = foreign[int(rng.integers(0, len(foreign)))]
            base = DEFAULT_PALETTES[fam][int(rng.integers(0, len(DEFAULT_PALETTES[fam])))]
            fp = _jitter(fam, base, rng)
            fp["seed"] = int(rng.integers(0, 2**31))
            anomaly = {
                "kind": "paste",
                "family": fam,
                "params": fp,
                "top": int(rng.integers(0, h - size + 1)),
                "left": int(rng.integers(0, w - size + 1)),
                "size": size,
            }
        else:
            cy, cx = rng.uniform(size / 2, h - size / 2), rng.uniform(size / 2, w - size / 2)
            angle = float(rng.uniform(0, np.pi))
            anomaly = {
                "kind": "scratch",
                "center": [float(cy), float(cx)],
                "angle": angle,
                "length": float(size),
                "width": cfg.anomaly.scratch_width,
                "intensity": cfg.anomaly.scratch_intensity,
            }
    return SceneSpec(h, w, task.family, rects, region_params,
                     int(rng.integers(0, 2**31)), cfg.noise, anomaly)


def anomaly_mask(scene):
    h, w = scene.height, scene.width
    mask = np.zeros((h, w), dtype=bool)
    a = scene.anomaly
    if a is None:
        return mask
    if a["kind"] == "paste":
        mask[a["top"]:a["top"] + a["size"], a["left"]:a["left"] + a["size"]] = True
    else:
        y, x = _coords(h, w)
        cy, cx = a["center"]
        dy, dx = np.sin(a["angle"]), np.cos(a["angle"])
        along = (y - cy) * dy + (x - cx) * dx
        across = -(y - cy) * dx + (x - cx) * dy
        mask = (np.abs(along) <= a["length"] / 2) & (np.abs(across) <= a["width"] / 2)
    return mask


def render_scene(scene):
    """Pixels in [0, 1], quantized to 8 bits so PGM round trips are exact."""
    h, w = scene.height, scene.width
    img = np.zeros((h, w))
    for (t, l, b, r), p in zip(scene.rects, scene.region_params):
        tex = render_texture(scene.family, p, h, w, np.random.default_rng(p["seed"]))
        img[t:b, l:r] = tex[t:b, l:r]
    a = scene.anomaly
    if a is not None:
        mask = anomaly_mask(scene)
        if a["kind"] == "paste":
            tex = render_texture(a["family"], a["params"], h, w, np.random.default_rng(a["params"]["seed"]))
            img[mask] = tex[mask]
        else:
            img[mask] = img[mask] + a["intensity"]
    if scene.noise > 0:
        img = img + np.random.default_rng(scene.noise_seed).normal(0, scene.noise, size=(h, w))
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


class RehearsalError(RuntimeError):
    """A training set was read after its task finished."""


class TrainSet:
    """Training images of one task; readable until sealed."""

    def __init__(self, images, label_maps):
        self._images = images
        self._label_maps = label_maps
        self.sealed = False
        self.reads = 0

    def __len__(self):
        return len(self._images)

    def read(self):
        if self.sealed:
            raise RehearsalError("training data of a finished task cannot be revisited")
        self.reads += 1
        return self._images, self._label_maps

    def seal(self):
        self.sealed = True


@dataclass
class TaskData:
    task_id: int
    name: str
    family: str
    train: TrainSet
    test_images: np.ndarray = field(repr=False)
    test_labels: np.ndarray = field(repr=False)
    test_masks: np.ndarray = field(repr=False)
    test_label_maps: np.ndarray = field(repr=False)


def gen_stream(cfg):
    """Generate every task's train/test split deterministically from ``cfg.seed``."""
    from ..segmenter import segment_synthetic

    root = np.random.SeedSequence(cfg.seed)
    out = []
    for t, (task, ss) in enumerate(zip(cfg.tasks, root.spawn(cfg.num_tasks))):
        rng = np.random.default_rng(ss)
        train_scenes = [make_scene(cfg, task, rng, False) for _ in range(cfg.train_count)]
        test_scenes = [make_scene(cfg, task, rng, False) for _ in range(cfg.test_normal)]
        test_scenes += [make_scene(cfg, task, rng, True) for _ in range(cfg.test_anomalous)]
        train = TrainSet(
            np.stack([render_scene(s) for s in train_scenes]),
            np.stack([segment_synthetic(s) for s in train_scenes]),
        )
        out.append(TaskData(
            task_id=t,
            name=task.name,
            family=task.family,
            train=train,
            test_images=np.stack([render_scene(s) for s in test_scenes]),
            test_labels=np.array([int(s.is_anomalous) for s in test_scenes]),
            test_masks=np.stack([anomaly_mask(s) for s in test_scenes]),
            test_label_maps=np.stack([segment_synthetic(s) for s in test_scenes]),
        ))
    return out


def two_region_batch(left="value_noise", right="gradient", n=10, size=64, patch_size=8,
                     noise=0.01, seed=0):
    """Images split at a random patch-aligned column into two texture families.

    Returns ``(images, label_maps)`` with label 0 on the left and 1 on the right.
    """
    if left == right:
        raise ValueError("the two regions need different families")
    rng = np.random.default_rng(seed)
    images, maps = [], []
    for _ in range(n):
        cut = patch_size * int(rng.integers(2, size // patch_size - 1))
        a = render_texture(left, DEFAULT_PALETTES[left][0], size, size, rng)
        b = render_texture(right, DEFAULT_PALETTES[right][0], size, size, rng)
        labels = np.zeros((size, size), dtype=np.int64)
        labels[:, cut:] = 1
        img = np.where(labels == 0, a, b) + rng.normal(0, noise, size=(size, size))
        images.append(np.round(np.clip(img, 0.0, 1.0) * 255) / 255)
        maps.append(labels)
    return np.stack(images), np.stack(maps)
