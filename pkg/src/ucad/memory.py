"""Key / prompt / knowledge memory.

Each task contributes one immutable :class:`TaskEntry`:

* ``key``: ``N_p`` rows chosen by farthest point sampling from the
  prompt-free patch features of every training image,
* ``prompts``: the task's contrastively trained :class:`PromptSet`,
* ``knowledge``: a greedy k-center coreset of the prompted patch features.

The binary file layout (little-endian)::

    b"UCADMEM1" | u32 version | u32 n_tasks
    per task: u32 task_id | u32 key_rows | u32 C | f32[key_rows*C]
              u32 prompt_rows | u32 prompt_width | f32[prompt_rows*prompt_width]
              u32 knowledge_rows | f32[knowledge_rows*C]
    u64 FNV-1a of all preceding bytes

Encoder fingerprint, prompt mode and task names go in a JSON sidecar
(``<path>.json``) so the binary layout stays fixed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .encoder import PromptSet
from .scl import SclConfig, train_prompts
from .segmenter import downsample_labels, segment_flood

MAGIC = b"UCADMEM1"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class MemoryFormatError(ValueError):
    pass


@numba.njit(cache=True)
def _fnv1a_kernel(arr):
    h = np.uint64(_FNV_OFFSET)
    prime = np.uint64(_FNV_PRIME)
    for b in arr:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a_64(data):
    """64-bit FNV-1a hash of a bytes-like object."""
    return int(_fnv1a_kernel(np.frombuffer(data, dtype=np.uint8)))


def _row_distances(points, x):
    return np.sqrt(((points - x) ** 2).sum(axis=1))


def fps_select(points, k):
    """Farthest point sampling.

    Starts at index 0 and repeatedly takes the point whose distance to the
    current selection is largest, breaking ties by smallest index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    selected = [0]
    min_dist = _row_distances(pts, pts[0])
    taken = np.zeros(n, dtype=bool)
    taken[0] = True
    for _ in range(k - 1):
        cand = np.where(taken, -np.inf, min_dist)
        nxt = int(np.argmax(cand))
        selected.append(nxt)
        taken[nxt] = True
        min_dist = np.minimum(min_dist, _row_distances(pts, pts[nxt]))
    return selected


def coreset_select(points, k):
    """Greedy k-center coreset: approximately minimizes the max point-to-subset distance.

    The greedy rule is the farthest-point rule, which is a 2-approximation of
    the optimal covering radius.
    """
    return fps_select(points, k)


def coverage_radius(points, indices):
    """Largest distance from any point to its nearest selected point."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    sel = pts[list(indices)]
    d = np.sqrt(((pts[:, None, :] - sel[None, :, :]) ** 2).sum(axis=-1))
    return float(d.min(axis=1).max())


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TaskEntry:
    task_id: int
    key: np.ndarray = field(repr=False)
    prompts: PromptSet = field(repr=False)
    knowledge: np.ndarray = field(repr=False)
    knowledge_budget: int = 0
    name: str = ""
    created_step: int = 0

    def __post_init__(self):
        key = _frozen(self.key)
        knowledge = _frozen(self.knowledge)
        if key.ndim != 2 or knowledge.ndim != 2 or key.shape[1] != knowledge.shape[1]:
            raise ValueError("key and knowledge must be 2-D with the same feature width")
        if not (np.all(np.isfinite(key)) and np.all(np.isfinite(knowledge))):
            raise ValueError("task entry contains non-finite values")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "knowledge", knowledge)


@dataclass
class MemorySpace:
    """Append-only list of task entries built with one encoder."""

    entries: list = field(default_factory=list)
    fingerprint: int = 0
    version: int = FORMAT_VERSION
    encoder_config: dict | None = None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def append(self, entry):
        if entry.task_id != len(self.entries):
            raise ValueError(f"expected task_id {len(self.entries)}, got {entry.task_id}")
        self.entries.append(entry)
        return entry

    @classmethod
    def for_encoder(cls, encoder):
        return cls(fingerprint=encoder.fingerprint(), encoder_config=encoder.config.to_dict())

    def check_encoder(self, encoder):
        if self.fingerprint != encoder.fingerprint():
            raise MemoryFormatError(
                f"encoder fingerprint mismatch: memory {self.fingerprint:#018x}, "
                f"encoder {encoder.fingerprint():#018x}"
            )


def _label_grids(images, encoder, segmenter):
    grid = encoder.grid_shape(images.shape[1], images.shape[2])
    if segmenter is None:
        maps = [segment_flood(img) for img in images]
    elif callable(segmenter):
        maps = [segmenter(img) for img in images]
    else:
        maps = list(segmenter)
        if len(maps) != len(images):
            raise ValueError("need one label map per training image")
    return np.stack([downsample_labels(m, *grid) for m in maps])


def build_task_entry(task_id, images, encoder, segmenter=None, scl_cfg=None,
                     knowledge_budget=None, name="", created_step=0, return_trace=False):
    """Build the key/prompt/knowledge triple for one task.

    Parameters
    ----------
    images : array of shape (N_I, H, W[, Cin])
        The task's normal training images.
    segmenter : callable, sequence of label maps, or None
        Structure labels for the contrastive loss. ``None`` falls back to
        quantized flood fill.
    knowledge_budget : int, optional
        Knowledge rows to keep; defaults to ``N_p``.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("a task needs at least one training image")
    scl_cfg = scl_cfg or SclConfig()
    gh, gw = encoder.grid_shape(images.shape[1], images.shape[2])
    n_p = gh * gw
    c = encoder.config.embed_dim

    frozen = encoder.encode_batch(images).reshape(-1, c)
    key = frozen[fps_select(frozen, n_p)]

    labels = _label_grids(images, encoder, segmenter)
    prompts, trace = train_prompts(encoder, images, labels, PromptSet.zeros(encoder.config), scl_cfg)

    prompted = encoder.encode_batch(images, prompts).reshape(-1, c)
    budget = n_p if knowledge_budget is None else int(knowledge_budget)
    if budget < 1:
        raise ValueError("knowledge_budget must be >= 1")
    budget = min(budget, len(prompted))
    knowledge = prompted[coreset_select(prompted, budget)]

    entry = TaskEntry(task_id, key, prompts, knowledge, budget, name, created_step)
    return (entry, trace) if return_trace else entry


def _pack_f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dumps(memory):
    """Serialize to the binary layout described in the module docstring."""
    parts = [MAGIC, struct.pack("<II", memory.version, len(memory.entries))]
    for e in memory.entries:
        rows, c = e.key.shape
        pm = e.prompts.as_matrix()
        parts += [
            struct.pack("<III", e.task_id, rows, c),
            _pack_f32(e.key),
            struct.pack("<II", *pm.shape),
            _pack_f32(pm),
            struct.pack("<I", e.knowledge.shape[0]),
            _pack_f32(e.knowledge),
        ]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a_64(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise MemoryFormatError("truncated memory file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n=1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals if n > 1 else vals[0]

    def f32(self, rows, cols):
        data = np.frombuffer(self.take(4 * rows * cols), dtype="<f4")
        return data.astype(np.float64).reshape(rows, cols)


def loads(buf, prompt_mode="additive", tokens_per_layer=1):
    """Parse the binary layout; prompt rows are regrouped ``tokens_per_layer`` at a time."""
    buf = bytes(buf)
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise MemoryFormatError("bad magic")
    if len(buf) < len(MAGIC) + 16:
        raise MemoryFormatError("truncated memory file")
    body, (checksum,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    r = _Reader(body)
    r.take(len(MAGIC))
    version, n_tasks = r.u32(2)
    if version != FORMAT_VERSION:
        raise MemoryFormatError(f"unsupported format version {version}")
    entries = []
    for _ in range(n_tasks):
        task_id, rows, c = r.u32(3)
        key = r.f32(rows, c)
        p_rows, p_width = r.u32(2)
        pm = r.f32(p_rows, p_width)
        k_rows = r.u32()
        knowledge = r.f32(k_rows, c)
        if p_rows % tokens_per_layer:
            raise MemoryFormatError("prompt rows do not divide into layers")
        prompts = PromptSet(pm.reshape(p_rows // tokens_per_layer, tokens_per_layer, p_width),
                            mode=prompt_mode)
        entries.append(TaskEntry(task_id, key, prompts, knowledge, k_rows))
    if r.pos != len(body):
        raise MemoryFormatError("trailing bytes after last task")
    if fnv1a_64(body) != checksum:
        raise MemoryFormatError("checksum mismatch")
    mem = MemorySpace(version=version)
    for e in entries:
        mem.append(e)
    return mem


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def persist(memory, path):
    """Write the binary memory file plus its JSON sidecar; returns the byte count."""
    path = Path(path)
    data = dumps(memory)
    path.write_bytes(data)
    first = memory.entries[0].prompts if memory.entries else None
    meta = {
        "format_version": memory.version,
        "fingerprint": f"{memory.fingerprint:016x}",
        "encoder": memory.encoder_config,
        "prompt_mode": first.mode if first else "additive",
        "tokens_per_layer": int(first.values.shape[1]) if first else 1,
        "tasks": [
            {"task_id": e.task_id, "name": e.name, "created_step": e.created_step,
             "knowledge_budget": e.knowledge_budget}
            for e in memory.entries
        ],
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return len(data)


def load(path, encoder=None):
    """Read a memory file; with ``encoder`` given, its fingerprint must match the sidecar."""
    path = Path(path)
    meta_path = sidecar_path(path)
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    mem = loads(path.read_bytes(), meta.get("prompt_mode", "additive"),
                meta.get("tokens_per_layer", 1))
    if "fingerprint" in meta:
        mem.fingerprint = int(meta["fingerprint"], 16)
    mem.encoder_config = meta.get("encoder")
    for e, info in zip(list(mem.entries), meta.get("tasks", [])):
        mem.entries[e.task_id] = TaskEntry(
            e.task_id, e.key, e.prompts, e.knowledge,
            info.get("knowledge_budget", e.knowledge_budget),
            info.get("name", ""), info.get("created_step", 0),
        )
    if encoder is not None:
        if not meta:
            raise MemoryFormatError("no sidecar: cannot verify encoder fingerprint")
        mem.check_encoder(encoder)
    return mem
