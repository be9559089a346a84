"""Deterministic toy vision transformer with per-layer prompts.

The encoder is a frozen stand-in for a pretrained ViT: weights are drawn once
from a seeded generator and never updated. Prompts are the only trainable
quantity and enter either as one vector added to every token of a layer's
input (``additive``) or as extra tokens prepended to it (``prepend``).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import Tensor, as_tensor, concat, gelu, layer_norm, matmul, softmax

PROMPT_MODES = ("additive", "prepend")


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    tap_layer: int = 3
    prompt_mode: str = "additive"
    prompt_tokens: int = 1
    in_channels: int = 1
    mlp_ratio: int = 4
    position_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.patch_size, self.embed_dim, self.num_layers, self.num_heads, self.in_channels) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not 1 <= self.tap_layer <= self.num_layers:
            raise ValueError(f"tap_layer must be in [1, {self.num_layers}], got {self.tap_layer}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.prompt_tokens < 1:
            raise ValueError("prompt_tokens must be >= 1")
        if self.prompt_mode == "additive" and self.prompt_tokens != 1:
            raise ValueError("additive prompts use exactly one vector per layer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PromptSet:
    """Prompt vectors for layers ``1..tap_layer``.

    ``values`` has shape ``(tap_layer, tokens_per_layer, C)``; additive
    prompts always use one token per layer.
    """

    values: np.ndarray
    mode: str = "additive"
    trainable: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, None, :]
        if v.ndim != 3:
            raise ValueError("prompt values must have shape (layers, tokens, C)")
        if not np.all(np.isfinite(v)):
            raise ValueError("prompt values must be finite")
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.mode == "additive" and v.shape[1] != 1:
            raise ValueError("additive prompts use exactly one vector per layer")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, config):
        return cls(
            np.zeros((config.tap_layer, config.prompt_tokens, config.embed_dim)),
            mode=config.prompt_mode,
        )

    @property
    def num_layers(self):
        return self.values.shape[0]

    def as_matrix(self):
        """Flatten to ``(layers * tokens, C)`` rows (the persisted layout)."""
        return self.values.reshape(-1, self.values.shape[-1])


def sinusoidal_positions(n, dim):
    """Fixed sine/cosine position table, shape ``(n, dim)``."""
    pos = np.arange(n)[:, None]
    i = np.arange((dim + 1) // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


def _patchify_batch(images, patch_size):
    b, h, w, cin = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    return (
        images.reshape(b, gh, patch_size, gw, patch_size, cin)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gh * gw, patch_size * patch_size * cin)
    )


def patchify(image, patch_size):
    """Split an ``(H, W)`` or ``(H, W, Cin)`` image into flattened patches.

    Row ``r * grid_w + c`` of the result holds patch ``(r, c)``, flattened
    row-major with channels last.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W[, Cin]) image, got shape {img.shape}")
    return _patchify_batch(img[None], patch_size)[0]


@dataclass(frozen=True)
class PatchFeatureMap:
    grid_h: int
    grid_w: int
    features: np.ndarray = field(repr=False)

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w


class Encoder:
    """Frozen transformer; create with :func:`init_encoder`."""

    def __init__(self, config, weights):
        self.config = config
        self._weights = weights
        for arr in weights.values():
            arr.flags.writeable = False

    @property
    def weights(self):
        return dict(self._weights)

    def fingerprint(self):
        """64-bit digest of config and weights; stable across processes."""
        h = hashlib.sha256()
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for name in sorted(self._weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._weights[name]).tobytes())
        return int.from_bytes(h.digest()[:8], "little")

    def grid_shape(self, height, width):
        p = self.config.patch_size
        if height % p or width % p:
            raise ValueError(f"image size {height}x{width} is not divisible by patch size {p}")
        return height // p, width // p

    def _block(self, x, layer):
        cfg = self.config
        w = self._weights
        b, n, c = x.shape
        nh = cfg.num_heads
        hd = c // nh
        h = layer_norm(x)
        q = matmul(h, w[f"l{layer}.wq"]).reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
        k = matmul(h, w[f"l{layer}.wk"]).reshape(b, n, nh, hd).transpose(0, 2, 3, 1)
        v = matmul(h, w[f"l{layer}.wv"]).reshape(b, n, nh, hd).transpose(0, 2, 1, 3)
        att = softmax(matmul(q, k) * (1.0 / np.sqrt(hd)), axis=-1)
        o = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, c)
        x = x + matmul(o, w[f"l{layer}.wo"])
        h = layer_norm(x)
        m = gelu(matmul(h, w[f"l{layer}.w1"]) + w[f"l{layer}.b1"])
        return x + (matmul(m, w[f"l{layer}.w2"]) + w[f"l{layer}.b2"])

    def forward(self, images, prompts=None):
        """Differentiable forward pass to the tap layer.

        ``images`` is ``(B, H, W[, Cin])``; ``prompts`` is ``None``, a
        :class:`PromptSet`, or a Tensor/array of shape ``(tap, tokens, C)``.
        Returns a Tensor of shape ``(B, N_p, C)``.
        """
        cfg = self.config
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 3 and cfg.in_channels == 1:
            imgs = imgs[..., None]
        if imgs.ndim != 4 or imgs.shape[-1] != cfg.in_channels:
            raise ValueError(
                f"expected images of shape (B, H, W, {cfg.in_channels}), got {np.shape(images)}"
            )
        self.grid_shape(imgs.shape[1], imgs.shape[2])
        tokens = _patchify_batch(imgs, cfg.patch_size)
        b, n, _ = tokens.shape
        x = Tensor(tokens @ self._weights["embed.w"] + self._weights["embed.b"]
                   + cfg.position_scale * sinusoidal_positions(n, cfg.embed_dim))

        if prompts is not None:
            if isinstance(prompts, PromptSet):
                if prompts.mode != cfg.prompt_mode:
                    raise ValueError(f"prompt mode {prompts.mode!r} does not match encoder")
                prompts = prompts.values
            prompts = as_tensor(prompts)
            if prompts.ndim == 2:
                prompts = prompts.reshape(prompts.shape[0], 1, prompts.shape[1])
            if prompts.shape[0] != cfg.tap_layer:
                raise ValueError(
                    f"prompt set has {prompts.shape[0]} layers, encoder taps layer {cfg.tap_layer}"
                )
            if prompts.shape[2] != cfg.embed_dim:
                raise ValueError("prompt width does not match embed_dim")

        for layer in range(cfg.tap_layer):
            if prompts is None:
                x = self._block(x, layer)
            elif cfg.prompt_mode == "additive":
                x = self._block(x + prompts[layer], layer)
            else:
                pt = prompts.shape[1]
                lead = prompts[layer].reshape(1, pt, cfg.embed_dim) + np.zeros((b, 1, 1))
                x = self._block(concat([lead, x], axis=1), layer)[:, pt:, :]
        return x

    def encode(self, image, prompts=None):
        """Layer-``tap`` patch features of a single ``(H, W[, Cin])`` image."""
        img = np.asarray(image, dtype=np.float64)
        gh, gw = self.grid_shape(img.shape[0], img.shape[1])
        feats = self.forward(img[None], prompts).data[0]
        return PatchFeatureMap(gh, gw, feats)

    def encode_batch(self, images, prompts=None):
        """Features for a stack of images, shape ``(B, N_p, C)``."""
        return np.array(self.forward(images, prompts).data)


def init_encoder(config=None, **overrides):
    """Build a frozen encoder with weights ``U(-1/sqrt(C), 1/sqrt(C))`` from ``config.seed``."""
    if config is None:
        config = EncoderConfig(**overrides)
    elif overrides:
        config = EncoderConfig(**{**config.to_dict(), **overrides})
    rng = np.random.default_rng(config.seed)
    c = config.embed_dim
    scale = 1.0 / np.sqrt(c)
    d_in = config.patch_size**2 * config.in_channels
    hidden = config.mlp_ratio * c

    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    weights = {"embed.w": u(d_in, c), "embed.b": u(c)}
    for layer in range(config.num_layers):
        weights[f"l{layer}.wq"] = u(c, c)
        weights[f"l{layer}.wk"] = u(c, c)
        weights[f"l{layer}.wv"] = u(c, c)
        weights[f"l{layer}.wo"] = u(c, c)
        weights[f"l{layer}.w1"] = u(c, hidden)
        weights[f"l{layer}.b1"] = u(hidden)
        weights[f"l{layer}.w2"] = u(hidden, c)
        weights[f"l{layer}.b2"] = u(c)
    return Encoder(config, weights)
