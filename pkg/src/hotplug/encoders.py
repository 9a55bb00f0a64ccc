"""Toy-scale dual encoders: a patch-based visual transformer and a text
transformer, both projecting into a shared unit-normalized embedding space.

Blocks are pre-norm with GELU feed-forwards (expansion 4x). All forwards are
pure functions of the weights and inputs; normalization of the final embedding
happens inside ``encode_*`` so downstream losses can treat dot products as
cosine similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ParameterError

FFN_EXPANSION = 4
INIT_STD = 0.02


@dataclass(frozen=True)
class ImageSpec:
    height: int
    width: int
    channels: int
    patch: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.channels <= 0 or self.patch <= 0:
            raise ConfigError(f"image spec dimensions must be positive: {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch size {self.patch} must divide image {self.height}x{self.width}")

    @property
    def num_patches(self) -> int:
        return (self.height * self.width) // (self.patch * self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class VisualEncoderConfig:
    image_spec: ImageSpec
    layers: int
    width: int
    heads: int
    embed_dim: int

    def __post_init__(self):
        if self.layers < 1 or self.embed_dim < 1:
            raise ConfigError(f"layers/embed_dim must be >= 1: {self}")
        if self.width % self.heads:
            raise ConfigError(f"heads {self.heads} must divide width {self.width}")


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    max_len: int
    layers: int
    width: int
    heads: int
    embed_dim: int
    cls_id: int
    sep_id: int

    def __post_init__(self):
        if self.cls_id == self.sep_id:
            raise ConfigError("cls_id and sep_id must differ")
        if self.cls_id >= self.vocab_size or self.sep_id >= self.vocab_size:
            raise ConfigError("cls/sep ids must be < vocab_size")
        if self.layers < 1 or self.embed_dim < 1:
            raise ConfigError(f"layers/embed_dim must be >= 1: {self}")
        if self.width % self.heads:
            raise ConfigError(f"heads {self.heads} must divide width {self.width}")


class EncoderWeights:
    """Named parameter map for one encoder; order of creation is fixed."""

    def __init__(self, config, params: dict[str, Tensor], kind: str):
        self.config = config
        self.params = params
        self.kind = kind  # "visual" | "text"

    def tensors(self):
        return self.params.values()

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.trainable = flag

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.params.items()}


def _block_param_shapes(width: int):
    k = width
    f = FFN_EXPANSION * k
    return {
        "ln1.gain": (k,), "ln1.bias": (k,),
        "attn.wq": (k, k), "attn.bq": (k,),
        "attn.wk": (k, k), "attn.bk": (k,),
        "attn.wv": (k, k), "attn.bv": (k,),
        "attn.wo": (k, k), "attn.bo": (k,),
        "ln2.gain": (k,), "ln2.bias": (k,),
        "ffn.w1": (k, f), "ffn.b1": (f,),
        "ffn.w2": (f, k), "ffn.b2": (k,),
    }


def _init_block(rng: np.random.Generator, params, prefix: str, width: int):
    for name, shape in _block_param_shapes(width).items():
        full = f"{prefix}.{name}"
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            values = np.zeros(shape)
        else:
            fan_in = shape[0]
            values = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        params[full] = Tensor(values)


def init_encoder(config, seed: int) -> EncoderWeights:
    """Seeded weight initialization; same (config, seed) gives identical weights."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    if isinstance(config, VisualEncoderConfig):
        spec = config.image_spec
        k = config.width
        params["patch_embed"] = Tensor(rng.normal(0.0, INIT_STD, size=(spec.patch_dim, k)))
        params["patch_bias"] = Tensor(np.zeros(k))
        params["cls_token"] = Tensor(rng.normal(0.0, INIT_STD, size=(k,)))
        params["pos_embed"] = Tensor(
            rng.normal(0.0, INIT_STD, size=(spec.num_patches + 1, k)))
        for i in range(config.layers):
            _init_block(rng, params, f"block{i}", k)
        params["ln_f.gain"] = Tensor(np.ones(k))
        params["ln_f.bias"] = Tensor(np.zeros(k))
        params["proj"] = Tensor(rng.normal(0.0, INIT_STD, size=(k, config.embed_dim)))
        return EncoderWeights(config, params, "visual")
    if isinstance(config, TextEncoderConfig):
        k = config.width
        params["tok_embed"] = Tensor(rng.normal(0.0, INIT_STD, size=(config.vocab_size, k)))
        params["pos_embed"] = Tensor(rng.normal(0.0, INIT_STD, size=(config.max_len, k)))
        for i in range(config.layers):
            _init_block(rng, params, f"block{i}", k)
        params["ln_f.gain"] = Tensor(np.ones(k))
        params["ln_f.bias"] = Tensor(np.zeros(k))
        params["proj"] = Tensor(rng.normal(0.0, INIT_STD, size=(k, config.embed_dim)))
        return EncoderWeights(config, params, "text")
    raise ConfigError(f"unknown encoder config type: {type(config).__name__}")


def visual_param_count(config: VisualEncoderConfig) -> int:
    """Closed-form parameter count (checked against enumeration in tests)."""
    spec, k, d = config.image_spec, config.width, config.embed_dim
    f = FFN_EXPANSION * k
    block = 4 * k + 4 * (k * k + k) + (k * f + f) + (f * k + k)
    return (spec.patch_dim * k + k + k + (spec.num_patches + 1) * k
            + config.layers * block + 2 * k + k * d)


def text_param_count(config: TextEncoderConfig) -> int:
    k, d = config.width, config.embed_dim
    f = FFN_EXPANSION * k
    block = 4 * k + 4 * (k * k + k) + (k * f + f) + (f * k + k)
    return (config.vocab_size * k + config.max_len * k
            + config.layers * block + 2 * k + k * d)


def patchify(image, spec: ImageSpec) -> Tensor:
    """Cut one H x W x C image into flattened patches.

    Patches are ordered row-major over the patch grid; inside a patch, pixels
    are row-major with the channel index varying fastest.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (spec.height, spec.width, spec.channels):
        raise DimensionError(
            f"image shape {image.shape} does not match spec "
            f"({spec.height}, {spec.width}, {spec.channels})")
    return Tensor(_patchify_batch(image[None], spec)[0])


def _patchify_batch(images: np.ndarray, spec: ImageSpec) -> np.ndarray:
    b = images.shape[0]
    gh = spec.height // spec.patch
    gw = spec.width // spec.patch
    x = images.reshape(b, gh, spec.patch, gw, spec.patch, spec.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, spec.patch_dim)


def _attention(params, prefix: str, x: Tensor, heads: int, attachment=None,
               layer: int | None = None) -> Tensor:
    b, t, k = x.shape
    dh = k // heads
    wq, wv = params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.wv"]
    if attachment is not None:
        wq, wv = attachment.qv_weights(layer, wq, wv)
    q = ad.add(ad.matmul(x, wq), params[f"{prefix}.attn.bq"])
    kk = ad.add(ad.matmul(x, params[f"{prefix}.attn.wk"]), params[f"{prefix}.attn.bk"])
    v = ad.add(ad.matmul(x, wv), params[f"{prefix}.attn.bv"])

    def split(h):
        return ad.transpose(ad.reshape(h, (b, t, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(kk), split(v)
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax_rows(scores)
    mixed = ad.matmul(attn, vh)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, k))
    return ad.add(ad.matmul(merged, params[f"{prefix}.attn.wo"]),
                  params[f"{prefix}.attn.bo"])


def _transformer_blocks(weights: EncoderWeights, x: Tensor, heads: int,
                        attachment=None, collect=None) -> Tensor:
    params = weights.params
    for i in range(weights.config.layers):
        p = f"block{i}"
        a_in = ad.layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        a_out = _attention(params, p, a_in, heads, attachment, i)
        if attachment is not None:
            a_out = attachment.apply_adapter(i, "attn", a_out)
        x = ad.add(x, a_out)
        f_in = ad.layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        h = ad.add(ad.matmul(f_in, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"])
        h = ad.gelu(h)
        h = ad.add(ad.matmul(h, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])
        if attachment is not None:
            h = attachment.apply_adapter(i, "ffn", h)
        x = ad.add(x, h)
        if collect is not None:
            collect.append(x.values.copy())
    return x


def encode_image(weights: EncoderWeights, images, attachment=None,
                 return_blocks: bool = False):
    """Embed one image (H, W, C) or a batch (B, H, W, C) to unit vectors.

    Returns a (d,) tensor for a single image, (B, d) for a batch. With
    ``return_blocks`` also returns the per-block hidden states (values only).
    """
    if weights.kind != "visual":
        raise ConfigError("encode_image requires visual weights")
    cfg: VisualEncoderConfig = weights.config
    spec = cfg.image_spec
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.shape[1:] != (spec.height, spec.width, spec.channels):
        raise DimensionError(
            f"image batch shape {images.shape} does not match spec "
            f"({spec.height}, {spec.width}, {spec.channels})")
    b = images.shape[0]
    params = weights.params
    patches = Tensor(_patchify_batch(images, spec))
    x = ad.add(ad.matmul(patches, params["patch_embed"]), params["patch_bias"])
    cls = ad.broadcast_to(ad.reshape(params["cls_token"], (1, 1, cfg.width)),
                          (b, 1, cfg.width))
    x = ad.concat([cls, x], axis=1)
    pos = ad.broadcast_to(ad.reshape(params["pos_embed"],
                                     (1, spec.num_patches + 1, cfg.width)),
                          (b, spec.num_patches + 1, cfg.width))
    x = ad.add(x, pos)
    collect = [] if return_blocks else None
    x = _transformer_blocks(weights, x, cfg.heads, attachment, collect)
    x = ad.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    head = ad.index_select(x, 1, 0)  # CLS position
    emb = ad.l2_normalize_rows(ad.matmul(head, params["proj"]))
    if single:
        emb = ad.reshape(emb, (cfg.embed_dim,))
    if return_blocks:
        return emb, collect
    return emb


def encode_text(weights: EncoderWeights, tokens) -> Tensor:
    """Embed token id sequences (T,) or (B, T); CLS/SEP are added here.

    The final-layer hidden state at the SEP position is projected and
    unit-normalized.
    """
    if weights.kind != "text":
        raise ConfigError("encode_text requires text weights")
    cfg: TextEncoderConfig = weights.config
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ParameterError(
            f"token id out of range for vocab_size {cfg.vocab_size}")
    b, t = tokens.shape
    if t + 2 > cfg.max_len:
        raise DimensionError(
            f"sequence length {t} + CLS/SEP exceeds max_len {cfg.max_len}")
    full = np.concatenate([
        np.full((b, 1), cfg.cls_id, dtype=tokens.dtype),
        tokens,
        np.full((b, 1), cfg.sep_id, dtype=tokens.dtype),
    ], axis=1)
    seq = t + 2
    params = weights.params
    x = ad.embedding_lookup(params["tok_embed"], full)
    pos_rows = ad.embedding_lookup(params["pos_embed"], np.arange(seq))
    pos = ad.broadcast_to(ad.reshape(pos_rows, (1, seq, cfg.width)), (b, seq, cfg.width))
    x = ad.add(x, pos)
    x = _transformer_blocks(weights, x, cfg.heads)
    x = ad.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    head = ad.index_select(x, 1, seq - 1)  # SEP position
    emb = ad.l2_normalize_rows(ad.matmul(head, params["proj"]))
    if single:
        emb = ad.reshape(emb, (cfg.embed_dim,))
    return emb
