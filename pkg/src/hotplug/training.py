"""Seeded training harnesses and binary checkpoint I/O.

``pretrain_clip`` trains a visual/text pair with the symmetric contrastive
loss; ``train_taca`` freezes all backbones and optimizes only the attachment.
Every run is fully determined by its configs and seeds.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .encoders import (
    EncoderWeights,
    ImageSpec,
    TextEncoderConfig,
    VisualEncoderConfig,
    encode_image,
    encode_text,
    init_encoder,
)
from .errors import ConfigError, ContractError, FormatError, TruncatedFileError
from .losses import CompatLossConfig, ContrastiveConfig, clip_symmetric_loss, compat_total
from .peft import TacaAttachment, TacaConfig, attach_taca

CHECKPOINT_MAGIC = b"TACK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 1500
    seed: int = 0
    distill_weight: float = 2.0
    temperature: float = 0.07
    symmetric_contrastive: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive negatives)")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


class AdamW:
    """Decoupled weight decay Adam over an explicit list of trainable tensors."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError("AdamW.step: parameter has no gradient")
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.values = p.values - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                             + self.weight_decay * p.values)


def batch_indices(n: int, batch_size: int, steps: int, seed: int):
    """Epoch-wise seeded permutations; the last partial batch is dropped."""
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xBA7C)))
    emitted = 0
    while emitted < steps:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
            emitted += 1
            if emitted >= steps:
                return


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class Checkpoint:
    """JSON metadata plus a named map of float64 arrays."""

    def __init__(self, meta: dict, tensors: dict[str, np.ndarray]):
        self.meta = meta
        self.tensors = tensors


def save_checkpoint(checkpoint: Checkpoint, path):
    names = list(checkpoint.tensors)
    if len(set(names)) != len(names):
        raise ContractError("duplicate tensor names in checkpoint")
    meta_blob = json.dumps(checkpoint.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.asarray(checkpoint.tensors[name], dtype=np.float64)
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"expected {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(_read_exact(fh, size * 8), dtype="<f8")
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name] = arr.reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(meta, tensors)


def _visual_config_meta(cfg: VisualEncoderConfig) -> dict:
    spec = cfg.image_spec
    return {"image_spec": dataclasses.asdict(spec), "layers": cfg.layers,
            "width": cfg.width, "heads": cfg.heads, "embed_dim": cfg.embed_dim}


def _visual_config_from_meta(meta: dict) -> VisualEncoderConfig:
    return VisualEncoderConfig(image_spec=ImageSpec(**meta["image_spec"]),
                               layers=meta["layers"], width=meta["width"],
                               heads=meta["heads"], embed_dim=meta["embed_dim"])


def pack_encoder(weights: EncoderWeights, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": t.values.copy()
            for name, t in weights.params.items()}


def unpack_encoder(checkpoint: Checkpoint, prefix: str, config) -> EncoderWeights:
    """Rebuild encoder weights from checkpoint tensors (non-trainable)."""
    weights = init_encoder(config, seed=0)
    for name, tensor in weights.params.items():
        key = f"{prefix}/{name}"
        if key not in checkpoint.tensors:
            raise FormatError(f"checkpoint missing tensor {key!r}")
        stored = checkpoint.tensors[key]
        if stored.shape != tensor.values.shape:
            raise FormatError(
                f"tensor {key!r} shape {stored.shape} != expected {tensor.values.shape}")
        tensor.values = stored.copy()
        tensor.trainable = False
    return weights


def clip_encoders_from_checkpoint(checkpoint: Checkpoint):
    """(visual weights, text weights, temperature) from a CLIP checkpoint."""
    if checkpoint.meta.get("kind") != "clip":
        raise FormatError(
            f"expected a CLIP checkpoint, got kind={checkpoint.meta.get('kind')!r}")
    vcfg = _visual_config_from_meta(checkpoint.meta["visual_config"])
    tcfg = TextEncoderConfig(**checkpoint.meta["text_config"])
    visual = unpack_encoder(checkpoint, "visual", vcfg)
    text = unpack_encoder(checkpoint, "text", tcfg)
    return visual, text, float(checkpoint.meta["temperature"])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def pretrain_clip(visual_cfg: VisualEncoderConfig, text_cfg: TextEncoderConfig,
                  dataset: Dataset, train_cfg: TrainConfig,
                  config_digest: str = "") -> Checkpoint:
    """Jointly train both encoders with the symmetric contrastive loss."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if visual_cfg.embed_dim != text_cfg.embed_dim:
        raise ConfigError(
            f"visual embed_dim {visual_cfg.embed_dim} != text embed_dim "
            f"{text_cfg.embed_dim}")
    visual = init_encoder(visual_cfg, seed=train_cfg.seed)
    text = init_encoder(text_cfg, seed=train_cfg.seed + 1)
    visual.set_trainable(True)
    text.set_trainable(True)
    params = list(visual.tensors()) + list(text.tensors())
    opt = AdamW(params, lr=train_cfg.learning_rate, beta1=train_cfg.beta1,
                beta2=train_cfg.beta2, eps=train_cfg.eps,
                weight_decay=train_cfg.weight_decay)
    last_loss = None
    for batch in batch_indices(len(dataset), train_cfg.batch_size,
                               train_cfg.steps, train_cfg.seed):
        with ad.new_tape():
            img_feats = encode_image(visual, dataset.images[batch])
            txt_feats = encode_text(text, dataset.captions[batch])
            loss = clip_symmetric_loss(img_feats, txt_feats,
                                       train_cfg.temperature)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        last_loss = loss.item()
    visual.set_trainable(False)
    text.set_trainable(False)
    meta = {
        "kind": "clip",
        "visual_config": _visual_config_meta(visual_cfg),
        "text_config": dataclasses.asdict(text_cfg),
        "temperature": train_cfg.temperature,
        "steps": train_cfg.steps,
        "seed": train_cfg.seed,
        "final_loss": last_loss,
        "config_digest": config_digest,
    }
    tensors = pack_encoder(visual, "visual") | pack_encoder(text, "text")
    return Checkpoint(meta, tensors)


def train_taca(old_ckpt: Checkpoint, new_ckpt: Checkpoint, taca_cfg: TacaConfig,
               dataset: Dataset, train_cfg: TrainConfig,
               config_digest: str = ""):
    """Compatibility training: only the attachment learns.

    Returns (attachment checkpoint, loss log) where the log holds one
    (step, total, contrastive, distillation) row per step. Backbone tensors
    are audited bitwise after the run.
    """
    old_visual, old_text, tau = clip_encoders_from_checkpoint(old_ckpt)
    new_visual, _, _ = clip_encoders_from_checkpoint(new_ckpt)
    d_old = old_visual.config.embed_dim
    d_new = new_visual.config.embed_dim
    attachment, adapted = attach_taca(new_visual, taca_cfg, d_old,
                                      seed=train_cfg.seed)
    if attachment.projector.dim_old != d_old:
        raise ConfigError(
            f"projector output dim {attachment.projector.dim_old} != old embed dim {d_old}")
    loss_cfg = CompatLossConfig(
        distill_weight=train_cfg.distill_weight,
        contrastive=ContrastiveConfig(temperature=tau))
    backbone_snapshot = {
        "old_visual": old_visual.clone_values(),
        "old_text": old_text.clone_values(),
        "new_visual": new_visual.clone_values(),
    }
    opt = AdamW(attachment.trainable_tensors(), lr=train_cfg.learning_rate,
                beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
                weight_decay=train_cfg.weight_decay)
    # Old encoders are frozen, so their per-sample features are constants;
    # compute them once instead of once per epoch.
    with ad.no_grad():
        old_img_all = np.concatenate([
            encode_image(old_visual, dataset.images[s:s + 64]).values
            for s in range(0, len(dataset), 64)])
        old_txt_all = np.concatenate([
            encode_text(old_text, dataset.captions[s:s + 64]).values
            for s in range(0, len(dataset), 64)])
    log = []
    step = 0
    for batch in batch_indices(len(dataset), train_cfg.batch_size,
                               train_cfg.steps, train_cfg.seed):
        with ad.new_tape():
            old_img = Tensor(old_img_all[batch])
            old_txt = Tensor(old_txt_all[batch])
            new_img = adapted.encode(dataset.images[batch])
            total, comps = compat_total(
                new_img, old_txt, old_img, loss_cfg,
                symmetric_contrastive=train_cfg.symmetric_contrastive)
            opt.zero_grad()
            ad.backward(total)
            opt.step()
        log.append((step, total.item(), comps["contrastive"],
                    comps["distillation"]))
        step += 1
    _audit_frozen(backbone_snapshot, old_visual, old_text, new_visual)
    meta = {
        "kind": "taca_attachment",
        "taca_config": dataclasses.asdict(taca_cfg),
        "new_visual_config": _visual_config_meta(new_visual.config),
        "dim_old": d_old,
        "dim_new": d_new,
        "temperature": tau,
        "distill_weight": train_cfg.distill_weight,
        "steps": train_cfg.steps,
        "seed": train_cfg.seed,
        "old_checkpoint_digest": old_ckpt.meta.get("config_digest", ""),
        "new_checkpoint_digest": new_ckpt.meta.get("config_digest", ""),
        "config_digest": config_digest,
    }
    # The frozen new backbone travels with the attachment so the composed
    # encoder can be rebuilt from this checkpoint alone.
    tensors = {name: t.values.copy()
               for name, t in attachment.named_tensors().items()}
    tensors |= pack_encoder(new_visual, "backbone")
    return Checkpoint(meta, tensors), log


def _audit_frozen(snapshot, old_visual, old_text, new_visual):
    for label, weights in (("old_visual", old_visual), ("old_text", old_text),
                           ("new_visual", new_visual)):
        for name, before in snapshot[label].items():
            after = weights.params[name].values
            if not np.array_equal(before, after):
                raise ContractError(
                    f"frozen backbone tensor {label}/{name} changed during training")


def attachment_from_checkpoint(taca_ckpt: Checkpoint,
                               new_visual: EncoderWeights | None = None):
    """Rebuild the attachment (and composed encoder) from its checkpoint.

    When ``new_visual`` is omitted the frozen backbone embedded in the
    checkpoint is used.
    """
    if taca_ckpt.meta.get("kind") != "taca_attachment":
        raise FormatError(
            f"expected an attachment checkpoint, got kind={taca_ckpt.meta.get('kind')!r}")
    if new_visual is None:
        vcfg = _visual_config_from_meta(taca_ckpt.meta["new_visual_config"])
        new_visual = unpack_encoder(taca_ckpt, "backbone", vcfg)
    raw = dict(taca_ckpt.meta["taca_config"])
    raw["inserted_layers"] = tuple(raw.get("inserted_layers") or ())
    cfg = TacaConfig(**raw)
    attachment, adapted = attach_taca(new_visual, cfg,
                                      int(taca_ckpt.meta["dim_old"]),
                                      seed=int(taca_ckpt.meta["seed"]))
    for name, tensor in attachment.named_tensors().items():
        if name not in taca_ckpt.tensors:
            raise FormatError(f"attachment checkpoint missing tensor {name!r}")
        stored = taca_ckpt.tensors[name]
        if stored.shape != tensor.values.shape:
            raise FormatError(
                f"tensor {name!r} shape {stored.shape} != expected {tensor.values.shape}")
        tensor.values = stored.copy()
    return attachment, adapted
