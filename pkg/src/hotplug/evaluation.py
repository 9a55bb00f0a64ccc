"""Downstream proxies and the hot-plug compatibility verdict.

Two proxies stand in for real downstream systems: caption retrieval against
the frozen old text encoder, and a frozen linear head on visual features. The
report compares the old system, the hot-plugged system (old head, adapted new
encoder), and the cold-plugged upper bound (head retrained for the new
encoder).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (
    CAPTION_LEN,
    NUM_FACTORS,
    Dataset,
    LatentFactor,
    render_caption,
)
from .encoders import encode_image, encode_text
from .errors import ConfigError, ContractError, ParameterError
from .losses import UNIT_ROW_TOL
from .training import (
    AdamW,
    Checkpoint,
    attachment_from_checkpoint,
    clip_encoders_from_checkpoint,
)


def recall_at_k(query_feats, gallery_feats, ground_truth, k: int) -> float:
    """Fraction of queries whose true gallery item ranks in the top k by
    cosine similarity; ties break toward the lower gallery index."""
    query = np.asarray(query_feats, dtype=np.float64)
    gallery = np.asarray(gallery_feats, dtype=np.float64)
    truth = np.asarray(ground_truth)
    if not 1 <= k <= gallery.shape[0]:
        raise ParameterError(f"k={k} out of range 1..{gallery.shape[0]}")
    sims = query @ gallery.T
    hits = 0
    for i in range(query.shape[0]):
        row = sims[i]
        t = truth[i]
        # rank = better-scoring items, counting equal scores at lower index
        rank = int((row > row[t]).sum() + (row[:t] == row[t]).sum())
        hits += rank < k
    return hits / query.shape[0]


@dataclass
class DownstreamHead:
    """Frozen linear classifier on precomputed features."""
    weight: np.ndarray  # (d, num_classes)
    bias: np.ndarray    # (num_classes,)
    trained_on: str     # "old" | "new"

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


def train_head(features, labels, num_classes: int, seed: int,
               steps: int = 300, lr: float = 0.05, trained_on: str = "old") -> DownstreamHead:
    """Softmax cross-entropy on frozen features with full-batch AdamW."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = features.shape
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError("labels out of range")
    if np.unique(labels).size < 2:
        raise ConfigError("head training needs at least two classes present")
    if n < num_classes:
        raise ConfigError(f"need at least {num_classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    w = ad.Tensor(rng.normal(0.0, 0.02, size=(d, num_classes)), trainable=True)
    b = ad.Tensor(np.zeros(num_classes), trainable=True)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    x = ad.Tensor(features)
    opt = AdamW([w, b], lr=lr, weight_decay=0.0)
    for _ in range(steps):
        with ad.new_tape():
            logits = ad.add(ad.matmul(x, w), b)
            logp = ad.log_softmax_rows(logits)
            loss = ad.scale(ad.sum_all(ad.mul_const(logp, onehot)), -1.0 / n)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return DownstreamHead(w.values.copy(), b.values.copy(), trained_on)


def eval_top1(head: DownstreamHead, features, labels) -> float:
    """Argmax accuracy; argmax ties break toward the lower class index."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.size == 0:
        raise ContractError("eval_top1: empty feature set")
    if features.shape[0] != labels.shape[0]:
        raise ContractError(
            f"features/labels disagree: {features.shape[0]} vs {labels.shape[0]}")
    logits = features @ head.weight + head.bias
    pred = logits.argmax(axis=1)  # np.argmax picks the lowest tied index
    return float((pred == labels).mean())


@dataclass
class CompatReport:
    """The three ordering metrics plus recomputed verdict flags."""
    task: str
    metric: str
    m_old_old: float
    m_old_new: float
    m_new_new: float | None
    left_ok: bool
    right_ok: bool | None
    seeds: list
    config_digests: dict
    per_seed: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def make_report(task, metric, m_old_old, m_old_new, m_new_new, seeds,
                config_digests, per_seed) -> CompatReport:
    return CompatReport(
        task=task, metric=metric,
        m_old_old=m_old_old, m_old_new=m_old_new, m_new_new=m_new_new,
        left_ok=bool(m_old_old < m_old_new),
        right_ok=None if m_new_new is None else bool(m_old_new < m_new_new),
        seeds=list(seeds), config_digests=dict(config_digests),
        per_seed=per_seed)


def _batched_values(encode, inputs, batch: int = 64) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for start in range(0, inputs.shape[0], batch):
            out = encode(inputs[start:start + batch])
            chunks.append(out.values if isinstance(out, Tensor) else out)
    return np.concatenate(chunks, axis=0)


def canonical_caption_gallery(text_weights, gallery_seed: int = 1234) -> np.ndarray:
    """Text features for one caption per latent factor (gallery index ==
    factor index)."""
    captions = np.stack([
        render_caption(LatentFactor.from_index(i), gallery_seed + i)
        for i in range(NUM_FACTORS)
    ])
    assert captions.shape == (NUM_FACTORS, CAPTION_LEN)
    return _batched_values(lambda c: encode_text(text_weights, c), captions)


class _EvalSplit:
    """Deterministic half/half split of the eval dataset: the first half
    trains classifier heads, the second half is scored."""

    def __init__(self, dataset: Dataset):
        n = len(dataset)
        if n < 4:
            raise ConfigError("evaluation dataset too small to split")
        half = n // 2
        self.head_images = dataset.images[:half]
        self.head_labels = dataset.factor_indices()[:half]
        self.eval_images = dataset.images[half:]
        self.eval_labels = dataset.factor_indices()[half:]


def hot_plug_report(old_ckpt: Checkpoint, taca_ckpt: Checkpoint,
                    new_ckpt: Checkpoint | None, eval_dataset: Dataset,
                    task: str, k: int = 1, head_seeds=(0,),
                    adapted_extractor=None) -> CompatReport:
    """Build the compatibility-ordering report for one trained pipeline.

    ``adapted_extractor`` overrides the hot-plugged feature extractor (a
    callable mapping an image batch to features); by default it is rebuilt
    from the attachment checkpoint. ``new_ckpt`` supplies the cold-plug upper
    bound and may be omitted.
    """
    if task not in ("retrieval", "classification"):
        raise ConfigError(f"unknown task {task!r}")
    old_visual, old_text, _ = clip_encoders_from_checkpoint(old_ckpt)
    new_visual = new_text = None
    if new_ckpt is not None:
        new_visual, new_text, _ = clip_encoders_from_checkpoint(new_ckpt)
    if adapted_extractor is None:
        _, adapted = attachment_from_checkpoint(taca_ckpt, new_visual)
        if adapted.attachment.projector.dim_old != old_visual.config.embed_dim:
            raise ConfigError(
                f"projector output dim {adapted.attachment.projector.dim_old} "
                f"!= old embed dim {old_visual.config.embed_dim}")
        adapted_extractor = adapted.encode
    digests = {
        "old": old_ckpt.meta.get("config_digest", ""),
        "taca": taca_ckpt.meta.get("config_digest", ""),
        "new": "" if new_ckpt is None else new_ckpt.meta.get("config_digest", ""),
    }

    labels_all = eval_dataset.factor_indices()
    old_feats = _batched_values(lambda x: encode_image(old_visual, x),
                                eval_dataset.images)
    adapted_feats = _batched_values(adapted_extractor, eval_dataset.images)

    if task == "retrieval":
        gallery_old = canonical_caption_gallery(old_text)
        m_old_old = recall_at_k(old_feats, gallery_old, labels_all, k)
        m_old_new = recall_at_k(adapted_feats, gallery_old, labels_all, k)
        m_new_new = None
        if new_ckpt is not None:
            new_feats = _batched_values(lambda x: encode_image(new_visual, x),
                                        eval_dataset.images)
            gallery_new = canonical_caption_gallery(new_text)
            m_new_new = recall_at_k(new_feats, gallery_new, labels_all, k)
        return make_report("retrieval", f"recall@{k}", m_old_old, m_old_new,
                           m_new_new, [], digests, {})

    split = _EvalSplit(eval_dataset)
    head_old_feats = _batched_values(lambda x: encode_image(old_visual, x),
                                     split.head_images)
    eval_old = _batched_values(lambda x: encode_image(old_visual, x),
                               split.eval_images)
    eval_adapted = _batched_values(adapted_extractor, split.eval_images)
    per_seed = {"m_old_old": [], "m_old_new": [], "m_new_new": []}
    for seed in head_seeds:
        head_old = train_head(head_old_feats, split.head_labels, NUM_FACTORS,
                              seed=seed, trained_on="old")
        frozen = (head_old.weight.copy(), head_old.bias.copy())
        per_seed["m_old_old"].append(eval_top1(head_old, eval_old,
                                               split.eval_labels))
        per_seed["m_old_new"].append(eval_top1(head_old, eval_adapted,
                                               split.eval_labels))
        if not (np.array_equal(frozen[0], head_old.weight)
                and np.array_equal(frozen[1], head_old.bias)):
            raise ContractError("old head mutated during hot-plug evaluation")
        if new_ckpt is not None:
            head_feats_new = _batched_values(
                lambda x: encode_image(new_visual, x), split.head_images)
            eval_new = _batched_values(lambda x: encode_image(new_visual, x),
                                       split.eval_images)
            head_new = train_head(head_feats_new, split.head_labels,
                                  NUM_FACTORS, seed=seed, trained_on="new")
            per_seed["m_new_new"].append(eval_top1(head_new, eval_new,
                                                   split.eval_labels))
    med = lambda xs: float(np.median(xs)) if xs else None
    return make_report("classification", "top1", med(per_seed["m_old_old"]),
                       med(per_seed["m_old_new"]), med(per_seed["m_new_new"]),
                       list(head_seeds), digests, per_seed)


def raw_swap_baseline(old_ckpt: Checkpoint, new_ckpt: Checkpoint,
                      eval_dataset: Dataset, seed: int, k: int = 1) -> float:
    """No-compatibility control: the new encoder bridged to the old dimension
    by a random untrained linear map, scored on the retrieval proxy."""
    old_visual, old_text, _ = clip_encoders_from_checkpoint(old_ckpt)
    new_visual, _, _ = clip_encoders_from_checkpoint(new_ckpt)
    rng = np.random.default_rng(seed)
    bridge = rng.normal(0.0, 1.0, size=(new_visual.config.embed_dim,
                                        old_visual.config.embed_dim))

    def extract(images):
        feats = encode_image(new_visual, images).values
        proj = feats @ bridge
        norms = np.linalg.norm(proj, axis=-1, keepdims=True)
        return proj / np.maximum(norms, 1e-12)

    feats = _batched_values(extract, eval_dataset.images)
    gallery = canonical_caption_gallery(old_text)
    return recall_at_k(feats, gallery, eval_dataset.factor_indices(), k)
