"""Open-vocabulary proposal classifier matched against fixed text embeddings."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .boxes import Box, InvalidInputError, iou_matrix, nms
from .data_io import TextEmbeddingTable
from .evaluation import Detection
from .vlm_core import VisualFeatures, _cell_edges, as_float_image, position_encoding

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.03
    batch_size: int = 16
    iterations: int = 2000
    milestones: tuple = (0.6, 0.9)  # fractions of ``iterations`` (or absolute steps if > 1)
    lr_factor: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    neg_ratio: float = 3.0
    neg_iou: float = 0.3
    objectness_weight: float = 1.0
    normalize: bool = False
    logit_scale: float = 1.0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise InvalidInputError("lr and batch size must be positive, iterations nonnegative")
        if list(self.milestones) != sorted(self.milestones):
            raise InvalidInputError("lr milestones must be ascending")
        if not 0 < self.lr_factor <= 1 or self.weight_decay < 0 or self.neg_ratio < 0:
            raise InvalidInputError("bad lr factor, weight decay, or negative ratio")

    def milestone_steps(self) -> list[int]:
        return [int(round(m * self.iterations)) if m <= 1 else int(m) for m in self.milestones]

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_factor ** sum(step >= m for m in self.milestone_steps())


PRESETS = {
    "desk": {
        "train": TrainConfig(),
        "finetune": TrainConfig(lr=0.005, batch_size=8, iterations=500),
    },
    "paper-scale": {
        "train": TrainConfig(lr=0.02, batch_size=64, iterations=150_000,
                             milestones=(60_000, 120_000), weight_decay=1e-4),
        "finetune": TrainConfig(lr=0.0005, batch_size=8, iterations=150_000,
                                milestones=(60_000, 120_000), weight_decay=1e-4),
    },
}


@dataclass
class DetectorParams:
    """Trainable projection (W, b) to embedding space and objectness scorer (u, c)."""

    W: np.ndarray
    b: np.ndarray
    u: np.ndarray
    c: np.ndarray

    GROUPS = ("W", "b", "u", "c")

    @classmethod
    def init(cls, feature_dim: int, embed_dim: int, seed: int = 0, scale: float = 0.01) -> "DetectorParams":
        rng = np.random.default_rng([seed, 0xD])
        return cls(rng.standard_normal((embed_dim, feature_dim)) * scale, np.zeros(embed_dim),
                   np.zeros(feature_dim), np.zeros(1))

    def copy(self) -> "DetectorParams":
        return DetectorParams(*(getattr(self, g).copy() for g in self.GROUPS))

    def arrays(self) -> dict:
        return {g: getattr(self, g) for g in self.GROUPS}

    def to_json(self) -> dict:
        return {g: getattr(self, g).tolist() for g in self.GROUPS}

    @classmethod
    def from_json(cls, d: Mapping) -> "DetectorParams":
        return cls(*(np.asarray(d[g], dtype=float) for g in cls.GROUPS))

    def allclose(self, other: "DetectorParams") -> bool:
        return all(np.array_equal(getattr(self, g), getattr(other, g)) for g in self.GROUPS)


# -- backbone ---------------------------------------------------------------------

BACKBONE_CHANNELS = ("bias", "color_r", "color_g", "color_b", "foreground", "edge_h", "edge_v",
                     "staircase", "pos_sin_x", "pos_cos_x", "pos_sin_y", "pos_cos_y")


def _cell_sums(plane: np.ndarray, rows, cols) -> np.ndarray:
    # reduceat over the cell start indices; _cell_edges tiles the image exactly
    starts_r = [a for a, _ in rows]
    starts_c = [a for a, _ in cols]
    return np.add.reduceat(np.add.reduceat(plane, starts_r, axis=0), starts_c, axis=1)


@dataclass(frozen=True)
class ShapeBackbone:
    """Detector-side feature extractor, independent of the vision-language model.

    Each grid cell carries foreground-masked color in [-1, 1], the foreground
    fraction, densities of horizontal and vertical mask edges, the density of
    staircase corners (edges in both directions at one pixel, which is what a
    slanted or curved outline looks like on a pixel grid), and a positional
    code. Every channel is a per-cell average, so pooling over a box stays a
    plain mean.
    """

    grid: tuple = (16, 16)
    fg_threshold: float = 0.25

    @property
    def dim(self) -> int:
        return len(BACKBONE_CHANNELS)

    def __call__(self, image) -> VisualFeatures:
        img = as_float_image(image)
        H, W = img.shape[:2]
        Hg, Wg = self.grid
        if Hg < 1 or Wg < 1 or Hg > H or Wg > W:
            raise InvalidInputError(f"grid {self.grid} does not fit a {H}x{W} image")
        background = np.median(img.reshape(-1, 3), axis=0)
        fg = (np.abs(img - background).max(axis=2) > self.fg_threshold).astype(float)
        color = fg[:, :, None] * (2.0 * img - 1.0)
        dh = np.zeros((H, W))
        dv = np.zeros((H, W))
        dh[:-1] = np.abs(np.diff(fg, axis=0))
        dv[:, :-1] = np.abs(np.diff(fg, axis=1))
        stair = dh * dv
        rows, cols = _cell_edges(H, Hg), _cell_edges(W, Wg)
        area = np.outer([b - a for a, b in rows], [b - a for a, b in cols])
        planes = [color[:, :, 0], color[:, :, 1], color[:, :, 2], fg, dh, dv, stair]
        cells = np.stack([_cell_sums(p, rows, cols) / area for p in planes], axis=-1).reshape(Hg * Wg, -1)
        feats = np.concatenate([np.ones((Hg * Wg, 1)), cells, position_encoding(self.grid)], axis=1)
        return VisualFeatures(feats, tuple(self.grid), (H, W))


# -- region features --------------------------------------------------------------

def _cell_range(lo: float, hi: float, n_pixels: int, n_cells: int) -> tuple[int, int]:
    cells = [i for i, (a, b) in enumerate(_cell_edges(n_pixels, n_cells)) if a < hi and b > lo]
    if not cells:
        raise InvalidInputError(f"interval [{lo}, {hi}) intersects no grid cell")
    return cells[0], cells[-1] + 1


def pool_region(features: VisualFeatures, box: Box) -> np.ndarray:
    """Mean of the grid-cell features whose cells intersect the box."""
    if features.image_size is None:
        raise InvalidInputError("visual features carry no image size")
    H, W = features.image_size
    Hg, Wg = features.grid
    r0, r1 = _cell_range(box.y_min, box.y_max, H, Hg)
    c0, c1 = _cell_range(box.x_min, box.x_max, W, Wg)
    return features.V.reshape(Hg, Wg, -1)[r0:r1, c0:c1].reshape(-1, features.V.shape[1]).mean(axis=0)


def pool_regions(features: VisualFeatures, boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, features.V.shape[1]))
    return np.stack([pool_region(features, b) for b in boxes])


@dataclass
class RegionEmbedding:
    r: np.ndarray
    box: Box
    image_id: str = ""


def project(params: DetectorParams, pooled: np.ndarray) -> np.ndarray:
    return pooled @ params.W.T + params.b


def extract_region_embedding(features: VisualFeatures, box: Box, params: DetectorParams,
                             image_id: str = "") -> RegionEmbedding:
    return RegionEmbedding(project(params, pool_region(features, box)), box, image_id)


# -- matching ---------------------------------------------------------------------

def _class_matrix(table: TextEmbeddingTable, normalize: bool = False) -> np.ndarray:
    """Rows: bg followed by the categories."""
    M = np.vstack([table.bg[None, :], table.C])
    if normalize:
        n = np.linalg.norm(M, axis=1, keepdims=True)
        M = np.divide(M, n, out=np.zeros_like(M), where=n > 0)
    return M


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_probability(r, table: TextEmbeddingTable, normalize: bool = False,
                      logit_scale: float = 1.0) -> np.ndarray:
    """Probabilities over [bg, c_1, ..., c_N] from dot products with the text embeddings."""
    r = np.asarray(r.r if isinstance(r, RegionEmbedding) else r, dtype=float)
    if r.shape[-1] != table.dim:
        raise InvalidInputError(f"region embedding dim {r.shape[-1]} != table dim {table.dim}")
    if normalize:
        r = r / np.maximum(np.linalg.norm(r, axis=-1, keepdims=True), 1e-12)
    return softmax(logit_scale * r @ _class_matrix(table, normalize).T)


# -- loss -------------------------------------------------------------------------

def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def detection_loss(params: DetectorParams, pooled: np.ndarray, targets: Sequence[int],
                   table: TextEmbeddingTable, objectness_weight: float = 1.0,
                   normalize: bool = False, logit_scale: float = 1.0) -> tuple[float, dict]:
    """Mean matching cross-entropy plus weighted objectness BCE, with analytic gradients.

    ``targets`` index [bg, c_1, ..., c_N]: 0 is background.
    """
    X = np.atleast_2d(np.asarray(pooled, dtype=float))
    y = np.asarray(targets, dtype=int)
    n_cls = len(table.categories) + 1
    if y.shape[0] != X.shape[0]:
        raise InvalidInputError("targets and features differ in length")
    if np.any(y < 0) or np.any(y >= n_cls):
        raise InvalidInputError(f"target outside [0, {n_cls})")
    n = X.shape[0]
    M = _class_matrix(table, normalize)
    r = X @ params.W.T + params.b
    if normalize:
        norm = np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
        rh = r / norm
    else:
        rh = r
    z = logit_scale * rh @ M.T
    zmax = z.max(axis=1, keepdims=True)
    logsum = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = np.mean(logsum - z[np.arange(n), y])
    P = np.exp(z - logsum[:, None])
    dz = P.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    drh = logit_scale * dz @ M
    if normalize:
        dr = (drh - rh * np.sum(drh * rh, axis=1, keepdims=True)) / norm
    else:
        dr = drh

    o = X @ params.u + params.c[0]
    t = (y > 0).astype(float)
    # numerically stable BCE with logits
    bce = np.mean(np.maximum(o, 0) - o * t + np.log1p(np.exp(-np.abs(o))))
    do = objectness_weight * (_sigmoid(o) - t) / n

    grads = {"W": dr.T @ X, "b": dr.sum(axis=0), "u": X.T @ do, "c": np.array([do.sum()])}
    return float(ce + objectness_weight * bce), grads


# -- training ---------------------------------------------------------------------

FeatureExtractor = Callable[[object], VisualFeatures]
ProposalFn = Callable[[str, object], Sequence[Box]]


@dataclass
class TrainingSet:
    features: np.ndarray  # pooled, (n, feature_dim)
    targets: np.ndarray  # 0 = bg
    image_ids: list
    target_categories: set = field(default_factory=set)

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.targets > 0)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.targets == 0)[0]


def build_training_set(targets_by_image: Mapping[str, Sequence[tuple]], images: Mapping[str, object],
                       table: TextEmbeddingTable, extractor: FeatureExtractor,
                       proposals: Optional[ProposalFn] = None, neg_iou: float = 0.3) -> TrainingSet:
    """Positives are the given (box, category) pairs whose category is in the table;
    negatives are proposals overlapping every supervised box by IoU < ``neg_iou``.

    Boxes of categories outside the table are neither positives nor negatives.
    """
    idx = {c: i + 1 for i, c in enumerate(table.categories)}
    feats, targets, ids = [], [], []
    cats = set()
    for image_id in sorted(targets_by_image):
        entries = list(targets_by_image[image_id])
        if not entries:
            continue
        if image_id not in images:
            raise InvalidInputError(f"no image for {image_id}")
        image = images[image_id]
        vis = extractor(image)
        all_boxes = [b for b, _ in entries]
        pos = [(b, c) for b, c in entries if c in idx]
        for b, c in pos:
            feats.append(pool_region(vis, b))
            targets.append(idx[c])
            ids.append(image_id)
            cats.add(c)
        if proposals is not None:
            props = list(proposals(image_id, image))
            if props:
                ov = iou_matrix(props, all_boxes).max(axis=1)
                for b, m in zip(props, ov):
                    if m < neg_iou:
                        feats.append(pool_region(vis, b))
                        targets.append(0)
                        ids.append(image_id)
    X = np.stack(feats) if feats else np.zeros((0, 0))
    return TrainingSet(X, np.asarray(targets, dtype=int), ids, cats)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    update_norms: list = field(default_factory=list)
    target_categories: set = field(default_factory=set)
    iterations: int = 0


def _sgd(params: DetectorParams, data: TrainingSet, table: TextEmbeddingTable, cfg: TrainConfig
         ) -> tuple[DetectorParams, TrainHistory]:
    params = params.copy()
    hist = TrainHistory(target_categories=set(data.target_categories))
    pos, neg = data.positives, data.negatives
    if len(pos) == 0:
        raise InvalidInputError("no positive training regions")
    rng = np.random.default_rng([cfg.seed, 0x5])
    n_neg = 0 if len(neg) == 0 else int(round(cfg.batch_size * cfg.neg_ratio / (1.0 + cfg.neg_ratio)))
    n_pos = max(1, cfg.batch_size - n_neg)
    velocity = {g: np.zeros_like(v) for g, v in params.arrays().items()}
    for step in range(cfg.iterations):
        batch = np.concatenate([rng.choice(pos, n_pos), rng.choice(neg, n_neg) if n_neg else
                                np.zeros(0, dtype=int)])
        loss, grads = detection_loss(params, data.features[batch], data.targets[batch], table,
                                     cfg.objectness_weight, cfg.normalize, cfg.logit_scale)
        lr = cfg.lr_at(step)
        sq = 0.0
        for g in DetectorParams.GROUPS:
            p = getattr(params, g)
            grad = grads[g] + cfg.weight_decay * p
            velocity[g] = cfg.momentum * velocity[g] + grad
            delta = lr * velocity[g]
            p -= delta
            sq += float(np.sum(delta * delta))
        hist.losses.append(loss)
        hist.lrs.append(lr)
        hist.update_norms.append(np.sqrt(sq))
    hist.iterations = cfg.iterations
    return params, hist


def labels_by_image(labels: Iterable) -> dict[str, list[tuple]]:
    out: dict[str, list[tuple]] = {}
    for lab in labels:
        out.setdefault(lab.pair_id, []).append((lab.box, lab.category))
    return out


def train(labels, images: Mapping[str, object], table: TextEmbeddingTable, config: TrainConfig,
          extractor: FeatureExtractor, proposals: Optional[ProposalFn] = None,
          params: Optional[DetectorParams] = None, return_history: bool = False):
    """SGD on pseudo labels; negatives are proposals with IoU < neg_iou to every pseudo box."""
    labels = list(labels)
    if not labels:
        raise InvalidInputError("no pseudo labels to train on")
    data = build_training_set(labels_by_image(labels), images, table, extractor, proposals, config.neg_iou)
    if len(data.positives) == 0:
        raise InvalidInputError("no pseudo label falls in the embedding table's categories")
    if params is None:
        params = DetectorParams.init(data.features.shape[1], table.dim, config.seed)
    out, hist = _sgd(params, data, table, config)
    log.info("trained %d iterations on %d positives / %d negatives, final loss %.4f",
             config.iterations, len(data.positives), len(data.negatives),
             hist.losses[-1] if hist.losses else float("nan"))
    return (out, hist) if return_history else out


def fine_tune(params: DetectorParams, ground_truth: Mapping[str, Sequence[tuple]],
              images: Mapping[str, object], table: TextEmbeddingTable, base: Sequence[str],
              config: TrainConfig, extractor: FeatureExtractor, proposals: Optional[ProposalFn] = None,
              return_history: bool = False):
    """Continue training from ``params`` on ground-truth boxes of base categories only."""
    missing = set(base) - set(table.categories)
    if missing:
        raise InvalidInputError(f"base categories missing from table: {sorted(missing)}")
    base_table = table.subset([c for c in table.categories if c in set(base)])
    if config.iterations == 0:
        out = params.copy()
        return (out, TrainHistory()) if return_history else out
    # novel boxes stay out of both positives and negatives
    data = build_training_set(ground_truth, images, base_table, extractor, proposals, config.neg_iou)
    out, hist = _sgd(params, data, base_table, config)
    return (out, hist) if return_history else out


# -- inference --------------------------------------------------------------------

def infer(features: VisualFeatures, proposals: Sequence[Box], class_subset: Sequence[str],
          params: DetectorParams, table: TextEmbeddingTable, image_id: str = "",
          threshold: float = 0.05, nms_iou: float = 0.5, normalize: bool = False,
          logit_scale: float = 1.0) -> list[Detection]:
    """Classify each proposal over bg plus ``class_subset``; threshold, then class-wise NMS."""
    subset = list(class_subset)
    if not subset:
        raise InvalidInputError("empty class subset")
    sub_table = table.subset(subset)
    boxes = list(proposals)
    if not boxes:
        return []
    R = project(params, pool_regions(features, boxes))
    P = match_probability(R, sub_table, normalize, logit_scale)
    assign = P.argmax(axis=1)
    conf = P[np.arange(len(boxes)), assign]
    by_class: dict[int, list[int]] = {}
    for i, (a, p) in enumerate(zip(assign, conf)):
        if a == 0 or p < threshold:
            continue
        by_class.setdefault(int(a), []).append(i)
    out = []
    for a in sorted(by_class):
        idx = by_class[a]
        keep = nms([boxes[i] for i in idx], [float(conf[i]) for i in idx], nms_iou)
        for k in keep:
            i = idx[k]
            out.append(Detection(image_id, subset[a - 1], boxes[i], float(conf[i])))
    out.sort(key=lambda d: (-d.confidence, d.category, d.box.as_list()))
    return out


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params: DetectorParams, config: TrainConfig, iterations: int,
                    extra: Optional[dict] = None) -> None:
    cfg = asdict(config)
    cfg["milestones"] = list(config.milestones)
    doc = {"schema_version": CHECKPOINT_VERSION, "params": params.to_json(), "config": cfg,
           "seed": config.seed, "iterations": iterations}
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[DetectorParams, TrainConfig, dict]:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        params = DetectorParams.from_json(doc["params"])
        config = TrainConfig(**doc["config"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    return params, config, doc
