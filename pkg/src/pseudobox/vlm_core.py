"""Toy cross-attention multimodal encoder with analytic attention gradients.

Text tokens attend over image grid cells for ``n_layers`` layers; the
image-text similarity ``s`` is a fixed linear readout of the final [CLS]
hidden state. ``forward`` returns every layer's attention together with
d s / d A (post-softmax), from which Grad-CAM activation maps are built.

Parameters are seeded and never trained. When a grounding lexicon is passed
to :meth:`ToyVLM.encode_text`, lexicon words are embedded in the same color
subspace the image features use, which stands in for the word-region
alignment a pretrained model would have learned.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .boxes import InvalidInputError

CLS, SEP, PAD = "[CLS]", "[SEP]", "[PAD]"
SPECIAL_TOKENS = (CLS, SEP, PAD)
_N_POS = 4


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    n_layers: int = 2
    n_heads: int = 2
    grid: tuple = (8, 8)
    gradcam_layer: Optional[int] = None  # 1-based; None means the last layer
    seed: int = 0
    identity_projections: bool = False
    residual: bool = True
    text_mixing: float = 0.5
    grounding_strength: float = 6.0
    token_noise: float = 0.3
    presence: float = 4.0
    position_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.d < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise InvalidInputError("d, n_layers and n_heads must be positive")
        if self.d % self.n_heads:
            raise InvalidInputError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise InvalidInputError(f"bad grid {self.grid}")
        if not 1 <= self.layer_for_gradcam <= self.n_layers:
            raise InvalidInputError(f"gradcam_layer must lie in [1, {self.n_layers}]")
        if self.identity_projections and self.n_heads != 1:
            raise InvalidInputError("identity projections need a single head")
        if not 0.0 <= self.text_mixing <= 1.0:
            raise InvalidInputError("text_mixing must lie in [0, 1]")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def n_regions(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def layer_for_gradcam(self) -> int:
        return self.n_layers if self.gradcam_layer is None else self.gradcam_layer

    @classmethod
    def literal(cls, d: int, n_layers: int = 1, grid=(1, 2), seed: int = 0, **kw) -> "ModelConfig":
        """Single head, identity projections, no residual or token mixing: h^l = A^l V."""
        kw.setdefault("residual", False)
        kw.setdefault("text_mixing", 0.0)
        return cls(d=d, n_layers=n_layers, n_heads=1, grid=grid, seed=seed,
                   identity_projections=True, **kw)


@dataclass
class VisualFeatures:
    V: np.ndarray
    grid: tuple
    image_size: Optional[tuple] = None  # (height, width) of the source raster

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if self.V.ndim != 2 or self.V.shape[0] != self.grid[0] * self.grid[1]:
            raise InvalidInputError(f"V shape {self.V.shape} does not match grid {self.grid}")
        if not np.all(np.isfinite(self.V)):
            raise InvalidInputError("non-finite visual features")

    def permuted(self, perm: Sequence[int]) -> "VisualFeatures":
        return VisualFeatures(self.V[np.asarray(perm)], self.grid, self.image_size)


@dataclass
class TextFeatures:
    T: np.ndarray
    tokens: list

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        if self.T.ndim != 2 or self.T.shape[0] != len(self.tokens):
            raise InvalidInputError(f"T shape {self.T.shape} does not match {len(self.tokens)} tokens")
        if not np.all(np.isfinite(self.T)):
            raise InvalidInputError("non-finite text features")

    @property
    def cls_index(self) -> int:
        return self.tokens.index(CLS) if CLS in self.tokens else 0


@dataclass
class AttentionRecord:
    """One cross-attention layer: A has shape (n_heads, N_T, N_V); H is N_T x d."""

    layer: int
    A: np.ndarray
    H: np.ndarray

    def head(self, h: int) -> np.ndarray:
        return self.A[h]


@dataclass
class SimilarityScore:
    s: float
    gradients: list  # per layer, arrays shaped like AttentionRecord.A


@dataclass
class ActivationMap:
    token_index: int
    phi: np.ndarray  # flat, length N_V
    grid: tuple
    object_name: str = ""

    def as_grid(self) -> np.ndarray:
        return self.phi.reshape(self.grid)


@dataclass
class _LayerParams:
    Wq: list
    Wk: list
    Wv: list
    Wo: np.ndarray


@dataclass
class ToyParams:
    W_img: np.ndarray  # d x (1 + 3 + _N_POS)
    color_basis: Optional[np.ndarray]  # d x 3, or None when d is too small
    layers: list
    w: np.ndarray


def _orthonormal(rng, d, k):
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def _complete_basis(rng, fixed: np.ndarray, k: int) -> np.ndarray:
    """Orthonormal d x k basis whose first columns span ``fixed``."""
    d = fixed.shape[0]
    m = np.concatenate([fixed, rng.standard_normal((d, k - fixed.shape[1]))], axis=1)
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))


def init_params(cfg: ModelConfig) -> ToyParams:
    rng = np.random.default_rng(cfg.seed)
    d, dh = cfg.d, cfg.d_head
    # grounded layout needs presence + 3 color + positional directions, and
    # every head must see presence and color
    grounded = d >= 1 + 3 + _N_POS and dh >= 4 and not cfg.identity_projections
    if grounded:
        Q = _orthonormal(rng, d, d)
        presence_dir, color_basis, pos_basis = Q[:, :1], Q[:, 1:4], Q[:, 4:4 + _N_POS]
        W_img = np.concatenate([cfg.presence * presence_dir, color_basis,
                                cfg.position_scale * pos_basis], axis=1)
    else:
        color_basis = None
        W_img = rng.standard_normal((d, 1 + 3 + _N_POS)) / np.sqrt(1 + 3 + _N_POS)

    layers = []
    for _ in range(cfg.n_layers):
        if cfg.identity_projections:
            eye = np.eye(d)
            layers.append(_LayerParams([eye], [eye], [eye], eye.copy()))
        elif grounded:
            heads = [_complete_basis(rng, np.concatenate([presence_dir, color_basis], axis=1), dh)
                     for _ in range(cfg.n_heads)]
            Wo = np.concatenate([P.T for P in heads], axis=0) / cfg.n_heads
            layers.append(_LayerParams(heads, [P.copy() for P in heads], [P.copy() for P in heads], Wo))
        else:
            s = 1.0 / np.sqrt(d)
            layers.append(_LayerParams(
                [rng.standard_normal((d, dh)) * s for _ in range(cfg.n_heads)],
                [rng.standard_normal((d, dh)) * s for _ in range(cfg.n_heads)],
                [rng.standard_normal((d, dh)) * s for _ in range(cfg.n_heads)],
                rng.standard_normal((d, d)) * s,
            ))

    noise = rng.standard_normal(d) / np.sqrt(d)
    if grounded:
        # the readout looks along the visual-presence direction, so attending to
        # image evidence raises s and d s / d A stays positive on visual cells
        w = presence_dir[:, 0] + 0.1 * noise
    else:
        w = noise
    return ToyParams(W_img=W_img, color_basis=color_basis, layers=layers, w=w)


def _token_vector(seed: int, token: str, d: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(d) / np.sqrt(d)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cell_edges(n_pixels: int, n_cells: int) -> list[tuple[int, int]]:
    edges = (np.arange(n_cells + 1) * n_pixels) // n_cells
    out = []
    for i in range(n_cells):
        a = min(int(edges[i]), n_pixels - 1)
        b = max(int(edges[i + 1]), a + 1)
        out.append((a, b))
    return out


def cell_mean_colors(image: np.ndarray, grid) -> np.ndarray:
    """Mean RGB in [0, 1] of each grid cell, row-major, shape (Hg*Wg, 3)."""
    img = as_float_image(image)
    Hg, Wg = grid
    rows = _cell_edges(img.shape[0], Hg)
    cols = _cell_edges(img.shape[1], Wg)
    out = np.empty((Hg * Wg, 3))
    for i, (y0, y1) in enumerate(rows):
        for j, (x0, x1) in enumerate(cols):
            out[i * Wg + j] = img[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
    return out


def as_float_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] < 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"expected a non-empty HxWx3 image, got shape {img.shape}")
    img = img[:, :, :3]
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(float) / 255.0
    return img.astype(float)


def position_encoding(grid) -> np.ndarray:
    Hg, Wg = grid
    ys, xs = np.meshgrid((np.arange(Hg) + 0.5) / Hg, (np.arange(Wg) + 0.5) / Wg, indexing="ij")
    ys, xs = ys.ravel(), xs.ravel()
    return np.stack([np.sin(np.pi * xs), np.cos(np.pi * xs),
                     np.sin(np.pi * ys), np.cos(np.pi * ys)], axis=1)


@dataclass
class _Cache:
    h_in: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    K: list = field(default_factory=list)
    Vv: list = field(default_factory=list)
    A: list = field(default_factory=list)
    H: list = field(default_factory=list)
    h_out: list = field(default_factory=list)


class ToyVLM:
    """Seeded toy multimodal encoder.

    >>> model = ToyVLM(ModelConfig(seed=0))
    >>> vis = model.encode_image(np.zeros((32, 32, 3), dtype=np.uint8))
    >>> vis.V.shape
    (64, 16)
    """

    def __init__(self, config: Optional[ModelConfig] = None, params: Optional[ToyParams] = None):
        self.config = config or ModelConfig()
        self.params = params or init_params(self.config)

    # -- encoders ---------------------------------------------------------
    def encode_image(self, image) -> VisualFeatures:
        cfg = self.config
        img = as_float_image(image)
        colors = cell_mean_colors(img, cfg.grid)
        n = colors.shape[0]
        f = np.concatenate([np.ones((n, 1)), 2.0 * colors - 1.0, position_encoding(cfg.grid)], axis=1)
        return VisualFeatures(f @ self.params.W_img.T, cfg.grid, img.shape[:2])

    def encode_text(self, tokens: Sequence[str], lexicon: Optional[Mapping[str, Sequence[float]]] = None
                    ) -> TextFeatures:
        """Embed tokens; ``lexicon`` maps a word to an RGB prototype in [0, 1]."""
        tokens = list(tokens)
        if not tokens:
            raise InvalidInputError("empty caption")
        cfg = self.config
        rows = []
        for tok in tokens:
            v = cfg.token_noise * _token_vector(cfg.seed, tok, cfg.d)
            if lexicon and tok in lexicon and self.params.color_basis is not None:
                rgb = np.asarray(lexicon[tok], dtype=float)
                v = v + cfg.grounding_strength * self.params.color_basis @ (2.0 * rgb - 1.0)
            rows.append(v)
        return TextFeatures(np.stack(rows), tokens)

    # -- attention --------------------------------------------------------
    def _heads(self, h_prev, V, layer):
        cfg = self.config
        lp = self.params.layers[layer - 1]
        Qs, Ks, Vs, As = [], [], [], []
        for h in range(cfg.n_heads):
            Q = h_prev @ lp.Wq[h]
            K = V @ lp.Wk[h]
            As.append(_softmax_rows(Q @ K.T / np.sqrt(cfg.d_head)))
            Qs.append(Q)
            Ks.append(K)
            Vs.append(V @ lp.Wv[h])
        return Qs, Ks, Vs, np.stack(As)

    def _combine(self, A, Vs, layer):
        lp = self.params.layers[layer - 1]
        O = np.concatenate([A[h] @ Vs[h] for h in range(len(Vs))], axis=1)
        return O @ lp.Wo

    def cross_attention_layer(self, h_prev: np.ndarray, visual: VisualFeatures, layer: int) -> AttentionRecord:
        h_prev = np.asarray(h_prev, dtype=float)
        self._check(h_prev, visual, layer)
        _, _, Vs, A = self._heads(h_prev, visual.V, layer)
        return AttentionRecord(layer, A, self._combine(A, Vs, layer))

    def _check(self, h_prev, visual, layer):
        cfg = self.config
        if h_prev.ndim != 2 or h_prev.shape[1] != cfg.d:
            raise InvalidInputError(f"hidden states shape {h_prev.shape} incompatible with d={cfg.d}")
        if visual.V.shape[1] != cfg.d:
            raise InvalidInputError(f"visual features width {visual.V.shape[1]} != d={cfg.d}")
        if not 1 <= layer <= cfg.n_layers:
            raise InvalidInputError(f"layer {layer} outside [1, {cfg.n_layers}]")

    def _mix(self, H):
        g = self.config.text_mixing
        if g == 0.0:
            return H
        return (1.0 - g) * H + g * H.mean(axis=0, keepdims=True)

    def _run(self, text: TextFeatures, visual: VisualFeatures, start: int = 1, h0=None,
             override: Optional[np.ndarray] = None, cache: Optional[_Cache] = None) -> float:
        """Run layers start..L; ``override`` replaces layer ``start``'s post-softmax attention."""
        cfg = self.config
        h = text.T if h0 is None else h0
        for layer in range(start, cfg.n_layers + 1):
            self._check(h, visual, layer)
            Qs, Ks, Vs, A = self._heads(h, visual.V, layer)
            if override is not None and layer == start:
                A = override
            H = self._combine(A, Vs, layer)
            h_new = self._mix(H) + (h if cfg.residual else 0.0)
            if cache is not None:
                cache.h_in.append(h)
                cache.Q.append(Qs)
                cache.K.append(Ks)
                cache.Vv.append(Vs)
                cache.A.append(A)
                cache.H.append(H)
                cache.h_out.append(h_new)
            h = h_new
        return float(self.params.w @ h[text.cls_index])

    def forward(self, text: TextFeatures, visual: VisualFeatures) -> tuple[list, SimilarityScore]:
        """All attention records plus s and analytic d s / d A for every layer."""
        cfg = self.config
        cache = _Cache()
        s = self._run(text, visual, cache=cache)
        n_t = text.T.shape[0]
        G = np.zeros((n_t, cfg.d))
        G[text.cls_index] = self.params.w
        grads = [None] * cfg.n_layers
        scale = 1.0 / np.sqrt(cfg.d_head)
        for li in range(cfg.n_layers - 1, -1, -1):
            lp = self.params.layers[li]
            g = cfg.text_mixing
            dH = (1.0 - g) * G + g * G.mean(axis=0, keepdims=True) if g else G
            dO = dH @ lp.Wo.T
            A = cache.A[li]
            dA = np.empty_like(A)
            dh_prev = G.copy() if cfg.residual else np.zeros_like(G)
            for h in range(cfg.n_heads):
                dO_h = dO[:, h * cfg.d_head:(h + 1) * cfg.d_head]
                dA[h] = dO_h @ cache.Vv[li][h].T
                dlogits = A[h] * (dA[h] - np.sum(dA[h] * A[h], axis=1, keepdims=True))
                dQ = dlogits @ cache.K[li][h] * scale
                dh_prev += dQ @ lp.Wq[h].T
            grads[li] = dA
            G = dh_prev
        records = [AttentionRecord(li + 1, cache.A[li], cache.H[li]) for li in range(cfg.n_layers)]
        return records, SimilarityScore(s, grads)

    def finite_diff_grad(self, text: TextFeatures, visual: VisualFeatures, layer: int, head: int,
                         eps: float = 1e-4) -> np.ndarray:
        """Central differences of s w.r.t. one head's post-softmax attention at ``layer``."""
        if eps <= 0:
            raise InvalidInputError("eps must be positive")
        cache = _Cache()
        self._run(text, visual, cache=cache)
        h_in = cache.h_in[layer - 1]
        A0 = cache.A[layer - 1]
        out = np.zeros(A0.shape[1:])
        for t in range(A0.shape[1]):
            for j in range(A0.shape[2]):
                Ap = A0.copy()
                Ap[head, t, j] += eps
                Am = A0.copy()
                Am[head, t, j] -= eps
                sp = self._run(text, visual, start=layer, h0=h_in, override=Ap)
                sm = self._run(text, visual, start=layer, h0=h_in, override=Am)
                out[t, j] = (sp - sm) / (2.0 * eps)
        return out

    def activation_maps(self, text: TextFeatures, visual: VisualFeatures,
                        token_indices: Sequence[int]) -> list[ActivationMap]:
        records, score = self.forward(text, visual)
        li = self.config.layer_for_gradcam - 1
        return [grad_cam(records[li], score.gradients[li], t, grid=visual.grid,
                         object_name=text.tokens[t]) for t in token_indices]


def grad_cam(record: AttentionRecord, grads: np.ndarray, token_index: int, grid=None,
             object_name: str = "") -> ActivationMap:
    """Head-averaged A[t] * relu(dS/dA[t])."""
    A = np.asarray(record.A, dtype=float)
    G = np.asarray(grads, dtype=float)
    if A.ndim == 2:
        A = A[None]
    if G.ndim == 2:
        G = G[None]
    if A.shape != G.shape:
        raise InvalidInputError(f"attention {A.shape} and gradient {G.shape} shapes differ")
    if not 0 <= token_index < A.shape[1]:
        raise InvalidInputError(f"token index {token_index} out of range [0, {A.shape[1]})")
    phi = (A[:, token_index] * np.maximum(G[:, token_index], 0.0)).mean(axis=0)
    if grid is None:
        grid = (1, A.shape[2])
    return ActivationMap(token_index, phi, tuple(grid), object_name)


# -- imported tensors -------------------------------------------------------

IMPORT_SCHEMA_VERSION = 1


@dataclass
class ImportedPair:
    """Attention and gradient tensors exported from an external model for one pair.

    ``attention`` and ``gradients`` have shape (n_layers, n_heads, N_T, N_V);
    ``layers`` holds the 1-based layer numbers of the first axis.
    """

    pair_id: str
    tokens: list
    grid: tuple
    layers: list
    attention: np.ndarray
    gradients: np.ndarray

    def record(self, layer: int) -> tuple[AttentionRecord, np.ndarray]:
        if layer not in self.layers:
            raise InvalidInputError(f"pair {self.pair_id}: layer {layer} not exported (have {self.layers})")
        i = self.layers.index(layer)
        return AttentionRecord(layer, self.attention[i], np.zeros((len(self.tokens), 0))), self.gradients[i]


def save_imported_pair(rec: ImportedPair, directory, fmt: str = "json") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == "npz":
        path = directory / f"{rec.pair_id}.npz"
        np.savez(path, schema_version=IMPORT_SCHEMA_VERSION, pair_id=rec.pair_id,
                 tokens=np.array(rec.tokens), grid=np.array(rec.grid), layers=np.array(rec.layers),
                 attention=rec.attention, gradients=rec.gradients)
        return path
    path = directory / f"{rec.pair_id}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"schema_version": IMPORT_SCHEMA_VERSION, "pair_id": rec.pair_id,
                   "tokens": rec.tokens, "grid": list(rec.grid), "layers": rec.layers,
                   "attention": rec.attention.tolist(), "gradients": rec.gradients.tolist()}, f)
    return path


def load_imported_pair(path) -> ImportedPair:
    path = Path(path)
    try:
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                data = {k: z[k] for k in z.files}
            data["pair_id"] = str(data["pair_id"])
            data["tokens"] = [str(t) for t in data["tokens"]]
            data["grid"] = tuple(int(g) for g in data["grid"])
            data["layers"] = [int(x) for x in data["layers"]]
        else:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        rec = ImportedPair(str(data["pair_id"]), list(data["tokens"]), tuple(data["grid"]),
                           [int(x) for x in data["layers"]],
                           np.asarray(data["attention"], dtype=float),
                           np.asarray(data["gradients"], dtype=float))
    except (KeyError, ValueError, OSError) as exc:
        raise InvalidInputError(f"{path}: malformed tensor record ({exc})") from exc
    n_t, n_v = len(rec.tokens), rec.grid[0] * rec.grid[1]
    expect = (len(rec.layers), rec.attention.shape[1] if rec.attention.ndim == 4 else -1, n_t, n_v)
    if rec.attention.shape != expect or rec.gradients.shape != expect:
        raise InvalidInputError(f"{path}: tensors shaped {rec.attention.shape}/{rec.gradients.shape}, "
                                f"expected {expect}")
    return rec


def export_toy_pair(model: ToyVLM, pair_id: str, text: TextFeatures, visual: VisualFeatures) -> ImportedPair:
    """Package a toy forward pass in the import schema."""
    records, score = model.forward(text, visual)
    return ImportedPair(pair_id, list(text.tokens), tuple(visual.grid),
                        [r.layer for r in records],
                        np.stack([r.A for r in records]), np.stack(score.gradients))


def index_imported_dir(directory) -> dict[str, Path]:
    out = {}
    for name in sorted(os.listdir(directory)):
        p = Path(directory) / name
        if p.suffix in (".json", ".npz"):
            out[p.stem] = p
    return out
