"""Patch featurization, the dilated-attention slide encoder, and the projector.

Three stages: a frozen per-patch featurizer (stand-in for a pretrained
patch model, never trained), a sequence encoder over all patch features
of one slide built from multi-branch dilated attention, and an affine or
two-layer projector into the language model's embedding width. A config
flag can bypass the slide encoder entirely, feeding patch features
straight to the projector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    Parameter,
    Tensor,
    UsageError,
    concat,
    masked_logsumexp,
    masked_softmax,
    put_rows,
    stream,
    take_rows,
)
from .slide_io import PatchGrid, Raster, box_weights, saturation

__all__ = [
    "EmbeddingMatrix",
    "save_embeddings",
    "load_embeddings",
    "PatchEncoder",
    "SlideEncoderConfig",
    "SlideEncoder",
    "Projector",
    "dilated_branch",
    "dilated_attention",
]

EMBEDDINGS_MAGIC = b"SVLMEMB1"


@dataclass
class EmbeddingMatrix:
    """Per-patch feature rows, ordered like the grid's tissue tiles."""

    n_patches: int
    dim: int
    values: np.ndarray  # float64 [N, D]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n_patches, self.dim):
            raise UsageError(
                f"embedding shape {self.values.shape} != ({self.n_patches}, {self.dim})"
            )
        if not np.isfinite(self.values).all():
            raise UsageError("embeddings contain non-finite values")


def save_embeddings(path, emb: EmbeddingMatrix) -> None:
    """Write `magic | u32 N | u32 D | float32-LE values` to disk."""
    header = EMBEDDINGS_MAGIC + np.array([emb.n_patches, emb.dim], dtype="<u4").tobytes()
    Path(path).write_bytes(header + emb.values.astype("<f4").tobytes(order="C"))


def load_embeddings(path, expect_n: int | None = None, expect_dim: int | None = None) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if data[:8] != EMBEDDINGS_MAGIC:
        raise UsageError(f"{path}: not an embeddings file")
    n, dim = (int(v) for v in np.frombuffer(data[8:16], dtype="<u4"))
    body = data[16:]
    if len(body) != n * dim * 4:
        raise UsageError(f"{path}: expected {n * dim} float32 values")
    values = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)
    if expect_n is not None and n != expect_n:
        raise UsageError(f"{path}: embedding rows {n} != expected {expect_n}")
    if expect_dim is not None and dim != expect_dim:
        raise UsageError(f"{path}: embedding dim {dim} != expected {expect_dim}")
    if not np.isfinite(values).all():
        raise UsageError(f"{path}: embeddings contain non-finite values")
    return EmbeddingMatrix(n, dim, values)


# -- frozen patch featurizer ---------------------------------------------------


class PatchEncoder:
    """Fixed random projection of pooled patch statistics.

    The projection matrix is drawn once from the seed and marked
    non-trainable; identical patches always map to identical vectors.
    Statistics: per-channel mean and spread, a 4x4 grid of cell means,
    and two saturation summaries, 56 values in total.
    """

    N_STATS = 56

    def __init__(self, dim: int = 32, patch_size: int = 224, seed: int = 0):
        if dim < 1 or patch_size < 1:
            raise UsageError("dim and patch_size must be >= 1")
        self.dim = dim
        self.patch_size = patch_size
        rng = stream(seed, "patch-encoder")
        scale = 1.0 / math.sqrt(self.N_STATS)
        weight = rng.uniform(-scale, scale, size=(self.N_STATS, dim))
        self.weight = Parameter("patch_encoder.weight", weight, trainable=False)
        self.bias = Parameter("patch_encoder.bias", np.zeros(dim), trainable=False)
        self._cell_w = box_weights(patch_size, 4)

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def _stats(self, patch: np.ndarray) -> np.ndarray:
        x = patch.astype(np.float64) / 255.0
        if x.shape[2] == 1:
            x = np.repeat(x, 3, axis=2)
        cells = np.stack(
            [self._cell_w @ x[:, :, c] @ self._cell_w.T for c in range(3)], axis=2
        )
        sat = saturation(patch)
        return np.concatenate(
            [
                x.mean(axis=(0, 1)),
                x.std(axis=(0, 1)),
                cells.reshape(-1),
                [sat.mean(), float(np.mean(sat > 0.08))],
            ]
        )

    def encode(self, patch: np.ndarray) -> np.ndarray:
        patch = np.asarray(patch)
        if patch.ndim != 3 or patch.shape[:2] != (self.patch_size, self.patch_size):
            raise UsageError(
                f"patch shape {patch.shape} does not match patch size {self.patch_size}"
            )
        if patch.shape[2] not in (1, 3):
            raise UsageError("patch must have 1 or 3 channels")
        return self._stats(patch) @ self.weight.value.data + self.bias.value.data

    def encode_grid(self, raster: Raster, grid: PatchGrid) -> EmbeddingMatrix:
        """Featurize every tissue tile, row-major order."""
        ps = grid.patch_size
        rows = []
        for entry in grid.tissue_entries():
            patch = raster.pixels[entry.y : entry.y + ps, entry.x : entry.x + ps]
            rows.append(self.encode(patch))
        values = np.stack(rows) if rows else np.zeros((0, self.dim))
        return EmbeddingMatrix(len(rows), self.dim, values)


# -- dilated attention ----------------------------------------------------------


def dilated_branch(
    q: Tensor, k: Tensor, v: Tensor, w: int, r: int, offset: int = 0
) -> tuple[Tensor, Tensor, np.ndarray]:
    """One (segment length, dilation) branch of sparse attention.

    The sequence is cut into ceil(N/w) segments; within each, the rows at
    `offset` with stride `r` attend densely among themselves. The final
    segment is right-padded and padded keys are masked out. Returns the
    [N, D] output (zero at unselected rows), the per-row log of the
    softmax denominator (zero at unselected rows), and the boolean
    selection mask.
    """
    if r < 1 or w < r:
        raise UsageError("branch needs w >= r >= 1")
    if w % r:
        raise UsageError(f"segment length {w} not divisible by dilation {r}")
    if not 0 <= offset < r:
        raise UsageError("offset must lie in [0, r)")
    n, dim = q.shape
    locals_ = list(range(offset, w, r))
    m_full = len(locals_)
    scale = 1.0 / math.sqrt(dim)
    selected = np.zeros(n, dtype=bool)
    out_parts: list[Tensor] = []
    logden_parts: list[Tensor] = []
    for start in range(0, n, w):
        real = [start + l for l in locals_ if start + l < n]
        if not real:
            continue
        m_real = len(real)
        qs, ks, vs = take_rows(q, real), take_rows(k, real), take_rows(v, real)
        if m_real < m_full:
            pad_to = list(range(m_real))
            qs = put_rows(m_full, pad_to, qs)
            ks = put_rows(m_full, pad_to, ks)
            vs = put_rows(m_full, pad_to, vs)
        key_ok = np.arange(m_full) < m_real
        mask = np.broadcast_to(key_ok[None, :], (m_full, m_full))
        scores = (qs @ ks.T) * scale
        att = masked_softmax(scores, mask, axis=-1)
        seg_out = att @ vs
        seg_logden = masked_logsumexp(scores, mask, axis=-1)
        if m_real < m_full:
            seg_out = seg_out.rows(0, m_real)
            seg_logden = seg_logden.rows(0, m_real)
        out_parts.append(put_rows(n, real, seg_out))
        logden_parts.append(put_rows(n, real, seg_logden))
        selected[real] = True
    if not out_parts:
        zero = Tensor(np.zeros((n, dim)))
        return zero, Tensor(np.zeros(n)), selected
    out = out_parts[0]
    logden = logden_parts[0]
    for part, ld in zip(out_parts[1:], logden_parts[1:]):
        out = out + part
        logden = logden + ld
    return out, logden, selected


def dilated_attention(q: Tensor, k: Tensor, v: Tensor, w: int, r: int, offset: int = 0) -> Tensor:
    """Output of a single dilated-attention branch (zeros at unselected rows)."""
    out, _, _ = dilated_branch(q, k, v, w, r, offset)
    return out


@dataclass
class SlideEncoderConfig:
    """Shape and sparsity schedule of the slide-level encoder."""

    in_dim: int = 32
    heads: int = 4
    head_dim: int = 32
    layers: int = 2
    ffn_mult: int = 4
    branches: tuple[tuple[int, int], ...] = ((16, 1), (32, 2), (64, 4))
    positional: str = "none"   # "none" | "grid"
    grid_rows: int = 64
    grid_cols: int = 64

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise UsageError("heads and head_dim must be >= 1")
        if self.layers < 0 or self.ffn_mult < 1:
            raise UsageError("layers must be >= 0 and ffn_mult >= 1")
        if not self.branches:
            raise UsageError("at least one branch required")
        for w, r in self.branches:
            if r < 1 or w < r:
                raise UsageError(f"branch ({w},{r}) needs w >= r >= 1")
            if w % r:
                raise UsageError(f"branch ({w},{r}): segment length not divisible by dilation")
        if self.positional not in ("none", "grid"):
            raise UsageError("positional must be 'none' or 'grid'")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    def effective_branches(self, n: int) -> list[tuple[int, int]]:
        """Cap segment lengths at the sequence, keeping divisibility by r."""
        out = []
        for w, r in self.branches:
            cap = math.ceil(n / r) * r
            out.append((min(w, cap), r))
        return out


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    scale = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=(fan_in, fan_out))


class _Linear:
    def __init__(self, prefix: str, fan_in: int, fan_out: int, rng, bias: bool = True):
        self.weight = Parameter(f"{prefix}.weight", _linear_init(rng, fan_in, fan_out))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight.value
        return out + self.bias.value if self.bias is not None else out

    def params(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class _LayerNorm:
    EPS = 1e-5

    def __init__(self, prefix: str, dim: int):
        self.gain = Parameter(f"{prefix}.gain", np.ones(dim))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.EPS).sqrt()
        return normed * self.gain.value + self.bias.value

    def params(self) -> list[Parameter]:
        return [self.gain, self.bias]


class DilatedSelfAttention:
    """Multi-head attention where head h uses segment offset h mod r.

    Branch outputs at each position are combined with weights
    proportional to each branch's softmax denominator, so branches that
    barely attend contribute little.
    """

    def __init__(self, prefix: str, cfg: SlideEncoderConfig, rng):
        dim = cfg.model_dim
        self.cfg = cfg
        self.wq = _Linear(f"{prefix}.q", dim, dim, rng)
        # A key bias shifts every score in a row equally, which softmax
        # cancels, so it would train with an exactly-zero gradient.
        self.wk = _Linear(f"{prefix}.k", dim, dim, rng, bias=False)
        self.wv = _Linear(f"{prefix}.v", dim, dim, rng)
        self.wo = _Linear(f"{prefix}.out", dim, dim, rng)

    def params(self) -> list[Parameter]:
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        cfg = self.cfg
        dh = cfg.head_dim
        q_all, k_all, v_all = self.wq(x), self.wk(x), self.wv(x)
        branches = cfg.effective_branches(n)
        head_outs = []
        for h in range(cfg.heads):
            q = q_all.cols(h * dh, (h + 1) * dh)
            k = k_all.cols(h * dh, (h + 1) * dh)
            v = v_all.cols(h * dh, (h + 1) * dh)
            outs, logdens, sels = [], [], []
            for w, r in branches:
                out, logden, sel = dilated_branch(q, k, v, w, r, offset=h % r)
                outs.append(out)
                logdens.append(logden.reshape(n, 1))
                sels.append(sel)
            if len(branches) == 1:
                # Sole branch gets weight 1 wherever it selected anything.
                head = outs[0]
            else:
                weights = masked_softmax(
                    concat(logdens, axis=1), np.stack(sels, axis=1), axis=1
                )
                head = weights.cols(0, 1) * outs[0]
                for b in range(1, len(branches)):
                    head = head + weights.cols(b, b + 1) * outs[b]
            head_outs.append(head)
        merged = head_outs[0] if len(head_outs) == 1 else concat(head_outs, axis=1)
        return self.wo(merged)


class _FeedForward:
    def __init__(self, prefix: str, dim: int, mult: int, rng):
        self.up = _Linear(f"{prefix}.up", dim, mult * dim, rng)
        self.down = _Linear(f"{prefix}.down", mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).gelu())

    def params(self) -> list[Parameter]:
        return self.up.params() + self.down.params()


class _EncoderBlock:
    def __init__(self, prefix: str, cfg: SlideEncoderConfig, rng):
        dim = cfg.model_dim
        self.attn = DilatedSelfAttention(f"{prefix}.attn", cfg, rng)
        self.ln1 = _LayerNorm(f"{prefix}.ln1", dim)
        self.ffn = _FeedForward(f"{prefix}.ffn", dim, cfg.ffn_mult, rng)
        self.ln2 = _LayerNorm(f"{prefix}.ln2", dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.ln1(x + self.attn(x))
        return self.ln2(x + self.ffn(x))

    def params(self) -> list[Parameter]:
        return self.attn.params() + self.ln1.params() + self.ffn.params() + self.ln2.params()


class SlideEncoder:
    """Input projection plus `layers` post-norm dilated-attention blocks.

    With layers=0 this reduces to the input projection alone. Positional
    treatment is configurable: none (pure set encoder) or a learned pair
    of row/column embeddings looked up from grid coordinates.
    """

    GROUP = "slide_encoder"

    def __init__(self, cfg: SlideEncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "slide-encoder")
        self.input_proj = _Linear(f"{self.GROUP}.input", cfg.in_dim, cfg.model_dim, rng)
        self.blocks = [
            _EncoderBlock(f"{self.GROUP}.block{i}", cfg, rng) for i in range(cfg.layers)
        ]
        self.row_embed = self.col_embed = None
        if cfg.positional == "grid":
            scale = 1.0 / math.sqrt(cfg.model_dim)
            self.row_embed = Parameter(
                f"{self.GROUP}.pos_row",
                rng.uniform(-scale, scale, size=(cfg.grid_rows, cfg.model_dim)),
            )
            self.col_embed = Parameter(
                f"{self.GROUP}.pos_col",
                rng.uniform(-scale, scale, size=(cfg.grid_cols, cfg.model_dim)),
            )

    def params(self) -> list[Parameter]:
        out = self.input_proj.params()
        for block in self.blocks:
            out.extend(block.params())
        if self.row_embed is not None:
            out.extend([self.row_embed, self.col_embed])
        return out

    def __call__(self, features, coords: list[tuple[int, int]] | None = None) -> Tensor:
        if isinstance(features, EmbeddingMatrix):
            features = features.values
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.shape[0] == 0:
            raise UsageError("slide encoder needs at least one patch")
        x = self.input_proj(x)
        if self.cfg.positional == "grid":
            if coords is None:
                raise UsageError("grid positional encoding needs patch coordinates")
            rows = [c[0] for c in coords]
            cols = [c[1] for c in coords]
            if max(rows) >= self.cfg.grid_rows or max(cols) >= self.cfg.grid_cols:
                raise UsageError("patch coordinate outside configured positional grid")
            x = x + take_rows(self.row_embed.value, rows) + take_rows(self.col_embed.value, cols)
        for block in self.blocks:
            x = block(x)
        return x


class Projector:
    """Affine (or two-layer) map from encoder width into LM width."""

    GROUP = "projector"

    def __init__(self, in_dim: int, out_dim: int, layers: int = 1, seed: int = 0):
        if layers not in (1, 2):
            raise UsageError("projector supports 1 or 2 layers")
        rng = stream(seed, "projector")
        self.layers = layers
        if layers == 1:
            self.maps = [_Linear(f"{self.GROUP}.map", in_dim, out_dim, rng)]
        else:
            self.maps = [
                _Linear(f"{self.GROUP}.map0", in_dim, out_dim, rng),
                _Linear(f"{self.GROUP}.map1", out_dim, out_dim, rng),
            ]

    def params(self) -> list[Parameter]:
        out = []
        for m in self.maps:
            out.extend(m.params())
        return out

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if self.layers == 1:
            return self.maps[0](x)
        return self.maps[1](self.maps[0](x).gelu())
