"""Attention-based point cloud sampler.

Pipeline: neighbor grouping -> per-point feature embedding -> stacked
offset-attention layers -> soft sampling matrix -> soft (ASSN) or hardened
(AHSN) selection. The graph-building forward() supports training with the
straight-through backward; sample() is a graph-free inference path tuned for
the benchmark (blocked fused attention, hard selection by argmax without
materializing the column softmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (
    CasNetConfig,
    HardSamplingMatrix,
    IndexOutOfRangeError,
    NeighborTable,
    NoCacheError,
    PointCloud,
    SENTINEL,
    ShapeMismatchError,
    SoftSamplingMatrix,
    validate_cloud,
)
from .nnsearch import find_neighbors

ATTENTION_BLOCK_ROWS = 256


@dataclass
class OaLayerWeights:
    """One attention layer: query/key/value projections plus the offset MLP."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wg: Tensor
    bg: Tensor


@dataclass
class CasNetWeights:
    sigma: list[tuple[Tensor, Tensor]]
    layers: list[OaLayerWeights]
    rho_hidden: tuple[Tensor, Tensor]
    # no bias on the output projection: the per-column softmax (and the
    # per-column argmax) cancel any constant added to a whole column, so such
    # a bias would be an untrainable dead parameter
    rho_out: Tensor

    @property
    def c(self) -> int:
        return self.sigma[-1][0].data.shape[1]

    @property
    def m(self) -> int:
        return self.rho_out.data.shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.sigma:
            out += [w, b]
        for lay in self.layers:
            out += [lay.wq, lay.wk, lay.wv, lay.wg, lay.bg]
        out += [self.rho_hidden[0], self.rho_hidden[1], self.rho_out]
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.sigma):
            out[f"{prefix}sigma.{i}.w"] = w.data
            out[f"{prefix}sigma.{i}.b"] = b.data
        for i, lay in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wg", "bg"):
                out[f"{prefix}oa.{i}.{name}"] = getattr(lay, name).data
        out[f"{prefix}rho.hidden.w"] = self.rho_hidden[0].data
        out[f"{prefix}rho.hidden.b"] = self.rho_hidden[1].data
        out[f"{prefix}rho.out.w"] = self.rho_out.data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "", requires_grad: bool = False) -> "CasNetWeights":
        sigma = []
        i = 0
        while f"{prefix}sigma.{i}.w" in arrays:
            sigma.append(
                (
                    Tensor(arrays[f"{prefix}sigma.{i}.w"], requires_grad),
                    Tensor(arrays[f"{prefix}sigma.{i}.b"], requires_grad),
                )
            )
            i += 1
        layers = []
        i = 0
        while f"{prefix}oa.{i}.wq" in arrays:
            layers.append(
                OaLayerWeights(*(Tensor(arrays[f"{prefix}oa.{i}.{nm}"], requires_grad) for nm in ("wq", "wk", "wv", "wg", "bg")))
            )
            i += 1
        return cls(
            sigma=sigma,
            layers=layers,
            rho_hidden=(
                Tensor(arrays[f"{prefix}rho.hidden.w"], requires_grad),
                Tensor(arrays[f"{prefix}rho.hidden.b"], requires_grad),
            ),
            rho_out=Tensor(arrays[f"{prefix}rho.out.w"], requires_grad),
        )


def parameter_count(k: int, c: int, oa_layers: int, m: int, embed_hidden: int = 64, score_hidden: int = 256) -> int:
    """Total trainable scalars; depends only on the architecture sizes."""
    sigma = 6 * embed_hidden + embed_hidden + embed_hidden * c + c
    per_layer = 3 * c * c + c * c + c
    rho = oa_layers * c * score_hidden + score_hidden + score_hidden * m
    return sigma + oa_layers * per_layer + rho


def init_weights(config: CasNetConfig, m: int, dtype=np.float64, seed: int | None = None) -> CasNetWeights:
    """Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)]; zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    c, eh, sh = config.c, config.embed_hidden, config.score_hidden

    def affine(fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        return Tensor(w, True), Tensor(b, True)

    def square(fan_in, fan_out):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype), True)

    sigma = [affine(6, eh), affine(eh, c)]
    layers = []
    for _ in range(config.oa_layers):
        wq, wk, wv = square(c, c), square(c, c), square(c, c)
        wg, bg = affine(c, c)
        layers.append(OaLayerWeights(wq, wk, wv, wg, bg))
    return CasNetWeights(
        sigma=sigma,
        layers=layers,
        rho_hidden=affine(config.oa_layers * c, sh),
        rho_out=square(sh, m),
    )


@dataclass
class ForwardCache:
    """Every intermediate of one forward pass, kept for the backward."""

    neighbors: NeighborTable
    f_group: np.ndarray
    f_combine: np.ndarray
    f_pointwise: Tensor
    f_oa: list[Tensor]
    f_concat: Tensor
    soft: Tensor
    hard: HardSamplingMatrix | None
    p_sp: Tensor
    mode: str


def group_features(cloud: PointCloud, neighbors: NeighborTable) -> np.ndarray:
    """Offsets p_neighbor - p_self per slot; sentinel slots give the zero vector."""
    pts = cloud.points
    idx = neighbors.indices
    real = idx != SENTINEL
    if idx[real].size and (idx[real].min() < 0 or idx[real].max() >= cloud.n):
        raise IndexOutOfRangeError("neighbor index outside cloud")
    safe = np.where(real, idx, 0)
    grouped = pts[safe] - pts[:, None, :]
    grouped[~real] = 0.0
    return grouped


def combine(cloud: PointCloud, grouped: np.ndarray) -> np.ndarray:
    """Concatenate the point itself (duplicated across slots) with its offsets."""
    n, k, three = grouped.shape
    if three != 3 or n != cloud.n:
        raise ShapeMismatchError(f"grouped shape {grouped.shape} does not match cloud n={cloud.n}")
    dup = np.broadcast_to(cloud.points[:, None, :], (n, k, 3))
    return np.concatenate([dup, grouped], axis=2)


def embed(combined: np.ndarray, weights: CasNetWeights) -> Tensor:
    """Shared per-slot MLP followed by max-pooling over the neighbor axis."""
    n, k, width = combined.shape
    (w1, b1), (w2, b2) = weights.sigma
    if width != w1.data.shape[0]:
        raise ShapeMismatchError(f"combined width {width} vs sigma input {w1.data.shape[0]}")
    x = Tensor(combined.reshape(n * k, width).astype(w1.data.dtype, copy=False))
    h = ad.relu(ad.add_rowvec(ad.matmul(x, w1), b1))
    h = ad.add_rowvec(ad.matmul(h, w2), b2)
    per_slot = ad.reshape(h, (n, k, weights.c))
    return ad.max_over_axis(per_slot, axis=1)


def self_attention(f_in: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Scaled dot-product attention; each query row of the score matrix is normalized."""
    d_k = wk.data.shape[1]
    q = ad.matmul(f_in, wq)
    k = ad.matmul(f_in, wk)
    v = ad.matmul(f_in, wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax(scores, axis=1), v)


def _gamma(x: Tensor, lay: OaLayerWeights) -> Tensor:
    return ad.relu(ad.add_rowvec(ad.matmul(x, lay.wg), lay.bg))


def offset_attention(f_in: Tensor, lay: OaLayerWeights) -> Tensor:
    """gamma(F_in - F_sa) + F_in."""
    f_sa = self_attention(f_in, lay.wq, lay.wk, lay.wv)
    return ad.add(_gamma(ad.sub(f_in, f_sa), lay), f_in)


def self_attention_layer(f_in: Tensor, lay: OaLayerWeights) -> Tensor:
    """gamma(F_sa) + F_in; selectable alternative, not used by the default stack."""
    f_sa = self_attention(f_in, lay.wq, lay.wk, lay.wv)
    return ad.add(_gamma(f_sa, lay), f_in)


def asm(f_pointwise: Tensor, weights: CasNetWeights, oa_layers: int, layer_type: str = "oa") -> tuple[Tensor, list[Tensor]]:
    """Stack of skip-connected attention layers; outputs concatenated column-wise."""
    layer_fn = offset_attention if layer_type == "oa" else self_attention_layer
    outputs = []
    current = f_pointwise
    for lay in weights.layers[:oa_layers]:
        current = layer_fn(current, lay)
        outputs.append(current)
    return ad.concat_cols(outputs) if len(outputs) > 1 else outputs[0], outputs


def soft_matrix(f_concat: Tensor, weights: CasNetWeights, m: int) -> Tensor:
    """Score MLP then softmax over the input-point axis: each column sums to 1."""
    w1, b1 = weights.rho_hidden
    if weights.rho_out.data.shape[1] != m:
        raise ShapeMismatchError(f"score head emits {weights.rho_out.data.shape[1]} columns, expected m={m}")
    h = ad.relu(ad.add_rowvec(ad.matmul(f_concat, w1), b1))
    logits = ad.matmul(h, weights.rho_out)
    return ad.softmax(logits, axis=0)


def harden(soft: SoftSamplingMatrix) -> HardSamplingMatrix:
    """Per column, set the largest entry to 1 (ties to the lower row), rest to 0."""
    v = soft.values
    hard = np.zeros_like(v)
    hard[v.argmax(axis=0), np.arange(v.shape[1])] = 1.0
    return HardSamplingMatrix(hard)


def sample_soft(soft: SoftSamplingMatrix, cloud: PointCloud) -> PointCloud:
    """Convex combinations of input points: P_sp = S~^T P_in."""
    if soft.n != cloud.n:
        raise ShapeMismatchError(f"matrix rows {soft.n} vs cloud size {cloud.n}")
    return PointCloud(soft.values.T @ cloud.points.astype(soft.values.dtype, copy=False))


def sample_hard(hard: HardSamplingMatrix, cloud: PointCloud) -> PointCloud:
    """Exact row selection: P_sp = S^T P_in, a bitwise subset of the input."""
    if hard.n != cloud.n:
        raise ShapeMismatchError(f"matrix rows {hard.n} vs cloud size {cloud.n}")
    return PointCloud(cloud.points[hard.selected_rows()])


def forward(cloud: PointCloud, config: CasNetConfig, weights: CasNetWeights) -> tuple[PointCloud, ForwardCache]:
    """Graph-building forward pass; the cache retains every intermediate."""
    validate_cloud(cloud)
    config.validate(cloud.n)
    m = config.output_count(cloud.n)
    dtype = weights.sigma[0][0].data.dtype
    pts = cloud.points.astype(dtype, copy=False)

    neighbors = find_neighbors(cloud, config.backend, config.k, config.radius)
    f_group = group_features(cloud, neighbors).astype(dtype, copy=False)
    f_combine = combine(cloud, f_group).astype(dtype, copy=False)
    f_pointwise = embed(f_combine, weights)
    f_concat, f_oa = asm(f_pointwise, weights, config.oa_layers, config.layer_type)
    s_tilde = soft_matrix(f_concat, weights, m)

    p_in = Tensor(pts)
    if config.mode == "ahsn":
        hard_t = ad.ste_harden(s_tilde)
        p_sp = ad.matmul(ad.transpose(hard_t), p_in)
        hard = HardSamplingMatrix(hard_t.data)
        out_cloud = PointCloud(cloud.points[hard.selected_rows()])  # exact rows, not the matmul
    else:
        p_sp = ad.matmul(ad.transpose(s_tilde), p_in)
        hard = None
        out_cloud = PointCloud(p_sp.data)
    cache = ForwardCache(
        neighbors=neighbors,
        f_group=f_group,
        f_combine=f_combine,
        f_pointwise=f_pointwise,
        f_oa=f_oa,
        f_concat=f_concat,
        soft=s_tilde,
        hard=hard,
        p_sp=p_sp,
        mode=config.mode,
    )
    return out_cloud, cache


def backward_ste(loss_root: Tensor, cache: ForwardCache) -> None:
    """Backward for the hard forward: the hardening step passes gradients through
    to the soft matrix unchanged (already wired in by the forward's STE node).

    Note that finite-difference checks do not apply to the hard forward: it is
    piecewise constant in the weights, so its true derivative is zero almost
    everywhere and the straight-through gradient is deliberately not that.
    """
    if cache.mode != "ahsn" or cache.hard is None:
        raise NoCacheError("backward_ste requires an AHSN forward cache")
    ad.backward(loss_root)


def sample(cloud: PointCloud, config: CasNetConfig, weights: CasNetWeights) -> tuple[PointCloud, np.ndarray | None]:
    """Graph-free forward pass for benchmarks and the CLI sample command.

    Numerically equivalent to forward() without graph bookkeeping. Attention
    runs in row blocks against a reused buffer; for the hard variant the
    column softmax is skipped because it cannot change any column argmax.
    Returns the sampled cloud plus the selected row indices (None for ASSN).
    """
    validate_cloud(cloud)
    config.validate(cloud.n)
    n = cloud.n
    m = config.output_count(n)
    pts = cloud.points
    dt = pts.dtype

    def arr(t: Tensor) -> np.ndarray:
        return t.data.astype(dt, copy=False)

    (w1t, b1t), (w2t, b2t) = weights.sigma
    w1, b1, w2, b2 = arr(w1t), arr(b1t), arr(w2t), arr(b2t)

    if config.k == 1:
        # the single neighbor shares the point's coordinates, so every offset is
        # exactly zero and only the first three input channels contribute
        h = np.maximum(pts @ w1[:3] + b1, 0)
    else:
        neighbors = find_neighbors(cloud, config.backend, config.k, config.radius)
        f_combine = combine(cloud, group_features(cloud, neighbors))
        flat = f_combine.reshape(n * config.k, 6)
        h = np.maximum(flat @ w1 + b1, 0)
    h = h @ w2 + b2
    if config.k > 1:
        feat = h.reshape(n, config.k, config.c).max(axis=1)
    else:
        feat = h

    block = ATTENTION_BLOCK_ROWS
    scores_buf = np.empty((min(block, n), n), dtype=dt)
    inv_sqrt_dk = dt.type(1.0 / np.sqrt(config.c))
    layer_outputs = []
    for lay in weights.layers[: config.oa_layers]:
        q = feat @ arr(lay.wq)
        q *= inv_sqrt_dk
        kt = (feat @ arr(lay.wk)).T
        v = feat @ arr(lay.wv)
        f_sa = np.empty_like(feat)
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            sb = scores_buf[: hi - lo]
            np.matmul(q[lo:hi], kt, out=sb)
            mx = sb.max(axis=1, keepdims=True)
            np.subtract(sb, mx, out=sb)
            np.exp(sb, out=sb)
            sums = sb.sum(axis=1, keepdims=True)
            np.matmul(sb, v, out=f_sa[lo:hi])
            f_sa[lo:hi] /= sums  # fold softmax normalization into the small output
        pre = f_sa if config.layer_type == "sa" else feat - f_sa
        feat = np.maximum(pre @ arr(lay.wg) + arr(lay.bg), 0) + feat
        layer_outputs.append(feat)
    feat = layer_outputs[0] if len(layer_outputs) == 1 else np.concatenate(layer_outputs, axis=1)

    r1, rb1 = arr(weights.rho_hidden[0]), arr(weights.rho_hidden[1])
    r2 = arr(weights.rho_out)
    if r2.shape[1] != m:
        raise ShapeMismatchError(f"score head emits {r2.shape[1]} columns, expected m={m}")
    hidden = np.maximum(feat @ r1 + rb1, 0)

    if config.mode == "ahsn":
        # running per-column argmax over logit row blocks; softmax is monotone
        # within a column so the argmax of the logits is the argmax of S~
        best = np.full(m, -np.inf, dtype=dt)
        arg = np.zeros(m, dtype=np.int64)
        logits_buf = np.empty((min(block, n), m), dtype=dt)
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            lb = logits_buf[: hi - lo]
            np.matmul(hidden[lo:hi], r2, out=lb)
            block_max = lb.max(axis=0)
            improved = block_max > best
            if improved.any():
                arg[improved] = lb[:, improved].argmax(axis=0) + lo
                best[improved] = block_max[improved]
        return PointCloud(pts[arg]), arg

    logits = hidden @ r2
    shifted = logits - logits.max(axis=0, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=0, keepdims=True)
    return PointCloud(shifted.T @ pts), None
