"""Local point-set featurizer with manual forward and backward passes.

Each block aggregates a max statistic over the point set, concatenates it
back to every point, and applies two fully-connected units, each ordered
batch-norm -> linear -> ReLU. Blocks are stacked; every block's per-point
output is also read out with a mean over points, and the readouts are
concatenated into the cell feature (384-dimensional under the default
widths). The same parameters accept any point count, and the arithmetic is
permutation invariant.

Batches are stored flat: all crops' points concatenated row-wise with a
per-crop count vector. In train mode batch-norm statistics span all points
of all crops in the step; in inference mode the running averages are used,
which makes per-crop results independent of batching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flops
from .geometry import PointCloud
from .sampling import CenterProposal

DEFAULT_BLOCK_WIDTHS = (64, 64, 64, 96, 96)
# Small enough that normalized activations carry unit variance to well
# within 1e-6 for any feature with non-degenerate spread; guards only true
# zero-variance columns.
BN_EPS = 1e-9
BN_MOMENTUM = 0.99


@dataclass
class LocalCrop:
    """A proposal's neighborhood, re-centered in the plane to its center.

    ``xyz`` holds (x - cx, y - cy, z); sensor features ride along unchanged.
    """

    xyz: np.ndarray
    feats: np.ndarray
    center: CenterProposal
    actual_count: int

    @property
    def point_matrix(self) -> np.ndarray:
        """(n, 3 + F) featurizer input rows."""
        return np.concatenate([self.xyz, self.feats], axis=1)


def crop_neighborhood(
    cloud: PointCloud,
    center: CenterProposal,
    r: float,
    k: int,
    rng: np.random.Generator,
) -> LocalCrop:
    """Random subset of at most ``k`` points within x-y radius ``r`` of center.

    An empty neighborhood yields a valid empty crop; the featurizer maps it
    to a zero cell feature flagged for suppression downstream.
    """
    if r <= 0:
        raise ValueError("crop radius must be positive")
    if k < 1:
        raise ValueError("need room for at least one point per crop")
    dx = cloud.xyz[:, 0] - center.x
    dy = cloud.xyz[:, 1] - center.y
    inside = np.nonzero(dx * dx + dy * dy <= r * r)[0]
    if len(inside) > k:
        inside = inside[rng.choice(len(inside), size=k, replace=False)]
    xyz = cloud.xyz[inside].copy()
    xyz[:, 0] -= center.x
    xyz[:, 1] -= center.y
    return LocalCrop(
        xyz=xyz,
        feats=cloud.feats[inside].copy(),
        center=center,
        actual_count=len(inside),
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    """One batch-norm -> linear -> ReLU unit (the linear has no bias)."""

    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    weight: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BlockParams:
    layer1: LayerParams  # 2 * w_in -> w_out
    layer2: LayerParams  # w_out -> w_out


@dataclass
class FeaturizerParams:
    input_embed: np.ndarray  # (point_dim, widths[0])
    blocks: list[BlockParams]
    block_widths: tuple[int, ...]

    @property
    def point_dim(self) -> int:
        return self.input_embed.shape[0]

    @property
    def cell_dim(self) -> int:
        return int(sum(self.block_widths))

    def named_arrays(self, trainable_only: bool = False):
        """Yield (name, array) pairs; arrays are live views for in-place updates."""
        yield "embed.weight", self.input_embed
        for i, block in enumerate(self.blocks):
            for j, layer in enumerate((block.layer1, block.layer2)):
                prefix = f"block{i}.layer{j + 1}"
                yield f"{prefix}.bn_gamma", layer.bn_gamma
                yield f"{prefix}.bn_beta", layer.bn_beta
                if not trainable_only:
                    yield f"{prefix}.bn_running_mean", layer.bn_running_mean
                    yield f"{prefix}.bn_running_var", layer.bn_running_var
                yield f"{prefix}.weight", layer.weight

    def astype(self, dtype) -> "FeaturizerParams":
        def cast_layer(layer: LayerParams) -> LayerParams:
            return LayerParams(
                bn_gamma=layer.bn_gamma.astype(dtype),
                bn_beta=layer.bn_beta.astype(dtype),
                bn_running_mean=layer.bn_running_mean.astype(dtype),
                bn_running_var=layer.bn_running_var.astype(dtype),
                weight=layer.weight.astype(dtype),
            )

        return FeaturizerParams(
            input_embed=self.input_embed.astype(dtype),
            blocks=[
                BlockParams(cast_layer(b.layer1), cast_layer(b.layer2))
                for b in self.blocks
            ],
            block_widths=self.block_widths,
        )


def _init_layer(in_dim: int, out_dim: int, rng: np.random.Generator) -> LayerParams:
    return LayerParams(
        bn_gamma=np.ones(in_dim),
        bn_beta=np.zeros(in_dim),
        bn_running_mean=np.zeros(in_dim),
        bn_running_var=np.ones(in_dim),
        weight=rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, out_dim)),
    )


def init_featurizer(
    point_dim: int,
    block_widths: tuple[int, ...] = DEFAULT_BLOCK_WIDTHS,
    rng: np.random.Generator | None = None,
) -> FeaturizerParams:
    """Fresh parameters: zero-mean weights scaled by 1/sqrt(fan_in), unit BN."""
    rng = rng or np.random.default_rng(0)
    if point_dim < 3:
        raise ValueError("points carry at least x, y, z")
    if not block_widths:
        raise ValueError("need at least one block")
    blocks = []
    w_in = block_widths[0]
    for w_out in block_widths:
        blocks.append(
            BlockParams(
                layer1=_init_layer(2 * w_in, w_out, rng),
                layer2=_init_layer(w_out, w_out, rng),
            )
        )
        w_in = w_out
    embed = rng.normal(0.0, 1.0 / math.sqrt(point_dim), size=(point_dim, block_widths[0]))
    return FeaturizerParams(
        input_embed=embed, blocks=blocks, block_widths=tuple(block_widths)
    )


# ---------------------------------------------------------------------------
# Segment reductions over the flat batch layout
# ---------------------------------------------------------------------------

def _segments(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    seg_ids = np.repeat(np.arange(len(counts)), counts)
    return starts, seg_ids


def _segment_sum(values: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = np.zeros((len(counts), values.shape[1]), dtype=values.dtype)
    nz = counts > 0
    if values.shape[0] and nz.any():
        out[nz] = np.add.reduceat(values, starts[nz], axis=0)
    return out


def _segment_mean(values: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = _segment_sum(values, starts, counts)
    nz = counts > 0
    out[nz] /= counts[nz, None]
    return out


def _segment_max(values: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-segment max; empty segments give 0 (their rows are never used)."""
    out = np.zeros((len(counts), values.shape[1]), dtype=values.dtype)
    nz = counts > 0
    if values.shape[0] and nz.any():
        out[nz] = np.maximum.reduceat(values, starts[nz], axis=0)
    return out


def _segment_max_with_arg(
    values: np.ndarray, starts: np.ndarray, counts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment max plus flat argmax rows (-1 for empty segments)."""
    b, w = len(counts), values.shape[1]
    maxv = np.zeros((b, w), dtype=values.dtype)
    args = np.full((b, w), -1, dtype=int)
    if values.shape[0] == 0 or not (counts > 0).any():
        return maxv, args
    kmax = int(counts.max())
    offs = np.arange(kmax)
    idx = np.minimum(starts[:, None] + offs[None, :], values.shape[0] - 1)
    valid = offs[None, :] < counts[:, None]
    gathered = values[idx]
    gathered[~valid] = -np.inf
    local = gathered.argmax(axis=1)  # first max wins per (segment, feature)
    maxv_all = np.take_along_axis(gathered, local[:, None, :], axis=1)[:, 0, :]
    nz = counts > 0
    maxv[nz] = maxv_all[nz]
    args[nz] = starts[nz, None] + local[nz]
    return maxv, args


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

@dataclass
class _LayerCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    bn_out: np.ndarray
    relu_mask: np.ndarray


@dataclass
class _BlockCache:
    max_args: np.ndarray
    layer1: _LayerCache
    layer2: _LayerCache
    w_in: int


@dataclass
class ForwardTape:
    """Cached activations from one forward pass, enough for exact backward."""

    mode: str
    counts: np.ndarray
    starts: np.ndarray
    seg_ids: np.ndarray
    point_matrix: np.ndarray | None = None
    embedded: np.ndarray | None = None
    block_inputs: list[np.ndarray] = field(default_factory=list)
    block_caches: list[_BlockCache] = field(default_factory=list)

    @property
    def suppressed(self) -> np.ndarray:
        """Crops that were empty; their cell features are all-zero."""
        return self.counts == 0


def _layer_forward(
    x: np.ndarray, layer: LayerParams, mode: str
) -> tuple[np.ndarray, _LayerCache | None]:
    if mode == "train":
        mu = x.mean(axis=0)
        centered = x - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = centered
        x_hat *= inv_std
        layer.bn_running_mean *= BN_MOMENTUM
        layer.bn_running_mean += (1.0 - BN_MOMENTUM) * mu
        layer.bn_running_var *= BN_MOMENTUM
        layer.bn_running_var += (1.0 - BN_MOMENTUM) * var
    else:
        inv_std = 1.0 / np.sqrt(layer.bn_running_var + BN_EPS)
        x_hat = (x - layer.bn_running_mean) * inv_std
    bn_out = layer.bn_gamma * x_hat + layer.bn_beta
    z = bn_out @ layer.weight
    flops.record_matmul(x.shape[0], layer.in_dim, layer.out_dim)
    out = np.maximum(z, 0.0)
    if mode != "train":
        return out, None
    return out, _LayerCache(x_hat=x_hat, inv_std=inv_std, bn_out=bn_out, relu_mask=z > 0.0)


def featurize_batch(
    crops: list[LocalCrop],
    params: FeaturizerParams,
    mode: str = "infer",
) -> tuple[np.ndarray, ForwardTape]:
    """Featurize a batch of crops into (B, cell_dim) cell features.

    In train mode the returned tape carries every intermediate needed by
    :func:`featurizer_backward`, and batch-norm running statistics are
    updated in place.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    counts = np.array([len(c.xyz) for c in crops], dtype=int)
    starts, seg_ids = _segments(counts)
    b = len(crops)
    dtype = params.input_embed.dtype
    cell = np.zeros((b, params.cell_dim), dtype=dtype)
    tape = ForwardTape(mode=mode, counts=counts, starts=starts, seg_ids=seg_ids)
    total = int(counts.sum())
    if total == 0:
        return cell, tape

    x = np.zeros((total, params.point_dim), dtype=dtype)
    for start, crop in zip(starts, crops):
        n = len(crop.xyz)
        if not n:
            continue
        rows = crop.point_matrix
        if rows.shape[1] != params.point_dim:
            raise ValueError(
                f"crop rows have {rows.shape[1]} dims, parameters expect "
                f"{params.point_dim}"
            )
        x[start:start + n] = rows

    h = x @ params.input_embed
    flops.record_matmul(total, params.point_dim, params.input_embed.shape[1])
    if mode == "train":
        tape.point_matrix = x
        tape.embedded = h

    readouts = []
    for block in params.blocks:
        w_in = h.shape[1]
        if mode == "train":
            maxv, max_args = _segment_max_with_arg(h, starts, counts)
        else:
            maxv, max_args = _segment_max(h, starts, counts), None
        concat = np.concatenate([h, maxv[seg_ids]], axis=1)
        a1, cache1 = _layer_forward(concat, block.layer1, mode)
        a2, cache2 = _layer_forward(a1, block.layer2, mode)
        readouts.append(_segment_mean(a2, starts, counts))
        if mode == "train":
            tape.block_inputs.append(h)
            tape.block_caches.append(
                _BlockCache(max_args=max_args, layer1=cache1, layer2=cache2, w_in=w_in)
            )
        h = a2

    cell = np.concatenate(readouts, axis=1)
    return cell, tape


def featurize(
    crop: LocalCrop, params: FeaturizerParams, mode: str = "infer"
) -> tuple[np.ndarray, ForwardTape]:
    """Featurize a single crop; empty crops give an all-zero cell feature."""
    cell, tape = featurize_batch([crop], params, mode)
    return cell[0], tape


def block_forward(
    features: np.ndarray, block: BlockParams, mode: str = "infer"
) -> tuple[np.ndarray, np.ndarray, _BlockCache | None]:
    """Run one block on a single point set: (per-point out, mean readout, cache)."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    counts = np.array([n], dtype=int)
    starts, seg_ids = _segments(counts)
    if n == 0:
        return features.reshape(0, block.layer2.out_dim), np.zeros(block.layer2.out_dim), None
    if mode == "train":
        maxv, max_args = _segment_max_with_arg(features, starts, counts)
    else:
        maxv, max_args = _segment_max(features, starts, counts), None
    concat = np.concatenate([features, maxv[seg_ids]], axis=1)
    a1, cache1 = _layer_forward(concat, block.layer1, mode)
    a2, cache2 = _layer_forward(a1, block.layer2, mode)
    readout = a2.mean(axis=0)
    cache = None
    if mode == "train":
        cache = _BlockCache(max_args=max_args, layer1=cache1, layer2=cache2,
                            w_in=features.shape[1])
    return a2, readout, cache


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _layer_backward(
    d_out: np.ndarray, layer: LayerParams, cache: _LayerCache, grads: dict, prefix: str
) -> np.ndarray:
    dz = d_out * cache.relu_mask
    grads[f"{prefix}.weight"] = cache.bn_out.T @ dz
    d_bn = dz @ layer.weight.T
    grads[f"{prefix}.bn_gamma"] = (d_bn * cache.x_hat).sum(axis=0)
    grads[f"{prefix}.bn_beta"] = d_bn.sum(axis=0)
    d_hat = d_bn * layer.bn_gamma
    # batch-norm backward with batch statistics
    return cache.inv_std * (
        d_hat
        - d_hat.mean(axis=0)
        - cache.x_hat * (d_hat * cache.x_hat).mean(axis=0)
    )


def featurizer_backward(
    params: FeaturizerParams,
    tape: ForwardTape,
    upstream: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients of the batched forward pass.

    Args:
        upstream: (B, cell_dim) gradient of the loss w.r.t. the cell features
            (a single (cell_dim,) vector is accepted for one-crop tapes).

    Returns:
        (parameter gradients keyed like ``named_arrays``, gradient w.r.t. the
        (N, point_dim) input rows).
    """
    if tape.mode != "train":
        raise ValueError("backward requires a tape recorded in train mode")
    upstream = np.asarray(upstream, dtype=params.input_embed.dtype)
    if upstream.ndim == 1:
        upstream = upstream.reshape(1, -1)
    if upstream.shape != (len(tape.counts), params.cell_dim):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"({len(tape.counts)}, {params.cell_dim})"
        )

    grads = {
        name: np.zeros_like(arr)
        for name, arr in params.named_arrays(trainable_only=True)
    }
    total = int(tape.counts.sum())
    if total == 0:
        return grads, np.zeros((0, params.point_dim))
    if len(tape.block_caches) != len(params.blocks):
        raise ValueError("tape does not match the given parameters")

    counts, starts, seg_ids = tape.counts, tape.starts, tape.seg_ids
    nz = counts > 0
    widths = params.block_widths
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)

    d_h = np.zeros((total, widths[-1]), dtype=upstream.dtype)
    for i in reversed(range(len(params.blocks))):
        block = params.blocks[i]
        cache = tape.block_caches[i]
        # readout (mean over points) feeds the cell feature directly
        d_read = upstream[:, offsets[i]:offsets[i + 1]]
        d_scaled = np.zeros_like(d_read)
        d_scaled[nz] = d_read[nz] / counts[nz, None]
        d_h = d_h + d_scaled[seg_ids]

        prefix = f"block{i}"
        d_a1 = _layer_backward(d_h, block.layer2, cache.layer2, grads, f"{prefix}.layer2")
        d_concat = _layer_backward(d_a1, block.layer1, cache.layer1, grads, f"{prefix}.layer1")

        w_in = cache.w_in
        d_in = d_concat[:, :w_in].copy()
        d_max = _segment_sum(d_concat[:, w_in:], starts, counts)
        args = cache.max_args
        valid = args >= 0
        if valid.any():
            rows = args[valid]
            cols = np.broadcast_to(np.arange(w_in), args.shape)[valid]
            # (row, col) pairs are unique: one argmax per segment per feature
            d_in[rows, cols] += d_max[valid]
        d_h = d_in

    grads["embed.weight"] = tape.point_matrix.T @ d_h
    d_points = d_h @ params.input_embed.T
    return grads, d_points
