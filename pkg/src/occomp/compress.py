"""Weight transform suite: pruning, binary-code quantization, truncated/tiled
SVD, Tucker-2 decomposition, plus compression-ratio accounting and the
batch ``apply`` entry point used by the regularization hook.

All transforms are pure: they return new arrays and never mutate inputs.
4-D convolution kernels are handled by the matrix transforms through the
(T, S*d*d) lowered view and restored to kernel layout afterwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tensor import RngStream, SvdResult, Tensor, frobenius_norm, svd

# Entries with |w| below this floor are excluded from elementwise relative
# noise (division blow-up guard).
EPS_FLOOR = 1e-8

VARIANTS = (
    "prune",
    "quantize",
    "svd",
    "tiled_svd",
    "tucker2",
    "weight_decay",
    "uniform_noise",
)


@dataclass
class CompressionSpec:
    """Tagged description of one weight transform and its hyper-parameters.

    ``layers`` selects targets by qualified parameter name; the string
    ``"weights"`` means every weight matrix/kernel offered by the caller.
    """

    variant: str
    rate: float | dict | None = None          # prune
    bits: int | None = None                   # quantize
    max_alt_iters: int = 25                   # quantize
    tol: float = 1e-10                        # quantize
    rank: int | None = None                   # svd
    tile_rows: int | None = None              # tiled_svd
    tile_cols: int | None = None              # tiled_svd
    tile_rank: int | None = None              # tiled_svd
    rank_s: int | None = None                 # tucker2
    rank_t: int | None = None                 # tucker2
    theta: float | None = None                # weight_decay / uniform_noise bound
    scale_by_lr: bool = True                  # uniform_noise: multiply noise by lr
    layers: str | list = "weights"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if self.variant == "prune":
            rates = self.rate.values() if isinstance(self.rate, dict) else [self.rate]
            for r in rates:
                if r is None or not 0.0 <= float(r) <= 1.0:
                    raise ParameterError(f"prune rate must be in [0, 1], got {r}")
        elif self.variant == "quantize":
            if self.bits is None or self.bits < 1:
                raise ParameterError(f"bits must be >= 1, got {self.bits}")
        elif self.variant == "svd":
            if self.rank is None or self.rank < 1:
                raise ParameterError(f"rank must be >= 1, got {self.rank}")
        elif self.variant == "tiled_svd":
            for v in (self.tile_rows, self.tile_cols, self.tile_rank):
                if v is None or v < 1:
                    raise ParameterError("tiled_svd needs tile_rows, tile_cols, tile_rank >= 1")
        elif self.variant == "tucker2":
            if self.rank_s is None or self.rank_t is None or self.rank_s < 1 or self.rank_t < 1:
                raise ParameterError("tucker2 needs rank_s, rank_t >= 1")
        elif self.variant in ("weight_decay", "uniform_noise"):
            if self.theta is None or self.theta < 0:
                raise ParameterError(f"theta must be >= 0, got {self.theta}")


def prune_magnitude(w: Tensor, rate: float) -> Tensor:
    """Zero the floor(rate*n) smallest-magnitude entries.

    Ties are broken by zeroing the lowest flat index first, so the result
    is deterministic for any input.
    """
    if not 0.0 <= rate <= 1.0:
        raise ParameterError(f"rate must be in [0, 1], got {rate}")
    flat = np.asarray(w, dtype=np.float64).ravel().copy()
    k = int(np.floor(rate * flat.size))
    if k > 0:
        mags = np.abs(flat)
        kth = np.partition(mags, k - 1)[k - 1]
        below = mags < kth
        zero_mask = below
        need = k - int(below.sum())
        if need > 0:
            # ties at the threshold: lowest flat index goes first
            tied = np.flatnonzero(mags == kth)[:need]
            zero_mask = below.copy()
            zero_mask[tied] = True
        flat[zero_mask] = 0.0
    return flat.reshape(np.shape(w))


@dataclass
class QuantizedForm:
    """q-bit binary-code approximation w ~ sum_i alphas[i] * binaries[i]."""

    alphas: Tensor                 # (q,)
    binaries: Tensor               # (q, n) of +-1
    shape: tuple
    objective_history: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_history[-1]

    def reconstruct(self) -> Tensor:
        return (self.alphas @ self.binaries).reshape(self.shape)


def _nearest_codeword(flat: Tensor, values: Tensor) -> np.ndarray:
    """Index of the closest codeword value for each element."""
    order = np.argsort(values)
    sv = values[order]
    pos = np.clip(np.searchsorted(sv, flat), 1, sv.size - 1)
    left, right = sv[pos - 1], sv[pos]
    pick = np.where(flat - left <= right - flat, pos - 1, pos)
    return order[pick]


def _two_level_split(flat: Tensor) -> tuple[Tensor, Tensor]:
    """Exact two-bit solution: 1-D 2-means over |w| by contiguous split.

    The four codeword values +-a1 +- a2 are two free magnitude levels with
    mirrored signs, so the optimal assignment clusters the sorted magnitudes
    into a low and a high interval; cluster means give the levels.
    """
    n = flat.size
    mags = np.sort(np.abs(flat))
    pre = np.concatenate([[0.0], np.cumsum(mags)])
    pre2 = np.concatenate([[0.0], np.cumsum(mags**2)])
    ks = np.arange(0, n)  # size of the low cluster; 0 = single level
    lo_mean = np.where(ks > 0, pre[ks] / np.maximum(ks, 1), 0.0)
    hi_mean = (pre[n] - pre[ks]) / (n - ks)
    sse = (pre2[ks] - ks * lo_mean**2) + (pre2[n] - pre2[ks] - (n - ks) * hi_mean**2)
    k = int(np.argmin(sse))
    m_hi = hi_mean[k]
    m_lo = lo_mean[k] if k > 0 else m_hi
    sign = np.where(flat >= 0, 1.0, -1.0)
    is_high = np.abs(np.abs(flat) - m_hi) <= np.abs(np.abs(flat) - m_lo)
    binaries = np.stack([sign, np.where(is_high, sign, -sign)])
    alphas = np.array([(m_hi + m_lo) / 2.0, (m_hi - m_lo) / 2.0])
    return alphas, binaries


def quantize_binary(
    w: Tensor, q: int, max_iters: int = 25, tol: float = 1e-10
) -> QuantizedForm:
    """Multi-bit binary-code quantization by alternating refits.

    Initialization: bits one and two come from the exact two-level magnitude
    split (plain greedy residual signs land in poor local minima on small
    inputs); any further bits take the sign of the running residual with the
    residual's mean magnitude as their scale. Alternating pass: (a) least
    squares for all scales given the sign vectors, (b) per element, pick the
    nearest of the 2^q codewords. Both half-steps are optimal given the other
    block, so the squared error is non-increasing; iteration stops at
    ``max_iters`` or when the improvement drops below ``tol``.
    """
    if q < 1:
        raise ParameterError(f"q must be >= 1, got {q}")
    if q > 16:
        raise ParameterError(f"q={q} exceeds the codeword enumeration bound (16)")
    flat = np.asarray(w, dtype=np.float64).ravel()
    n = flat.size
    if n < 1:
        raise ParameterError("cannot quantize an empty tensor")

    binaries = np.empty((q, n))
    alphas = np.empty(q)
    if q >= 2:
        alphas[:2], binaries[:2] = _two_level_split(flat)
        start = 2
    else:
        start = 0
    residual = flat - alphas[:start] @ binaries[:start]
    for i in range(start, q):
        b = np.where(residual >= 0, 1.0, -1.0)
        a = float(np.abs(residual).mean())
        binaries[i], alphas[i] = b, a
        residual = residual - a * b

    history = [float(np.sum((flat - alphas @ binaries) ** 2))]
    codes = np.array(
        [[1.0 if (c >> i) & 1 else -1.0 for i in range(q)] for c in range(2**q)]
    )
    for _ in range(max_iters):
        alphas, *_ = np.linalg.lstsq(binaries.T, flat, rcond=None)
        idx = _nearest_codeword(flat, codes @ alphas)
        binaries = codes[idx].T
        obj = float(np.sum((flat - alphas @ binaries) ** 2))
        if obj > history[-1] + 1e-9 * max(history[-1], 1.0):
            raise AssertionError(
                f"alternating objective increased: {history[-1]} -> {obj}"
            )
        improved = history[-1] - obj
        history.append(obj)
        if improved < tol:
            break
    return QuantizedForm(
        alphas=np.asarray(alphas, dtype=np.float64),
        binaries=binaries,
        shape=np.shape(w),
        objective_history=history,
    )


def svd_truncate(w: Tensor, rank: int) -> Tensor:
    """Frobenius-optimal rank-R approximation of a 2-D tensor."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ParameterError(f"svd_truncate expects a matrix, got {w.ndim}-D")
    if not 1 <= rank <= min(w.shape):
        raise ParameterError(f"rank {rank} out of range for shape {w.shape}")
    return svd(w).reconstruct(rank)


def tiled_svd(w: Tensor, tile_rows: int, tile_cols: int, rank: int) -> Tensor:
    """Replace each (tile_rows x tile_cols) tile by its rank-r truncation.

    Tile extents must divide the matrix exactly (no ragged tiles).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ParameterError(f"tiled_svd expects a matrix, got {w.ndim}-D")
    m, n = w.shape
    if m % tile_rows or n % tile_cols:
        raise ParameterError(
            f"tile {tile_rows}x{tile_cols} does not divide matrix {m}x{n}"
        )
    if not 1 <= rank <= min(tile_rows, tile_cols):
        raise ParameterError(
            f"rank {rank} out of range for tile {tile_rows}x{tile_cols}"
        )
    out = np.empty_like(w)
    for bi in range(m // tile_rows):
        for bj in range(n // tile_cols):
            ri, rj = bi * tile_rows, bj * tile_cols
            tile = w[ri : ri + tile_rows, rj : rj + tile_cols]
            out[ri : ri + tile_rows, rj : rj + tile_cols] = svd_truncate(tile, rank)
    return out


def tiled_svd_param_count(m: int, n: int, tile_rows: int, tile_cols: int, rank: int) -> int:
    """Stored parameter count: per tile, rank * (tile_rows + tile_cols)."""
    return (m // tile_rows) * (n // tile_cols) * rank * (tile_rows + tile_cols)


@dataclass
class Tucker2Form:
    """Reduced kernel core with per-mode projection matrices.

    ``core`` is (d, d, Rs, Rt); ``ps`` is (S, Rs); ``pt`` is (T, Rt); both
    projections have orthonormal columns.
    """

    core: Tensor
    ps: Tensor
    pt: Tensor
    error_history: list = field(default_factory=list)

    def reconstruct(self) -> Tensor:
        return np.einsum("ijuv,su,tv->ijst", self.core, self.ps, self.pt)


def _leading_left_vectors(mat: Tensor, k: int) -> Tensor:
    return svd(mat).u[:, :k]


def tucker2_decompose(
    k: Tensor, rank_s: int, rank_t: int, sweeps: int = 5, tol: float = 1e-6
) -> Tucker2Form:
    """Tucker-2 factorization of a (d, d, S, T) kernel over its map modes.

    Initialized from the leading left singular vectors of the two mode
    unfoldings, then refined by alternating orthogonal iteration; each
    sweep cannot increase the reconstruction error. Stops after ``sweeps``
    sweeps or when the relative improvement falls below ``tol``.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 4:
        raise ParameterError(f"tucker2 expects a 4-D kernel, got {k.ndim}-D")
    d1, d2, s, t = k.shape
    if not 1 <= rank_s <= s:
        raise ParameterError(f"rank_s {rank_s} out of range for S={s}")
    if not 1 <= rank_t <= t:
        raise ParameterError(f"rank_t {rank_t} out of range for T={t}")

    ps = _leading_left_vectors(k.transpose(2, 0, 1, 3).reshape(s, d1 * d2 * t), rank_s)
    pt = _leading_left_vectors(k.transpose(3, 0, 1, 2).reshape(t, d1 * d2 * s), rank_t)

    def current_error(ps, pt):
        core = np.einsum("ijst,su,tv->ijuv", k, ps, pt)
        recon = np.einsum("ijuv,su,tv->ijst", core, ps, pt)
        return core, frobenius_norm(k - recon)

    core, err = current_error(ps, pt)
    history = [err]
    for _ in range(sweeps):
        projected_t = np.einsum("ijst,tv->ijsv", k, pt)
        ps = _leading_left_vectors(
            projected_t.transpose(2, 0, 1, 3).reshape(s, d1 * d2 * rank_t), rank_s
        )
        projected_s = np.einsum("ijst,su->ijut", k, ps)
        pt = _leading_left_vectors(
            projected_s.transpose(3, 0, 1, 2).reshape(t, d1 * d2 * rank_s), rank_t
        )
        core, err = current_error(ps, pt)
        prev = history[-1]
        history.append(err)
        if prev - err < tol * max(prev, 1e-30):
            break
    return Tucker2Form(core=core, ps=ps, pt=pt, error_history=history)


def _lowered(w: Tensor) -> Tensor:
    # (d, d, S, T) kernel -> (T, S*d*d) matrix, matching the im2col layout.
    d1, d2, s, t = w.shape
    return w.transpose(3, 2, 0, 1).reshape(t, s * d1 * d2)


def _unlowered(mat: Tensor, kernel_shape) -> Tensor:
    d1, d2, s, t = kernel_shape
    return mat.reshape(t, s, d1, d2).transpose(2, 3, 1, 0)


def _as_matrix(w: Tensor) -> tuple[Tensor, object]:
    """View a weight tensor as a matrix for the SVD-family transforms."""
    if w.ndim == 2:
        return w, None
    if w.ndim == 4:
        return _lowered(w), w.shape
    raise ParameterError(f"matrix transform needs a 2-D or 4-D tensor, got {w.ndim}-D")


def compression_ratio(spec: CompressionSpec, dims) -> float:
    """Stored-parameter compression ratio of one layer under ``spec``.

    ``dims`` is the layer's weight shape. Quantization assumes a 32-bit
    baseline per weight (a bookkeeping convention, not a measured value).
    Ratios below 1 mean the transform expands the layer; a warning is
    emitted because that is almost always a misconfiguration.
    """
    dims = tuple(int(x) for x in dims)
    if any(x < 1 for x in dims):
        raise ParameterError(f"degenerate dims {dims}")
    if spec.variant == "prune":
        if isinstance(spec.rate, dict):
            raise ParameterError("per-layer rates: compute ratios layer by layer")
        ratio = float("inf") if spec.rate >= 1.0 else 1.0 / (1.0 - spec.rate)
    elif spec.variant == "quantize":
        ratio = 32.0 / spec.bits
    elif spec.variant == "svd":
        if len(dims) == 4:
            d1, d2, s, t = dims
            m, n = t, s * d1 * d2
        elif len(dims) == 2:
            m, n = dims
        else:
            raise ParameterError(f"svd ratio needs 2-D or 4-D dims, got {dims}")
        if spec.rank > min(m, n):
            raise ParameterError(f"rank {spec.rank} exceeds min{m, n}")
        ratio = (m * n) / (spec.rank * (m + n))
    elif spec.variant == "tiled_svd":
        if len(dims) == 4:
            d1, d2, s, t = dims
            m, n = t, s * d1 * d2
        else:
            m, n = dims
        if m % spec.tile_rows or n % spec.tile_cols:
            raise ParameterError(f"tile does not divide {m}x{n}")
        stored = tiled_svd_param_count(m, n, spec.tile_rows, spec.tile_cols, spec.tile_rank)
        ratio = (m * n) / stored
    elif spec.variant == "tucker2":
        if len(dims) != 4:
            raise ParameterError(f"tucker2 ratio needs 4-D dims, got {dims}")
        d1, d2, s, t = dims
        rs, rt = spec.rank_s, spec.rank_t
        ratio = (d1 * d2 * s * t) / (s * rs + d1 * d2 * rs * rt + t * rt)
    else:  # weight_decay / uniform_noise do not change storage
        ratio = 1.0
    if ratio < 1.0:
        warnings.warn(
            f"{spec.variant} on dims {dims} expands the layer (ratio {ratio:.3f})",
            stacklevel=2,
        )
    return float(ratio)


@dataclass
class LayerApplyStats:
    n: int
    e_w: float                 # mean |w - w'|
    delta_w: float             # ||w - w'||_F^2 / n
    eps_mean: float            # mean of w'/w - 1 over |w| >= EPS_FLOOR
    eps_weighted_mean: float   # sum(w*w')/sum(w^2) - 1 (energy shrinkage)


@dataclass
class ApplyStats:
    """Aggregate weight-change statistics across all transformed layers."""

    per_layer: dict
    n: int
    e_w: float
    delta_w: float
    eps_mean: float
    eps_weighted_mean: float


def _layer_stats(w: Tensor, w_new: Tensor) -> LayerApplyStats:
    diff = w_new - w
    mask = np.abs(w) >= EPS_FLOOR
    eps_mean = float((w_new[mask] / w[mask] - 1.0).mean()) if mask.any() else 0.0
    denom = float(np.sum(w * w))
    weighted = float(np.sum(w * w_new) / denom - 1.0) if denom > 0 else 0.0
    return LayerApplyStats(
        n=w.size,
        e_w=float(np.abs(diff).mean()),
        delta_w=float(np.sum(diff * diff) / w.size),
        eps_mean=eps_mean,
        eps_weighted_mean=weighted,
    )


def _effective_rank(full_rank: int, final_rank: int, fraction: float) -> int:
    # fraction=0 keeps full rank (identity-ish), fraction=1 reaches the target.
    return max(final_rank, int(round(full_rank - fraction * (full_rank - final_rank))))


def transform(
    spec: CompressionSpec,
    w: Tensor,
    *,
    layer_rate: float | None = None,
    fraction: float = 1.0,
    lr: float | None = None,
    rng: RngStream | None = None,
) -> Tensor:
    """Apply one transform to one tensor and return the new tensor."""
    w = np.asarray(w, dtype=np.float64)
    if spec.variant == "prune":
        rate = layer_rate if layer_rate is not None else spec.rate
        return prune_magnitude(w, float(rate) * fraction)
    if spec.variant == "quantize":
        return quantize_binary(w, spec.bits, spec.max_alt_iters, spec.tol).reconstruct()
    if spec.variant == "svd":
        mat, kernel_shape = _as_matrix(w)
        rank = _effective_rank(min(mat.shape), spec.rank, fraction)
        out = svd_truncate(mat, rank)
        return _unlowered(out, kernel_shape) if kernel_shape else out
    if spec.variant == "tiled_svd":
        mat, kernel_shape = _as_matrix(w)
        rank = _effective_rank(min(spec.tile_rows, spec.tile_cols), spec.tile_rank, fraction)
        out = tiled_svd(mat, spec.tile_rows, spec.tile_cols, rank)
        return _unlowered(out, kernel_shape) if kernel_shape else out
    if spec.variant == "tucker2":
        if w.ndim != 4:
            raise ParameterError("tucker2 applies to 4-D kernels only")
        rs = _effective_rank(w.shape[2], spec.rank_s, fraction)
        rt = _effective_rank(w.shape[3], spec.rank_t, fraction)
        return tucker2_decompose(w, rs, rt).reconstruct()
    if spec.variant == "weight_decay":
        if lr is None:
            raise ParameterError("weight_decay needs the current learning rate")
        return (1.0 - lr * spec.theta) * w
    if spec.variant == "uniform_noise":
        if rng is None:
            raise ParameterError("uniform_noise needs an RngStream")
        if spec.scale_by_lr and lr is None:
            raise ParameterError("uniform_noise with scale_by_lr needs the learning rate")
        noise = rng.uniform(-spec.theta, spec.theta, w.shape)
        scale = lr if spec.scale_by_lr else 1.0
        return (1.0 - scale * noise) * w
    raise ParameterError(f"unknown variant {spec.variant!r}")


def select_layers(spec: CompressionSpec, params: dict) -> list[str]:
    if spec.layers == "weights":
        return list(params.keys())
    names = list(spec.layers)
    missing = [n for n in names if n not in params]
    if missing:
        raise ParameterError(f"layer selection does not match params: {missing}")
    return names


def apply(
    spec: CompressionSpec,
    params: dict,
    *,
    fraction: float = 1.0,
    lr: float | None = None,
    rng: RngStream | None = None,
) -> tuple[dict, ApplyStats]:
    """Transform every selected tensor in ``params``; return new dict + stats.

    ``fraction`` in [0, 1] ramps gradual schedules: pruning rates scale
    linearly with it, SVD/Tucker ranks interpolate from full rank down to
    the configured target. Untouched layers are passed through unchanged.
    """
    names = select_layers(spec, params)
    out = dict(params)
    per_layer: dict[str, LayerApplyStats] = {}
    abs_sum = 0.0
    sq_sum = 0.0
    n_total = 0
    eps_parts = []
    ww_sum = 0.0
    wnew_sum = 0.0
    for name in names:
        w = np.asarray(params[name], dtype=np.float64)
        layer_rate = None
        if spec.variant == "prune" and isinstance(spec.rate, dict):
            if name not in spec.rate:
                raise ParameterError(f"no prune rate configured for layer {name!r}")
            layer_rate = float(spec.rate[name])
        w_new = transform(
            spec, w, layer_rate=layer_rate, fraction=fraction, lr=lr, rng=rng
        )
        out[name] = w_new
        stats = _layer_stats(w, w_new)
        per_layer[name] = stats
        diff = w_new - w
        abs_sum += float(np.abs(diff).sum())
        sq_sum += float(np.sum(diff * diff))
        n_total += w.size
        mask = np.abs(w) >= EPS_FLOOR
        if mask.any():
            eps_parts.append(w_new[mask] / w[mask] - 1.0)
        ww_sum += float(np.sum(w * w))
        wnew_sum += float(np.sum(w * w_new))
    eps_all = np.concatenate(eps_parts) if eps_parts else np.zeros(0)
    stats = ApplyStats(
        per_layer=per_layer,
        n=n_total,
        e_w=abs_sum / n_total if n_total else 0.0,
        delta_w=sq_sum / n_total if n_total else 0.0,
        eps_mean=float(eps_all.mean()) if eps_all.size else 0.0,
        eps_weighted_mean=(wnew_sum / ww_sum - 1.0) if ww_sum > 0 else 0.0,
    )
    return out, stats
