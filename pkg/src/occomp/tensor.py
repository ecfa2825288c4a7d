"""Dense float64 tensors plus the small kernel set everything else builds on.

Tensors are plain C-contiguous ``numpy.ndarray`` objects with dtype float64;
``as_tensor`` is the boundary normalizer. Randomness goes through
:class:`RngStream`, a Philox (counter-based) generator keyed through
``numpy.random.SeedSequence`` so that a seed fully determines the sample
stream and child streams can be split off without overlap. Normal variates
use numpy's ziggurat sampler.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, NumericError, ParameterError

Tensor = np.ndarray

# Binary tensor container: magic, rank as u64 LE, extents as u64 LE each,
# payload as little-endian float64 in row-major order.
CONTAINER_MAGIC = b"TNS1"


def as_tensor(data) -> Tensor:
    """Coerce array-like input to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def check_finite(a: Tensor, context: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{context}: non-finite values present")
    return a


class RngStream:
    """Single-owner deterministic random stream.

    The underlying bit generator is Philox 4x64 seeded through
    ``SeedSequence(seed, spawn_key=...)``. Identical seeds produce identical
    streams across runs and platforms. A stream must not be shared between
    concurrent tasks; use :meth:`derive` to split independent children.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def derive(self, *keys: int) -> "RngStream":
        """Independent child stream; same (seed, keys) always gives the same child."""
        return RngStream(self.seed, self.spawn_key + tuple(keys))

    def standard_normal(self, shape) -> Tensor:
        return self.generator.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape) -> Tensor:
        return self.generator.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key})"


def random_normal(rng: RngStream, shape, mu: float = 0.0, sigma: float = 1.0) -> Tensor:
    """I.i.d. N(mu, sigma^2) samples with the given shape."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    return mu + sigma * rng.standard_normal(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(a: Tensor) -> float:
    """sqrt of the sum of squared entries, over all axes."""
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


@dataclass
class SvdResult:
    """Thin SVD a = u @ diag(singular_values) @ v.T with k = min(m, n)."""

    u: Tensor
    singular_values: Tensor
    v: Tensor

    def reconstruct(self, rank: int | None = None) -> Tensor:
        """Rebuild the (optionally rank-truncated) matrix."""
        k = self.singular_values.size if rank is None else int(rank)
        return (self.u[:, :k] * self.singular_values[:k]) @ self.v[:, :k].T


def svd(a: Tensor) -> SvdResult:
    """Thin singular value decomposition of a 2-D tensor.

    Backed by LAPACK's Golub-Kahan bidiagonalization path (``dgesdd``); raises
    :class:`NumericError` if the iteration fails to converge.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a 2-D tensor, got {a.ndim}-D")
    check_finite(a, "svd input")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd did not converge: {exc}") from exc
    return SvdResult(u=u, singular_values=s, v=vt.T.copy())


def save_tensor(path, a: Tensor) -> None:
    """Write a tensor in the binary container format (see CONTAINER_MAGIC)."""
    a = as_tensor(a)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<Q", a.ndim))
        for extent in a.shape:
            f.write(struct.pack("<Q", extent))
        f.write(a.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path) -> Tensor:
    """Read a tensor written by :func:`save_tensor`."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    (rank,) = struct.unpack_from("<Q", blob, 4)
    if rank > 32:
        raise FormatError(f"{path}: implausible rank {rank} at offset 4")
    header_end = 12 + 8 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated extents at offset {len(blob)}")
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    count = int(np.prod(shape)) if rank else 1
    expected = header_end + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload length {len(blob) - header_end} bytes, expected {8 * count}"
            f" (offset {header_end})"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=header_end)
    return data.astype(np.float64).reshape(shape)
