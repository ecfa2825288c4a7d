"""Offline analytics: relative-noise distributions of the compression
operators, weight histograms, the local quadratic convergence model, and a
Monte-Carlo check of the second-order noise expansion of a squared loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import compress
from .errors import NumericError, ParameterError
from .tensor import RngStream, Tensor

EPSILON_RANGE = (-2.0, 2.0)
EPSILON_BINS = 201


@dataclass
class Histogram:
    """Uniform-bin histogram with explicit out-of-range accounting.

    Summary statistics (mean, variance, skew) are computed over the
    in-range samples only; underflow/overflow counts record what was
    excluded, so counts + underflow + overflow always equals the sample
    count.
    """

    edges: Tensor
    counts: np.ndarray
    underflow: int
    overflow: int
    mean: float
    variance: float
    skew: float
    n_total: int


def make_histogram(values, bins: int, lo: float, hi: float) -> Histogram:
    values = np.asarray(values, dtype=np.float64).ravel()
    if hi <= lo:
        raise ParameterError(f"histogram range [{lo}, {hi}] is empty")
    if bins < 1:
        raise ParameterError(f"need at least one bin, got {bins}")
    edges = np.linspace(lo, hi, bins + 1)
    in_range = values[(values >= lo) & (values <= hi)]
    counts, _ = np.histogram(in_range, bins=edges)
    underflow = int((values < lo).sum())
    overflow = int((values > hi).sum())
    if in_range.size:
        mean = float(in_range.mean())
        var = float(in_range.var())
        sd = np.sqrt(var)
        skew = float(((in_range - mean) ** 3).mean() / sd**3) if sd > 0 else 0.0
    else:
        mean = var = skew = 0.0
    return Histogram(
        edges=edges,
        counts=counts,
        underflow=underflow,
        overflow=overflow,
        mean=mean,
        variance=var,
        skew=skew,
        n_total=values.size,
    )


def weight_histogram(params, bins: int = EPSILON_BINS, lo=None, hi=None) -> Histogram:
    """Histogram over all values of one tensor or a {name: tensor} mapping."""
    if isinstance(params, dict):
        values = np.concatenate([np.ravel(v) for v in params.values()])
    else:
        values = np.ravel(params)
    if lo is None:
        lo = float(values.min())
    if hi is None:
        hi = float(values.max())
    if hi == lo:
        hi = lo + 1.0  # all-equal input: single spike bin
    return make_histogram(values, bins, lo, hi)


def compute_epsilon(w: Tensor, w_new: Tensor, floor: float = compress.EPS_FLOOR) -> Tensor:
    """Elementwise relative change w'/w - 1 over entries with |w| >= floor."""
    mask = np.abs(w) >= floor
    if not mask.any():
        raise ParameterError(f"all entries below the {floor} magnitude floor")
    return w_new[mask] / w[mask] - 1.0


def epsilon_distribution(
    w: Tensor,
    spec: compress.CompressionSpec,
    bins: int = EPSILON_BINS,
    lo: float = EPSILON_RANGE[0],
    hi: float = EPSILON_RANGE[1],
) -> Histogram:
    """Distribution of the relative weight noise induced by one operator."""
    if spec.variant not in ("quantize", "svd", "prune"):
        raise ParameterError(f"epsilon distribution undefined for {spec.variant!r}")
    w = np.asarray(w, dtype=np.float64)
    w_new = compress.transform(spec, w)
    return make_histogram(compute_epsilon(w, w_new), bins, lo, hi)


def epsilon_decay_mean(w: Tensor, spec: compress.CompressionSpec) -> float:
    """Energy-weighted mean of the relative noise: sum(w*w')/sum(w^2) - 1.

    Equals the least-squares shrinkage slope minus one, so it is the
    aggregate "how much did the weights decay" signal. Unlike the raw mean
    of w'/w - 1 it is not dominated by near-zero denominators.
    """
    w = np.asarray(w, dtype=np.float64)
    w_new = compress.transform(spec, w)
    return float(np.sum(w * w_new) / np.sum(w * w) - 1.0)


def write_histogram_csv(histogram: Histogram, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, count in enumerate(histogram.counts):
            writer.writerow([histogram.edges[i], histogram.edges[i + 1], int(count)])


@dataclass
class QuadraticModel:
    """Local quadratic loss model: minimizer w0, Hessian h, learning rate."""

    h: Tensor
    w0: Tensor
    gamma: float

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=np.float64))
        self.w0 = np.atleast_1d(np.asarray(self.w0, dtype=np.float64))
        scale = max(1.0, float(np.abs(self.h).max()))
        if float(np.abs(self.h - self.h.T).max()) > 1e-12 * scale:
            raise ParameterError("hessian must be symmetric")
        eigvals, eigvecs = np.linalg.eigh(self.h)
        if eigvals.min() < -1e-12 * scale:
            raise ParameterError(f"hessian has negative eigenvalue {eigvals.min()}")
        self._eigvals = eigvals
        self._eigvecs = eigvecs

    @property
    def contraction_factors(self) -> Tensor:
        return 1.0 - self.gamma * self._eigvals

    def spectral_radius(self) -> float:
        return float(np.abs(self.contraction_factors).max())


def quadratic_trajectory(model: QuadraticModel, w_t, pnr: int) -> Tensor:
    """Closed form w0 + (I - gamma*H)^pnr (w_t - w0) via eigendecomposition."""
    if pnr < 0:
        raise ParameterError(f"pnr must be >= 0, got {pnr}")
    w_t = np.atleast_1d(np.asarray(w_t, dtype=np.float64))
    q = model._eigvecs
    coeff = q.T @ (w_t - model.w0)
    powered = model.contraction_factors ** pnr
    return model.w0 + q @ (powered * coeff)


def iterate_quadratic(model: QuadraticModel, w_t, pnr: int) -> Tensor:
    """Step-by-step gradient-descent recurrence, for cross-checking."""
    w = np.atleast_1d(np.asarray(w_t, dtype=np.float64)).copy()
    for _ in range(pnr):
        w = w - model.gamma * (model.h @ (w - model.w0))
    return w


def convergence_horizon(model: QuadraticModel, displacement, tol: float) -> int:
    """Smallest pnr with ||(I - gamma*H)^pnr d|| <= tol."""
    if tol <= 0:
        raise ParameterError(f"tol must be > 0, got {tol}")
    d = np.atleast_1d(np.asarray(displacement, dtype=np.float64))
    coeff = model._eigvecs.T @ d
    factors = np.abs(model.contraction_factors)
    support = np.abs(coeff) > 1e-15 * max(1.0, float(np.linalg.norm(d)))
    if support.any() and factors[support].max() >= 1.0:
        raise NumericError(
            f"non-convergent: |1 - gamma*lambda| = {factors[support].max()} >= 1 "
            "on the displacement's eigen-support"
        )

    def norm_at(p: int) -> float:
        return float(np.sqrt(np.sum((coeff * factors**p) ** 2)))

    if norm_at(0) <= tol:
        return 0
    hi = 1
    while norm_at(hi) > tol:
        hi *= 2
        if hi > 10**9:
            raise NumericError("horizon exceeds 1e9 steps")
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if norm_at(mid) <= tol:
            hi = mid
        else:
            lo = mid
    return hi


class LinearRegressionNet:
    """f(x) = w . x with squared-error loss; Hessian of f is exactly zero."""

    loss_kind = "regression"

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64).copy()

    @property
    def n_params(self) -> int:
        return self.w.size

    def get_params(self) -> Tensor:
        return self.w.copy()

    def set_params(self, w) -> None:
        self.w = np.asarray(w, dtype=np.float64).copy()

    def predict(self, x: Tensor) -> Tensor:
        return x @ self.w

    def grad_params(self, x: Tensor) -> Tensor:
        return np.array(x, dtype=np.float64)


class TanhRegressionNet:
    """f(x) = v * tanh(u . x + b) + c, parameters packed as [u, b, v, c]."""

    loss_kind = "regression"

    def __init__(self, u, b: float, v: float, c: float):
        u = np.asarray(u, dtype=np.float64)
        self._d = u.size
        self._theta = np.concatenate([u, [b, v, c]])

    @property
    def n_params(self) -> int:
        return self._theta.size

    def get_params(self) -> Tensor:
        return self._theta.copy()

    def set_params(self, theta) -> None:
        self._theta = np.asarray(theta, dtype=np.float64).copy()

    def _unpack(self):
        d = self._d
        return self._theta[:d], self._theta[d], self._theta[d + 1], self._theta[d + 2]

    def predict(self, x: Tensor) -> Tensor:
        u, b, v, c = self._unpack()
        return v * np.tanh(x @ u + b) + c

    def grad_params(self, x: Tensor) -> Tensor:
        u, b, v, c = self._unpack()
        z = np.tanh(x @ u + b)
        sech2 = 1.0 - z**2
        grad_u = (v * sech2)[:, None] * x
        grad_b = v * sech2
        grad_v = z
        grad_c = np.ones_like(z)
        return np.column_stack([grad_u, grad_b, grad_v, grad_c])


@dataclass
class RegressionSetup:
    """A tiny regression model together with its fixed (x, y) sample set."""

    net: object
    x: Tensor
    y: Tensor

    def loss(self) -> float:
        return float(np.mean((self.net.predict(self.x) - self.y) ** 2))


def _hessian_traces(setup: RegressionSetup, probes: int | None, rng: RngStream) -> Tensor:
    """Per-sample trace of the Hessian of f, by central differences of grads.

    Exact coordinate loop when the parameter count is small; Hutchinson
    probes otherwise.
    """
    net = setup.net
    theta = net.get_params()
    h = 1e-4 * max(1.0, float(np.abs(theta).max()))
    p = net.n_params

    def grads_at(t):
        net.set_params(t)
        return net.grad_params(setup.x)

    try:
        if probes is None or p <= 64:
            traces = np.zeros(setup.x.shape[0])
            for i in range(p):
                e = np.zeros(p)
                e[i] = h
                gp = grads_at(theta + e)[:, i]
                gm = grads_at(theta - e)[:, i]
                traces += (gp - gm) / (2 * h)
        else:
            traces = np.zeros(setup.x.shape[0])
            for k in range(probes):
                z = np.where(rng.standard_normal(p) >= 0, 1.0, -1.0)
                gp = grads_at(theta + h * z)
                gm = grads_at(theta - h * z)
                traces += ((gp - gm) / (2 * h)) @ z
            traces /= probes
    finally:
        net.set_params(theta)
    return traces


def taylor_noise_check(
    setup: RegressionSetup,
    eta: float,
    n_samples: int,
    rng: RngStream,
    probes: int | None = None,
) -> tuple[float, float]:
    """Empirical vs second-order-predicted loss increase under weight noise.

    Noise is N(0, eta*I) on the parameters. The prediction is
    eta * (mean[(f - y) * tr Hess f] + mean ||grad f||^2); the residual gap
    is O(eta^2). Draws come deterministically from ``rng``, so calling with
    the same derived stream at two eta values uses common random numbers.
    """
    if getattr(setup.net, "loss_kind", None) != "regression":
        raise ParameterError("taylor check only supports squared-error regression nets")
    if eta < 0:
        raise ParameterError(f"eta must be >= 0, got {eta}")
    net = setup.net
    theta = net.get_params()
    base_loss = setup.loss()

    if eta == 0.0:
        return 0.0, 0.0

    total = 0.0
    sqrt_eta = np.sqrt(eta)
    try:
        for _ in range(n_samples):
            z = rng.standard_normal(theta.size)
            net.set_params(theta + sqrt_eta * z)
            total += setup.loss() - base_loss
    finally:
        net.set_params(theta)
    empirical = total / n_samples

    residual = net.predict(setup.x) - setup.y
    grads = net.grad_params(setup.x)
    grad_norm_term = float(np.mean(np.sum(grads**2, axis=1)))
    traces = _hessian_traces(setup, probes, rng.derive(1))
    curvature_term = float(np.mean(residual * traces))
    predicted = eta * (curvature_term + grad_norm_term)
    return empirical, predicted
