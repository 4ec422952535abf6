"""Flatness and generalization diagnostics.

Hessian top eigenvalue by power iteration on Hessian-vector products,
Hutchinson trace estimation with Rademacher probes, the client-drift
consistency metric, a layer-norm generalization bound, and 2-D loss
landscape slices for plotting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Batch, ParamVector, hvp, loss

__all__ = [
    "FlatnessReport",
    "BoundReport",
    "power_iteration",
    "hessian_top_eigenvalue",
    "hessian_trace_hutchinson",
    "consistency",
    "generalization_bound",
    "landscape_slice",
    "random_landscape_directions",
    "flatness_report",
    "fixed_subset",
]

# Hessian diagnostics run on a deterministic subset of at most this many
# samples so runtimes stay bounded on large training pools.
EVAL_SUBSET_CAP = 1024


@dataclass(frozen=True)
class FlatnessReport:
    top_eigenvalue: float
    trace_estimate: float
    trace_stderr: float
    power_iterations_used: int
    probes_used: int


@dataclass(frozen=True)
class BoundReport:
    """Layer-norm capacity term and the resulting generalization bound term."""

    v_l: float
    bound_term: float
    num_layers: int
    input_norm: float
    params_per_layer: int
    data_size: int
    p: float
    epsilon: float


def power_iteration(matvec, dim, start=None, max_iters=100, tol=1e-9):
    """Dominant-magnitude eigenvalue of a symmetric operator.

    Iterates v <- A v / ||A v|| and stops when successive Rayleigh quotients
    agree to ``tol`` relative. Returns (eigenvalue, iterations, history of
    Rayleigh quotients).
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if start is None:
        start = np.random.default_rng(0).standard_normal(dim)
    v = np.asarray(start, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("start vector must be nonzero")
    v = v / norm
    history = []
    rho = 0.0
    iters = 0
    for iters in range(1, max_iters + 1):
        av = matvec(v)
        rho_new = float(v @ av)
        history.append(rho_new)
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0, iters, history
        v = av / norm
        if iters > 1 and abs(rho_new - rho) <= tol * max(1.0, abs(rho_new)):
            rho = rho_new
            break
        rho = rho_new
    return rho, iters, history


def hessian_top_eigenvalue(model, params, data: Batch, max_iters=100, tol=1e-6, seed=0, h=1e-5):
    """Power iteration on the loss Hessian at ``params``; returns (eig, iters)."""
    if data.size < 1:
        raise ValueError("need data to evaluate the Hessian")
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(params.d)

    def matvec(x):
        return hvp(model, params, data, params.like(x), h=h).values

    eig, iters, _ = power_iteration(matvec, params.d, start=start, max_iters=max_iters, tol=tol)
    return eig, iters


def hessian_trace_hutchinson(model, params, data: Batch, probes=100, rng=None, h=1e-5):
    """Rademacher-probe trace estimate; returns (trace, stderr of the mean)."""
    if probes < 1:
        raise ValueError("need at least one probe")
    if rng is None:
        rng = np.random.default_rng(0)
    vals = np.empty(probes)
    for i in range(probes):
        z = rng.integers(0, 2, size=params.d) * 2.0 - 1.0
        vals[i] = z @ hvp(model, params, data, params.like(z), h=h).values
    stderr = float(vals.std(ddof=1) / math.sqrt(probes)) if probes > 1 else 0.0
    return float(vals.mean()), stderr


def consistency(client_params, w: ParamVector) -> float:
    """Mean squared distance of client models from the global model."""
    if not client_params:
        raise ValueError("need at least one client parameter vector")
    total = 0.0
    for p in client_params:
        if p.d != w.d:
            raise ValueError("client/global dimension mismatch")
        diff = p.values - w.values
        total += float(diff @ diff)
    return total / len(client_params)


def _spectral_norm_sq(matrix, max_iters=200, tol=1e-12):
    # Power iteration on W^T W; 200 iterations cover near-degenerate spectra
    # tightly enough for the SVD cross-checks used in the tests.
    dim = matrix.shape[1]
    start = np.random.default_rng(0).standard_normal(dim)

    def matvec(x):
        return matrix.T @ (matrix @ x)

    eig, _, _ = power_iteration(matvec, dim, start=start, max_iters=max_iters, tol=tol)
    return eig


def generalization_bound(params: ParamVector, input_norm, data_size, p, epsilon) -> BoundReport:
    """Layer-norm capacity V_L and the associated generalization bound term.

    V_L multiplies the product of squared spectral norms by the sum of
    Frobenius-to-spectral ratios across layers; the bound term is
    sqrt((L^2 n^2 d ln(d L) V_L + ln(L D / p)) / ((D - 1) eps^2)).
    """
    if not params.layer_shapes:
        raise ValueError("params must carry layer shapes")
    if data_size < 2:
        raise ValueError("data_size must be >= 2")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")

    layers = params.layers()
    num_layers = len(layers)
    spectral_sq = []
    frob_sq = []
    for W in layers:
        s2 = _spectral_norm_sq(W)
        if s2 <= 0.0:
            raise ValueError("zero layer: bound undefined")
        spectral_sq.append(s2)
        frob_sq.append(float(np.sum(W * W)))
    v_l = float(np.prod(spectral_sq) * sum(f / s for f, s in zip(frob_sq, spectral_sq)))

    d_layer = max(r * c for r, c in params.layer_shapes)
    numerator = (
        num_layers**2 * input_norm**2 * d_layer * math.log(d_layer * num_layers) * v_l
        + math.log(num_layers * data_size / p)
    )
    bound = math.sqrt(numerator / ((data_size - 1) * epsilon**2))
    return BoundReport(
        v_l=v_l,
        bound_term=bound,
        num_layers=num_layers,
        input_norm=float(input_norm),
        params_per_layer=d_layer,
        data_size=int(data_size),
        p=float(p),
        epsilon=float(epsilon),
    )


def landscape_slice(model, params, data: Batch, dir1: ParamVector, dir2: ParamVector, half_width, grid_n):
    """Loss surface on a symmetric 2-D grid around ``params``.

    ``dir2`` is orthogonalized against ``dir1`` internally (magnitudes are
    preserved); offsets are integer multiples of half_width/(grid_n//2) so
    the center cell is evaluated exactly at ``params``.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise ValueError("grid_n must be an odd integer >= 3")
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    n1 = dir1.norm()
    if n1 == 0.0:
        raise ValueError("dir1 must be nonzero")
    u1 = dir1.values / n1
    d2 = dir2.values - (dir2.values @ u1) * u1
    if np.linalg.norm(d2) == 0.0:
        raise ValueError("dir2 is parallel to dir1")

    half = grid_n // 2
    step = half_width / half
    offsets = (np.arange(grid_n) - half) * step
    grid = np.empty((grid_n, grid_n))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            point = params.like(params.values + a * dir1.values + b * d2)
            grid[i, j] = loss(model, point, data)
    return grid


def random_landscape_directions(params: ParamVector, rng=None):
    """Two Gaussian directions scaled per layer to the layer's parameter norm.

    Shapeless vectors are scaled to the whole-vector norm instead. Returns
    (dir1, dir2).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    dirs = []
    for _ in range(2):
        raw = rng.standard_normal(params.d)
        if params.layer_shapes:
            pos = 0
            for r, c in params.layer_shapes:
                block = slice(pos, pos + r * c)
                wnorm = np.linalg.norm(params.values[block])
                bnorm = np.linalg.norm(raw[block])
                if bnorm > 0 and wnorm > 0:
                    raw[block] *= wnorm / bnorm
                pos += r * c
        else:
            wnorm = np.linalg.norm(params.values)
            bnorm = np.linalg.norm(raw)
            if bnorm > 0 and wnorm > 0:
                raw *= wnorm / bnorm
        dirs.append(params.like(raw))
    return dirs[0], dirs[1]


def fixed_subset(features, labels, cap=EVAL_SUBSET_CAP, seed=0) -> Batch:
    """Deterministic evaluation subset of at most ``cap`` samples."""
    D = features.shape[0]
    if D <= cap:
        return Batch(features, labels)
    idx = np.sort(np.random.default_rng(seed).choice(D, size=cap, replace=False))
    return Batch(features[idx], labels[idx])


def flatness_report(model, params, data: Batch, max_iters=100, tol=1e-6, probes=100, seed=0) -> FlatnessReport:
    """Bundle the two Hessian diagnostics into one report."""
    eig, iters = hessian_top_eigenvalue(model, params, data, max_iters=max_iters, tol=tol, seed=seed)
    trace, stderr = hessian_trace_hutchinson(
        model, params, data, probes=probes, rng=np.random.default_rng(seed + 1)
    )
    return FlatnessReport(
        top_eigenvalue=eig,
        trace_estimate=trace,
        trace_stderr=stderr,
        power_iterations_used=iters,
        probes_used=probes,
    )
