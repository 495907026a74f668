"""Registration drivers: subspace coefficients or dense fields by descent.

All drivers minimize the total loss with analytic gradients.  The default
optimizer is gradient descent with an Armijo backtracking line search
(c = 1e-4, shrink factor 0.5, greedy step growth between iterations), which
guarantees a non-increasing trace of accepted losses.  A plain momentum
variant is available for experimentation; it makes no monotonicity claim.

Everything is deterministic: fixed evaluation order, no stochastic
sampling, so repeated runs on identical inputs reproduce results bitwise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import DrrOperator, ProjectionSet
from .grids import DisplacementField, Image3D, Mask3D
from .losses import LossConfig, LossContext
from .subspace import DeformationSubspace, reconstruct

OPTIMIZERS = ("gradient_descent_with_backtracking", "momentum")

_ARMIJO_C = 1e-4
_SHRINK = 0.5
_MAX_BACKTRACKS = 60
_LOSS_WINDOW = 5


class NumericalAbort(RuntimeError):
    """Raised when a loss or gradient evaluation turns non-finite."""


@dataclass
class OptimConfig:
    max_iters: int = 200
    step_size: float = 1.0
    optimizer: str = "gradient_descent_with_backtracking"
    tol_grad: float = 1e-9
    tol_loss: float = 1e-8
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.tol_grad < 0.0 or self.tol_loss < 0.0:
            raise ValueError("tolerances must be >= 0")


@dataclass
class RegistrationReport:
    final_loss: float
    loss_trace: list
    iterations: int
    stop_reason: str
    alpha: list | None
    wall_time_s: float


def _check_finite(value, what: str):
    arr = np.asarray(value)
    if not np.all(np.isfinite(arr)):
        raise NumericalAbort(f"non-finite {what} encountered")


def _minimize(loss_fn, loss_grad_fn, x0: np.ndarray, cfg: OptimConfig,
              direction_hook=None):
    """Shared descent loop over a flat parameter vector."""
    x = np.asarray(x0, dtype=np.float64).copy()
    t0 = time.perf_counter()
    loss, grad = loss_grad_fn(x)
    _check_finite(loss, "loss")
    _check_finite(grad, "gradient")
    trace = [float(loss)]
    stop = "max_iters"

    if cfg.optimizer == "momentum":
        vel = np.zeros_like(x)
        it = 0
        for it in range(1, cfg.max_iters + 1):
            if np.max(np.abs(grad)) < cfg.tol_grad:
                stop = "converged_grad"
                it -= 1
                break
            vel = cfg.momentum * vel - cfg.step_size * grad
            x = x + vel
            loss, grad = loss_grad_fn(x)
            _check_finite(loss, "loss")
            _check_finite(grad, "gradient")
            trace.append(float(loss))
        return x, trace, it, stop, time.perf_counter() - t0

    t = cfg.step_size
    it = 0
    for it in range(1, cfg.max_iters + 1):
        if np.max(np.abs(grad)) < cfg.tol_grad:
            stop = "converged_grad"
            it -= 1
            break

        d = -grad if direction_hook is None else -direction_hook(grad)
        slope = float(grad @ d)
        if slope >= 0.0:  # smoothed direction degenerated; fall back
            d = -grad
            slope = -float(grad @ grad)

        accepted = None
        t_try = t
        n_back = 0
        for _ in range(_MAX_BACKTRACKS):
            cand = x + t_try * d
            cand_loss = loss_fn(cand)
            _check_finite(cand_loss, "loss")
            if cand_loss <= loss + _ARMIJO_C * t_try * slope:
                accepted = (cand, cand_loss, t_try)
                break
            t_try *= _SHRINK
            n_back += 1
        if accepted is None:
            stop = "line_search_failed"
            it -= 1
            break

        # when the first trial step already passed, grow it greedily so a
        # badly scaled initial step_size is corrected within one iteration
        cand, cand_loss, t_acc = accepted
        while n_back == 0:
            t_big = 2.0 * t_acc
            big = x + t_big * d
            big_loss = loss_fn(big)
            _check_finite(big_loss, "loss")
            if big_loss <= loss + _ARMIJO_C * t_big * slope and big_loss < cand_loss:
                cand, cand_loss, t_acc = big, big_loss, t_big
            else:
                break

        x = cand
        loss = cand_loss
        t = 2.0 * t_acc
        trace.append(float(loss))
        loss, grad = loss_grad_fn(x)
        _check_finite(loss, "loss")
        _check_finite(grad, "gradient")

        if len(trace) > _LOSS_WINDOW:
            prev = trace[-1 - _LOSS_WINDOW]
            if prev - trace[-1] < cfg.tol_loss * max(abs(prev), 1e-30):
                stop = "converged_loss"
                break

    return x, trace, it, stop, time.perf_counter() - t0


def _subspace_objectives(ctx: LossContext, sub: DeformationSubspace):
    def loss_fn(alpha):
        return ctx.loss(reconstruct(sub, alpha))

    def loss_grad_fn(alpha):
        loss, g = ctx.loss_and_grad(reconstruct(sub, alpha))
        return loss, sub.basis @ g.reshape(-1)

    return loss_fn, loss_grad_fn


def _finish_subspace(ctx, sub, cfg_opt):
    # structural checks happen at load time; non-finite payloads are a
    # numerical failure of the optimization state, not an input-format error
    _check_finite(sub.mean, "subspace mean field")
    _check_finite(sub.basis, "subspace basis")
    loss_fn, loss_grad_fn = _subspace_objectives(ctx, sub)
    alpha0 = np.zeros(sub.n_components)
    alpha, trace, iters, stop, wall = _minimize(loss_fn, loss_grad_fn, alpha0, cfg_opt)
    u = reconstruct(sub, alpha)
    report = RegistrationReport(final_loss=trace[-1], loss_trace=trace,
                                iterations=iters, stop_reason=stop,
                                alpha=[float(a) for a in alpha], wall_time_s=wall)
    return alpha, u, report


def register_subspace_3d(source: Image3D, target: Image3D, source_mask: Mask3D,
                         target_mask: Mask3D, sub: DeformationSubspace,
                         loss_cfg: LossConfig | None = None,
                         opt_cfg: OptimConfig | None = None):
    """Volume-to-volume registration restricted to the subspace."""
    loss_cfg = loss_cfg or LossConfig(loss_mode="sim3d")
    opt_cfg = opt_cfg or OptimConfig()
    if loss_cfg.loss_mode != "sim3d":
        raise ValueError("register_subspace_3d requires loss_mode sim3d")
    if sub.grid != source.grid:
        raise ValueError("subspace grid does not match source grid")
    ctx = LossContext("sim3d", loss_cfg, source, source_mask,
                      target=target, target_mask=target_mask)
    return _finish_subspace(ctx, sub, opt_cfg)


def register_subspace_2d(source: Image3D, projections: ProjectionSet,
                         source_mask: Mask3D, sub: DeformationSubspace,
                         loss_cfg: LossConfig | None = None,
                         opt_cfg: OptimConfig | None = None,
                         drr_op: DrrOperator | None = None):
    """Projection-driven registration; no target volume is ever read."""
    loss_cfg = loss_cfg or LossConfig(loss_mode="sim2d")
    opt_cfg = opt_cfg or OptimConfig()
    if loss_cfg.loss_mode != "sim2d":
        raise ValueError("register_subspace_2d requires loss_mode sim2d")
    if sub.grid != source.grid:
        raise ValueError("subspace grid does not match source grid")
    ctx = LossContext("sim2d", loss_cfg, source, source_mask,
                      projections=projections, drr_op=drr_op)
    return _finish_subspace(ctx, sub, opt_cfg)


def register_dense_3d(source: Image3D, target: Image3D, source_mask: Mask3D,
                      target_mask: Mask3D, loss_cfg: LossConfig | None = None,
                      opt_cfg: OptimConfig | None = None,
                      grad_smooth_sigma_voxels: float = 1.0):
    """Free-form registration of a per-voxel displacement field.

    The raw gradient field is Gaussian-smoothed (default sigma of one
    voxel) before each step; the Armijo test still uses the raw gradient's
    directional derivative so accepted steps always descend.
    """
    loss_cfg = loss_cfg or LossConfig(loss_mode="sim3d")
    opt_cfg = opt_cfg or OptimConfig()
    if loss_cfg.loss_mode != "sim3d":
        raise ValueError("register_dense_3d requires loss_mode sim3d")
    ctx = LossContext("sim3d", loss_cfg, source, source_mask,
                      target=target, target_mask=target_mask)
    grid = source.grid
    shape = grid.dims + (3,)

    def to_field(x):
        return DisplacementField(grid.dims, grid.spacing, grid.origin,
                                 x.reshape(shape))

    def loss_fn(x):
        return ctx.loss(to_field(x))

    def loss_grad_fn(x):
        loss, g = ctx.loss_and_grad(to_field(x))
        return loss, g.reshape(-1)

    def smooth(gflat):
        g = gflat.reshape(shape)
        out = np.empty_like(g)
        for c in range(3):
            out[..., c] = gaussian_filter(g[..., c], grad_smooth_sigma_voxels,
                                          mode="nearest")
        return out.reshape(-1)

    x0 = np.zeros(grid.n_voxels * 3)
    x, trace, iters, stop, wall = _minimize(loss_fn, loss_grad_fn, x0, opt_cfg,
                                            direction_hook=smooth)
    report = RegistrationReport(final_loss=trace[-1], loss_trace=trace,
                                iterations=iters, stop_reason=stop,
                                alpha=None, wall_time_s=wall)
    return to_field(x), report


# ---------------------------------------------------------------------------
# amortized coefficient prediction
# ---------------------------------------------------------------------------

_POOL_GRID = 8  # pooled feature blocks per axis


@dataclass
class LinearAmortizer:
    """Ridge regression from pooled image features to coefficients."""

    weights: np.ndarray    # (n_features, n_components)
    bias: np.ndarray       # (n_components,)
    n_channels: int
    ridge: float


def _pooled_features(volumes: list) -> np.ndarray:
    """Mean over an 8x8x8 block grid of each channel, concatenated."""
    feats = []
    for vol in volumes:
        data = vol.data.astype(np.float64, copy=False)
        parts = [np.array_split(np.arange(n), _POOL_GRID) for n in data.shape]
        pooled = np.empty((_POOL_GRID,) * 3)
        for bi, ix in enumerate(parts[0]):
            for bj, iy in enumerate(parts[1]):
                for bk, iz in enumerate(parts[2]):
                    pooled[bi, bj, bk] = data[np.ix_(ix, iy, iz)].mean()
        feats.append(pooled.reshape(-1))
    return np.concatenate(feats)


def _stack_channels(source: Image3D, lifted: list) -> list:
    for ch in lifted:
        if ch.grid != source.grid:
            raise ValueError("lifted channels must share the source grid")
    return list(lifted) + [source]


def fit_linear_amortizer(examples: list, ridge: float = 1e-3) -> LinearAmortizer:
    """Fit alpha ~ features(lifted channels, source volume).

    ``examples`` is a list of (source, lifted_channels, alpha) tuples.  The
    intercept is not penalized, so as ridge grows predictions approach the
    mean training alpha.
    """
    if ridge < 0.0:
        raise ValueError("ridge must be >= 0")
    if len(examples) == 0:
        raise ValueError("at least one training example is required")
    X = np.stack([_pooled_features(_stack_channels(src, lifted))
                  for src, lifted, _ in examples])
    Y = np.stack([np.asarray(a, dtype=np.float64).reshape(-1)
                  for _, _, a in examples])
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean

    # ridge solution through the SVD; exact min-norm interpolation at ridge=0
    U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    keep = s > (1e-12 * s[0] if s.size and s[0] > 0 else 0.0)
    U, s, Vt = U[:, keep], s[keep], Vt[keep]
    shrink = s / (s ** 2 + ridge)
    W = Vt.T @ (shrink[:, None] * (U.T @ Yc))
    bias = y_mean - x_mean @ W
    n_channels = len(examples[0][1]) + 1
    return LinearAmortizer(weights=W, bias=bias, n_channels=n_channels,
                           ridge=float(ridge))


def predict_alpha(model: LinearAmortizer, source: Image3D,
                  lifted: list) -> np.ndarray:
    """Predicted subspace coefficients for one lifted example."""
    channels = _stack_channels(source, lifted)
    if len(channels) != model.n_channels:
        raise ValueError(f"expected {model.n_channels} channels, got {len(channels)}")
    x = _pooled_features(channels)
    return x @ model.weights + model.bias
