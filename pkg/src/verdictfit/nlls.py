"""Conventional per-voxel fitting: coarse grid-search initialisation
followed by box-constrained Levenberg-Marquardt.

The LM engine runs voxels in lockstep as a batch (each voxel keeps its
own damping factor and accept/reject bookkeeping), which makes volume
fits fast while staying bit-identical to fitting voxels one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forward_model as fm
from .protocol import AcquisitionProtocol
from .simulate import SamplingRanges

_LAMBDA_MIN = 1e-12
_LAMBDA_MAX = 1e14


@dataclass(frozen=True)
class NllsConfig:
    """Grid and damping settings for the classical fit."""

    grid_points_per_param: tuple[int, int, int, int] = (5, 5, 10, 5)
    max_iterations: int = 200
    lm_lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    step_tolerance: float = 1e-8
    residual_tolerance: float = 1e-12
    # Accepted steps whose relative objective decrease falls below this
    # stop the voxel; 0 disables.
    ftol_rel: float = 1e-6
    bounds: SamplingRanges = field(default_factory=SamplingRanges)
    s0_bounds: tuple[float, float] = (1e-6, 1e6)
    # "none": single LM start from the best grid point.  "d_slices": one
    # start per d_ees grid value (best point within the slice);
    # "rd_slices": one start per (radius, d_ees) grid pair.  The single
    # start can miss the right basin on weakly-sensitive voxels; slice
    # restarts cover the basins deterministically, lowest objective wins.
    multistart: str = "none"
    keep_history: bool = False

    def __post_init__(self):
        if self.step_tolerance <= 0 or self.residual_tolerance <= 0:
            raise ValueError("tolerances must be > 0")
        if any(g < 2 for g in self.grid_points_per_param):
            raise ValueError("grid counts must be >= 2")
        if self.multistart not in ("none", "d_slices", "rd_slices"):
            raise ValueError(f"unknown multistart mode {self.multistart!r}")


@dataclass
class FitResult:
    """Per-voxel outcome of an iterative fit."""

    params: np.ndarray  # (5,) f_ic, f_ees, radius, d_ees, s0
    residual_norm: float
    iterations: int
    converged: bool
    ssr_history: np.ndarray | None = None  # accepted-objective trace, if kept


def _bounds_arrays(config: NllsConfig):
    b = config.bounds
    lows = np.array([b.f_ic[0], b.f_ees[0], b.radius[0], b.d_ees[0], config.s0_bounds[0]])
    highs = np.array([b.f_ic[1], b.f_ees[1], b.radius[1], b.d_ees[1], config.s0_bounds[1]])
    return lows, highs


def project_params(params: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> np.ndarray:
    """Clip to the box, then Euclidean-project the fraction pair onto the
    half-plane f_ic + f_ees <= 1.  Box-first ordering keeps the pair at or
    above its lower bounds after the projection."""
    p = np.clip(params, lows, highs)
    excess = p[:, 0] + p[:, 1] - 1.0
    over = excess > 0
    if np.any(over):
        shift = 0.5 * excess[over]
        p[over, 0] -= shift
        p[over, 1] -= shift
    return p


def build_grid(config: NllsConfig) -> np.ndarray:
    """Regular grid over (f_ic, f_ees, radius, d_ees) in row-major order,
    with fraction pairs violating f_ic + f_ees <= 1 removed."""
    lows = np.array([config.bounds.f_ic[0], config.bounds.f_ees[0],
                     config.bounds.radius[0], config.bounds.d_ees[0]])
    highs = np.array([config.bounds.f_ic[1], config.bounds.f_ees[1],
                      config.bounds.radius[1], config.bounds.d_ees[1]])
    axes = [
        np.linspace(lows[i], highs[i], config.grid_points_per_param[i])
        for i in range(4)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=1)
    keep = grid[:, 0] + grid[:, 1] <= 1.0
    return grid[keep]


def _grid_signals(grid: np.ndarray, protocol: AcquisitionProtocol) -> np.ndarray:
    with_s0 = np.column_stack([grid, np.ones(grid.shape[0])])
    return fm.signal_total(with_s0, protocol, validate=False)


def _grid_objective(signals, protocol, config, grid, grid_sig):
    is_b0 = protocol.is_b0
    if is_b0.any():
        s0_init = signals[:, is_b0].mean(axis=1)
    else:
        s0_init = signals.max(axis=1)
    # || s - a*u ||^2 = s.s - 2 a s.u + a^2 u.u ; constant s.s dropped.
    cross = signals @ grid_sig.T  # (N, G)
    uu = np.einsum("gm,gm->g", grid_sig, grid_sig)
    objective = -2.0 * s0_init[:, None] * cross + (s0_init**2)[:, None] * uu[None, :]
    return objective, s0_init


def _grid_init_batch(signals, protocol, config, grid=None, grid_sig=None):
    if grid is None:
        grid = build_grid(config)
    if grid_sig is None:
        grid_sig = _grid_signals(grid, protocol)
    objective, s0_init = _grid_objective(signals, protocol, config, grid, grid_sig)
    best = np.argmin(objective, axis=1)  # first index on ties
    return np.column_stack([grid[best], s0_init])


def grid_search_init(
    signal: np.ndarray, protocol: AcquisitionProtocol, config: NllsConfig = NllsConfig()
) -> np.ndarray:
    """Best grid point by sum of squared residuals; s0 initialised to the
    mean of the b=0 entries.  Ties break to the lowest grid index."""
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (len(protocol),):
        raise ValueError("signal length disagrees with protocol")
    return _grid_init_batch(signal[None, :], protocol, config)[0]


def _lm_batch(signals, init, protocol, config):
    """Levenberg-Marquardt over a voxel batch.

    Returns (params, ssr, iterations, converged, histories).  Each voxel
    holds its own damping factor; steps are accepted only when they
    strictly reduce the objective, so the accepted-objective sequence is
    non-increasing by construction.
    """
    n = signals.shape[0]
    lows, highs = _bounds_arrays(config)
    params = project_params(np.array(init, dtype=float, copy=True), lows, highs)

    model, jac = fm.signal_and_jacobian(params, protocol)
    resid = signals - model
    ssr = np.einsum("nm,nm->n", resid, resid)
    if not np.all(np.isfinite(ssr)):
        raise ValueError("non-finite residual at the initial point")

    lam = np.full(n, config.lm_lambda_init)
    iterations = np.zeros(n, dtype=int)
    converged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    histories = [[s] for s in ssr] if config.keep_history else None

    # Voxels already at the residual floor need no steps.
    done = ssr < config.residual_tolerance
    converged |= done
    active &= ~done

    while active.any():
        idx = np.nonzero(active)[0]
        j = jac[idx]
        r = resid[idx]
        a = np.einsum("nmi,nmj->nij", j, j)
        g = np.einsum("nmi,nm->ni", j, r)
        diag = np.einsum("nii->ni", a).copy()
        floor = 1e-12 * diag.max(axis=1, keepdims=True) + 1e-300
        diag = np.maximum(diag, floor)
        damped = a.copy()
        damped[:, np.arange(5), np.arange(5)] += lam[idx, None] * diag
        step = np.linalg.solve(damped, g[..., None])[..., 0]

        candidate = project_params(params[idx] + step, lows, highs)
        cand_model = fm.signal_total(candidate, protocol, validate=False)
        cand_resid = signals[idx] - cand_model
        cand_ssr = np.einsum("nm,nm->n", cand_resid, cand_resid)

        iterations[idx] += 1
        prev_ssr = ssr[idx].copy()
        improve = cand_ssr < prev_ssr
        actual_step = np.linalg.norm(candidate - params[idx], axis=1)
        scale = 1.0 + np.linalg.norm(params[idx], axis=1)

        acc = idx[improve]
        if acc.size:
            params[acc] = candidate[improve]
            resid[acc] = cand_resid[improve]
            ssr[acc] = cand_ssr[improve]
            lam[acc] = np.maximum(lam[acc] / config.lambda_down, _LAMBDA_MIN)
            model_acc, jac_acc = fm.signal_and_jacobian(params[acc], protocol)
            jac[acc] = jac_acc
            if config.keep_history:
                for k, v in zip(acc, cand_ssr[improve]):
                    histories[k].append(v)

        rej = idx[~improve]
        lam[rej] *= config.lambda_up

        # Termination: tiny accepted or rejected step, residual floor,
        # stagnant relative decrease, stalled damping, or the budget.
        small_step = actual_step < config.step_tolerance * scale
        hit_floor = cand_ssr < config.residual_tolerance
        flat = np.zeros_like(improve)
        if config.ftol_rel > 0:
            flat = (prev_ssr - cand_ssr) <= config.ftol_rel * np.maximum(
                cand_ssr, config.residual_tolerance
            )
        stop_ok = (small_step | hit_floor | flat) & improve
        stop_ok |= small_step & ~improve
        stalled = lam[idx] > _LAMBDA_MAX
        out_of_budget = iterations[idx] >= config.max_iterations

        converged[idx[stop_ok]] = True
        newly_done = stop_ok | stalled | out_of_budget
        active[idx[newly_done]] = False

    histories_arr = (
        [np.array(h) for h in histories] if config.keep_history else [None] * n
    )
    return params, ssr, iterations, converged, histories_arr


def fit_voxel(
    signal: np.ndarray,
    protocol: AcquisitionProtocol,
    init,
    config: NllsConfig = NllsConfig(),
) -> FitResult:
    """LM fit of one voxel from a given starting point (within bounds)."""
    signal = np.asarray(signal, dtype=float)
    init = init.to_array() if isinstance(init, fm.TissueParams) else np.asarray(init, float)
    lows, highs = _bounds_arrays(config)
    if np.any(init < lows) or np.any(init > highs) or init[0] + init[1] > 1.0 + 1e-12:
        raise ValueError("initial point outside bounds")
    params, ssr, iters, conv, hist = _lm_batch(
        signal[None, :], init[None, :], protocol, config
    )
    return FitResult(
        params=params[0],
        residual_norm=float(ssr[0]),
        iterations=int(iters[0]),
        converged=bool(conv[0]),
        ssr_history=hist[0],
    )


def _start_slices(grid, mode):
    if mode == "none":
        return [np.arange(grid.shape[0])]
    if mode == "d_slices":
        return [np.nonzero(grid[:, 3] == d)[0] for d in np.unique(grid[:, 3])]
    slices = []
    for d in np.unique(grid[:, 3]):
        for r in np.unique(grid[:, 2]):
            cols = np.nonzero((grid[:, 3] == d) & (grid[:, 2] == r))[0]
            if cols.size:
                slices.append(cols)
    return slices


def _fit_block(block, protocol, config, grid, grid_sig):
    """Grid init + LM for one voxel block, optionally restarted from the
    best grid point of every start slice (lowest final objective wins;
    the earliest start wins ties)."""
    objective, s0_init = _grid_objective(block, protocol, config, grid, grid_sig)
    params = ssr = iters = conv = None
    hist = None
    for cols in _start_slices(grid, config.multistart):
        best = cols[np.argmin(objective[:, cols], axis=1)]
        init = np.column_stack([grid[best], s0_init])
        p, s, it, cv, h = _lm_batch(block, init, protocol, config)
        if params is None:
            params, ssr, iters, conv, hist = p, s, it, cv, h
        else:
            better = s < ssr
            params[better] = p[better]
            ssr[better] = s[better]
            iters[better] = it[better]
            conv[better] = cv[better]
            if config.keep_history:
                for k in np.nonzero(better)[0]:
                    hist[k] = h[k]
    return params, ssr, iters, conv, hist


def fit_volume(
    signals: np.ndarray,
    protocol: AcquisitionProtocol,
    config: NllsConfig = NllsConfig(),
) -> list[FitResult]:
    """Grid-search init plus LM per voxel; output order matches input.

    Per-voxel convergence failures are recorded in the FitResult, never
    raised, so one bad voxel cannot abort a volume.
    """
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2 or signals.shape[1] != len(protocol):
        raise ValueError("signals must be (n_voxels, len(protocol))")
    if signals.shape[0] == 0:
        return []
    grid = build_grid(config)
    grid_sig = _grid_signals(grid, protocol)
    results = []
    chunk = 16384
    for lo in range(0, signals.shape[0], chunk):
        block = signals[lo : lo + chunk]
        params, ssr, iters, conv, hist = _fit_block(
            block, protocol, config, grid, grid_sig
        )
        for i in range(block.shape[0]):
            results.append(
                FitResult(
                    params=params[i],
                    residual_norm=float(ssr[i]),
                    iterations=int(iters[i]),
                    converged=bool(conv[i]),
                    ssr_history=hist[i],
                )
            )
    return results
