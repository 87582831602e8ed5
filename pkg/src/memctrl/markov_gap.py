"""Quantifying the cost of ignoring the memory state.

A strongly convex surrogate loss l(theta, z) = (mu/2) ||theta -
theta*(z)||^2 with theta*(z) = theta0 + kappa z d makes the
memoryless-policy penalty exact: the best state-feedback policy is the
bin-conditional mean of theta*, and its excess cost is (mu kappa^2 / 2)
E[Var(z | state)].  A windowed policy reconstructs z from the lagged
velocity window by ridge regression first; its excess is the same
constant times the reconstruction mean-square error, which decays like
exp(-2 W dt / tau_z) in the window length.

The (q, qd, z) samples driving the surrogate come from the simulated
closed-loop tracking ensemble, not from a synthetic process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FrictionParams, PlantParams, ReferenceSpec
from .ensemble import TaskDistribution, run_baseline_ensemble
from .memory_analysis import (InsufficientSamples, StateBinning,
                              binned_conditional_variance)


class SingularDesign(RuntimeError):
    """Regression design without enough excitation to identify weights."""


def window_lower_bound(h_z: float, dt: float) -> int:
    """Smallest window covering one memory horizon: ceil(H_z / dt)."""
    if h_z <= 0.0 or dt <= 0.0:
        raise ValueError("arguments must be positive")
    # guard against 5/0.01 = 500.0000...06 style float junk
    return int(math.ceil(h_z / dt - 1e-9))


@dataclass(frozen=True)
class QuadCostSpec:
    """Strongly convex per-step cost in theta with sensitivity kappa to z."""

    mu: float = 1.0
    kappa: float = 1.0
    theta0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    direction: np.ndarray = field(
        default_factory=lambda: np.full(4, 0.5))  # unit vector

    def __post_init__(self):
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=float))
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "direction", d)

    def validate(self) -> None:
        if self.mu <= 0.0 or self.kappa <= 0.0:
            raise ValueError("mu and kappa must be positive")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")

    @property
    def c1(self) -> float:
        """The gap constant mu kappa^2 / 2."""
        return 0.5 * self.mu * self.kappa ** 2

    def loss(self, theta: np.ndarray, z: np.ndarray) -> np.ndarray:
        opt = self.optimum(z)
        d = np.asarray(theta, dtype=float) - opt
        return 0.5 * self.mu * np.sum(d * d, axis=-1)

    def optimum(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.theta0 + self.kappa * z[..., None] * self.direction


def pointwise_optimum(q, qd, z, cost: QuadCostSpec) -> np.ndarray:
    """argmin_theta l(theta, z); closed form, state arguments unused
    because the surrogate separates them."""
    cost.validate()
    return cost.optimum(z)


@dataclass
class MarkovianPolicy:
    """Cell-conditional mean of the pointwise optimiser: the best policy
    that reads only the instantaneous (q, qd).  Shares the nested
    state binning with the sigma_z estimator."""

    binning: StateBinning
    z_mean: np.ndarray          # (n_bins^2,)
    z_mean_global: float
    cost: QuadCostSpec

    def predict_z(self, pos, vel) -> np.ndarray:
        cell = self.binning.cell_index(np.asarray(pos, dtype=float),
                                       np.asarray(vel, dtype=float))
        z = self.z_mean[cell]
        return np.where(np.isnan(z), self.z_mean_global, z)

    def __call__(self, pos, vel) -> np.ndarray:
        return self.cost.optimum(self.predict_z(pos, vel))


def markovian_policy_fit(pos: np.ndarray, vel: np.ndarray, z: np.ndarray,
                         cost: QuadCostSpec, n_bins: int = 12,
                         min_samples: int = 1000,
                         binning: StateBinning | None = None) -> MarkovianPolicy:
    """Conditional-mean estimator of the pointwise optimum on a state grid."""
    cost.validate()
    if pos.size < min_samples:
        raise InsufficientSamples(f"need at least {min_samples} samples")
    binning = binning or StateBinning.fit(pos, vel, n_bins)
    cell = binning.cell_index(pos, vel)
    n_cells = binning.n_bins ** 2
    sums = np.zeros(n_cells)
    counts = np.zeros(n_cells)
    np.add.at(sums, cell, z)
    np.add.at(counts, cell, 1.0)
    with np.errstate(invalid="ignore"):
        mean = sums / counts
    return MarkovianPolicy(binning=binning, z_mean=mean,
                           z_mean_global=float(np.mean(z)), cost=cost)


@dataclass
class WindowedReconstructor:
    """Ridge regression of z(t) on the W lagged velocity samples."""

    weights: np.ndarray      # (W,), lag 1*dt first
    intercept: float
    ridge: float
    fit_residual: float      # RMS residual on the fitting set

    @property
    def window(self) -> int:
        return self.weights.shape[0]

    def predict(self, qd_windows: np.ndarray) -> np.ndarray:
        return qd_windows @ self.weights + self.intercept


def windowed_reconstructor_fit(qd_windows: np.ndarray, z: np.ndarray,
                               ridge: float | None = None
                               ) -> WindowedReconstructor:
    """Fit the windowed linear reconstructor of the memory state.

    qd_windows rows hold lags 1..W (most recent first).  Default ridge
    is 1e-6 tr(X^T X)/W, numerical conditioning only.
    """
    X = np.asarray(qd_windows, dtype=float)
    z = np.asarray(z, dtype=float)
    if X.ndim != 2 or X.shape[0] <= X.shape[1] // 4:
        raise ValueError("need substantially more rows than window lags")
    col_var = X.var(axis=0)
    if np.any(col_var <= 0.0):
        raise SingularDesign("a lag column carries no excitation")
    Xc = X - X.mean(axis=0)
    zc = z - z.mean()
    gram = Xc.T @ Xc
    if ridge is None:
        ridge = 1e-6 * float(np.trace(gram)) / X.shape[1]
    w = np.linalg.solve(gram + ridge * np.eye(X.shape[1]), Xc.T @ zc)
    intercept = float(z.mean() - X.mean(axis=0) @ w)
    resid = z - (X @ w + intercept)
    return WindowedReconstructor(weights=w, intercept=intercept, ridge=float(ridge),
                                 fit_residual=float(np.sqrt(np.mean(resid ** 2))))


def excess_cost(theta: np.ndarray, z: np.ndarray, cost: QuadCostSpec) -> float:
    """Mean l(theta, z) - l(theta*(z), z) over samples; >= 0 by convexity."""
    return float(np.mean(cost.loss(theta, z)))  # l(theta*, z) = 0 exactly


def excess_cost_per_sample(theta: np.ndarray, z: np.ndarray,
                           cost: QuadCostSpec) -> np.ndarray:
    return cost.loss(theta, z)


@dataclass
class MarkovGapResult:
    tau_z: float
    sigma2_hat: float            # binned conditional variance on the fit set
    excess_markov: float
    excess_markov_se: float
    excess_windowed: float
    excess_windowed_se: float
    excess_oracle: float
    lower_bound: float           # c1 * sigma2_hat
    window: int
    n_eval: int


def _traj_se(values: np.ndarray, traj_ids: np.ndarray) -> float:
    """Standard error by trajectory-level batch means (samples within a
    trajectory are serially correlated)."""
    ids = np.unique(traj_ids)
    means = np.array([values[traj_ids == i].mean() for i in ids])
    if means.size < 2:
        return float("inf")
    return float(means.std(ddof=1) / np.sqrt(means.size))


def markov_gap_experiment(tau_z: float, ref: ReferenceSpec, params: PlantParams,
                          fric: FrictionParams, cost: QuadCostSpec | None = None,
                          n_traj: int = 512, seed: int = 0, dt: float = 0.01,
                          horizon: float = 5.0, window: int | None = None,
                          n_bins: int = 12, joint: int = 0,
                          sample_times: np.ndarray | None = None
                          ) -> MarkovGapResult:
    """Measure oracle vs Markovian vs windowed excess on simulated tracking.

    Trajectories are split in half: policies fit on the first half,
    excess evaluated on the second.  The windowed policy composes the
    ridge reconstructor with the pointwise optimiser.
    """
    cost = cost or QuadCostSpec()
    cost.validate()
    fric = fric.with_tau_z(tau_z)
    if window is None:
        window = window_lower_bound(5.0 * tau_z, dt)
    # the lag window must fit before the first sample time
    horizon = max(horizon, window * dt + 2.5)
    task = TaskDistribution(slow_reference=True)
    roll = run_baseline_ensemble(n_traj, ref, params, fric, seed,
                                 dt=dt, horizon=horizon, task=task)
    t_min = max(window * dt + dt, 1.5)
    if sample_times is None:
        sample_times = np.arange(t_min, horizon + 1e-9, 0.25)
    if len(sample_times) == 0:
        raise ValueError("no sample times fit the window inside the horizon")
    idx = np.round(np.asarray(sample_times) / dt).astype(int)
    ok = np.flatnonzero(roll.alive)
    if ok.size < 8:
        raise InsufficientSamples("too few surviving trajectories")

    pos = roll.q[idx][:, ok, joint]       # (T, B)
    vel = roll.qd[idx][:, ok, joint]
    mem = roll.z[idx][:, ok, joint]
    lag_idx = idx[:, None] - np.arange(1, window + 1)[None, :]
    wins = roll.qd[lag_idx][:, :, ok, joint]       # (T, W, B)
    wins = np.moveaxis(wins, 1, 2)                 # (T, B, W)

    n_ok = ok.size
    half = n_ok // 2
    fit_b, ev_b = np.arange(half), np.arange(half, n_ok)

    def flat(arr, cols):
        return arr[:, cols].reshape(-1, *arr.shape[3:]) if arr.ndim > 2 else \
            arr[:, cols].ravel()

    pos_f, vel_f, mem_f = flat(pos, fit_b), flat(vel, fit_b), flat(mem, fit_b)
    wins_f = wins[:, fit_b].reshape(-1, window)
    pos_e, vel_e, mem_e = flat(pos, ev_b), flat(vel, ev_b), flat(mem, ev_b)
    wins_e = wins[:, ev_b].reshape(-1, window)
    traj_e = np.tile(ev_b, idx.size)

    binning = StateBinning.fit(pos_f, vel_f, n_bins)
    sigma2_hat = binned_conditional_variance(pos_f, vel_f, mem_f,
                                             binning=binning)

    policy = markovian_policy_fit(pos_f, vel_f, mem_f, cost, binning=binning)
    theta_mk = policy(pos_e, vel_e)
    ex_mk = excess_cost_per_sample(theta_mk, mem_e, cost)

    recon = windowed_reconstructor_fit(wins_f, mem_f)
    theta_w = cost.optimum(recon.predict(wins_e))
    ex_w = excess_cost_per_sample(theta_w, mem_e, cost)

    theta_or = pointwise_optimum(pos_e, vel_e, mem_e, cost)
    ex_or = excess_cost_per_sample(theta_or, mem_e, cost)

    return MarkovGapResult(
        tau_z=tau_z, sigma2_hat=float(sigma2_hat),
        excess_markov=float(ex_mk.mean()), excess_markov_se=_traj_se(ex_mk, traj_e),
        excess_windowed=float(ex_w.mean()), excess_windowed_se=_traj_se(ex_w, traj_e),
        excess_oracle=float(ex_or.mean()),
        lower_bound=cost.c1 * float(sigma2_hat),
        window=window, n_eval=int(mem_e.size))
