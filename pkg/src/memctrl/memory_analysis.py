"""Temporal structure of the friction memory.

Three groups of tools:

* history gradients of z with respect to the lagged velocity window
  (analytic for the linear memory, finite-difference with re-simulation
  otherwise) and the W x W auto-covariance operator built from them;
* the effective (stable) rank of that operator and the closed-form
  norm of the exponential-decay gradient vector;
* the conditional-variance scale sigma_z^2: closed-form law and a
  binned Monte-Carlo estimator.

The Monte-Carlo cross-check of the closed form runs on a broadband
(per-step white, zero-order-held) velocity excitation.  That is the
process for which the law is exact: the instantaneous state carries no
information about the driving history, so E[Var(z | state)] equals the
stationary variance lambda_z^2 sigma_qd^2 tau_z / 2 with sigma_qd^2
read as variance per unit correlation time (= held-step variance times
dt).  Narrowband excitation (a pure sinusoid) does not satisfy the
law: the state then pins the phase and the true conditional variance
collapses, so no consistent estimator can reproduce the formula there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import FrictionParams, PlantParams, ReferenceSpec
from .ensemble import BaselineEnsembleSim, TaskDistribution, run_baseline_ensemble


class InsufficientHistory(ValueError):
    pass


class InsufficientSamples(RuntimeError):
    pass


class ZeroMatrix(ValueError):
    pass


def history_gradient_analytic(tau_z: float, window: int, dt: float,
                              lambda_z: float) -> np.ndarray:
    """Gradient of z(t) wrt the velocity at lags k*dt, k = 1..W.

    For the linear memory the sensitivity is the exponential-decay
    vector lambda_z * exp(-lag / tau_z), independent of the trajectory.
    """
    if tau_z <= 0.0 or dt <= 0.0:
        raise ValueError("tau_z and dt must be positive")
    lags = dt * np.arange(1, window + 1)
    return lambda_z * np.exp(-lags / tau_z)


def replay_linear_memory(qd_samples: np.ndarray, dt: float, tau_z: float,
                         lambda_z: float, z0: float | np.ndarray = 0.0) -> np.ndarray:
    """Exact per-step propagation of the linear memory on sampled velocity.

    z_{n+1} = exp(-dt/tau_z) (z_n + lambda_z dt qd_n): the discrete
    convolution whose per-sample sensitivity at lag k*dt is exactly
    lambda_z dt exp(-k dt / tau_z), matching the analytic gradient
    after the 1/dt normalisation used by history_gradient_fd.
    """
    qd_samples = np.asarray(qd_samples, dtype=float)
    decay = np.exp(-dt / tau_z)
    z = np.broadcast_to(np.asarray(z0, dtype=float),
                        qd_samples.shape[1:]).copy()
    for n in range(qd_samples.shape[0]):
        z = decay * (z + lambda_z * dt * qd_samples[n])
    return z


def history_gradient_fd(qd_history: np.ndarray, window: int, dt: float,
                        fric: FrictionParams, eps: float = 1e-4) -> np.ndarray:
    """Central finite difference of z(t) wrt each lagged velocity sample.

    qd_history holds the driving velocity samples most-recent-last; the
    last `window` entries are the perturbed lags.  Normalised per unit
    velocity and unit time so the linear memory reproduces
    history_gradient_analytic to roundoff.
    """
    qd_history = np.asarray(qd_history, dtype=float)
    if eps <= 0.0:
        raise ValueError("perturbation size must be positive")
    if qd_history.shape[0] < window:
        raise InsufficientHistory(
            f"need at least {window} samples, got {qd_history.shape[0]}")
    n = qd_history.shape[0]
    grad = np.empty(window)
    for k in range(1, window + 1):
        for sign in (1.0, -1.0):
            pert = qd_history.copy()
            pert[n - k] += sign * eps
            zf = replay_linear_memory(pert, dt, fric.tau_z, fric.lambda_z)
            if sign > 0:
                hi = zf
            else:
                lo = zf
        grad[k - 1] = (hi - lo) / (2.0 * eps * dt)
    return grad


@dataclass(frozen=True)
class TemporalResidualOperator:
    """W x W auto-covariance of history-gradient samples."""

    matrix: np.ndarray
    n_samples: int
    tau_z: float
    mode: str  # "analytic-gradient" | "finite-difference-gradient"

    def validate(self, tol: float = 1e-10) -> None:
        M = self.matrix
        if not np.allclose(M, M.T, atol=1e-12 * max(1.0, float(np.abs(M).max()))):
            raise ValueError("operator must be symmetric")
        if np.linalg.eigvalsh(M)[0] < -tol * max(1.0, float(np.trace(M))):
            raise ValueError("operator must be PSD up to roundoff")

    def write_csv(self, path) -> None:
        header = (f"# temporal residual operator, tau_z={self.tau_z:g}, "
                  f"n_samples={self.n_samples}, mode={self.mode}")
        np.savetxt(path, self.matrix, delimiter=",", header=header)

    @staticmethod
    def read_csv(path, tau_z: float = float("nan"),
                 mode: str = "finite-difference-gradient"
                 ) -> "TemporalResidualOperator":
        M = np.loadtxt(path, delimiter=",")
        return TemporalResidualOperator(matrix=M, n_samples=0, tau_z=tau_z,
                                        mode=mode)


def build_residual_operator(samples: np.ndarray, tau_z: float = float("nan"),
                            mode: str = "finite-difference-gradient"
                            ) -> TemporalResidualOperator:
    """(1/N) sum g g^T over gradient samples; symmetric PSD by construction."""
    g = np.atleast_2d(np.asarray(samples, dtype=float))
    if g.shape[0] < 1:
        raise ValueError("need at least one sample")
    M = g.T @ g / g.shape[0]
    M = 0.5 * (M + M.T)
    return TemporalResidualOperator(matrix=M, n_samples=g.shape[0],
                                    tau_z=tau_z, mode=mode)


def merge_residual_operators(a: TemporalResidualOperator,
                             b: TemporalResidualOperator
                             ) -> TemporalResidualOperator:
    """Sample-weighted merge of partial operators (associative, so shards
    built in parallel can combine in any order up to roundoff)."""
    if a.matrix.shape != b.matrix.shape:
        raise ValueError("operators must share the window size")
    n = a.n_samples + b.n_samples
    M = (a.n_samples * a.matrix + b.n_samples * b.matrix) / n
    return TemporalResidualOperator(matrix=0.5 * (M + M.T), n_samples=n,
                                    tau_z=a.tau_z, mode=a.mode)


def effective_rank(M: np.ndarray) -> float:
    """Stable rank tr(M)^2 / ||M||_F^2 of a nonzero symmetric PSD matrix."""
    M = np.asarray(M, dtype=float)
    fro2 = float(np.sum(M * M))
    if fro2 == 0.0:
        raise ZeroMatrix("effective rank undefined for the zero matrix")
    tr = float(np.trace(M))
    return tr * tr / fro2


def v_norm_sq(tau_z: float, window: int, dt: float, lambda_z: float) -> float:
    """Closed-form squared norm of the exponential-decay gradient vector.

    Equals lambda_z^2 sum_{k=1..W} exp(-2 k dt / tau_z); interpolates
    between lambda_z^2 tau_z / (2 dt) for short memory and
    lambda_z^2 W once the window no longer resolves the decay.
    """
    if tau_z <= 0.0 or dt <= 0.0 or window < 1:
        raise ValueError("arguments must be positive")
    r = np.exp(-2.0 * dt / tau_z)
    if r >= 1.0 - 1e-15:
        return lambda_z ** 2 * window
    return float(lambda_z ** 2 * r * (1.0 - r ** window) / (1.0 - r))


def sigma_z_closed_form(tau_z: float, lambda_z: float, qd_variance: float,
                        rho) -> float:
    """Conditional-variance law lambda^2 sigma^2 (tau/2) (1 - rho(tau)).

    rho is the velocity autocorrelation function (callable, lag in
    seconds, values in [-1, 1]).
    """
    if qd_variance < 0.0:
        raise ValueError("variance must be non-negative")
    r = float(rho(tau_z))
    if not -1.0 - 1e-9 <= r <= 1.0 + 1e-9:
        raise ValueError("autocorrelation must lie in [-1, 1]")
    return lambda_z ** 2 * qd_variance * 0.5 * tau_z * (1.0 - r)


def quantile_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Equal-count bin edges; uniform-width bins would strand sparse
    tail bins below any minimum-count contract almost surely."""
    qs = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1))
    qs[0] -= 1e-12
    qs[-1] += 1e-12
    return qs


@dataclass
class StateBinning:
    """Nested equal-count partition of the (position, velocity) plane.

    Position is split at its quantiles; velocity is split at its
    conditional quantiles within each position stratum.  Tracking data
    concentrate on phase ellipses in (q, qd), so a plain product of
    marginal quantile bins leaves near-empty cells; the nested scheme
    keeps every cell at ~N/(n_bins^2) samples by construction.
    """

    pos_edges: np.ndarray    # (n_bins + 1,)
    vel_edges: np.ndarray    # (n_bins, n_bins + 1)

    @property
    def n_bins(self) -> int:
        return self.vel_edges.shape[0]

    @staticmethod
    def fit(pos: np.ndarray, vel: np.ndarray, n_bins: int = 12) -> "StateBinning":
        pe = quantile_bins(pos, n_bins)
        ve = np.empty((n_bins, n_bins + 1))
        pi = np.clip(np.searchsorted(pe, pos, side="right") - 1, 0, n_bins - 1)
        for b in range(n_bins):
            sel = vel[pi == b]
            if sel.size == 0:
                ve[b] = np.linspace(-1.0, 1.0, n_bins + 1)
            else:
                ve[b] = quantile_bins(sel, n_bins)
        return StateBinning(pos_edges=pe, vel_edges=ve)

    def cell_index(self, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
        nb = self.n_bins
        pi = np.clip(np.searchsorted(self.pos_edges, pos, side="right") - 1,
                     0, nb - 1)
        vi = np.empty_like(pi)
        for b in range(nb):
            mask = pi == b
            if np.any(mask):
                vi[mask] = np.clip(
                    np.searchsorted(self.vel_edges[b], vel[mask],
                                    side="right") - 1, 0, nb - 1)
        return pi * nb + vi


def binned_conditional_variance(pos: np.ndarray, vel: np.ndarray,
                                target: np.ndarray, n_bins: int = 12,
                                min_count: int = 5,
                                binning: StateBinning | None = None) -> float:
    """E[Var(target | state cell)] over the nested equal-count partition.

    Raises InsufficientSamples when any populated cell holds fewer than
    min_count samples.
    """
    binning = binning or StateBinning.fit(pos, vel, n_bins)
    cell = binning.cell_index(pos, vel)
    order = np.argsort(cell, kind="stable")
    t_sorted = target[order]
    cell_sorted = cell[order]
    bounds = np.flatnonzero(np.diff(cell_sorted)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [cell.size]])
    total_w = 0
    acc = 0.0
    for s, e in zip(starts, ends):
        n = e - s
        if n < min_count:
            raise InsufficientSamples(
                f"populated bin with {n} < {min_count} samples")
        seg = t_sorted[s:e]
        acc += n * float(np.var(seg, ddof=1))
        total_w += n
    return acc / total_w


@dataclass
class SigmaZEstimate:
    tau_z: float
    monte_carlo: float
    closed_form: float
    n_samples: int


def sigma_z_broadband(tau_z: float, lambda_z: float, n_traj: int = 2000,
                      horizon: float = 20.0, dt: float = 0.01,
                      vel_scale: float = 1.0, seed: int = 0,
                      n_bins: int = 12, sample_stride: int = 50,
                      burn_in_factor: float = 5.0,
                      q_span: float = 10.0) -> SigmaZEstimate:
    """Monte-Carlo sigma_z^2 under broadband excitation vs the closed form.

    The velocity is per-step white noise (held over dt), integrated to
    a position channel; z follows the exact per-step propagation.  The
    closed form is evaluated with rho = 0 and qd_variance equal to the
    held-step variance times dt.

    Initial positions are drawn uniform over q_span: without the wide
    reset the position random walk shares its increments with z and the
    position bins drain genuine conditional variance from the estimate.
    """
    rng = np.random.default_rng(seed)
    n = round(horizon / dt)
    burn = int(np.ceil(burn_in_factor * tau_z / dt))
    if burn >= n:
        raise ValueError("horizon too short for the stationarity burn-in")
    decay = np.exp(-dt / tau_z)
    z = np.zeros(n_traj)
    q = rng.uniform(-0.5 * q_span, 0.5 * q_span, n_traj)
    pos, vel, mem = [], [], []
    drive = lambda_z * tau_z * (1.0 - decay)   # exact weight for held input
    for k in range(n):
        qd = rng.normal(0.0, vel_scale, n_traj)
        if k >= burn and (k - burn) % sample_stride == 0:
            # z here excludes the current step's drive: independent of qd
            pos.append(q.copy()); vel.append(qd.copy()); mem.append(z.copy())
        z = decay * z + drive * qd
        q = q + dt * qd
    pos = np.concatenate(pos); vel = np.concatenate(vel)
    mem = np.concatenate(mem)
    mc = binned_conditional_variance(pos, vel, mem, n_bins=n_bins)
    cf = sigma_z_closed_form(tau_z, lambda_z, vel_scale ** 2 * dt, lambda u: 0.0)
    return SigmaZEstimate(tau_z=tau_z, monte_carlo=mc, closed_form=cf,
                          n_samples=mem.size)


def gradient_samples_linear(tau_z: float, window: int, dt: float,
                            lambda_z: float, n_samples: int,
                            jitter: float = 0.0, seed: int = 0) -> np.ndarray:
    """Analytic-mode gradient samples for the linear memory.

    Every sample is the same exponential-decay vector; optional
    multiplicative jitter models per-trajectory gain spread.
    """
    v = history_gradient_analytic(tau_z, window, dt, lambda_z)
    g = np.tile(v, (n_samples, 1))
    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        g = g * np.exp(rng.normal(0.0, jitter, (n_samples, 1)))
    return g


def gradient_samples_closed_loop(tau_z: float, ref: ReferenceSpec,
                                 params: PlantParams, fric: FrictionParams,
                                 window: int = 20, n_samples: int = 2048,
                                 dt: float = 0.01, seed: int = 0,
                                 eps: float = 1e-4, horizon: float = 3.0,
                                 task: TaskDistribution | None = None
                                 ) -> np.ndarray:
    """Finite-difference history gradients through the closed-loop plant.

    For each trajectory endpoint the velocity of one joint is kicked at
    each of the `window` lags and the coupled plant (baseline
    controller, perturbed friction draw) is re-simulated to the
    endpoint; the response of the matching memory component, per unit
    kick and unit time, is one length-W gradient sample.  Both joints
    contribute, so n_samples/2 trajectories are simulated.
    """
    if task is None:
        task = TaskDistribution(friction_log_sd=0.2)
    fric = fric.with_tau_z(tau_z)
    batch = max(1, int(np.ceil(n_samples / 2)))
    sim = BaselineEnsembleSim(batch, ref, params, fric, seed, task)
    roll = sim.run(horizon, dt)
    n_end = roll.n_steps
    n0 = n_end - window
    if n0 <= 0:
        raise InsufficientHistory("horizon shorter than the gradient window")
    grads = np.zeros((batch, 2, window))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, window + 1):
            start = n_end - k
            for j in range(2):
                zf = {}
                for sign in (1.0, -1.0):
                    q = roll.q[start].copy()
                    qd = roll.qd[start].copy()
                    z = roll.z[start].copy()
                    qd[:, j] += sign * eps
                    for m in range(start, n_end):
                        q, qd, z = sim.step(m * dt, q, qd, z, dt)
                    zf[sign] = z[:, j]
                grads[:, j, k - 1] = (zf[1.0] - zf[-1.0]) / (2.0 * eps * dt)
    g = grads.reshape(2 * batch, window)[:n_samples]
    ok = np.all(np.isfinite(g), axis=1) & np.repeat(roll.alive, 2)[:g.shape[0]]
    return g[ok]


def sigma_z_plant(tau_z: float, ref: ReferenceSpec, params: PlantParams,
                  fric: FrictionParams, n_traj: int = 512, seed: int = 0,
                  horizon: float = 5.0, dt: float = 0.01, n_bins: int = 12,
                  joint: int = 0, task: TaskDistribution | None = None,
                  sample_times: np.ndarray | None = None) -> float:
    """Binned conditional variance of z on closed-loop tracking rollouts.

    Conditioning is on (q_j, qd_j) of one joint with the other joint
    marginalised; the task distribution must randomise phases for the
    conditional spread to be meaningful.
    """
    task = task or TaskDistribution(slow_reference=True)
    roll = run_baseline_ensemble(n_traj, ref, params,
                                 fric.with_tau_z(tau_z), seed,
                                 dt=dt, horizon=horizon, task=task)
    if sample_times is None:
        sample_times = np.arange(2.0, horizon + 1e-9, 0.25)
    idx = np.round(np.asarray(sample_times) / dt).astype(int)
    ok = roll.alive
    pos = roll.q[idx][:, ok, joint].ravel()
    vel = roll.qd[idx][:, ok, joint].ravel()
    mem = roll.z[idx][:, ok, joint].ravel()
    return binned_conditional_variance(pos, vel, mem, n_bins=n_bins)
