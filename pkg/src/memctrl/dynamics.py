"""Two-link arm with Stribeck friction and an internal memory state.

The plant is the planar elbow manipulator

    M(q, p) qdd + C(q, qd) qd + G(q) + F(qd, z) = tau

with a payload point mass p at the end effector and per-joint friction

    F_j = [f_c + (f_smax - f_c) exp(-(qd_j/v_s)^2)] sign(qd_j)
          + sigma qd_j + z_j,
    zd_j = -z_j / tau_z + lambda_z qd_j.

All algebra routines broadcast over leading axes: q of shape (..., 2)
gives M of shape (..., 2, 2), so the same code drives single rollouts
and batched ensembles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np


class DivergenceError(RuntimeError):
    """State left the configured blow-up bound during integration."""


@dataclass(frozen=True)
class PlantParams:
    """Link and payload constants of the two-link arm.

    Defaults are sized so that the fixed-gain baseline (K_d = 30) is
    comfortably inside the RK4 stability region at dt = 10 ms: the
    worst-case closed-loop rate max_q eig(M^-1 K_d) * dt is ~1.3
    against the explicit-RK4 limit of ~2.8.  Lighter textbook links
    (1 kg, 0.5 m) put that product near 18 and blow up in one step.
    """

    m1: float = 3.5      # kg
    m2: float = 3.5      # kg
    l1: float = 1.0      # m
    l2: float = 1.0      # m
    lc1: float = 0.5     # m, centre of mass offset
    lc2: float = 0.5     # m
    i1: float = 3.5 / 12.0   # kg m^2, rod about its COM
    i2: float = 3.5 / 12.0   # kg m^2
    gravity: float = 9.81    # m/s^2
    payload: float = 0.0     # kg, point mass at the end effector
    payload_max: float = 1.5  # kg

    def validate(self) -> None:
        for name in ("m1", "m2", "l1", "l2", "lc1", "lc2", "i1", "i2"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 <= self.payload <= self.payload_max:
            raise ValueError(
                f"payload {self.payload} outside [0, {self.payload_max}] kg")

    def with_payload(self, payload: float) -> "PlantParams":
        return replace(self, payload=float(payload))


@dataclass(frozen=True)
class FrictionParams:
    """Stribeck friction constants plus the memory-state dynamics."""

    f_c: float = 2.0        # N m, Coulomb level
    f_smax: float = 3.5     # N m, static peak
    v_s: float = 0.15       # rad/s, Stribeck velocity
    sigma: float = 1.0      # N m s/rad, viscous coefficient
    lambda_z: float = 4.0   # N m/rad, memory drive gain
    tau_z: float = 1.0      # s, memory horizon

    def validate(self) -> None:
        if not (self.f_smax >= self.f_c >= 0.0):
            raise ValueError("need f_smax >= f_c >= 0")
        if self.v_s <= 0.0:
            raise ValueError("v_s must be positive")
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")
        if self.tau_z <= 0.0:
            raise ValueError("tau_z must be positive")

    @property
    def memory_horizon(self) -> float:
        # For this memory model the horizon equals the decay constant.
        return self.tau_z

    def with_tau_z(self, tau_z: float) -> "FrictionParams":
        return replace(self, tau_z=float(tau_z))


@dataclass(frozen=True)
class ReferenceSpec:
    """Per-joint sinusoidal reference q_d(t) = A sin(w t + phase)."""

    amplitude: tuple[float, float] = (0.5, 0.3)     # rad
    omega: tuple[float, float] = (2.0 * np.pi / 1.7, 2.0 * np.pi / 2.3)
    phase: tuple[float, float] = (0.0, 0.0)         # rad
    horizon: float = 5.0                            # s

    def validate(self) -> None:
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if min(self.omega) <= 0.0:
            raise ValueError("omega must be positive")
        if self.common_period() <= self.horizon:
            raise ValueError(
                "joint periods share a common period inside the horizon")

    def common_period(self, tol: float = 1e-9) -> float:
        """Smallest common multiple of the two periods (inf if none)."""
        t1, t2 = 2.0 * np.pi / self.omega[0], 2.0 * np.pi / self.omega[1]
        # search small integer multiples; irrational ratios never match
        for k in range(1, 1000):
            m = k * t1 / t2
            if abs(m - round(m)) < tol * k:
                return k * t1
        return np.inf

    def position(self, t, phase_offset=None):
        th = self._theta(t, phase_offset)
        return np.asarray(self.amplitude) * np.sin(th)

    def velocity(self, t, phase_offset=None):
        th = self._theta(t, phase_offset)
        return np.asarray(self.amplitude) * np.asarray(self.omega) * np.cos(th)

    def acceleration(self, t, phase_offset=None):
        th = self._theta(t, phase_offset)
        om = np.asarray(self.omega)
        return -np.asarray(self.amplitude) * om * om * np.sin(th)

    def _theta(self, t, phase_offset):
        th = np.asarray(self.omega) * np.asarray(t)[..., None] + np.asarray(self.phase)
        if phase_offset is not None:
            th = th + phase_offset
        return th


@dataclass
class PlantState:
    """Full Markov state of the simulated system."""

    q: np.ndarray        # rad, shape (2,)
    qd: np.ndarray       # rad/s
    z: np.ndarray        # N m, friction memory
    t: float = 0.0       # s

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))
                    and np.all(np.isfinite(self.z)))

    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.q)), np.max(np.abs(self.qd)),
                         np.max(np.abs(self.z))))


BLOWUP_BOUND = 1.0e3


def _payload_terms(params: PlantParams):
    p = params.payload
    a = (params.i1 + params.i2 + params.m1 * params.lc1 ** 2
         + params.m2 * (params.l1 ** 2 + params.lc2 ** 2)
         + p * (params.l1 ** 2 + params.l2 ** 2))
    b = params.m2 * params.l1 * params.lc2 + p * params.l1 * params.l2
    d = params.i2 + params.m2 * params.lc2 ** 2 + p * params.l2 ** 2
    return a, b, d


def mass_matrix(q: np.ndarray, params: PlantParams) -> np.ndarray:
    """Symmetric positive-definite inertia matrix M(q, payload)."""
    q = np.asarray(q, dtype=float)
    a, b, d = _payload_terms(params)
    c2 = np.cos(q[..., 1])
    M = np.empty(q.shape[:-1] + (2, 2))
    M[..., 0, 0] = a + 2.0 * b * c2
    M[..., 0, 1] = d + b * c2
    M[..., 1, 0] = M[..., 0, 1]
    M[..., 1, 1] = d
    return M


def coriolis_matrix(q: np.ndarray, qd: np.ndarray, params: PlantParams) -> np.ndarray:
    """Christoffel-form C(q, qd); Mdot - 2C is skew along trajectories."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    _, b, _ = _payload_terms(params)
    h = b * np.sin(q[..., 1])
    C = np.empty(q.shape[:-1] + (2, 2))
    C[..., 0, 0] = -h * qd[..., 1]
    C[..., 0, 1] = -h * (qd[..., 0] + qd[..., 1])
    C[..., 1, 0] = h * qd[..., 0]
    C[..., 1, 1] = 0.0
    return C


def gravity_vector(q: np.ndarray, params: PlantParams) -> np.ndarray:
    """Gradient of potential energy wrt q; angles measured from horizontal."""
    q = np.asarray(q, dtype=float)
    p = params.payload
    g = params.gravity
    w1 = params.m1 * params.lc1 + (params.m2 + p) * params.l1
    w2 = params.m2 * params.lc2 + p * params.l2
    c1 = np.cos(q[..., 0])
    c12 = np.cos(q[..., 0] + q[..., 1])
    g1 = w1 * g * c1 + w2 * g * c12
    g2 = w2 * g * c12
    return np.stack([g1, g2], axis=-1)


def potential_energy(q: np.ndarray, params: PlantParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    p = params.payload
    g = params.gravity
    w1 = params.m1 * params.lc1 + (params.m2 + p) * params.l1
    w2 = params.m2 * params.lc2 + p * params.l2
    return g * (w1 * np.sin(q[..., 0]) + w2 * np.sin(q[..., 0] + q[..., 1]))


def kinetic_energy(q: np.ndarray, qd: np.ndarray, params: PlantParams) -> np.ndarray:
    qd = np.asarray(qd, dtype=float)
    M = mass_matrix(q, params)
    return 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)


def total_energy(q, qd, params: PlantParams):
    return kinetic_energy(q, qd, params) + potential_energy(q, params)


def stribeck_force(qd: np.ndarray, z: np.ndarray, fric: FrictionParams) -> np.ndarray:
    """Per-joint friction torque; sign(0) = 0 so the force is single-valued at rest."""
    qd = np.asarray(qd, dtype=float)
    z = np.asarray(z, dtype=float)
    env = fric.f_c + (fric.f_smax - fric.f_c) * np.exp(-((qd / fric.v_s) ** 2))
    return env * np.sign(qd) + fric.sigma * qd + z


def memory_derivative(qd: np.ndarray, z: np.ndarray, fric: FrictionParams) -> np.ndarray:
    qd = np.asarray(qd, dtype=float)
    z = np.asarray(z, dtype=float)
    return -z / fric.tau_z + fric.lambda_z * qd


def solve_2x2(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve M x = rhs for stacked 2x2 systems via the closed-form inverse."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    x0 = (M[..., 1, 1] * rhs[..., 0] - M[..., 0, 1] * rhs[..., 1]) / det
    x1 = (-M[..., 1, 0] * rhs[..., 0] + M[..., 0, 0] * rhs[..., 1]) / det
    return np.stack([x0, x1], axis=-1)


def acceleration(q, qd, z, tau, params: PlantParams, fric: FrictionParams) -> np.ndarray:
    """qdd = M^-1 (tau - C qd - G - F)."""
    tau = np.asarray(tau, dtype=float)
    M = mass_matrix(q, params)
    C = coriolis_matrix(q, qd, params)
    G = gravity_vector(q, params)
    F = stribeck_force(qd, z, fric)
    rhs = tau - np.einsum("...ij,...j->...i", C, np.asarray(qd, dtype=float)) - G - F
    return solve_2x2(M, rhs)


def _derivatives(q, qd, z, tau, params, fric):
    return qd, acceleration(q, qd, z, tau, params, fric), memory_derivative(qd, z, fric)


def rk4_increment(q, qd, z, tau, dt: float, params: PlantParams, fric: FrictionParams):
    """One classical RK4 step of the coupled (q, qd, z) system, torque held."""
    k1 = _derivatives(q, qd, z, tau, params, fric)
    k2 = _derivatives(q + 0.5 * dt * k1[0], qd + 0.5 * dt * k1[1],
                      z + 0.5 * dt * k1[2], tau, params, fric)
    k3 = _derivatives(q + 0.5 * dt * k2[0], qd + 0.5 * dt * k2[1],
                      z + 0.5 * dt * k2[2], tau, params, fric)
    k4 = _derivatives(q + dt * k3[0], qd + dt * k3[1], z + dt * k3[2],
                      tau, params, fric)
    qn = q + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    qdn = qd + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    zn = z + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    return qn, qdn, zn


def step_rk4(state: PlantState, torque: np.ndarray, dt: float,
             params: PlantParams, fric: FrictionParams,
             blowup_bound: float = BLOWUP_BOUND) -> PlantState:
    """Advance the full state by one zero-order-hold RK4 step.

    Raises DivergenceError when the post-step state leaves the blow-up
    bound or turns non-finite.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    qn, qdn, zn = rk4_increment(state.q, state.qd, state.z,
                                np.asarray(torque, dtype=float), dt, params, fric)
    new = PlantState(q=qn, qd=qdn, z=zn, t=state.t + dt)
    if not new.is_finite() or new.max_abs() > blowup_bound:
        raise DivergenceError(f"state exceeded blow-up bound at t={new.t:.3f}")
    return new


@dataclass(frozen=True)
class Trajectory:
    """Record of one rollout on the control grid; immutable after creation."""

    t: np.ndarray            # (n+1,)
    q: np.ndarray            # (n+1, 2)
    qd: np.ndarray           # (n+1, 2)
    z: np.ndarray            # (n+1, 2)
    q_ref: np.ndarray        # (n+1, 2)
    qd_ref: np.ndarray       # (n+1, 2)
    tau: np.ndarray          # (n, 2), torque applied over [t_k, t_k+1)
    kd: np.ndarray           # (n, 2) applied controller gains
    lam: np.ndarray          # (n, 2)
    eta: np.ndarray          # (n, n_eta)
    shield_altered: np.ndarray      # (n,) bool
    projection_distance: np.ndarray  # (n,)
    diverged: bool = False
    seed: int | None = None
    dt: float = 0.01

    @property
    def n_steps(self) -> int:
        return self.tau.shape[0]

    def tracking_error(self) -> np.ndarray:
        return self.q_ref - self.q

    def rmse(self) -> float:
        """Root mean square of the per-step joint error norm."""
        e = self.tracking_error()
        return float(np.sqrt(np.mean(np.sum(e * e, axis=-1))))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "q1", "q2", "qd1", "qd2", "z1", "z2",
                        "qd1_ref", "qd2_ref", "tau1", "tau2"])
            n = self.n_steps
            for k in range(n + 1):
                tau = self.tau[k] if k < n else self.tau[-1]
                w.writerow([f"{self.t[k]:.6f}",
                            *(f"{v:.9g}" for v in self.q[k]),
                            *(f"{v:.9g}" for v in self.qd[k]),
                            *(f"{v:.9g}" for v in self.z[k]),
                            *(f"{v:.9g}" for v in self.qd_ref[k]),
                            *(f"{v:.9g}" for v in tau)])


@dataclass(frozen=True)
class ResetSpec:
    """Reset distribution: q near the reference start, arm at rest."""

    q_jitter: float = 0.1    # rad, uniform half-width around q_d(0)

    def sample(self, ref: ReferenceSpec, rng: np.random.Generator,
               phase_offset=None) -> PlantState:
        q0 = ref.position(0.0, phase_offset) + rng.uniform(
            -self.q_jitter, self.q_jitter, 2)
        return PlantState(q=q0, qd=np.zeros(2), z=np.zeros(2), t=0.0)


@dataclass
class RefPoint:
    """Reference sample handed to the controller at one control step."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray


def rollout(controller, ref: ReferenceSpec, params: PlantParams,
            fric: FrictionParams, seed: int, dt: float = 0.01,
            horizon: float | None = None, reset: ResetSpec | None = None,
            phase_offset=None, blowup_bound: float = BLOWUP_BOUND) -> Trajectory:
    """Run the closed loop for horizon/dt steps with a seeded reset.

    controller is any callable (t, state, ref_point) -> ControlDecision
    (see memctrl.controller).  Deterministic for a fixed seed.  On
    divergence the record is truncated and flagged rather than raised.
    """
    horizon = ref.horizon if horizon is None else horizon
    n = round(horizon / dt)
    if abs(n * dt - horizon) > 1e-9:
        raise ValueError("horizon must be an integral number of steps")
    reset = reset or ResetSpec()
    rng = np.random.default_rng(seed)
    state = reset.sample(ref, rng, phase_offset)

    t = np.empty(n + 1)
    q = np.empty((n + 1, 2)); qd = np.empty((n + 1, 2)); z = np.empty((n + 1, 2))
    q_r = np.empty((n + 1, 2)); qd_r = np.empty((n + 1, 2))
    tau = np.zeros((n, 2))
    kd = np.zeros((n, 2)); lam = np.zeros((n, 2))
    eta_log = np.zeros((n, 6))
    altered = np.zeros(n, dtype=bool)
    pdist = np.zeros(n)
    diverged = False
    n_states = n + 1   # recorded states; shrinks on divergence
    n_taus = n

    for k in range(n):
        t[k] = k * dt
        q[k], qd[k], z[k] = state.q, state.qd, state.z
        q_r[k] = ref.position(t[k], phase_offset)
        qd_r[k] = ref.velocity(t[k], phase_offset)
        ref_point = RefPoint(q=q_r[k], qd=qd_r[k],
                             qdd=ref.acceleration(t[k], phase_offset))
        dec = controller(t[k], state, ref_point)
        tau[k] = dec.tau
        kd[k], lam[k] = dec.params.kd, dec.params.lam
        n_eta = min(dec.params.eta.shape[0], eta_log.shape[1])
        eta_log[k, :n_eta] = dec.params.eta[:n_eta]
        altered[k] = dec.shield_altered
        pdist[k] = dec.projection_distance
        try:
            state = step_rk4(state, dec.tau, dt, params, fric, blowup_bound)
        except DivergenceError:
            diverged = True
            n_states = k + 1
            n_taus = k + 1
            break
    else:
        t[n] = n * dt
        q[n], qd[n], z[n] = state.q, state.qd, state.z
        q_r[n] = ref.position(t[n], phase_offset)
        qd_r[n] = ref.velocity(t[n], phase_offset)

    s, u = slice(0, n_states), slice(0, n_taus)
    return Trajectory(t=t[s], q=q[s], qd=qd[s], z=z[s], q_ref=q_r[s],
                      qd_ref=qd_r[s], tau=tau[u], kd=kd[u], lam=lam[u],
                      eta=eta_log[u], shield_altered=altered[u],
                      projection_distance=pdist[u], diverged=diverged,
                      seed=seed, dt=dt)
