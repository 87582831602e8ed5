"""Lyapunov-certified admissibility of controller parameters.

At a frozen extended state the decrease condition Vdot + alpha V <= 0
is a single affine inequality in (K_d, Lam, eta), because the torque
law is jointly affine there (see memctrl.controller).  The admissible
set is therefore box-intersect-half-space, and the runtime projection
onto it is an exact one-multiplier KKT problem solved by bisection.

The certificate is evaluated along the true closed loop: the rate uses
the plant's actual payload and memory state z.  The simulator knows
both; a deployed system would substitute estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import (ControlDecision, ControllerParams, ExtendedState,
                         ParamBox, computed_torque, feature_matrix,
                         fixed_gain_baseline)
from .dynamics import (FrictionParams, PlantParams, PlantState, RefPoint,
                       Trajectory, coriolis_matrix, gravity_vector,
                       mass_matrix, stribeck_force)


class EmptyAdmissibleSet(RuntimeError):
    """No box point satisfies the decrease half-space at this state."""


@dataclass(frozen=True)
class LyapunovForm:
    """Structured quadratic V(x) = 0.5 (e, ed)^T P (e, ed).

    P is assembled from a block-diagonal form in (e, s) coordinates,
    s = ed + lam_nominal e, so the gradient wrt ed is proportional to
    the sliding surface and raising K_d always steepens the decrease.
    """

    P: np.ndarray               # (4, 4) symmetric positive definite
    alpha: float                # 1/s, demanded decay rate
    lam_nominal: np.ndarray     # (2,), the Lam used in s

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        object.__setattr__(self, "lam_nominal",
                           np.asarray(self.lam_nominal, dtype=float))

    @property
    def gradient_lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.P)[-1])

    def validate(self) -> None:
        if not np.allclose(self.P, self.P.T, atol=1e-12):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(self.P)[0] <= 0.0:
            raise ValueError("P must be positive definite")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")


def design_lyapunov_form(params: PlantParams, ref_q0: np.ndarray | None = None,
                         baseline: ControllerParams | None = None,
                         alpha: float = 0.5) -> LyapunovForm:
    """Quadratic certificate from the nominal error dynamics at baseline gains.

    e-block: Lam^T P_e + P_e Lam = I  =>  P_e = Lam^-1 / 2.
    s-block: the scalar Lyapunov solution of the slowest sliding mode,
    c_s = 1 / (2 min eig(Mbar^-1 K_d)).  An isotropic s-block keeps
    s^T M(q)^-1 P_s s > 0 for every configuration, which is what makes
    "more K_d always helps" hold globally.
    """
    baseline = baseline if baseline is not None else fixed_gain_baseline()
    q0 = np.zeros(2) if ref_q0 is None else np.asarray(ref_q0, dtype=float)
    Mbar = mass_matrix(q0, params.with_payload(0.0))
    # Mbar^-1 diag(kd) is similar to a symmetric PD matrix, so its
    # eigenvalues are real and positive
    rates = np.linalg.eigvals(np.linalg.solve(Mbar, np.diag(baseline.kd)))
    rate_min = float(np.min(rates.real))
    if rate_min <= 0.0:
        raise ValueError("baseline damping must give a contracting sliding mode")
    c_s = 1.0 / (2.0 * rate_min)
    lam = baseline.lam
    P_e = np.diag(1.0 / (2.0 * lam))
    L = np.diag(lam)
    P = np.zeros((4, 4))
    P[:2, :2] = P_e + c_s * L @ L
    P[:2, 2:] = c_s * L
    P[2:, :2] = c_s * L
    P[2:, 2:] = c_s * np.eye(2)
    form = LyapunovForm(P=P, alpha=alpha, lam_nominal=lam.copy())
    form.validate()
    return form


def lyapunov_value(x: ExtendedState, form: LyapunovForm) -> float:
    y = np.concatenate([x.e, x.ed])
    return float(0.5 * y @ form.P @ y)


def _rate_pieces(x: ExtendedState, form: LyapunovForm, params: PlantParams,
                 fric: FrictionParams, z: np.ndarray):
    """Shared terms of Vdot: gradient split and the theta-free drift."""
    y = np.concatenate([x.e, x.ed])
    Py = form.P @ y
    g1, w = Py[:2], Py[2:]
    M = mass_matrix(x.q, params)
    b_vec = np.linalg.solve(M, w)     # M symmetric
    C = coriolis_matrix(x.q, x.qd, params)
    G = gravity_vector(x.q, params)
    F = stribeck_force(x.qd, z, fric)
    drift = float(g1 @ x.ed + w @ x.qdd_ref + b_vec @ (C @ x.qd + G + F))
    return b_vec, drift


def lyapunov_rate(x: ExtendedState, theta: ControllerParams, form: LyapunovForm,
                  params: PlantParams, fric: FrictionParams,
                  z: np.ndarray | None = None,
                  model: PlantParams | None = None) -> float:
    """Vdot along the closed loop with torque from the CT law at theta.

    params is the true plant; model is the controller's payload model
    (defaults to the true plant).  z defaults to zero memory.
    """
    z = np.zeros(2) if z is None else np.asarray(z, dtype=float)
    model = params if model is None else model
    b_vec, drift = _rate_pieces(x, form, params, fric, z)
    tau = computed_torque(x, theta, model, fric)
    return drift - float(b_vec @ tau)


@dataclass(frozen=True)
class HalfspaceCoeffs:
    """State-frozen affine form of the decrease condition.

    kd . a1 + lam . a2 + eta . b + (a0 + b0) <= c  iff
    Vdot(x; theta) + alpha V(x) <= 0.
    """

    a1: np.ndarray    # (2,)
    a2: np.ndarray    # (2,)
    b: np.ndarray     # (DIM_ETA,)
    a0: float
    b0: float
    c: float

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2, self.b])

    def evaluate(self, theta: ControllerParams) -> float:
        """Signed slack; admissible iff <= 0."""
        return float(theta.kd @ self.a1 + theta.lam @ self.a2
                     + theta.eta @ self.b + self.a0 + self.b0 - self.c)


def halfspace_coeffs(x: ExtendedState, form: LyapunovForm, params: PlantParams,
                     fric: FrictionParams, z: np.ndarray | None = None,
                     model: PlantParams | None = None) -> HalfspaceCoeffs:
    """Exact affine coefficients of Vdot(x; theta) + alpha V(x) <= 0."""
    z = np.zeros(2) if z is None else np.asarray(z, dtype=float)
    model = params if model is None else model
    b_vec, drift = _rate_pieces(x, form, params, fric, z)
    Mh = mass_matrix(x.q, model)
    Ch = coriolis_matrix(x.q, x.qd, model)
    Gh = gravity_vector(x.q, model)
    Phi = feature_matrix(x.q, x.qd, fric.v_s)
    tau0 = Mh @ x.qdd_ref + Ch @ x.qd_ref + Gh
    a1 = -x.s * b_vec
    a2 = -(x.ed * (Mh @ b_vec) + x.e * (Ch.T @ b_vec))
    b = -Phi.T @ b_vec
    a0 = -float(b_vec @ tau0)
    c = -form.alpha * lyapunov_value(x, form) - drift
    return HalfspaceCoeffs(a1=a1, a2=a2, b=b, a0=a0, b0=0.0, c=c)


def is_admissible(x: ExtendedState, theta: ControllerParams, form: LyapunovForm,
                  params: PlantParams, fric: FrictionParams,
                  z: np.ndarray | None = None,
                  model: PlantParams | None = None, tol: float = 1e-9) -> bool:
    coeffs = halfspace_coeffs(x, form, params, fric, z, model)
    return coeffs.evaluate(theta) <= tol


def project_halfspace_box(theta_raw: np.ndarray, a: np.ndarray, rhs: float,
                          lower: np.ndarray, upper: np.ndarray,
                          tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Euclidean projection onto {l <= v <= u} intersect {a.v <= rhs}.

    Single-constraint KKT: v(mu) = clip(theta_raw - mu a); a.v(mu) is
    continuous, piecewise linear, non-increasing in mu, so bisection on
    the multiplier is exact up to tolerance.
    """
    v0 = np.clip(theta_raw, lower, upper)
    if a @ v0 <= rhs + tol:
        return v0
    box_min = float(np.minimum(a * lower, a * upper).sum())
    if box_min > rhs + tol:
        raise EmptyAdmissibleSet(
            f"half-space unreachable inside the box (min {box_min:.3g} > {rhs:.3g})")
    # box_min can sit inside (rhs, rhs+tol]; bisect against a reachable target
    target = max(rhs, min(box_min + tol, rhs + tol))

    def value(mu):
        return a @ np.clip(theta_raw - mu * a, lower, upper)

    lo, hi = 0.0, 1.0
    for _ in range(400):
        if value(hi) <= target:
            break
        hi *= 2.0
    else:
        raise EmptyAdmissibleSet("multiplier search failed to bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if value(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16 * max(1.0, hi):
            break
    return np.clip(theta_raw - hi * a, lower, upper)


def project_admissible(x: ExtendedState, theta_raw: ControllerParams,
                       form: LyapunovForm, box: ParamBox, params: PlantParams,
                       fric: FrictionParams, z: np.ndarray | None = None,
                       model: PlantParams | None = None) -> ControllerParams:
    """Project a proposal onto box intersect decrease-half-space.

    Returns theta_raw unchanged when already feasible; raises
    EmptyAdmissibleSet when the state admits no feasible gain choice.
    """
    coeffs = halfspace_coeffs(x, form, params, fric, z, model)
    a = coeffs.stacked()
    rhs = coeffs.c - coeffs.a0 - coeffs.b0
    v = project_halfspace_box(theta_raw.as_vector(), a, rhs,
                              box.lower_vector(), box.upper_vector())
    return ControllerParams.from_vector(v)


@dataclass
class DecayReport:
    max_ratio: float
    t_worst: float
    passed: bool
    alpha: float
    v0: float


def verify_exponential_decay(traj: Trajectory, form: LyapunovForm,
                             alpha: float | None = None,
                             tolerance: float = 0.05) -> DecayReport:
    """Check V(t) <= (1 + tolerance) V(0) exp(-alpha t) along a rollout.

    With alpha = 0 this reduces to monotone non-increase of V.
    """
    alpha = form.alpha if alpha is None else alpha
    e = traj.q_ref - traj.q
    ed = traj.qd_ref - traj.qd
    y = np.concatenate([e, ed], axis=1)
    V = 0.5 * np.einsum("ni,ij,nj->n", y, form.P, y)
    v0 = float(V[0])
    if v0 <= 0.0:
        ratio = np.where(V > 0.0, np.inf, 1.0)
    else:
        ratio = V / (v0 * np.exp(-alpha * traj.t))
    worst = int(np.argmax(ratio))
    return DecayReport(max_ratio=float(ratio[worst]), t_worst=float(traj.t[worst]),
                       passed=bool(ratio[worst] <= 1.0 + tolerance),
                       alpha=alpha, v0=v0)


def shield_activation_fraction(traj: Trajectory) -> float:
    """Fraction of control steps where the projection altered the proposal."""
    if traj.shield_altered.size == 0:
        return 0.0
    return float(np.mean(traj.shield_altered))


class ShieldedController:
    """Wraps a parameter source with the runtime admissibility projection.

    source: callable (t, x) -> ControllerParams proposal.  The true
    payload and memory state come from the simulator; the decision
    record carries whether the projection fired and how far it moved
    the proposal.

    The non-emptiness assumption can fail on isolated states where the
    uncancellable memory disturbance outweighs the feedback authority
    at small sliding error.  on_empty='best_effort' then applies the
    box point with the steepest available decrease and counts the
    violation; on_empty='raise' propagates EmptyAdmissibleSet.
    """

    def __init__(self, source, form: LyapunovForm, box: ParamBox,
                 params: PlantParams, fric: FrictionParams,
                 use_true_state: bool = True, on_empty: str = "best_effort"):
        if on_empty not in ("best_effort", "raise"):
            raise ValueError(f"unknown on_empty policy {on_empty!r}")
        self.source = source
        self.form = form
        self.box = box
        self.params = params
        self.fric = fric
        self.use_true_state = use_true_state
        self.on_empty = on_empty
        self.assumption_violations = 0

    def __call__(self, t: float, state: PlantState, ref_point: RefPoint) -> ControlDecision:
        x = ExtendedState.from_tracking(state.q, state.qd, ref_point,
                                        self.form.lam_nominal)
        proposal = self.source(t, x)
        z = state.z if self.use_true_state else None
        try:
            theta = project_admissible(x, proposal, self.form, self.box,
                                       self.params, self.fric, z=z)
        except EmptyAdmissibleSet:
            if self.on_empty == "raise":
                raise
            self.assumption_violations += 1
            coeffs = halfspace_coeffs(x, self.form, self.params, self.fric, z=z)
            a = coeffs.stacked()
            v = np.where(a > 0.0, self.box.lower_vector(),
                         self.box.upper_vector())
            theta = ControllerParams.from_vector(v)
        dist = float(np.linalg.norm(theta.as_vector() - proposal.as_vector()))
        tau = computed_torque(x, theta, self.params, self.fric)
        return ControlDecision(tau=tau, params=theta,
                               shield_altered=dist > 1e-12,
                               projection_distance=dist)


def shield_report(traj: Trajectory, form: LyapunovForm,
                  controller_obj=None, n_hist_bins: int = 10) -> dict:
    """Activation fraction, decay ratio and projection-distance histogram."""
    decay = verify_exponential_decay(traj, form)
    dist = traj.projection_distance
    edges = np.linspace(0.0, float(dist.max()) if dist.size else 1.0,
                        n_hist_bins + 1)
    hist, _ = np.histogram(dist, bins=edges if edges[-1] > 0 else n_hist_bins)
    report = {
        "activation_fraction": shield_activation_fraction(traj),
        "max_decay_ratio": decay.max_ratio,
        "decay_passed": decay.passed,
        "projection_distance_histogram": {
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in hist],
        },
    }
    if controller_obj is not None:
        report["assumption_violations"] = getattr(
            controller_obj, "assumption_violations", 0)
    return report
