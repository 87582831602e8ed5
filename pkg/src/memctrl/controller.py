"""Parameterised computed-torque control with affine feed-forward.

The torque law is the Slotine-Li form

    tau = M(q) qdd_r + C(q, qd) qd_r + G(q) + K_d s + Phi(q, qd) eta,
    qd_r = qd_d + Lam e,   qdd_r = qdd_d + Lam ed,

where s is the sliding surface carried in the extended state.  s is
built with a fixed nominal Lam (the baseline value), which keeps the
torque exactly jointly affine in (K_d, Lam, eta) at a frozen state --
the structure the admissibility half-space in memctrl.shield relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (FrictionParams, PlantParams, PlantState, RefPoint,
                       coriolis_matrix, gravity_vector, mass_matrix)

DIM_ETA = 6
SIGN_SMOOTHING = 0.02  # rad/s, tanh width of the smoothed sign feature


@dataclass(frozen=True)
class ParamBox:
    """Compact box of admissible controller parameters."""

    kd_min: float = 0.0
    kd_max: float = 60.0
    lam_min: float = 0.0
    lam_max: float = 12.0
    eta_max: float = 2.0

    def validate(self) -> None:
        if not (self.kd_min < self.kd_max and self.lam_min < self.lam_max):
            raise ValueError("box bounds must satisfy lower < upper")
        if self.eta_max <= 0.0:
            raise ValueError("eta_max must be positive")

    def lower_vector(self) -> np.ndarray:
        return np.concatenate([np.full(2, self.kd_min), np.full(2, self.lam_min),
                               np.full(DIM_ETA, -self.eta_max)])

    def upper_vector(self) -> np.ndarray:
        return np.concatenate([np.full(2, self.kd_max), np.full(2, self.lam_max),
                               np.full(DIM_ETA, self.eta_max)])

    def contains(self, params: "ControllerParams", tol: float = 1e-9) -> bool:
        v = params.as_vector()
        return bool(np.all(v >= self.lower_vector() - tol)
                    and np.all(v <= self.upper_vector() + tol))

    def clip(self, params: "ControllerParams") -> "ControllerParams":
        v = np.clip(params.as_vector(), self.lower_vector(), self.upper_vector())
        return ControllerParams.from_vector(v)


@dataclass(frozen=True)
class ControllerParams:
    """The tuple (K_d, Lam, eta) acting as the meta-controller's action."""

    kd: np.ndarray    # (2,), diagonal damping gain
    lam: np.ndarray   # (2,), diagonal sliding-surface gain
    eta: np.ndarray   # (DIM_ETA,), feed-forward weights

    def __post_init__(self):
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=float))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.kd, self.lam, self.eta])

    @staticmethod
    def from_vector(v: np.ndarray) -> "ControllerParams":
        v = np.asarray(v, dtype=float)
        return ControllerParams(kd=v[0:2], lam=v[2:4], eta=v[4:])


@dataclass(frozen=True)
class ExtendedState:
    """Tracking state (q, qd, e, ed, s) at one control instant.

    s = ed + Lam_nominal e with a fixed nominal gain, so it is a pure
    function of the kinematic state and the reference.
    """

    q: np.ndarray
    qd: np.ndarray
    e: np.ndarray
    ed: np.ndarray
    s: np.ndarray
    qd_ref: np.ndarray
    qdd_ref: np.ndarray

    @staticmethod
    def from_tracking(q, qd, ref_point: RefPoint,
                      lam_nominal: np.ndarray) -> "ExtendedState":
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        e = ref_point.q - q
        ed = ref_point.qd - qd
        s = ed + np.asarray(lam_nominal, dtype=float) * e
        return ExtendedState(q=q, qd=qd, e=e, ed=ed, s=s,
                             qd_ref=np.asarray(ref_point.qd, dtype=float),
                             qdd_ref=np.asarray(ref_point.qdd, dtype=float))


def smooth_sign(qd, width: float = SIGN_SMOOTHING):
    return np.tanh(np.asarray(qd, dtype=float) / width)


def feature_matrix(q, qd, v_s: float, width: float = SIGN_SMOOTHING) -> np.ndarray:
    """Stribeck regressor Phi, shape (..., 2, DIM_ETA), block per joint.

    Columns per joint: smoothed sign, raw velocity, and the Stribeck
    envelope times the smoothed sign -- so eta = (f_c, sigma,
    f_smax - f_c) per joint reproduces the velocity-dependent part of
    the true friction up to the sign smoothing.
    """
    qd = np.asarray(qd, dtype=float)
    ss = smooth_sign(qd, width)
    env = np.exp(-((qd / v_s) ** 2)) * ss
    Phi = np.zeros(qd.shape[:-1] + (2, DIM_ETA))
    for j in range(2):
        Phi[..., j, 3 * j + 0] = ss[..., j]
        Phi[..., j, 3 * j + 1] = qd[..., j]
        Phi[..., j, 3 * j + 2] = env[..., j]
    return Phi


def feedforward(q, qd, eta, fric: FrictionParams) -> np.ndarray:
    """Affine feed-forward torque Phi(q, qd) eta."""
    Phi = feature_matrix(q, qd, fric.v_s)
    return np.einsum("...ij,...j->...i", Phi, np.asarray(eta, dtype=float))


def computed_torque(x: ExtendedState, gains: ControllerParams,
                    params: PlantParams, fric: FrictionParams | None = None
                    ) -> np.ndarray:
    """Slotine-Li computed torque at the model `params` (payload estimate).

    The K_d feedback acts on the sliding surface stored in x, so the
    output is affine in (kd, lam, eta) jointly for a frozen x.
    """
    M = mass_matrix(x.q, params)
    C = coriolis_matrix(x.q, x.qd, params)
    G = gravity_vector(x.q, params)
    qd_r = x.qd_ref + gains.lam * x.e
    qdd_r = x.qdd_ref + gains.lam * x.ed
    tau = (np.einsum("...ij,...j->...i", M, qdd_r)
           + np.einsum("...ij,...j->...i", C, qd_r)
           + G + gains.kd * x.s)
    if fric is not None:
        tau = tau + feedforward(x.q, x.qd, gains.eta, fric)
    return tau


def squash(raw: np.ndarray, box: ParamBox) -> ControllerParams:
    """Map an unbounded action vector into the box.

    Sigmoid for the gains, eta_max * tanh for the feed-forward weights;
    componentwise monotone and total.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape[0] != 4 + DIM_ETA:
        raise ValueError(f"raw action must have length {4 + DIM_ETA}")
    r = raw[:4]
    sig = np.where(r >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(r))),
                   np.exp(-np.abs(r)) / (1.0 + np.exp(-np.abs(r))))
    kd = box.kd_min + sig[0:2] * (box.kd_max - box.kd_min)
    lam = box.lam_min + sig[2:4] * (box.lam_max - box.lam_min)
    eta = box.eta_max * np.tanh(raw[4:])
    return ControllerParams(kd=kd, lam=lam, eta=eta)


def fixed_gain_baseline() -> ControllerParams:
    """The no-meta-controller reference: K_d = 30, Lam = 5, eta = 0."""
    return ControllerParams(kd=np.full(2, 30.0), lam=np.full(2, 5.0),
                            eta=np.zeros(DIM_ETA))


@dataclass
class ControlDecision:
    """What the controller hands the simulator for one control period."""

    tau: np.ndarray
    params: ControllerParams
    shield_altered: bool = False
    projection_distance: float = 0.0


class BaselineController:
    """Fixed-gain computed torque, optionally with a payload estimate mode.

    payload_mode: 'nominal' ignores the payload (estimate 0), 'true'
    uses the plant's value, 'noisy' applies multiplicative noise to it.
    """

    def __init__(self, params: PlantParams, fric: FrictionParams,
                 gains: ControllerParams | None = None,
                 payload_mode: str = "nominal", noise_rel: float = 0.05,
                 noise_seed: int = 0):
        self.gains = gains if gains is not None else fixed_gain_baseline()
        self.fric = fric
        if payload_mode not in ("nominal", "true", "noisy"):
            raise ValueError(f"unknown payload_mode {payload_mode!r}")
        if payload_mode == "nominal":
            self.model = params.with_payload(0.0)
        elif payload_mode == "true":
            self.model = params
        else:
            rng = np.random.default_rng(noise_seed)
            p_hat = params.payload * (1.0 + noise_rel * rng.standard_normal())
            p_hat = min(max(p_hat, 0.0), params.payload_max)
            self.model = params.with_payload(p_hat)

    def __call__(self, t: float, state: PlantState, ref_point: RefPoint) -> ControlDecision:
        x = ExtendedState.from_tracking(state.q, state.qd, ref_point,
                                        self.gains.lam)
        tau = computed_torque(x, self.gains, self.model, self.fric)
        return ControlDecision(tau=tau, params=self.gains)
