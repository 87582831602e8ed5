"""Incremental rank tracking: the head-count search loop.

Directions are admitted from the leading eigenvector of the residual
when deflating them would reduce its effective rank by more than
gamma_add, and dropped when their share of the operator's spectral
mass falls below gamma_prune.  A smoothed bidirectional gate (EMA plus
a two-iteration confirmation) suppresses grow/prune oscillation; the
loop converges when the head count holds still for n_stable
iterations.

Pruning scores are evaluated against the retained directions' mass
share of the full operator, not against the deflated residual: a
retained direction has, by construction, no mass left in the residual,
so the literal deflated-residual score is identically zero and would
fire the prune branch forever.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .memory_analysis import TemporalResidualOperator


class NoConvergence(RuntimeError):
    """Eigensolver iteration cap reached without meeting tolerance."""


def effective_rank_or_zero(M: np.ndarray) -> float:
    """Stable rank with the convention r_eff(0) := 0."""
    fro2 = float(np.sum(M * M))
    if fro2 == 0.0:
        return 0.0
    tr = float(np.trace(M))
    return tr * tr / fro2


def leading_eigvec(M: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 5000) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of a symmetric PSD matrix by power iteration.

    Deterministic dense random start (fixed seed) so deflated null
    directions cannot trap the residual test; Rayleigh-quotient
    residual as the stopping criterion; a Rayleigh-quotient polish
    accelerates near-converged iterates.  Raises NoConvergence at the
    iteration cap.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    scale = float(np.linalg.norm(M, "fro"))
    v0 = np.zeros(n)
    v0[0] = 1.0
    if scale == 0.0:
        return v0, 0.0
    v = np.random.default_rng(1234).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ M @ v)
    for it in range(max_iter):
        w = M @ v
        nw = float(np.linalg.norm(w))
        if nw <= 1e-300 * scale:
            # iterate fell into the null space; the matrix is ~zero there
            return v, 0.0
        v = w / nw
        lam = float(v @ M @ v)
        res = float(np.linalg.norm(M @ v - lam * v))
        if res <= max(tol, 1e-9) * scale:
            break
        if it >= 20 and it % 10 == 0 and res <= 1e-3 * scale:
            # Rayleigh polish: one shift-invert step squeezes slow
            # convergence between close eigenvalues
            try:
                y = np.linalg.solve(M - (lam + 1e-12 * scale) * np.eye(n), v)
                y_norm = float(np.linalg.norm(y))
                if np.isfinite(y_norm) and y_norm > 0.0:
                    v = y / y_norm
                    lam = float(v @ M @ v)
                    if float(np.linalg.norm(M @ v - lam * v)) <= max(tol, 1e-9) * scale:
                        break
            except np.linalg.LinAlgError:
                pass
    else:
        raise NoConvergence("power iteration hit the cap before the residual test")
    if lam < 0.0 and abs(lam) <= 1e-8 * scale:
        lam = 0.0
    return v, lam


def jacobi_eigh(M: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Full symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns).  Slow
    but dependency-free; used as the oracle against the power-iteration
    path.
    """
    A = np.array(M, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    scale = float(np.linalg.norm(A, "fro")) or 1.0
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) <= 1e-300:
                    continue
                theta = 0.5 * (A[q, q] - A[p, p]) / A[p, q]
                if abs(theta) > 1e154:   # theta^2 would overflow
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                V = V @ J
    idx = np.argsort(np.diag(A))[::-1]
    return np.diag(A)[idx], V[:, idx]


def growth_signal(R: np.ndarray, candidate: np.ndarray) -> float:
    """Effective-rank reduction from deflating the candidate's Rayleigh mass.

    A deflation that exhausts the residual to roundoff counts as
    reaching the zero matrix (r_eff 0), so rank-one exhaustion yields a
    full-unit signal.
    """
    u = np.asarray(candidate, dtype=float)
    nrm = np.linalg.norm(u)
    if abs(nrm - 1.0) > 1e-8:
        raise ValueError("candidate must be a unit vector")
    mass = float(u @ R @ u)
    deflated = R - mass * np.outer(u, u)
    before = float(np.linalg.norm(R, "fro"))
    if float(np.linalg.norm(deflated, "fro")) <= 1e-12 * before:
        return effective_rank_or_zero(R)
    return effective_rank_or_zero(R) - effective_rank_or_zero(deflated)


@dataclass
class DirectionSet:
    """Retained unit directions with their admitted Rayleigh masses."""

    directions: list = field(default_factory=list)
    masses: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.directions)

    def add(self, u: np.ndarray, mass: float) -> None:
        self.directions.append(np.asarray(u, dtype=float))
        self.masses.append(float(mass))

    def drop(self, idx: int) -> None:
        self.directions.pop(idx)
        self.masses.pop(idx)

    def reconstruct(self, R: np.ndarray) -> np.ndarray:
        """Residual plus the retained directions' mass: ~ the original operator."""
        A = R.copy()
        for u, m in zip(self.directions, self.masses):
            A += m * np.outer(u, u)
        return A

    def deflate_from(self, A: np.ndarray) -> np.ndarray:
        R = A.copy()
        for u, m in zip(self.directions, self.masses):
            R -= m * np.outer(u, u)
        return R


class ZeroResidual(RuntimeError):
    pass


def prune_scores(R: np.ndarray, directions) -> np.ndarray:
    """p_k = u_k^T R u_k / ||R||_F for each retained direction.

    Scale invariant; zero for a direction with no mass in R.  The loop
    passes the mass-restored operator here (see module docstring).
    """
    fro = float(np.linalg.norm(R, "fro"))
    if fro == 0.0:
        raise ZeroResidual("all mass explained; prune scores undefined")
    return np.array([float(u @ R @ u) / fro for u in directions])


@dataclass
class GateState:
    """EMA of the signed decision stream plus a confirmation streak."""

    ema: float = 0.0
    streak: int = 0   # signed count of consecutive supra-threshold EMAs
    beta: float = 0.5
    threshold: float = 0.5


_RAW_VALUE = {"grow": 1.0, "hold": 0.0, "prune": -1.0}


def gate_update(raw: str, state: GateState) -> tuple[str, GateState]:
    """Smooth a raw grow/prune/hold decision through the bidirectional gate.

    A decision is enacted only when the smoothed signal sits beyond its
    threshold in the same direction for two consecutive iterations;
    alternating streams therefore never enact.
    """
    if raw not in _RAW_VALUE:
        raise ValueError(f"unknown decision {raw!r}")
    ema = (1.0 - state.beta) * state.ema + state.beta * _RAW_VALUE[raw]
    if ema >= state.threshold:
        streak = state.streak + 1 if state.streak >= 0 else 1
    elif ema <= -state.threshold:
        streak = state.streak - 1 if state.streak <= 0 else -1
    else:
        streak = 0
    enacted = "hold"
    if streak >= 2:
        enacted = "grow"
    elif streak <= -2:
        enacted = "prune"
    return enacted, GateState(ema=ema, streak=streak, beta=state.beta,
                              threshold=state.threshold)


@dataclass(frozen=True)
class Phase1Config:
    window: int = 20
    n_samples: int = 2048
    gamma_add: float = 0.05
    gamma_prune: float = 0.01
    n_stable: int = 20
    max_iterations: int = 200
    gate_beta: float = 0.5

    def validate(self) -> None:
        if self.gamma_add <= 0.0 or self.gamma_prune <= 0.0:
            raise ValueError("thresholds must be positive")
        if self.gamma_prune >= self.gamma_add:
            raise ValueError("need gamma_prune < gamma_add")
        if self.n_stable < 1:
            raise ValueError("n_stable must be at least 1")


@dataclass
class IterationRecord:
    iteration: int
    k: int
    growth_signal: float
    min_prune_score: float
    raw: str
    ema: float
    enacted: str


@dataclass
class Phase1Result:
    k_star: int
    effective_rank_final: float
    iterations: list
    converged: bool
    tau_z: float = float("nan")

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


def run_phase1(operator: TemporalResidualOperator | np.ndarray,
               config: Phase1Config | None = None) -> Phase1Result:
    """Grow/prune/gate loop until the head count is homeostatically stable.

    Deterministic for a fixed operator.  Hits of the iteration cap
    return converged=False rather than raising.
    """
    config = config or Phase1Config()
    config.validate()
    if isinstance(operator, TemporalResidualOperator):
        A = operator.matrix
        tau_z = operator.tau_z
    else:
        A = np.asarray(operator, dtype=float)
        tau_z = float("nan")
    A = 0.5 * (A + A.T)
    W = A.shape[0]

    u1, lam1 = leading_eigvec(A)
    dirs = DirectionSet()
    dirs.add(u1, max(float(u1 @ A @ u1), 0.0))
    R = dirs.deflate_from(A)
    gate = GateState(beta=config.gate_beta)
    stable = 0
    log: list[IterationRecord] = []
    converged = False

    a_scale = float(np.linalg.norm(A, "fro"))
    for it in range(config.max_iterations):
        k_before = len(dirs)
        # deflation residue accumulates eigenvector error (~1e-9 scale);
        # anything below this floor is exhausted, not signal
        if float(np.linalg.norm(R, "fro")) <= 1e-7 * max(a_scale, 1e-300):
            cand = np.zeros(W)
            cand[0] = 1.0
            g = 0.0
        else:
            cand, _ = leading_eigvec(R)
            g = growth_signal(R, cand / np.linalg.norm(cand))
        try:
            scores = prune_scores(dirs.reconstruct(R), dirs.directions)
            min_score = float(scores.min())
        except ZeroResidual:
            scores = np.zeros(len(dirs))
            min_score = 0.0
        grow_raw = g > config.gamma_add and len(dirs) < W
        prune_raw = len(dirs) > 1 and min_score < config.gamma_prune
        # conservative capacity: pruning outranks growth in a tie
        raw = "prune" if prune_raw else ("grow" if grow_raw else "hold")
        enacted, gate = gate_update(raw, gate)
        if enacted == "grow" and len(dirs) < W:
            mass = max(float(cand @ R @ cand), 0.0)
            dirs.add(cand, mass)
            R = R - mass * np.outer(cand, cand)
        elif enacted == "prune" and len(dirs) > 1:
            idx = int(np.argmin(scores))
            dirs.drop(idx)
            R = dirs.deflate_from(A)
        log.append(IterationRecord(iteration=it, k=len(dirs), growth_signal=g,
                                   min_prune_score=min_score, raw=raw,
                                   ema=gate.ema, enacted=enacted))
        stable = stable + 1 if len(dirs) == k_before else 0
        if stable >= config.n_stable:
            converged = True
            break

    return Phase1Result(k_star=len(dirs),
                        effective_rank_final=effective_rank_or_zero(A),
                        iterations=log, converged=converged, tau_z=tau_z)


def phase2_range(k_star: int) -> tuple[int, int]:
    """Closed head-count search interval [ceil(K*/2), K*] for stage 2."""
    if k_star < 1:
        raise ValueError("k_star must be at least 1")
    return (int(np.ceil(k_star / 2.0)), int(k_star))
