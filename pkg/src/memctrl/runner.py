"""Sweep orchestration and the released result-file schema.

A RunResult captures one (architecture, tau_z, seed) evaluation: the
per-payload RMSE list with between-rollout standard deviations, the
fixed-gain baseline RMSE it is compared to, and the relative reduction
delta_percent = 100 (rmse_mean - baseline) / baseline.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controller import BaselineController
from .dynamics import FrictionParams, PlantParams, ReferenceSpec, rollout

PAYLOAD_GRID = (0.0, 0.375, 0.75, 1.125, 1.5)
COLLAPSE_THRESHOLD = 0.02   # rad, per-payload RMSE range below which a
                            # run counts as payload-invariant


@dataclass
class PayloadPoint:
    payload: float
    rmse: float
    sd: float


@dataclass
class RunResult:
    architecture: str
    param_count: int
    tau_z: float
    seed: int
    baseline_rmse: float
    payload_rmse: list        # [PayloadPoint]
    delta_percent: float
    flags: dict = field(default_factory=dict)

    @property
    def rmse_mean(self) -> float:
        return float(np.mean([p.rmse for p in self.payload_rmse]))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "param_count": self.param_count,
            "tau_z": self.tau_z,
            "seed": self.seed,
            "baseline_rmse": self.baseline_rmse,
            "payload_rmse": [{"payload": p.payload, "rmse": p.rmse, "sd": p.sd}
                             for p in self.payload_rmse],
            "delta_percent": self.delta_percent,
            "flags": self.flags,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunResult":
        pts = [PayloadPoint(payload=float(p["payload"]), rmse=float(p["rmse"]),
                            sd=float(p["sd"])) for p in d["payload_rmse"]]
        return RunResult(architecture=d["architecture"],
                         param_count=int(d["param_count"]),
                         tau_z=float(d["tau_z"]), seed=int(d["seed"]),
                         baseline_rmse=float(d["baseline_rmse"]),
                         payload_rmse=pts,
                         delta_percent=float(d["delta_percent"]),
                         flags=dict(d.get("flags", {})))

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @staticmethod
    def read_json(path) -> "RunResult":
        with open(path) as fh:
            return RunResult.from_dict(json.load(fh))

    def filename(self) -> str:
        return f"{self.architecture}__tz{self.tau_z:g}s__seed{self.seed}.json"

    def check_delta_consistency(self, tol: float = 1e-9) -> bool:
        expect = 100.0 * (self.rmse_mean - self.baseline_rmse) / self.baseline_rmse
        return abs(expect - self.delta_percent) <= tol * max(1.0, abs(expect))

    def write_payload_csv(self, path) -> None:
        """Per-payload rows for plotting."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["payload", "rmse", "sd", "architecture", "tau_z", "seed"])
            for p in self.payload_rmse:
                w.writerow([p.payload, f"{p.rmse:.9g}", f"{p.sd:.9g}",
                            self.architecture, self.tau_z, self.seed])


@dataclass(frozen=True)
class SweepSpec:
    payloads: tuple = PAYLOAD_GRID
    rollouts_per_payload: int = 20
    dt: float = 0.01
    horizon: float = 5.0
    seed: int = 42

    def rollout_seed(self, payload_index: int, rollout_index: int) -> int:
        # deterministic, collision-free reset seeds inside one evaluation
        return (self.seed * 100003 + payload_index * 1009
                + rollout_index) % (2 ** 31 - 1)


def evaluate_controller(make_controller, ref: ReferenceSpec,
                        params: PlantParams, fric: FrictionParams,
                        sweep: SweepSpec | None = None,
                        architecture: str = "baseline-ct",
                        param_count: int = 0,
                        baseline_rmse: float | None = None,
                        threads: int = 1) -> RunResult:
    """Payload sweep of a controller factory.

    make_controller(plant_with_payload, fric) -> rollout controller.
    Diverged rollouts keep their truncated RMSE and are counted in
    flags rather than dropped.  When baseline_rmse is None the
    controller is treated as its own baseline (delta_percent = 0
    against itself uses the mean over the sweep).
    """
    sweep = sweep or SweepSpec()

    def one_payload(ip_payload):
        ip, payload = ip_payload
        plant = params.with_payload(payload)
        rmses, diverged = [], 0
        for ir in range(sweep.rollouts_per_payload):
            ctrl = make_controller(plant, fric)
            traj = rollout(ctrl, ref, plant, fric,
                           seed=sweep.rollout_seed(ip, ir),
                           dt=sweep.dt, horizon=sweep.horizon)
            rmses.append(traj.rmse())
            diverged += int(traj.diverged)
        rmses = np.asarray(rmses)
        return PayloadPoint(payload=payload, rmse=float(rmses.mean()),
                            sd=float(rmses.std(ddof=1))), diverged

    jobs = list(enumerate(sweep.payloads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_payload, jobs))
    else:
        results = [one_payload(j) for j in jobs]
    points = [r[0] for r in results]
    n_diverged = sum(r[1] for r in results)

    rmse_mean = float(np.mean([p.rmse for p in points]))
    base = rmse_mean if baseline_rmse is None else float(baseline_rmse)
    delta = 100.0 * (rmse_mean - base) / base
    return RunResult(architecture=architecture, param_count=param_count,
                     tau_z=fric.tau_z, seed=sweep.seed, baseline_rmse=base,
                     payload_rmse=points, delta_percent=delta,
                     flags={"diverged_rollouts": n_diverged,
                            "total_rollouts": len(points) * sweep.rollouts_per_payload})


def evaluate_baseline(ref: ReferenceSpec, params: PlantParams,
                      fric: FrictionParams, sweep: SweepSpec | None = None,
                      payload_mode: str = "nominal", threads: int = 1,
                      gains=None) -> RunResult:
    def make(plant, fr):
        return BaselineController(plant, fr, gains=gains,
                                  payload_mode=payload_mode)

    return evaluate_controller(make, ref, params, fric, sweep,
                               architecture="baseline-ct", param_count=0,
                               threads=threads)


def failure_mode_flag(result: RunResult,
                      collapse_threshold: float = COLLAPSE_THRESHOLD) -> str:
    """Classify a run: diverged beats collapsed beats healthy.

    Collapse is a per-payload RMSE range smaller than the threshold --
    the payload-invariant-policy signature.
    """
    if not result.payload_rmse:
        raise ValueError("result carries no payload points")
    if result.flags.get("diverged_rollouts", 0) > 0:
        return "diverged"
    rmses = [p.rmse for p in result.payload_rmse]
    if max(rmses) - min(rmses) < collapse_threshold:
        return "collapsed"
    return "healthy"
