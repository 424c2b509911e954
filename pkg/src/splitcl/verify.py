"""Executable equivalence checks for the split protocol stack.

``check_exact_equivalence`` runs the full message-passing stack and the
centralized EKF side by side on one realization under perfect communication
and reports the largest deviation between them (estimates, own covariances,
reconstructed cross covariances) over the whole run. The two must agree to
floating-point accumulation error; a tolerance of 1e-8 over hundreds of
steps is the acceptance gate.

``check_dropout_equivalence`` does the same under the scenario's dropout
schedule, comparing against the centralized filter's partial-update rule
driven by the identical per-epoch missed sets, and additionally verifies
that a robot that misses an epoch keeps exactly its propagated state.

Both checks also police two structural properties along the way: the
centralized joint covariance stays positive semidefinite (to tolerance) and
no received update ever increases a robot's covariance trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import joint_ekf, scenario as scen
from .harness import (
    _run_split_epoch,
    _seed_key,
    build_realization,
    delivery_reports,
)
from .model import wrap_angle
from .network import gate_measurement, perfect_report
from .protocol import CooperationServer, ProtocolEvent, RobotNode

DEFAULT_TOLERANCE = 1e-8


@dataclass(slots=True)
class EquivalenceReport:
    """Outcome of one side-by-side run."""

    mode: str
    max_position_diff: float
    max_heading_diff: float
    max_cov_diff: float
    max_cross_diff: float
    worst_time: int
    worst_robot: int
    min_joint_eigenvalue: float
    max_trace_increase: float
    missed_updates_exact: bool
    n_epochs: int
    n_measurements: int
    events: list[ProtocolEvent]

    def max_discrepancy(self) -> float:
        return max(
            self.max_position_diff,
            self.max_heading_diff,
            self.max_cov_diff,
            self.max_cross_diff,
        )

    def passed(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return (
            self.max_discrepancy() <= tol
            and self.missed_updates_exact
            and self.min_joint_eigenvalue >= -1e-9
            and self.max_trace_increase <= 1e-12
        )

    def summary(self) -> str:
        return (
            f"{self.mode}: max diff {self.max_discrepancy():.3e} "
            f"(position {self.max_position_diff:.3e}, heading {self.max_heading_diff:.3e}, "
            f"covariance {self.max_cov_diff:.3e}, cross {self.max_cross_diff:.3e}) "
            f"worst at t={self.worst_time} robot={self.worst_robot}; "
            f"min joint eig {self.min_joint_eigenvalue:.3e}; "
            f"max trace increase {self.max_trace_increase:.3e}; "
            f"{self.n_epochs} epochs, {self.n_measurements} measurements"
        )


def check_exact_equivalence(
    sc: scen.Scenario, seed=None, corrupt_cross_sign: bool = False
) -> EquivalenceReport:
    """Split stack vs centralized EKF under perfect communication."""
    return _run_side_by_side(sc, seed, dropouts=False, corrupt_cross_sign=corrupt_cross_sign)


def check_dropout_equivalence(
    sc: scen.Scenario, seed=None, corrupt_cross_sign: bool = False
) -> EquivalenceReport:
    """Split stack vs partial-update centralized EKF under the scenario's dropouts."""
    return _run_side_by_side(sc, seed, dropouts=True, corrupt_cross_sign=corrupt_cross_sign)


def _run_side_by_side(
    sc: scen.Scenario, seed, dropouts: bool, corrupt_cross_sign: bool
) -> EquivalenceReport:
    sc.validate()
    key = _seed_key(sc, seed)
    real = build_realization(sc, key)
    reports = delivery_reports(sc, real, key) if dropouts else {}

    ids = sc.robot_ids
    nodes = {i: RobotNode(i, real.init_means[i - 1], sc.initial_cov()) for i in ids}
    server = CooperationServer(
        ids, sc.meas_noise_cov(), corrupt_cross_sign=corrupt_cross_sign
    )
    belief = joint_ekf.JointBelief.initialize(
        means={i: real.init_means[i - 1] for i in ids},
        covs={i: sc.initial_cov() for i in ids},
    )
    noise = sc.meas_noise_cov()
    events: list[ProtocolEvent] = []

    max_pos = max_heading = max_cov = max_cross = 0.0
    worst = (0.0, 0, 0)
    min_eig = math.inf
    max_trace_increase = -math.inf
    missed_exact = True
    n_epochs = n_meas = 0

    for k in range(1, sc.n_steps + 1):
        for i in ids:
            nodes[i].step(
                real.controls_meas[i - 1, k - 1],
                np.diag(real.filter_q[i - 1, k - 1]),
                sc.dt_s,
            )
        controls = {i: real.controls_meas[i - 1, k - 1] for i in ids}
        noises = {i: np.diag(real.filter_q[i - 1, k - 1]) for i in ids}
        belief = joint_ekf.propagate(belief, controls, noises, sc.dt_s)

        if k in real.measurements:
            report = reports.get(k) or perfect_report(ids, k)
            gated = [m for m in real.measurements[k] if gate_measurement(report, m)]
            pre = {i: (nodes[i].state.mean.copy(), nodes[i].state.cov.copy()) for i in ids}
            _run_split_epoch(nodes, server, real.measurements[k], report, events)
            for m in gated:
                belief, _ = joint_ekf.partial_update(belief, m, noise, report.missed)
            if gated:
                n_epochs += 1
                n_meas += len(gated)
                for i in ids:
                    delta = float(np.trace(nodes[i].state.cov) - np.trace(pre[i][1]))
                    if i in report.missed:
                        same = (
                            np.array_equal(nodes[i].state.mean, pre[i][0])
                            and np.array_equal(nodes[i].state.cov, pre[i][1])
                        )
                        missed_exact = missed_exact and same
                    else:
                        max_trace_increase = max(max_trace_increase, delta)

        min_eig = min(min_eig, belief.min_eigenvalue())
        for i in ids:
            mean_split = nodes[i].state.mean
            mean_joint = belief.means[i]
            pos = float(np.max(np.abs(mean_split[:2] - mean_joint[:2])))
            heading = abs(wrap_angle(float(mean_split[2] - mean_joint[2])))
            cov = float(np.max(np.abs(nodes[i].state.cov - belief.covs[i])))
            local_max = max(pos, heading, cov)
            if local_max > worst[0]:
                worst = (local_max, k, i)
            max_pos = max(max_pos, pos)
            max_heading = max(max_heading, heading)
            max_cov = max(max_cov, cov)
        for (i, j), block in belief.cross.items():
            recon = server.store.reconstruct(
                i, j, nodes[i].state.jac_accum, nodes[j].state.jac_accum
            )
            diff = float(np.max(np.abs(recon - block)))
            if diff > worst[0]:
                worst = (diff, k, i)
            max_cross = max(max_cross, diff)

    return EquivalenceReport(
        mode="dropout" if dropouts else "exact",
        max_position_diff=max_pos,
        max_heading_diff=max_heading,
        max_cov_diff=max_cov,
        max_cross_diff=max_cross,
        worst_time=worst[1],
        worst_robot=worst[2],
        min_joint_eigenvalue=min_eig,
        max_trace_increase=(
            max_trace_increase if max_trace_increase > -math.inf else 0.0
        ),
        missed_updates_exact=missed_exact,
        n_epochs=n_epochs,
        n_measurements=n_meas,
        events=events,
    )
