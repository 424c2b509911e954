"""Per-robot split representation of the team EKF.

The centralized filter couples robots only through cross-covariance blocks.
Here each cross block is factored as::

    P_ij = A_i C_ij A_j'

where ``A_i`` is robot i's accumulated motion Jacobian (the running product
of its ``F`` matrices, identity at start) and ``C_ij`` is a correlation
factor held by the server. Propagation then touches only local quantities:
each robot advances its own estimate, covariance and ``A_i``, while every
``C_ij`` stays constant between measurement epochs.

At a measurement epoch the server turns the innovation into one whitened
residual and one per-robot update factor ``D_i`` such that
``A_i D_i inv_sqrt(S)`` equals the centralized gain ``K_i``. A robot applies
its correction knowing only ``A_i`` and the two numbers the server sends;
the server folds the same factors into the store via
``C_ij <- C_ij - D_i D_j'`` (pairs where both robots missed the update keep
their old factor, which is exactly what the centralized filter does to the
corresponding cross block).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import AbstractSet, Iterable, Mapping

import numpy as np

from . import model
from .linalg import (
    COND_FAIL,
    COND_WARN,
    ConditioningWarning,
    NumericalError,
    check_spd_2x2,
    sqrt_and_inv_sqrt_2x2,
)


@dataclass(slots=True)
class SplitRobotState:
    """Everything a robot stores: O(1) in the team size.

    ``jac_accum`` is the product of the robot's motion Jacobians since the
    start of the run; it is identity at time zero and is never changed by
    measurement updates.
    """

    robot_id: int
    mean: np.ndarray
    cov: np.ndarray
    jac_accum: np.ndarray
    time: int = 0

    @classmethod
    def initialize(
        cls, robot_id: int, mean: np.ndarray, cov: np.ndarray, time: int = 0
    ) -> "SplitRobotState":
        return cls(
            robot_id=robot_id,
            mean=np.asarray(mean, dtype=float).copy(),
            cov=np.asarray(cov, dtype=float).copy(),
            jac_accum=np.eye(3),
            time=time,
        )

    def copy(self) -> "SplitRobotState":
        return SplitRobotState(
            robot_id=self.robot_id,
            mean=self.mean.copy(),
            cov=self.cov.copy(),
            jac_accum=self.jac_accum.copy(),
            time=self.time,
        )


def propagate(
    state: SplitRobotState, control: np.ndarray, noise_cov: np.ndarray, dt: float
) -> SplitRobotState:
    """Advance one robot one timestep; no cross term is touched."""
    f_jac, g_jac = model.motion_jacobians(state.mean, control, dt)
    return SplitRobotState(
        robot_id=state.robot_id,
        mean=model.propagate_pose(state.mean, control, dt),
        cov=f_jac @ state.cov @ f_jac.T + g_jac @ np.asarray(noise_cov, dtype=float) @ g_jac.T,
        jac_accum=f_jac @ state.jac_accum,
        time=state.time + 1,
    )


@dataclass(slots=True)
class WhitenedInnovation:
    """Innovation of one measurement, pre-whitened by ``inv_sqrt(cov)``.

    Carries the measurement Jacobians so the factor computation does not
    re-linearize at a different point.
    """

    cov: np.ndarray
    inv_sqrt_cov: np.ndarray
    residual: np.ndarray
    white_residual: np.ndarray
    obs_jac: np.ndarray
    lm_jac: np.ndarray | None


def innovation(
    observer: SplitRobotState,
    landmark: SplitRobotState | None,
    cross_factor: np.ndarray | None,
    z: np.ndarray,
    noise_cov: np.ndarray,
) -> WhitenedInnovation:
    """Innovation of a relative (or, with ``landmark=None``, absolute) measurement.

    ``cross_factor`` is the server's ``C_ab`` block oriented
    (observer, landmark); the observer-landmark cross covariance is
    reconstructed from it, so the result matches the centralized filter's
    innovation covariance exactly.
    """
    if landmark is not None and observer.time != landmark.time:
        raise ValueError(
            f"states are at different timesteps ({observer.time} vs {landmark.time})"
        )
    innov_cov = np.asarray(noise_cov, dtype=float).copy()
    h_obs_full: np.ndarray
    if landmark is None:
        h_obs_full = model.absolute_jacobian()
        h_lm = None
        predicted = model.absolute_position(observer.mean)
        innov_cov += h_obs_full @ observer.cov @ h_obs_full.T
    else:
        if cross_factor is None:
            raise ValueError("relative measurements need the pair's cross factor")
        h_obs_full, h_lm = model.relative_jacobians(observer.mean, landmark.mean)
        predicted = model.relative_position(observer.mean, landmark.mean)
        cross_cov = observer.jac_accum @ cross_factor @ landmark.jac_accum.T
        mixed = h_obs_full @ cross_cov @ h_lm.T
        innov_cov += (
            h_obs_full @ observer.cov @ h_obs_full.T
            + h_lm @ landmark.cov @ h_lm.T
            + mixed
            + mixed.T
        )
    check_spd_2x2(innov_cov)
    _, inv_sqrt = sqrt_and_inv_sqrt_2x2(innov_cov)
    residual = np.asarray(z, dtype=float) - predicted
    return WhitenedInnovation(
        cov=innov_cov,
        inv_sqrt_cov=inv_sqrt,
        residual=residual,
        white_residual=inv_sqrt @ residual,
        obs_jac=h_obs_full,
        lm_jac=h_lm,
    )


def _checked_inverse(acc: np.ndarray, robot_id: int) -> np.ndarray:
    cond = np.linalg.cond(acc)
    if cond > COND_FAIL:
        raise NumericalError(
            f"accumulated Jacobian of robot {robot_id} is ill-conditioned ({cond:.3e})"
        )
    if cond > COND_WARN:
        warnings.warn(
            f"accumulated Jacobian of robot {robot_id} has condition number {cond:.3e}",
            ConditioningWarning,
            stacklevel=3,
        )
    return np.linalg.inv(acc)


class CrossFactorStore:
    """Server-held correlation factors, one 3x3 block per robot pair.

    Blocks are keyed ``(i, j)`` with ``i < j`` and start at zero; the
    ``(j, i)`` block is served as the transpose. Mutations are expected to be
    serialized by the owning server.
    """

    def __init__(self, team: Iterable[int]):
        ids = tuple(sorted(team))
        if len(ids) != len(set(ids)) or len(ids) < 1:
            raise ValueError(f"invalid team {ids}")
        self.team = ids
        self.entries: dict[tuple[int, int], np.ndarray] = {
            (i, j): np.zeros((3, 3)) for i in ids for j in ids if i < j
        }
        self.time = 0
        # Flipped by the negative-control test hook only.
        self._update_sign = -1.0

    def factor(self, i: int, j: int) -> np.ndarray:
        """Correlation factor oriented (i, j)."""
        if i == j:
            raise KeyError("cross factors are defined for distinct robots only")
        if i < j:
            return self.entries[(i, j)]
        return self.entries[(j, i)].T

    def update(
        self,
        factors: Mapping[int, np.ndarray],
        missed: AbstractSet[int] = frozenset(),
    ) -> None:
        """Fold one epoch's update factors into the store.

        Pairs with both robots in ``missed`` are left untouched; every other
        pair absorbs the outer product of its two factors.
        """
        for (i, j), block in self.entries.items():
            if i in missed and j in missed:
                continue
            block += self._update_sign * (factors[i] @ factors[j].T)

    def reconstruct(self, i: int, j: int, acc_i: np.ndarray, acc_j: np.ndarray) -> np.ndarray:
        """Cross covariance between robots ``i`` and ``j`` implied by the store."""
        return acc_i @ self.factor(i, j) @ acc_j.T

    def copy(self) -> "CrossFactorStore":
        dup = CrossFactorStore(self.team)
        dup.entries = {k: v.copy() for k, v in self.entries.items()}
        dup.time = self.time
        dup._update_sign = self._update_sign
        return dup


def update_factors(
    team: Iterable[int],
    store: CrossFactorStore,
    observer: SplitRobotState,
    landmark: SplitRobotState | None,
    innov: WhitenedInnovation,
) -> dict[int, np.ndarray]:
    """Per-robot update factors ``D_i`` for one measurement.

    For every robot ``A_i D_i inv_sqrt(S)`` equals the centralized gain:
    the measured pair contributes its own covariance through the inverse of
    its accumulated Jacobian, every other robot contributes only through the
    stored correlation factors (zero factor, zero correction).
    """
    a = observer.robot_id
    isq = innov.inv_sqrt_cov
    obs_term_own = _checked_inverse(observer.jac_accum, a) @ observer.cov @ innov.obs_jac.T
    if landmark is None:
        proj = {a: innov.obs_jac.T}
        acc_t = {a: observer.jac_accum.T}
        own = {a: obs_term_own}
        pair = (a,)
    else:
        assert innov.lm_jac is not None
        b = landmark.robot_id
        lm_term_own = _checked_inverse(landmark.jac_accum, b) @ landmark.cov @ innov.lm_jac.T
        proj = {a: innov.obs_jac.T, b: innov.lm_jac.T}
        acc_t = {a: observer.jac_accum.T, b: landmark.jac_accum.T}
        own = {a: obs_term_own, b: lm_term_own}
        pair = (a, b)

    factors: dict[int, np.ndarray] = {}
    for i in team:
        acc = np.zeros((3, 2))
        for u in pair:
            if i == u:
                acc += own[u]
            else:
                acc += store.factor(i, u) @ acc_t[u] @ proj[u]
        factors[i] = acc @ isq
    return factors


def apply_update(
    state: SplitRobotState, factor: np.ndarray, white_residual: np.ndarray
) -> SplitRobotState:
    """Apply one (factor, whitened residual) correction to a robot.

    The accumulated Jacobian is unchanged; the covariance loses the squared
    norm of the correction gain from its trace.
    """
    gain = state.jac_accum @ factor
    cov = state.cov - gain @ gain.T
    if float(np.linalg.eigvalsh(cov)[0]) < -1e-9:
        raise NumericalError(
            f"update drove robot {state.robot_id} covariance indefinite"
        )
    return SplitRobotState(
        robot_id=state.robot_id,
        mean=state.mean + gain @ white_residual,
        cov=cov,
        jac_accum=state.jac_accum,
        time=state.time,
    )
