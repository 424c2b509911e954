"""Robot and server state machines for server-assisted cooperative localization.

One epoch goes as follows: every robot propagates locally. If a robot took a
relative (or absolute) measurement it announces it, and every robot involved
in any measurement sends the server a :class:`LandmarkMessage`. The server,
which is the only party holding the cross-correlation factors, computes one
whitened residual and one update factor per measurement, folds the factors
into its store, and broadcasts a fixed-size :class:`UpdateMessage` to every
robot. Robots that receive the message apply it; robots that miss it simply
keep their propagated estimate, and the server skips the store blocks
between pairs of missed robots.

Multiple measurements in the same epoch are processed one at a time in a
fixed order (ascending ``(observer, landmark)``, absolutes after relatives).
The server keeps a scratch copy of the measured robots' estimates so later
measurements in the epoch are linearized against already-corrected values,
and broadcasts a single summed update message per robot at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from . import split_ekf
from .linalg import NumericalError
from .messages import LandmarkMessage, ProtocolError, UpdateMessage
from .split_ekf import CrossFactorStore, SplitRobotState

EVENT_PAIR_UNREACHABLE = "PAIR_UNREACHABLE"
EVENT_STALE = "STALE"
EVENT_NUMERIC_S = "NUMERIC_S"


@dataclass(frozen=True)
class ProtocolEvent:
    """One discarded measurement or skipped update, with a reason code."""

    time: int
    code: str
    detail: str

    def as_line(self) -> str:
        return f"t={self.time} {self.code} {self.detail}"


class RobotNode:
    """A robot's local estimator: propagate, report, apply corrections.

    Stores one pose estimate, one 3x3 covariance and one 3x3 accumulated
    Jacobian, independent of how many robots are in the team.
    """

    __slots__ = ("state",)

    def __init__(self, robot_id: int, mean: np.ndarray, cov: np.ndarray, time: int = 0):
        self.state = SplitRobotState.initialize(robot_id, mean, cov, time)

    @property
    def robot_id(self) -> int:
        return self.state.robot_id

    @property
    def time(self) -> int:
        return self.state.time

    def step(self, control: np.ndarray, noise_cov: np.ndarray, dt: float) -> None:
        """Dead-reckon one timestep; requires no communication."""
        self.state = split_ekf.propagate(self.state, control, noise_cov, dt)

    def landmark_message(
        self, z: np.ndarray | None = None, landmark: int | None = None
    ) -> LandmarkMessage:
        """Snapshot the local state for the server.

        Called with ``z`` (and ``landmark`` for a relative measurement) when
        this robot observed, without arguments when it was observed.
        """
        return LandmarkMessage(
            sender=self.state.robot_id,
            time=self.state.time,
            mean=self.state.mean.copy(),
            cov=self.state.cov.copy(),
            jac_accum=self.state.jac_accum.copy(),
            landmark=landmark,
            z=None if z is None else np.asarray(z, dtype=float).copy(),
        )

    def apply_update(self, msg: UpdateMessage) -> bool:
        """Apply a server correction; returns ``False`` for a stale message.

        A message for a past timestep is discarded (the robot behaves as if
        it had missed the epoch); delayed-measurement replay is out of scope.
        """
        if msg.recipient != self.state.robot_id:
            raise ProtocolError(
                f"robot {self.state.robot_id} received update for {msg.recipient}"
            )
        if msg.time != self.state.time:
            return False
        if msg.kind == "single":
            self.state = split_ekf.apply_update(
                self.state, msg.gain_payload, msg.residual_payload
            )
        else:
            acc = self.state.jac_accum
            cov = self.state.cov - acc @ msg.gain_payload @ acc.T
            if float(np.linalg.eigvalsh(cov)[0]) < -1e-9:
                raise NumericalError(
                    f"summed update drove robot {self.state.robot_id} covariance indefinite"
                )
            self.state = SplitRobotState(
                robot_id=self.state.robot_id,
                mean=self.state.mean + acc @ msg.residual_payload,
                cov=cov,
                jac_accum=acc,
                time=self.state.time,
            )
        return True


class CooperationServer:
    """Holds the cross-correlation factors and produces update messages.

    The server learns which robots missed an epoch from the channel's
    delivery report (per-epoch acknowledgments); store blocks between two
    missed robots are frozen for that epoch so the store keeps mirroring the
    centralized filter's cross covariances.

    ``corrupt_cross_sign`` is a negative-control hook for the verification
    suite: it flips the sign of every store update, which must break the
    equivalence checks.
    """

    def __init__(
        self,
        team: Iterable[int],
        meas_noise_cov: np.ndarray,
        *,
        corrupt_cross_sign: bool = False,
    ):
        self.store = CrossFactorStore(team)
        self.meas_noise_cov = np.asarray(meas_noise_cov, dtype=float).copy()
        self.events: list[ProtocolEvent] = []
        if corrupt_cross_sign:
            self.store._update_sign = 1.0

    @property
    def team(self) -> tuple[int, ...]:
        return self.store.team

    def handle_epoch(
        self,
        msgs: Sequence[LandmarkMessage],
        time: int,
        missed: AbstractSet[int] = frozenset(),
        noise_cov: np.ndarray | None = None,
    ) -> dict[int, UpdateMessage]:
        """Process every measurement announced for ``time``.

        Returns one update message per team member (empty when nothing was
        processed, in which case the store is untouched). Measurements whose
        endpoints did not all reach the server are discarded with a logged
        event, as are measurements with a numerically invalid innovation.
        """
        noise = self.meas_noise_cov if noise_cov is None else np.asarray(noise_cov, dtype=float)
        for msg in msgs:
            if msg.time != time:
                raise ProtocolError(
                    f"message from robot {msg.sender} is for t={msg.time}, epoch is t={time}"
                )
            if msg.sender not in self.team:
                raise ProtocolError(f"unknown robot {msg.sender}")

        # Latest state snapshot per sender; observers may send several
        # announcements but their (mean, cov, jac_accum) snapshots agree.
        snapshots = {msg.sender: msg for msg in msgs}
        announcements = [m for m in msgs if m.z is not None]
        relative = sorted(
            (m for m in announcements if m.landmark is not None),
            key=lambda m: (m.sender, m.landmark),
        )
        absolute = sorted(
            (m for m in announcements if m.landmark is None),
            key=lambda m: m.sender,
        )

        usable: list[LandmarkMessage] = []
        for m in relative + absolute:
            endpoints = (m.sender,) if m.landmark is None else (m.sender, m.landmark)
            bad = [r for r in endpoints if r in missed or r not in snapshots]
            if bad:
                self.events.append(ProtocolEvent(
                    time, EVENT_PAIR_UNREACHABLE,
                    f"observer={m.sender} landmark={m.landmark} unreachable={sorted(bad)}",
                ))
                continue
            usable.append(m)
        if not usable:
            return {}

        # Scratch copies of the measured robots, refreshed after every
        # sub-measurement so later ones are linearized at corrected values.
        shadow: dict[int, SplitRobotState] = {
            rid: SplitRobotState(
                robot_id=rid,
                mean=s.mean.copy(),
                cov=s.cov.copy(),
                jac_accum=s.jac_accum,
                time=time,
            )
            for rid, s in snapshots.items()
        }

        vec_sum = {i: np.zeros(3) for i in self.team}
        mat_sum = {i: np.zeros((3, 3)) for i in self.team}
        singles: list[tuple[np.ndarray, dict[int, np.ndarray]]] = []
        processed = 0
        for m in usable:
            a = m.sender
            observer = shadow[a]
            if m.landmark is None:
                landmark = None
                cross = None
            else:
                landmark = shadow[m.landmark]
                cross = self.store.factor(a, m.landmark)
            try:
                innov = split_ekf.innovation(observer, landmark, cross, m.z, noise)
                factors = split_ekf.update_factors(
                    self.team, self.store, observer, landmark, innov
                )
                new_shadow = {
                    rid: split_ekf.apply_update(state, factors[rid], innov.white_residual)
                    for rid, state in shadow.items()
                }
            except NumericalError as exc:
                # Skip the measurement atomically: neither the scratch
                # beliefs nor the store absorb any part of it.
                self.events.append(ProtocolEvent(
                    time, EVENT_NUMERIC_S,
                    f"observer={a} landmark={m.landmark} reason={exc}",
                ))
                continue
            shadow = new_shadow
            self.store.update(factors, missed)
            for i in self.team:
                vec_sum[i] += factors[i] @ innov.white_residual
                mat_sum[i] += factors[i] @ factors[i].T
            singles.append((innov.white_residual, factors))
            processed += 1

        self.store.time = time
        if processed == 0:
            return {}
        if processed == 1:
            white_residual, factors = singles[0]
            return {
                i: UpdateMessage(
                    recipient=i,
                    time=time,
                    kind="single",
                    residual_payload=white_residual.copy(),
                    gain_payload=factors[i].copy(),
                )
                for i in self.team
            }
        return {
            i: UpdateMessage(
                recipient=i,
                time=time,
                kind="summed",
                residual_payload=vec_sum[i],
                gain_payload=mat_sum[i],
            )
            for i in self.team
        }

    def handle_absolute(
        self,
        msg: LandmarkMessage,
        time: int,
        missed: AbstractSet[int] = frozenset(),
        noise_cov: np.ndarray | None = None,
    ) -> dict[int, UpdateMessage]:
        """Process a single absolute measurement announcement."""
        if msg.z is None or msg.landmark is not None:
            raise ProtocolError("expected an absolute-measurement announcement")
        return self.handle_epoch([msg], time, missed, noise_cov)
