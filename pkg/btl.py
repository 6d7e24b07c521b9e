"""
Bayesian transfer learning between two filters tracking the same target.

The source filter runs an ordinary predict/update cycle and, as a by-product,
emits the one-step-ahead predicted observation (a TransferPacket). The primary
filter consumes that packet one step later as a second likelihood: it first
conditions its prediction on the transferred observation, redraws its points
from the result, and then applies its own measurement.
"""
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from loguru import logger

from core import GaussianBelief, MeasVec, Stage, TransferPacket
from errors import StalePacket
from filter_engine import kalman_correct, measurement_update, observation_moments, predict, predict_observation
from models import MeasurementModel, ProcessModel
from rules import SigmaRule, WeightedPointSet


@dataclass(frozen=True, eq=False)
class FilterState:
    """A filter's current belief plus the rule and model bindings it runs with."""

    belief: GaussianBelief
    rule: SigmaRule
    process: ProcessModel
    measurement: MeasurementModel

    def with_belief(self, belief: GaussianBelief) -> "FilterState":
        return replace(self, belief=belief)


SourceFilterState = FilterState
PrimaryFilterState = FilterState

PrimaryStep = Callable[[FilterState, MeasVec, TransferPacket], GaussianBelief]


class TransferChannel:
    """
    One-slot in-process queue between a source and a primary filter. A packet
    produced at step k can be received once, at step k + 1; anything else is stale.
    """

    def __init__(self):
        self._pending: TransferPacket | None = None

    def send(self, packet: TransferPacket):
        if self._pending is not None:
            raise StalePacket(
                f"Packet for step {self._pending.valid_for} was never consumed; "
                f"cannot queue the packet for step {packet.valid_for}."
            )
        self._pending = packet

    def receive(self, step: int) -> TransferPacket | None:
        """Returns the packet valid for this step, or None before the first packet exists."""
        packet, self._pending = self._pending, None
        if packet is not None and packet.valid_for != step:
            raise StalePacket(f"Packet valid for step {packet.valid_for} offered at step {step}.")
        return packet


def isolated_step(state: FilterState, z: MeasVec) -> GaussianBelief:
    """Plain predict + update, no transferred knowledge."""
    pred, propagated = predict(state.belief, state.rule, state.process)
    return measurement_update(pred, propagated, state.measurement, z)


def source_step(state: SourceFilterState, z_star: MeasVec) -> tuple[GaussianBelief, TransferPacket]:
    """Predict, update with the source measurement, then predict the next observation."""
    posterior = isolated_step(state, z_star)
    packet = predict_observation(posterior, state.rule, state.process, state.measurement)
    return posterior, packet


def tl_update(
    pred: GaussianBelief,
    pred_points: WeightedPointSet,
    measurement: MeasurementModel,
    packet: TransferPacket,
) -> GaussianBelief:
    """
    Conditions a prediction on the transferred observation. The transferred
    covariance takes the place of the sensor noise in the innovation covariance.
    """
    moments = observation_moments(pred_points, pred.mean, measurement, packet.eta_cov)
    return kalman_correct(
        pred,
        moments,
        packet.eta_mean,
        measurement.angle_indices,
        stage=Stage.TL_UPDATED,
        strict=not pred_points.has_negative_weights,
    )


def primary_step(state: PrimaryFilterState, z: MeasVec, packet: TransferPacket) -> GaussianBelief:
    """Predict, transfer-learning update, redraw points, measurement update."""
    step = state.belief.step + 1
    if packet.valid_for != step:
        raise StalePacket(f"Packet valid for step {packet.valid_for} offered to the primary filter at step {step}.")
    pred, propagated = predict(state.belief, state.rule, state.process)
    tl_belief = tl_update(pred, propagated, state.measurement, packet)
    redrawn = state.rule.generate(tl_belief)
    return measurement_update(tl_belief, redrawn, state.measurement, z)


@dataclass(frozen=True, eq=False)
class PairedEstimates:
    source: list[GaussianBelief]
    primary: list[GaussianBelief]
    packets: list[TransferPacket]

    @staticmethod
    def means(beliefs: Sequence[GaussianBelief]) -> np.ndarray:
        return np.array([b.mean for b in beliefs])


def run_source(state: SourceFilterState, z_star_seq) -> tuple[list[GaussianBelief], list[TransferPacket]]:
    """Runs the source filter over its measurements; packets[k-1] is the one produced at step k."""
    beliefs, packets = [], []
    for z_star in z_star_seq:
        posterior, packet = source_step(state, z_star)
        state = state.with_belief(posterior)
        beliefs.append(posterior)
        packets.append(packet)
    return beliefs, packets


def run_primary(
    state: PrimaryFilterState,
    z_seq,
    packets: Sequence[TransferPacket],
    step: PrimaryStep = primary_step,
) -> list[GaussianBelief]:
    """
    Runs the primary filter, receiving each source packet through a TransferChannel
    one step after it was produced. Step 1 has no packet and is an isolated update.
    """
    channel = TransferChannel()
    beliefs = []
    for k, z in enumerate(z_seq, start=1):
        packet = channel.receive(k)
        posterior = isolated_step(state, z) if packet is None else step(state, z, packet)
        state = state.with_belief(posterior)
        beliefs.append(posterior)
        if k - 1 < len(packets):
            channel.send(packets[k - 1])
    return beliefs


def run_pair(
    source: SourceFilterState,
    primary: PrimaryFilterState,
    z_star_seq,
    z_seq,
    step: PrimaryStep = primary_step,
) -> PairedEstimates:
    """Source and primary over the same K steps; the primary uses step (BTL or MVF) from k = 2."""
    if len(z_star_seq) != len(z_seq):
        raise ValueError(f"Source has {len(z_star_seq)} measurements, primary has {len(z_seq)}.")
    source_beliefs, packets = run_source(source, z_star_seq)
    primary_beliefs = run_primary(primary, z_seq, packets, step)
    logger.debug(f"Paired run finished: {len(z_seq)} steps, {len(packets)} packets produced.")
    return PairedEstimates(source_beliefs, primary_beliefs, packets)
