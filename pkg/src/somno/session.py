"""Closed-loop session: stimulus start, per-epoch staging, stop on sustained N, experience report.

A controller is owned by one thread at a time. Audio commands leave through a
one-way, non-blocking channel; a renderer on another thread consumes them.
"""

from __future__ import annotations

import enum
import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import stimulus
from .experience_model import SEQUENCE_LENGTH, ExperienceNet, SleepExperience, predict_experience
from .intake import IntakeProfile, SelectionPolicy, select_stimulus
from .signal_core import EPOCH_SECONDS, Epoch, MultiChannelRecord, preprocess_window
from .stage_model import NetStager, StageLabel, StageNet
from .stimulus import StimulusKind

log = logging.getLogger(__name__)

EPOCH_MS = EPOCH_SECONDS * 1000


class SessionError(RuntimeError):
    pass


class Phase(str, enum.Enum):
    INTAKE = "Intake"
    STIMULATING = "Stimulating"
    QUIET = "Quiet"
    FINALIZED = "Finalized"


@dataclass(frozen=True)
class SessionConfig:
    stop_k: int = 2
    n_epochs: int = SEQUENCE_LENGTH
    rearm: bool = False
    gain_dbfs: float = -40.0
    stim_seed: int = 0
    rain_file: str | None = None

    def __post_init__(self):
        if self.stop_k < 1:
            raise ValueError("stop_k must be >= 1")
        if self.n_epochs != SEQUENCE_LENGTH:
            raise ValueError(f"sessions span exactly {SEQUENCE_LENGTH} epochs")
        stimulus.gain_to_peak(self.gain_dbfs)


@dataclass(frozen=True)
class Action:
    """Controller output. ``type`` is StartStimulus, Stimulate, StopStimulus,
    SessionEnded or ExperiencePredicted."""

    type: str
    epoch: int | None = None
    data: dict = field(default_factory=dict)


@dataclass
class SessionState:
    phase: Phase = Phase.INTAKE
    stimulus: StimulusKind | None = None
    stages: list[StageLabel] = field(default_factory=list)
    stop_epoch: int | None = None
    experience: SleepExperience | None = None
    p_slept: float | None = None

    @property
    def epoch_counter(self) -> int:
        return len(self.stages)


class SessionLog:
    """Append-only ``t_ms<TAB>event<TAB>json`` lines; timestamps are session-relative."""

    def __init__(self, sink=None):
        self.lines: list[str] = []
        self._sink = sink

    def write(self, t_ms: int, event: str, payload: dict) -> None:
        line = f"{t_ms}\t{event}\t{json.dumps(payload, sort_keys=True)}"
        self.lines.append(line)
        if self._sink is not None:
            self._sink.write(line + "\n")
            self._sink.flush()

    def events(self) -> list[str]:
        return [line.split("\t")[1] for line in self.lines]


def _amplitude(kind: StimulusKind, gain_dbfs: float) -> float:
    return 0.0 if kind is StimulusKind.SHAM else stimulus.gain_to_peak(gain_dbfs)


class SessionController:
    """State machine driven either by raw chunks (:meth:`feed_chunk`) or epochs (:meth:`on_epoch`)."""

    def __init__(self, stager: Callable[[Epoch], StageLabel], experience_net: ExperienceNet,
                 config: SessionConfig | None = None, commands: queue.SimpleQueue | None = None,
                 session_log: SessionLog | None = None):
        self.stager = stager
        self.experience_net = experience_net
        self.config = config or SessionConfig()
        self.commands = commands
        self.log = session_log or SessionLog()
        self.state = SessionState()
        self.policy_stamp: str | None = None
        self.profile: IntakeProfile | None = None
        self._pending: list = []
        self._pending_samples = 0
        self._stream = None

    # -- helpers -----------------------------------------------------------
    def _send(self, action: Action) -> None:
        if self.commands is not None:
            self.commands.put_nowait(action)

    def _epoch_end_ms(self, index: int) -> int:
        return (index + 1) * EPOCH_MS

    # -- lifecycle ---------------------------------------------------------
    def start(self, profile: IntakeProfile, policy: SelectionPolicy) -> list[Action]:
        if self.state.phase is not Phase.INTAKE:
            raise SessionError(f"cannot start a session in phase {self.state.phase.value}")
        kind = select_stimulus(profile, policy)
        self.profile = profile
        self.policy_stamp = policy.stamp
        self.state.stimulus = kind
        self.state.phase = Phase.STIMULATING
        action = Action("StartStimulus", None, {
            "kind": kind.value, "gain_dbfs": self.config.gain_dbfs,
            "amplitude": _amplitude(kind, self.config.gain_dbfs), "seed": self.config.stim_seed,
        })
        self.log.write(0, "StimulusStarted", {"policy": policy.stamp, **action.data})
        self._send(action)
        return [action]

    def on_epoch(self, epoch: Epoch) -> list[Action]:
        st = self.state
        if st.phase is Phase.FINALIZED:
            raise SessionError("session already finalized; no further epochs accepted")
        if st.phase is Phase.INTAKE:
            raise SessionError("session not started")
        index = st.epoch_counter
        stage = StageLabel(self.stager(epoch))
        st.stages.append(stage)
        t_ms = self._epoch_end_ms(index)
        self.log.write(t_ms, "StageClassified", {"epoch": index, "stage": stage.value})
        actions = []
        k = self.config.stop_k
        if st.phase is Phase.STIMULATING:
            if len(st.stages) >= k and all(s is StageLabel.N for s in st.stages[-k:]):
                st.phase = Phase.QUIET
                if st.stop_epoch is None:
                    st.stop_epoch = index
                actions.append(Action("StopStimulus", index, {"rule": f"{k} consecutive N"}))
                self.log.write(t_ms, "StimulusStopped", {"epoch": index})
            else:
                actions.append(Action("Stimulate", index))
        elif st.phase is Phase.QUIET and self.config.rearm and stage is StageLabel.W:
            st.phase = Phase.STIMULATING
            actions.append(Action("StartStimulus", index, {
                "kind": st.stimulus.value, "gain_dbfs": self.config.gain_dbfs,
                "amplitude": _amplitude(st.stimulus, self.config.gain_dbfs), "seed": self.config.stim_seed,
                "rearm": True}))
            self.log.write(t_ms, "StimulusStarted", {"epoch": index, "rearm": True})
        if st.epoch_counter == self.config.n_epochs:
            if st.phase is Phase.STIMULATING:
                actions.append(Action("SessionEnded", index))
            label, p = predict_experience(self.experience_net, st.stages)
            st.experience, st.p_slept = label, p
            st.phase = Phase.FINALIZED
            actions.append(Action("ExperiencePredicted", index, {"experience": label.value, "p_slept": p}))
            self.log.write(t_ms, "ExperiencePredicted", {"experience": label.value, "p_slept": p})
        for action in actions:
            self._send(action)
        return actions

    def attach_stream(self, channels, reference: str, rate_hz: float) -> None:
        self._stream = (tuple(channels), reference, float(rate_hz))

    def feed_chunk(self, chunk) -> list[Action]:
        """Buffer a raw chunk; every completed 30-s window is preprocessed and staged."""
        if self._stream is None:
            raise SessionError("attach_stream() must be called before feeding chunks")
        channels, reference, rate = self._stream
        if chunk.rate_hz != rate or chunk.n_channels != len(channels):
            raise SessionError("chunk does not match the attached stream layout")
        if self.state.phase is Phase.FINALIZED:
            return []
        self._pending.append(chunk.samples)
        self._pending_samples += chunk.n_samples
        window = int(round(rate * EPOCH_SECONDS))
        actions = []
        while self._pending_samples >= window and self.state.phase is not Phase.FINALIZED:
            block = np.concatenate(self._pending, axis=1)
            record = MultiChannelRecord(channels, block[:, :window].astype(np.float64), rate, reference)
            rest = block[:, window:]
            self._pending = [rest] if rest.shape[1] else []
            self._pending_samples = rest.shape[1]
            (epoch,) = preprocess_window(record, self.state.epoch_counter)
            actions.extend(self.on_epoch(epoch))
        return actions

    def finalize(self) -> "SessionReport":
        st = self.state
        if st.phase is not Phase.FINALIZED:
            raise SessionError(f"cannot finalize in phase {st.phase.value} after {st.epoch_counter} epochs")
        return SessionReport(
            stimulus=st.stimulus,
            stages=tuple(st.stages),
            stop_epoch=st.stop_epoch,
            experience=st.experience,
            p_slept=st.p_slept,
            policy=self.policy_stamp,
            stop_k=self.config.stop_k,
            profile=self.profile.as_dict() if self.profile else None,
        )


@dataclass(frozen=True)
class SessionReport:
    stimulus: StimulusKind
    stages: tuple[StageLabel, ...]
    stop_epoch: int | None
    experience: SleepExperience
    p_slept: float
    policy: str | None = None
    stop_k: int = 2
    profile: dict | None = None

    def to_json(self) -> str:
        return json.dumps({
            "stimulus": self.stimulus.value,
            "stages": "".join(s.value for s in self.stages),
            "stop_epoch": self.stop_epoch,
            "stop_ms": None if self.stop_epoch is None else (self.stop_epoch + 1) * EPOCH_MS,
            "experience": self.experience.value,
            "p_slept": round(self.p_slept, 12),
            "policy": self.policy,
            "stop_k": self.stop_k,
            "profile": self.profile,
            "timing": {"epoch_ms": EPOCH_MS, "session_ms": len(self.stages) * EPOCH_MS},
        }, indent=2, sort_keys=True) + "\n"


@dataclass
class SessionModels:
    stager: Callable[[Epoch], StageLabel]
    experience: ExperienceNet

    @classmethod
    def from_checkpoints(cls, stage_path, experience_path) -> "SessionModels":
        from . import checkpoint

        stage_net, _ = checkpoint.load(stage_path, expect="stage")
        exp_net, _ = checkpoint.load(experience_path, expect="experience")
        return cls(NetStager(stage_net), exp_net)


def start_session(profile: IntakeProfile, policy: SelectionPolicy, models: SessionModels,
                  config: SessionConfig | None = None, commands=None, session_log=None) -> SessionController:
    """Validate models, select the stimulus and enter the Stimulating phase."""
    if not isinstance(policy, SelectionPolicy):
        raise SessionError("a parsed SelectionPolicy is required")
    stager = models.stager
    if isinstance(stager, StageNet):
        stager = NetStager(stager)
    if isinstance(stager, NetStager):
        StageNet.from_params(stager.net.params())  # re-validates shapes before audio starts
    ExperienceNet.from_params(models.experience.params())
    controller = SessionController(stager, models.experience, config, commands, session_log)
    controller.start(profile, policy)
    return controller


class StimulusRenderer(threading.Thread):
    """Consumes controller commands; pre-renders a loopable buffer on every start.

    Only pre-rendered audio is touched here, so a device callback could read it
    without allocating. Without a device, the rendered buffers are retained for
    inspection or export.
    """

    LOOP_SECONDS = 10.0

    def __init__(self, commands: queue.SimpleQueue, rain_file=None):
        super().__init__(name="somno-renderer", daemon=True)
        self.commands = commands
        self.rain_file = rain_file
        self.received: list[Action] = []
        self.buffers: list[stimulus.StimulusBuffer] = []
        self.playing = False

    def run(self):
        while True:
            action = self.commands.get()
            if action is None:
                return
            self.received.append(action)
            if action.type == "StartStimulus":
                data = action.data
                self.buffers.append(stimulus.synth(data["kind"], self.LOOP_SECONDS, data["seed"],
                                                   data["gain_dbfs"], rain_file=self.rain_file))
                self.playing = True
            elif action.type in ("StopStimulus", "SessionEnded"):
                self.playing = False

    def close(self):
        self.commands.put(None)
        self.join()


def run_session(chunks: Iterable, channels, reference: str, rate_hz: float, profile: IntakeProfile,
                policy: SelectionPolicy, models: SessionModels, config: SessionConfig | None = None,
                log_sink=None, render: bool = False):
    """Drive one full session from a chunk stream. Returns ``(report, controller, renderer)``."""
    config = config or SessionConfig()
    commands: queue.SimpleQueue = queue.SimpleQueue()
    renderer = StimulusRenderer(commands, config.rain_file) if render else None
    if renderer is not None:
        renderer.start()
    controller = start_session(profile, policy, models, config, commands, SessionLog(log_sink))
    controller.attach_stream(channels, reference, rate_hz)
    try:
        for chunk in chunks:
            controller.feed_chunk(chunk)
            if controller.state.phase is Phase.FINALIZED:
                break
    finally:
        if renderer is not None:
            renderer.close()
    if controller.state.phase is not Phase.FINALIZED:
        raise SessionError(
            f"stream ended after {controller.state.epoch_counter} of {config.n_epochs} epochs")
    return controller.finalize(), controller, renderer
