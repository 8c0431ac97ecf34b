import io
import json
import queue

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from somno.checkpoint import CheckpointError, save
from somno.experience_model import ExperienceNet, SleepExperience
from somno.intake import BrumsResult, IntakeProfile, PsqiResult, PvtResult, load_policy, parse_policy
from somno.session import (
    Phase,
    SessionConfig,
    SessionController,
    SessionError,
    SessionLog,
    SessionModels,
    StimulusRenderer,
    run_session,
    start_session,
)
from somno.signal_core import MONTAGE_64, Epoch
from somno.stage_model import StageLabel, StageNet
from somno.stimulus import StimulusKind
from somno.stream_io import StageScript, synth_eeg

W, N, R = StageLabel.W, StageLabel.N, StageLabel.R


def scripted(stages):
    """Stager that returns the preset label for each epoch index."""
    stages = [StageLabel(s) for s in stages]
    return lambda epoch: stages[epoch.index]


def epoch(i):
    return Epoch(np.zeros(3000), i)


def profile(psqi=(0,) * 7, fatigue=0):
    return IntakeProfile(PsqiResult(psqi), BrumsResult(0, 0, 0, fatigue, 0, 0), PvtResult(300, 0, 3.3, 0, 5))


def run_stages(stages, k=2, rearm=False, policy="DEFAULT WhiteNoise\n", net=None):
    ctl = SessionController(scripted(stages), net or ExperienceNet.zeros(), SessionConfig(stop_k=k, rearm=rearm))
    ctl.start(profile(), parse_policy(policy))
    actions = []
    for i in range(len(stages)):
        actions.extend(ctl.on_epoch(epoch(i)))
    return ctl, actions


# ------------------------------------------------------------ stop rule

def test_stop_on_second_consecutive_n():
    ctl, actions = run_stages("WWNN" + "N" * 16)
    stops = [a for a in actions if a.type == "StopStimulus"]
    assert [a.epoch for a in stops] == [3]
    assert ctl.state.stop_epoch == 3
    assert ctl.state.phase is Phase.FINALIZED
    assert "StimulusStopped" in ctl.log.events()


def test_all_wake_never_stops():
    ctl, actions = run_stages("W" * 20)
    assert ctl.state.stop_epoch is None
    assert not any(a.type == "StopStimulus" for a in actions)
    assert [a.type for a in actions[-2:]] == ["SessionEnded", "ExperiencePredicted"]
    assert actions[-1].epoch == 19


def test_k1_stops_immediately():
    ctl, _ = run_stages("N" + "W" * 19, k=1)
    assert ctl.state.stop_epoch == 0


def test_rem_does_not_stop():
    ctl, _ = run_stages("RRRR" + "W" * 16)
    assert ctl.state.stop_epoch is None


def test_interrupted_n_run_does_not_stop():
    ctl, _ = run_stages("NWNWNRNW" + "W" * 12)
    assert ctl.state.stop_epoch is None


def test_no_rearm_by_default_and_rearm_on_wake():
    ctl, actions = run_stages("NNW" + "W" * 17)
    assert ctl.state.phase is Phase.FINALIZED
    assert [a.type for a in actions].count("StartStimulus") == 0
    ctl, actions = run_stages("NNW" + "NN" + "W" * 15, rearm=True)
    types = [a.type for a in actions]
    assert types.count("StartStimulus") == 2 and types.count("StopStimulus") == 2
    assert ctl.state.stop_epoch == 1


stage_streams = st.lists(st.sampled_from("WNR"), min_size=20, max_size=20).map("".join)


@settings(max_examples=200, deadline=None)
@given(stages=stage_streams, k=st.integers(1, 5))
def test_no_stimulate_at_or_after_stop(stages, k):
    ctl, actions = run_stages(stages, k=k)
    stop = ctl.state.stop_epoch
    if stop is not None:
        assert not any(a.type == "Stimulate" and a.epoch >= stop for a in actions)
        assert all(s == "N" for s in stages[stop - k + 1:stop + 1])
    assert len(ctl.state.stages) == 20
    assert ctl.finalize().stages == tuple(StageLabel(s) for s in stages)


@settings(max_examples=200, deadline=None)
@given(stages=stage_streams)
def test_larger_k_never_stops_earlier(stages):
    stops = [run_stages(stages, k=k)[0].state.stop_epoch for k in range(1, 6)]
    as_num = [99 if s is None else s for s in stops]
    assert as_num == sorted(as_num)


# ------------------------------------------------------------ lifecycle

def test_epoch_after_finalize_rejected():
    ctl, _ = run_stages("W" * 20)
    with pytest.raises(SessionError, match="finalized"):
        ctl.on_epoch(epoch(20))


def test_premature_finalize_and_unstarted_session():
    ctl = SessionController(scripted("W" * 20), ExperienceNet.zeros())
    with pytest.raises(SessionError):
        ctl.on_epoch(epoch(0))
    ctl.start(profile(), parse_policy("DEFAULT bb\n"))
    ctl.on_epoch(epoch(0))
    with pytest.raises(SessionError, match="1 epochs"):
        ctl.finalize()
    with pytest.raises(SessionError):
        ctl.start(profile(), parse_policy("DEFAULT bb\n"))


def test_policy_drives_stimulus_choice():
    pol = parse_policy("IF psqi.global > 5 THEN BinauralBeat\nDEFAULT Sham\n")
    models = SessionModels(scripted("W" * 20), ExperienceNet.zeros())
    ctl = start_session(profile((1,) * 7), pol, models)
    assert ctl.state.stimulus is StimulusKind.BINAURAL_BEAT and ctl.state.phase is Phase.STIMULATING


def test_sham_starts_with_zero_amplitude():
    commands = queue.SimpleQueue()
    models = SessionModels(scripted("W" * 20), ExperienceNet.zeros())
    start_session(profile(), parse_policy("DEFAULT sham\n"), models, commands=commands)
    action = commands.get_nowait()
    assert action.type == "StartStimulus" and action.data["amplitude"] == 0.0


def test_invalid_policy_creates_no_session():
    models = SessionModels(scripted("W" * 20), ExperienceNet.zeros())
    with pytest.raises(SessionError):
        start_session(profile(), "DEFAULT sham", models)


def test_bad_checkpoint_fails_before_audio(tmp_path):
    good = save(ExperienceNet.zeros(), tmp_path / "e.ckpt")
    bad = save(StageNet.init(4), tmp_path / "s.ckpt")
    bad.write_bytes(bad.read_bytes().replace(b"hidden=4", b"hidden=3"))
    with pytest.raises(CheckpointError):
        SessionModels.from_checkpoints(bad, good)
    with pytest.raises(CheckpointError):
        SessionModels.from_checkpoints(good, good)


def test_config_validation():
    with pytest.raises(ValueError):
        SessionConfig(stop_k=0)
    with pytest.raises(ValueError):
        SessionConfig(n_epochs=10)
    with pytest.raises(ValueError):
        SessionConfig(gain_dbfs=3)


def test_log_format_and_sink():
    sink = io.StringIO()
    log = SessionLog(sink)
    ctl = SessionController(scripted("WNN" + "W" * 17), ExperienceNet.zeros(), session_log=log)
    ctl.start(profile(), parse_policy("DEFAULT wn\n"))
    for i in range(20):
        ctl.on_epoch(epoch(i))
    lines = sink.getvalue().splitlines()
    assert lines == log.lines
    t, event, payload = lines[0].split("\t")
    assert (t, event) == ("0", "StimulusStarted")
    assert json.loads(payload)["kind"] == "WhiteNoise"
    stop = next(line for line in lines if "\tStimulusStopped\t" in line)
    assert stop.split("\t")[0] == str(3 * 30_000)
    assert log.events().count("StageClassified") == 20
    assert log.events()[-1] == "ExperiencePredicted"


def test_report_contents():
    ctl, _ = run_stages("WWNN" + "N" * 16)
    rep = ctl.finalize()
    data = json.loads(rep.to_json())
    assert data["stages"] == "WWNN" + "N" * 16
    assert data["stop_epoch"] == 3 and data["stop_ms"] == 120_000
    assert data["experience"] == "NotSlept" and data["p_slept"] == 0.5
    assert data["timing"]["session_ms"] == 600_000


# ------------------------------------------------------------ chunk-driven path

class CountingStager:
    def __init__(self, label=StageLabel.W):
        self.samples = 0
        self.label = label

    def __call__(self, ep):
        self.samples += ep.samples.shape[0]
        return self.label


def test_ten_minutes_of_chunks_yield_exactly_20_epochs_of_60000_samples():
    stager = CountingStager()
    chunks = synth_eeg(StageScript(((W, 630),), seed=1))
    models = SessionModels(stager, ExperienceNet.zeros())
    report, ctl, _ = run_session(chunks, MONTAGE_64, "FCz", 1000.0, profile(),
                                 parse_policy("DEFAULT wn\n"), models)
    assert len(report.stages) == 20
    assert stager.samples == 60_000
    with pytest.raises(SessionError):
        ctl.on_epoch(epoch(20))


def test_short_stream_is_an_error():
    chunks = synth_eeg(StageScript(((W, 45),)))
    models = SessionModels(CountingStager(), ExperienceNet.zeros())
    with pytest.raises(SessionError, match="1 of 20"):
        run_session(chunks, MONTAGE_64, "FCz", 1000.0, profile(), parse_policy("DEFAULT wn\n"), models)


def test_feed_chunk_checks_layout():
    ctl = SessionController(CountingStager(), ExperienceNet.zeros())
    ctl.start(profile(), parse_policy("DEFAULT wn\n"))
    chunk = next(synth_eeg(StageScript(((W, 1),))))
    with pytest.raises(SessionError):
        ctl.feed_chunk(chunk)
    ctl.attach_stream(MONTAGE_64[:10], "FCz", 1000)
    with pytest.raises(SessionError):
        ctl.feed_chunk(chunk)


def test_renderer_consumes_commands():
    models = SessionModels(scripted("WWNN" + "N" * 16), ExperienceNet.zeros())
    commands = queue.SimpleQueue()
    renderer = StimulusRenderer(commands)
    renderer.start()
    ctl = start_session(profile(), parse_policy("DEFAULT bb\n"), models, commands=commands)
    for i in range(20):
        ctl.on_epoch(epoch(i))
    renderer.close()
    types = [a.type for a in renderer.received]
    assert types[0] == "StartStimulus" and "StopStimulus" in types
    assert len(renderer.buffers) == 1 and renderer.buffers[0].kind is StimulusKind.BINAURAL_BEAT
    assert not renderer.playing


# ------------------------------------------------------------ trained models

def _scripted_session(stage_net, experience_net, segments, seed=0, render=False):
    models = SessionModels(stage_net, experience_net)
    sink = io.StringIO()
    report, ctl, renderer = run_session(
        synth_eeg(StageScript(segments, seed=seed)), MONTAGE_64, "FCz", 1000.0, profile(),
        load_policy(), models, SessionConfig(), log_sink=sink, render=render)
    return report, sink.getvalue(), renderer


def test_n_heavy_session_predicts_slept(stage_net, experience_net):
    report, log_text, _ = _scripted_session(stage_net, experience_net, ((W, 180), (N, 420)))
    assert report.stages == (W,) * 6 + (N,) * 14
    assert report.stop_epoch == 7
    assert report.experience is SleepExperience.SLEPT
    assert f"{8 * 30_000}\tStimulusStopped\t" in log_text


def test_wake_session_predicts_not_slept(stage_net, experience_net):
    report, _, _ = _scripted_session(stage_net, experience_net, ((W, 500), (R, 100)))
    assert report.stop_epoch is None
    assert report.experience is SleepExperience.NOT_SLEPT
    assert report.stages[-1] is R


def test_session_reports_are_byte_identical(stage_net, experience_net):
    a = _scripted_session(stage_net, experience_net, ((W, 240), (N, 360)), seed=5)
    b = _scripted_session(stage_net, experience_net, ((W, 240), (N, 360)), seed=5, render=True)
    assert a[0].to_json() == b[0].to_json()
    assert a[1] == b[1]
