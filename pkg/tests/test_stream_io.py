import struct
import threading
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from somno.signal_core import MONTAGE_64, preprocess_window
from somno.stage_model import StageLabel, band_powers
from somno.stream_io import (
    MAGIC,
    BadMagicError,
    ChannelCountMismatchError,
    CrcMismatchError,
    EegChunk,
    FrameDecoder,
    LengthOverflowError,
    MalformedHeaderError,
    MalformedPayloadError,
    ReplayWarning,
    SequenceGapError,
    StageScript,
    StreamHeader,
    TruncatedFrameError,
    TruncatedPayloadError,
    bounded_stream,
    check_sequence,
    chunks_to_record,
    frame_decode,
    frame_encode,
    hello_encode,
    paced,
    read_replay_header,
    receive,
    replay_file,
    serve,
    synth_eeg,
    synthetic_stage_dataset,
    write_replay_file,
)


def random_chunk(rng, max_ch=8, max_n=64):
    n_ch = int(rng.integers(1, max_ch + 1))
    n_s = int(rng.integers(1, max_n + 1))
    samples = rng.standard_normal((n_ch, n_s)).astype(np.float32) * np.float32(rng.uniform(0, 200))
    return EegChunk(int(rng.integers(1, 2**63)), int(rng.integers(0, 2**63)), samples, 250.0)


# ------------------------------------------------------------ framing

def test_frame_layout():
    chunk = EegChunk(7, 1000, np.array([[1.0, 2.0], [3.0, 4.0]]), 100)
    frame = frame_encode(chunk)
    assert frame[:4] == b"SOM1"
    (length,) = struct.unpack_from("<I", frame, 4)
    payload = frame[8:8 + length]
    assert struct.unpack_from("<QQHI", payload) == (7, 1000, 2, 2)
    np.testing.assert_array_equal(np.frombuffer(payload[22:], "<f4"), [1, 2, 3, 4])
    assert struct.unpack_from("<I", frame, 8 + length)[0] == zlib.crc32(payload)
    assert len(frame) == 8 + length + 4


def test_roundtrip_fuzz_ten_thousand_chunks():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        chunk = random_chunk(rng)
        assert frame_decode(frame_encode(chunk), rate_hz=250.0) == chunk


@settings(max_examples=300)
@given(seq=st.integers(1, 2**64 - 1), t0=st.integers(0, 2**64 - 1),
       data=st.lists(st.lists(st.floats(width=32, allow_nan=False), min_size=3, max_size=3), min_size=1, max_size=5))
def test_roundtrip_property(seq, t0, data):
    chunk = EegChunk(seq, t0, np.array(data, dtype=np.float32), 1000.0)
    assert frame_decode(frame_encode(chunk), 1000.0) == chunk


def test_roundtrip_preserves_nan_bits():
    x = np.array([[np.nan, -0.0, np.inf]], dtype=np.float32)
    out = frame_decode(frame_encode(EegChunk(1, 0, x, 10)), 10)
    assert out.samples.tobytes() == x.tobytes()


@pytest.mark.parametrize("shape", [(0, 5), (3, 0)])
def test_empty_chunks_rejected(shape):
    with pytest.raises(ValueError):
        frame_encode(EegChunk(1, 0, np.zeros(shape), 100))


@pytest.mark.parametrize("seq", [0, -1, 2**64])
def test_seq_range_enforced(seq):
    with pytest.raises(ValueError):
        frame_encode(EegChunk(seq, 0, np.zeros((1, 1)), 100))


def test_distinct_decode_errors():
    frame = bytearray(frame_encode(EegChunk(1, 0, np.ones((2, 3)), 100)))
    bad_magic = b"XOM1" + bytes(frame[4:])
    with pytest.raises(BadMagicError):
        frame_decode(bad_magic, 100)
    bad_crc = bytes(frame[:-1]) + bytes([frame[-1] ^ 0xFF])
    with pytest.raises(CrcMismatchError):
        frame_decode(bad_crc, 100)
    huge = MAGIC + struct.pack("<I", 1 << 30) + bytes(frame[8:])
    with pytest.raises(LengthOverflowError):
        frame_decode(huge, 100)
    with pytest.raises(TruncatedFrameError):
        frame_decode(bytes(frame[:-2]), 100)
    assert not issubclass(CrcMismatchError, BadMagicError)


def test_decoder_never_reads_past_declared_length():
    frame = frame_encode(EegChunk(3, 0, np.ones((1, 2)), 100))
    assert frame_decode(frame + b"\xff" * 50, 100).seq == 3


def test_malformed_payload_detected():
    payload = struct.pack("<QQHI", 1, 0, 2, 5) + b"\0" * 8
    frame = MAGIC + struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
    with pytest.raises(MalformedPayloadError):
        frame_decode(frame, 100)


def test_data_before_rate_known():
    with pytest.raises(MalformedPayloadError):
        frame_decode(frame_encode(EegChunk(1, 0, np.ones((1, 1)), 100)))


def test_hello_frame_roundtrip():
    header = StreamHeader(1000.0, ("Pz", "Oz", "FCz"), "FCz", 0)
    out = frame_decode(hello_encode(header))
    assert out == header


# ------------------------------------------------------------ incremental decoder

def _frames(n, seed=0):
    rng = np.random.default_rng(seed)
    chunks = [EegChunk(i + 1, i * 1000, rng.standard_normal((3, 10)), 100.0) for i in range(n)]
    return chunks, [frame_encode(c) for c in chunks]


def test_corrupted_crc_resynchronises_without_losing_next_frames():
    chunks, frames = _frames(5)
    bad = bytearray(frames[1])
    bad[-1] ^= 0x01
    stream = frames[0] + bytes(bad) + b"".join(frames[2:])
    dec = FrameDecoder(rate_hz=100.0)
    out = dec.feed(stream)
    assert out == [chunks[0]] + chunks[2:]
    assert any(isinstance(e, CrcMismatchError) for e in dec.errors)


def test_decoder_handles_byte_by_byte_feed_and_garbage():
    chunks, frames = _frames(4, seed=1)
    header = StreamHeader(100.0, ("a", "b", "c"), "raw")
    stream = b"junk" + hello_encode(header) + frames[0] + b"\x00SOM" + frames[1] + frames[2][:10] + frames[3]
    dec = FrameDecoder()
    out = []
    for b in stream:
        out.extend(dec.feed(bytes([b])))
    assert out[0] == header
    assert out[1:] == [chunks[0], chunks[1], chunks[3]]
    assert dec.rate_hz == 100.0 and dec.header == header


def test_decoder_corruption_fuzz():
    chunks, frames = _frames(30, seed=2)
    rng = np.random.default_rng(9)
    for trial in range(200):
        damaged = set(rng.choice(30, size=int(rng.integers(1, 6)), replace=False).tolist())
        parts = []
        for i, f in enumerate(frames):
            if i in damaged:
                f = bytearray(f)
                f[int(rng.integers(8, len(f)))] ^= int(rng.integers(1, 256))
                f = bytes(f)
            parts.append(f)
        dec = FrameDecoder(100.0)
        got = dec.feed(b"".join(parts))
        assert got == [c for i, c in enumerate(chunks) if i not in damaged]
        assert len(dec.errors) >= len(damaged)


# ------------------------------------------------------------ replay files

def _replay(tmp_path, n_samples=5000, rate=1000, channels=("Pz", "Oz", "FCz"), seed=0):
    data = (np.random.default_rng(seed).standard_normal((len(channels), n_samples)) * 40).astype(np.float32)
    path = tmp_path / "rec.somno"
    write_replay_file(path, StreamHeader(rate, tuple(channels), "FCz"), data)
    return path, data


def test_replay_chunks_and_exact_concatenation(tmp_path):
    path, data = _replay(tmp_path)
    chunks = list(replay_file(path))
    assert [c.seq for c in chunks] == [1, 2, 3, 4, 5]
    assert [c.t0_ms for c in chunks] == [0, 1000, 2000, 3000, 4000]
    assert all(c.samples.shape == (3, 1000) for c in chunks)
    assert np.concatenate([c.samples for c in chunks], axis=1).tobytes() == data.tobytes()
    assert read_replay_header(path).n_samples == 5000


def test_ten_minute_64_channel_file(tmp_path):
    path, _ = _replay(tmp_path, n_samples=600_000, channels=MONTAGE_64)
    n = 0
    for chunk in replay_file(path):
        assert chunk.samples.shape == (64, 1000)
        n += 1
    assert n == 600


def test_realtime_pacing_is_content_identical(tmp_path):
    path, _ = _replay(tmp_path)
    now = [0.0]
    sleeps = []

    def sleep(d):
        sleeps.append(d)
        now[0] += d

    fast = list(replay_file(path))
    slow = list(replay_file(path, realtime=True, sleep=sleep, clock=lambda: now[0]))
    assert fast == slow
    assert sleeps == [1.0] * 4


def test_partial_final_second_dropped_with_warning(tmp_path):
    path, data = _replay(tmp_path, n_samples=3500)
    with pytest.warns(ReplayWarning, match="500"):
        chunks = list(replay_file(path))
    assert len(chunks) == 3
    assert np.concatenate([c.samples for c in chunks], axis=1).tobytes() == data[:, :3000].tobytes()


def test_replay_distinct_errors(tmp_path):
    path, _ = _replay(tmp_path)
    raw = path.read_bytes()
    first_nl = raw.index(b"\n")
    second_nl = raw.index(b"\n", first_nl + 1)

    bad = tmp_path / "bad.somno"
    bad.write_bytes(b"EDF+ 1000 3 5000 FCz\n" + raw[first_nl + 1:])
    with pytest.raises(MalformedHeaderError):
        list(replay_file(bad))

    bad.write_bytes(raw[:first_nl + 1] + b"Pz Oz\n" + raw[second_nl + 1:])
    with pytest.raises(ChannelCountMismatchError):
        list(replay_file(bad))

    bad.write_bytes(raw[:-10])
    with pytest.raises(TruncatedPayloadError):
        list(replay_file(bad))

    assert len({MalformedHeaderError, ChannelCountMismatchError, TruncatedPayloadError}) == 3


def test_paced_uses_injected_clock():
    t = [0.0]
    slept = []
    out = list(paced(range(3), 0.5, sleep=lambda d: (slept.append(d), t.__setitem__(0, t[0] + d)),
                     clock=lambda: t[0]))
    assert out == [0, 1, 2] and slept == [0.5, 0.5]


# ------------------------------------------------------------ synthetic EEG

def test_script_parse_and_validation():
    script = StageScript.parse("W 180\n# comment\nn 420\n", seed=4)
    assert script.segments == ((StageLabel.W, 180.0), (StageLabel.N, 420.0))
    assert script.duration_s == 600 and script.seed == 4
    with pytest.raises(ValueError):
        StageScript(())
    with pytest.raises(ValueError):
        StageScript(((StageLabel.W, 0),))
    with pytest.raises(ValueError, match="line 1"):
        StageScript.parse("X 30\n")


def _epochs(chunks, channels=MONTAGE_64):
    return preprocess_window(chunks_to_record(chunks, channels, "FCz"))


@pytest.mark.parametrize("stage,band", [(StageLabel.N, 0), (StageLabel.R, 1)])
def test_synthetic_stage_band_dominance(stage, band):
    chunks = list(synth_eeg(StageScript(((stage, 30),), seed=1)))
    (ep,) = _epochs(chunks)
    assert int(np.argmax(band_powers(ep)[:5])) == band


def test_synthetic_wake_is_alpha_beta_dominated():
    (ep,) = _epochs(list(synth_eeg(StageScript(((StageLabel.W, 30),), seed=2))))
    rel = band_powers(ep)[:5]
    assert rel[2] + rel[4] > 0.8


def test_synthetic_determinism_and_seed_sensitivity():
    script = StageScript(((StageLabel.W, 5), (StageLabel.N, 3)), seed=3)
    a = list(synth_eeg(script))
    b = list(synth_eeg(script))
    assert a == b
    c = list(synth_eeg(StageScript(script.segments, seed=4)))
    assert a[0] != c[0]


def test_synthetic_duration_and_stage_boundary():
    script = StageScript(((StageLabel.W, 300), (StageLabel.N, 300)), seed=0)
    chunks = list(synth_eeg(script))
    assert len(chunks) == 600
    assert [c.seq for c in chunks] == list(range(1, 601))
    eps = _epochs(chunks)
    assert len(eps) == 20
    delta = [band_powers(e)[0] for e in eps]
    assert max(delta[:10]) < 0.2 < 0.6 < min(delta[10:])


def test_synthetic_chunks_are_fcz_referenced():
    chunk = next(synth_eeg(StageScript(((StageLabel.N, 1),))))
    assert chunk.samples.shape == (64, 1000)
    assert not chunk.samples[MONTAGE_64.index("FCz")].any()


def test_synthetic_rejects_bad_montage():
    with pytest.raises(ValueError):
        list(synth_eeg(StageScript(((StageLabel.N, 1),)), montage=("Pz", "Oz")))


def test_synthetic_stage_dataset_shape_and_balance():
    data = synthetic_stage_dataset(4, seed=0)
    assert len(data) == 12
    assert sorted(lab.value for _, lab in data) == ["N"] * 4 + ["R"] * 4 + ["W"] * 4
    assert all(ep.samples.shape == (3000,) for ep, _ in data)


# ------------------------------------------------------------ transport

def _chunks(n):
    return [EegChunk(i + 1, i * 1000, np.full((2, 4), i, np.float32), 100.0) for i in range(n)]


def test_sequence_gap_aborts():
    chunks = _chunks(4)
    with pytest.raises(SequenceGapError, match="2 to 4"):
        list(check_sequence([chunks[0], chunks[1], chunks[3]]))
    assert list(check_sequence(chunks)) == chunks


def test_bounded_stream_blocks_producer_and_propagates_errors():
    produced = []

    def source():
        for i in range(50):
            produced.append(i)
            yield i

    it = bounded_stream(source(), maxsize=2)
    assert next(it) == 0
    threading.Event().wait(0.2)
    assert len(produced) <= 4  # one taken, two queued, one waiting to be put
    assert list(it) == list(range(1, 50))

    def failing():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(bounded_stream(failing()))


def test_tcp_serve_and_receive_roundtrip():
    header = StreamHeader(100.0, ("a", "b"), "raw")
    chunks = _chunks(25)
    ready, bound = threading.Event(), []
    result = {}
    server = threading.Thread(target=lambda: result.setdefault("sent", serve(header, chunks, 0, ready=ready, bound=bound)))
    server.start()
    assert ready.wait(5)
    got_header, stream = receive("127.0.0.1", bound[0])
    received = list(stream)
    server.join(5)
    assert got_header == header
    assert received == chunks
    assert result["sent"] == 25
