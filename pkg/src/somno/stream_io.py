"""EEG ingestion: replay files, stage-scripted synthetic EEG, and a framed TCP stream.

Replay file layout::

    SOMNO1 <rate_hz> <n_channels> <n_samples> <reference>\\n
    <channel names separated by spaces>\\n
    <float32 little-endian samples, channel-interleaved (sample-major)>

Wire frame layout (all integers little-endian)::

    b"SOM1" | u32 payload_len | payload | u32 crc32(payload)
    payload = u64 seq | u64 t0_ms | u16 n_channels | u32 n_samples | f32[n_channels * n_samples]

Samples in the payload are channel-major. The first frame of every stream is a
hello frame with ``seq == 0`` and ``n_samples == 0`` whose sample area is
replaced by the UTF-8 replay header (two lines, as above).
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .signal_core import MONTAGE_64, MultiChannelRecord, decimate_array, Epoch, EPOCH_SECONDS
from .stage_model import StageLabel

log = logging.getLogger(__name__)

MAGIC = b"SOM1"
FILE_MAGIC = "SOMNO1"
_PREFIX = struct.Struct("<4sI")
_PAYLOAD_HEAD = struct.Struct("<QQHI")
_CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 24
CHUNK_SECONDS = 1


class StreamError(RuntimeError):
    pass


class FrameError(ValueError):
    pass


class BadMagicError(FrameError):
    pass


class CrcMismatchError(FrameError):
    pass


class LengthOverflowError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class MalformedPayloadError(FrameError):
    pass


class ReplayFormatError(ValueError):
    pass


class MalformedHeaderError(ReplayFormatError):
    pass


class ChannelCountMismatchError(ReplayFormatError):
    pass


class TruncatedPayloadError(ReplayFormatError):
    pass


class ReplayWarning(UserWarning):
    pass


class SequenceGapError(StreamError):
    pass


@dataclass(frozen=True, eq=False)
class EegChunk:
    """``samples`` is float32 with shape (n_channels, n_samples)."""

    seq: int
    t0_ms: int
    samples: np.ndarray = field(repr=False)
    rate_hz: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"chunk samples must be 2-d, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EegChunk):
            return NotImplemented
        return (self.seq == other.seq and self.t0_ms == other.t0_ms
                and self.rate_hz == other.rate_hz
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class StreamHeader:
    rate_hz: float
    channels: tuple[str, ...]
    reference: str
    n_samples: int = 0

    def to_text(self) -> str:
        rate = int(self.rate_hz) if float(self.rate_hz).is_integer() else self.rate_hz
        return (f"{FILE_MAGIC} {rate} {len(self.channels)} {self.n_samples} {self.reference}\n"
                + " ".join(self.channels) + "\n")

    @classmethod
    def from_text(cls, first: str, second: str) -> "StreamHeader":
        parts = first.split()
        if len(parts) != 5 or parts[0] != FILE_MAGIC:
            raise MalformedHeaderError(f"bad header line {first.strip()!r}")
        try:
            rate = float(parts[1])
            n_ch = int(parts[2])
            n_samples = int(parts[3])
        except ValueError:
            raise MalformedHeaderError(f"bad numeric field in header {first.strip()!r}") from None
        if rate <= 0 or n_ch <= 0 or n_samples < 0:
            raise MalformedHeaderError(f"out-of-range header values {first.strip()!r}")
        names = tuple(second.split())
        if len(names) != n_ch:
            raise ChannelCountMismatchError(
                f"header declares {n_ch} channels but the channel line lists {len(names)}")
        return cls(rate, names, parts[4], n_samples)


# ---------------------------------------------------------------- framing

def _frame(payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise LengthOverflowError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return _PREFIX.pack(MAGIC, len(payload)) + payload + _CRC.pack(zlib.crc32(payload))


def frame_encode(chunk: EegChunk) -> bytes:
    """Serialize one data chunk (seq >= 1; seq 0 is reserved for the hello frame)."""
    n_ch, n_s = chunk.samples.shape
    if n_ch == 0 or n_s == 0:
        raise ValueError("cannot encode a chunk with zero channels or zero samples")
    if n_ch > 0xFFFF:
        raise ValueError(f"too many channels for the wire format: {n_ch}")
    if not 1 <= chunk.seq < 1 << 64:
        raise ValueError(f"data chunk seq must be in [1, 2**64), got {chunk.seq}")
    if not 0 <= chunk.t0_ms < 1 << 64:
        raise ValueError(f"t0_ms out of range: {chunk.t0_ms}")
    payload = _PAYLOAD_HEAD.pack(chunk.seq, chunk.t0_ms, n_ch, n_s) + chunk.samples.astype("<f4").tobytes()
    return _frame(payload)


def hello_encode(header: StreamHeader) -> bytes:
    return _frame(_PAYLOAD_HEAD.pack(0, 0, len(header.channels), 0) + header.to_text().encode())


def _parse_payload(payload: bytes, rate_hz):
    seq, t0_ms, n_ch, n_s = _PAYLOAD_HEAD.unpack_from(payload)
    body = payload[_PAYLOAD_HEAD.size:]
    if seq == 0:
        try:
            first, second = body.decode().split("\n")[:2]
            header = StreamHeader.from_text(first, second)
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedPayloadError(f"bad hello frame: {exc}") from None
        if len(header.channels) != n_ch:
            raise MalformedPayloadError("hello channel count disagrees with its header text")
        return header
    if n_ch == 0 or n_s == 0 or len(body) != 4 * n_ch * n_s:
        raise MalformedPayloadError(
            f"payload holds {len(body)} sample bytes, header implies {4 * n_ch * n_s}")
    if rate_hz is None:
        raise MalformedPayloadError("data frame received before the stream rate is known")
    samples = np.frombuffer(body, dtype="<f4").reshape(n_ch, n_s)
    return EegChunk(seq, t0_ms, samples, rate_hz)


def _expected_payload_len(head: bytes):
    seq, _, n_ch, n_s = _PAYLOAD_HEAD.unpack(head)
    if seq == 0:
        return None
    return _PAYLOAD_HEAD.size + 4 * n_ch * n_s


def frame_decode(data: bytes, rate_hz: float | None = None):
    """Decode the frame at the start of ``data``.

    Returns an :class:`EegChunk`, or a :class:`StreamHeader` for a hello frame.
    Bytes beyond the declared frame length are never inspected.
    """
    if len(data) < _PREFIX.size:
        raise TruncatedFrameError("incomplete frame prefix")
    magic, length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD or length < _PAYLOAD_HEAD.size:
        raise LengthOverflowError(f"declared payload length {length} out of bounds")
    end = _PREFIX.size + length
    if len(data) < end + _CRC.size:
        raise TruncatedFrameError(f"frame needs {end + _CRC.size} bytes, have {len(data)}")
    payload = bytes(data[_PREFIX.size:end])
    (crc,) = _CRC.unpack_from(data, end)
    if crc != zlib.crc32(payload):
        raise CrcMismatchError(f"crc {crc:#010x} != {zlib.crc32(payload):#010x}")
    return _parse_payload(payload, rate_hz)


class FrameDecoder:
    """Incremental decoder that resynchronizes on the next magic after any error.

    After a bad frame only one byte is skipped before searching for the next
    magic, so frames following a corrupted one are never consumed. Errors are
    collected in ``errors`` rather than raised.
    """

    def __init__(self, rate_hz: float | None = None):
        self.rate_hz = rate_hz
        self.header: StreamHeader | None = None
        self.errors: list[FrameError] = []
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf += data
        out = []
        while True:
            item = self._next()
            if item is None:
                return out
            out.append(item)

    def _skip(self, n, error):
        self.errors.append(error)
        del self._buf[:n]

    def _next(self):
        buf = self._buf
        while True:
            pos = buf.find(MAGIC)
            if pos < 0:
                keep = len(MAGIC) - 1
                if len(buf) > keep:
                    self._skip(len(buf) - keep, BadMagicError("no magic in buffered bytes"))
                return None
            if pos > 0:
                self._skip(pos, BadMagicError(f"skipped {pos} bytes before magic"))
            if len(buf) < _PREFIX.size:
                return None
            _, length = _PREFIX.unpack_from(buf)
            if length > MAX_PAYLOAD or length < _PAYLOAD_HEAD.size:
                self._skip(1, LengthOverflowError(f"declared payload length {length} out of bounds"))
                continue
            if len(buf) >= _PREFIX.size + _PAYLOAD_HEAD.size:
                expected = _expected_payload_len(bytes(buf[_PREFIX.size:_PREFIX.size + _PAYLOAD_HEAD.size]))
                if expected is not None and expected != length:
                    self._skip(1, MalformedPayloadError("declared length disagrees with payload header"))
                    continue
            total = _PREFIX.size + length + _CRC.size
            if len(buf) < total:
                return None
            try:
                item = frame_decode(bytes(buf[:total]), self.rate_hz)
            except FrameError as exc:
                self._skip(1, exc)
                continue
            del buf[:total]
            if isinstance(item, StreamHeader):
                self.header = item
                self.rate_hz = item.rate_hz
            return item


# ---------------------------------------------------------------- replay files

def write_replay_file(path, header: StreamHeader, samples) -> None:
    """Write channel-major ``samples`` (n_channels, n) as a replay file."""
    samples = np.asarray(samples, dtype="<f4")
    if samples.shape[0] != len(header.channels):
        raise ValueError("sample rows must match the header's channel list")
    header = StreamHeader(header.rate_hz, header.channels, header.reference, samples.shape[1])
    with open(path, "wb") as fh:
        fh.write(header.to_text().encode())
        fh.write(np.ascontiguousarray(samples.T).tobytes())


def _read_header(fh) -> StreamHeader:
    first = fh.readline(4096).decode("utf-8", errors="replace")
    if not first.endswith("\n"):
        raise MalformedHeaderError("missing or overlong header line")
    second = fh.readline(1 << 20).decode("utf-8", errors="replace")
    if not second.endswith("\n"):
        raise MalformedHeaderError("missing channel-name line")
    return StreamHeader.from_text(first, second)


def read_replay_header(path) -> StreamHeader:
    with open(path, "rb") as fh:
        return _read_header(fh)


def replay_file(path, realtime: bool = False, sleep=time.sleep, clock=time.monotonic) -> Iterator[EegChunk]:
    """Yield 1-s chunks from a replay file; a trailing partial second is dropped."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh)
        payload_bytes = path.stat().st_size - fh.tell()
        n_ch = len(header.channels)
        need = header.n_samples * n_ch * 4
        if payload_bytes < need:
            raise TruncatedPayloadError(
                f"payload has {payload_bytes} bytes, header declares {need}")
        if not float(header.rate_hz).is_integer():
            raise MalformedHeaderError("replay requires an integer sampling rate")
        per_chunk = int(header.rate_hz) * CHUNK_SECONDS
        n_chunks, rest = divmod(header.n_samples, per_chunk)
        if rest:
            warnings.warn(f"{path.name}: dropping final partial chunk of {rest} samples",
                          ReplayWarning, stacklevel=2)
        chunks = _replay_chunks(fh, header, n_chunks, per_chunk)
        yield from (paced(chunks, CHUNK_SECONDS, sleep, clock) if realtime else chunks)


def _replay_chunks(fh, header, n_chunks, per_chunk):
    n_ch = len(header.channels)
    for i in range(n_chunks):
        block = np.frombuffer(fh.read(per_chunk * n_ch * 4), dtype="<f4").reshape(per_chunk, n_ch)
        yield EegChunk(i + 1, i * CHUNK_SECONDS * 1000, block.T, header.rate_hz)


def paced(items: Iterable, period_s: float, sleep=time.sleep, clock=time.monotonic):
    """Re-emit ``items`` no faster than one per ``period_s`` of wall clock."""
    start = clock()
    for i, item in enumerate(items):
        delay = start + i * period_s - clock()
        if delay > 0:
            sleep(delay)
        yield item


# ---------------------------------------------------------------- synthetic EEG

DOMINANT_BANDS = {
    StageLabel.W: ("alpha", "beta"),
    StageLabel.N: ("delta",),
    StageLabel.R: ("theta",),
}
_SYNTH_BANDS = (("delta", 0.5, 4.0), ("theta", 4.0, 8.0), ("alpha", 8.0, 12.0),
                ("sigma", 12.0, 16.0), ("beta", 16.0, 30.0))
DOMINANT_UV = 30.0
BACKGROUND_UV = 5.0
NOISE_UV = 2.0
SENSOR_NOISE_UV = 0.5
_BAND_MARGIN_HZ = 0.5


@dataclass(frozen=True)
class StageScript:
    segments: tuple[tuple[StageLabel, float], ...]
    seed: int = 0

    def __post_init__(self):
        segs = tuple((StageLabel(lab), float(dur)) for lab, dur in self.segments)
        if not segs:
            raise ValueError("stage script is empty")
        for lab, dur in segs:
            if not dur > 0:
                raise ValueError(f"segment {lab.value} has non-positive duration {dur}")
        object.__setattr__(self, "segments", segs)

    @property
    def duration_s(self) -> float:
        return sum(d for _, d in self.segments)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "StageScript":
        """Lines of ``<W|N|R> <seconds>``; ``#`` starts a comment."""
        segs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"script line {lineno}: expected '<stage> <seconds>'")
            try:
                segs.append((StageLabel(parts[0].upper()), float(parts[1])))
            except ValueError:
                raise ValueError(f"script line {lineno}: bad stage or duration {line!r}") from None
        return cls(tuple(segs), seed)


def stage_signature(stage: StageLabel, n_samples: int, rate_hz: float, rng, block_s: float = EPOCH_SECONDS):
    """Stage-typical Pz-Oz waveform in microvolts.

    One sinusoid per band with random in-band frequency and phase, redrawn
    every ``block_s``; dominant bands at 30 uV, the rest at 5 uV, plus white
    noise with sigma 2 uV.
    """
    stage = StageLabel(stage)
    dominant = DOMINANT_BANDS[stage]
    out = np.empty(n_samples)
    block = int(round(block_s * rate_hz))
    for start in range(0, n_samples, block):
        n = min(block, n_samples - start)
        t = np.arange(n) / rate_hz
        x = rng.normal(0.0, NOISE_UV, n)
        for name, lo, hi in _SYNTH_BANDS:
            margin = min(_BAND_MARGIN_HZ, (hi - lo) / 4)
            freq = rng.uniform(lo + margin, hi - margin)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = DOMINANT_UV if name in dominant else BACKGROUND_UV
            x += amp * np.sin(2 * np.pi * freq * t + phase)
        out[start:start + n] = x
    return out


def synth_eeg(script: StageScript, montage=MONTAGE_64, rate_hz: float = 1000.0,
              reference: str = "FCz") -> Iterator[EegChunk]:
    """Deterministic FCz-referenced multichannel EEG following ``script``.

    Pz and Oz carry +/- half the stage signature, every other channel a random
    fraction of it; all channels share a common-mode drift and 50 Hz hum that
    cancel in any bipolar derivation.
    """
    montage = tuple(montage)
    if reference not in montage:
        raise ValueError(f"reference {reference!r} not in montage")
    for needed in ("Pz", "Oz"):
        if needed not in montage:
            raise ValueError(f"montage lacks {needed}")
    rng = np.random.default_rng(script.seed)
    gains = rng.uniform(-0.3, 0.3, len(montage))
    gains[montage.index("Pz")] = 0.5
    gains[montage.index("Oz")] = -0.5
    ref = montage.index(reference)
    per_chunk = int(round(rate_hz * CHUNK_SECONDS))
    pending = np.empty((len(montage), 0))
    produced = 0
    seq = 1

    def blocks():
        for stage, dur in script.segments:
            remaining = int(round(dur * rate_hz))
            while remaining > 0:
                n = min(remaining, int(EPOCH_SECONDS * rate_hz))
                yield stage, n
                remaining -= n

    for stage, n in blocks():
        sig = stage_signature(stage, n, rate_hz, rng)
        t = (produced + np.arange(n)) / rate_hz
        common = 10.0 * np.sin(2 * np.pi * 0.2 * t) + 5.0 * np.sin(2 * np.pi * 50.0 * t)
        raw = common + gains[:, None] * sig + rng.normal(0.0, SENSOR_NOISE_UV, (len(montage), n))
        raw -= raw[ref].copy()
        pending = np.concatenate([pending, raw], axis=1)
        produced += n
        while pending.shape[1] >= per_chunk:
            yield EegChunk(seq, (seq - 1) * CHUNK_SECONDS * 1000, pending[:, :per_chunk], rate_hz)
            pending = pending[:, per_chunk:]
            seq += 1
    if pending.shape[1]:
        yield EegChunk(seq, (seq - 1) * CHUNK_SECONDS * 1000, pending, rate_hz)


def synthetic_stage_dataset(n_per_class: int, seed: int = 0, rate_hz: float = 1000.0):
    """Labelled 30-s epochs drawn from the stage signatures.

    Each example is the Pz-Oz signal synthesized at ``rate_hz`` (signature plus
    the two electrodes' sensor noise) and decimated to 100 Hz, i.e. what the
    multichannel path delivers once the common mode cancels. Returned in a
    seeded random order.
    """
    rng = np.random.default_rng(seed)
    n = int(EPOCH_SECONDS * rate_hz)
    rows, labels = [], []
    for stage in (StageLabel.W, StageLabel.N, StageLabel.R):
        for _ in range(n_per_class):
            x = stage_signature(stage, n, rate_hz, rng)
            x += rng.normal(0.0, SENSOR_NOISE_UV, n) - rng.normal(0.0, SENSOR_NOISE_UV, n)
            rows.append(x)
            labels.append(stage)
    low = decimate_array(np.stack(rows), rate_hz, int(rate_hz // 100))
    order = rng.permutation(len(labels))
    return [(Epoch(low[i], 0), labels[i]) for i in order]


def chunks_to_record(chunks, channels, reference) -> MultiChannelRecord:
    """Concatenate chunks into one float64 record (the single ingestion conversion)."""
    chunks = list(chunks)
    if not chunks:
        raise ValueError("no chunks to assemble")
    rate = chunks[0].rate_hz
    data = np.concatenate([c.samples for c in chunks], axis=1).astype(np.float64)
    return MultiChannelRecord(tuple(channels), data, rate, reference)


# ---------------------------------------------------------------- transport

def check_sequence(chunks: Iterable[EegChunk]) -> Iterator[EegChunk]:
    """Pass chunks through, aborting on any gap or reordering in ``seq``."""
    last = None
    for chunk in chunks:
        if last is not None and chunk.seq != last + 1:
            raise SequenceGapError(f"sequence jumped from {last} to {chunk.seq}")
        last = chunk.seq
        yield chunk


_DONE = object()


def bounded_stream(source: Iterable, maxsize: int = 8) -> Iterator:
    """Run ``source`` in a producer thread feeding a bounded queue.

    The producer blocks while the queue is full; producer exceptions are
    re-raised in the consumer.
    """
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    stop = threading.Event()

    def produce():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(_DONE)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, name="somno-producer", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def serve(header: StreamHeader, chunks: Iterable[EegChunk], port: int, host: str = "127.0.0.1",
          ready: threading.Event | None = None, bound: list | None = None) -> int:
    """Accept one client and stream the hello frame followed by every chunk.

    Returns the number of data frames sent. ``bound`` (if given) receives the
    actual port, useful with ``port=0``.
    """
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        if bound is not None:
            bound.append(srv.getsockname()[1])
        if ready is not None:
            ready.set()
        conn, addr = srv.accept()
        log.info("client connected from %s:%s", *addr[:2])
        sent = 0
        with conn:
            conn.sendall(hello_encode(header))
            for chunk in chunks:
                conn.sendall(frame_encode(chunk))
                sent += 1
        return sent


def receive(host: str, port: int, maxsize: int = 32, timeout: float = 10.0):
    """Connect to a stream server. Returns ``(header, chunk_iterator)``.

    Frames are decoded on a reader thread into a bounded queue; the iterator
    raises :class:`SequenceGapError` on dropped frames.
    """
    sock = socket.create_connection((host, port), timeout=timeout)
    decoder = FrameDecoder()
    pending: list = []
    while decoder.header is None:
        data = sock.recv(65536)
        if not data:
            sock.close()
            raise StreamError("connection closed before the hello frame")
        pending.extend(decoder.feed(data))
    header = decoder.header
    first = [item for item in pending if isinstance(item, EegChunk)]

    def frames():
        yield from first
        with sock:
            while True:
                data = sock.recv(65536)
                if not data:
                    break
                for item in decoder.feed(data):
                    if isinstance(item, EegChunk):
                        yield item
        if decoder.errors:
            log.warning("stream decoder recovered from %d framing errors", len(decoder.errors))

    return header, check_sequence(bounded_stream(frames(), maxsize))
