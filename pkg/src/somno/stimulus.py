"""Synthesis of the five auditory stimuli and 16-bit WAV output."""

from __future__ import annotations

import enum
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

AUDIO_RATE = 44100

BEEP_HZ = 512.0
BEEP_PERIOD_S = 5.0
BEEP_ON_S = 2.0
RAMP_S = 0.010
BINAURAL_LEFT_HZ = 250.0
BINAURAL_RIGHT_HZ = 256.0
RAIN_LOWPASS_HZ = 1000.0
RAIN_DROPS_PER_S = 40.0


class StimulusKind(str, enum.Enum):
    SHAM = "Sham"
    REPETITIVE_BEEP = "RepetitiveBeep"
    BINAURAL_BEAT = "BinauralBeat"
    WHITE_NOISE = "WhiteNoise"
    RAIN_SOUND = "RainSound"

    @classmethod
    def parse(cls, text) -> "StimulusKind":
        if isinstance(text, StimulusKind):
            return text
        key = str(text).strip().lower().replace("_", "").replace("-", "")
        for kind in cls:
            if key == kind.value.lower():
                return kind
        if key in _ALIASES:
            return _ALIASES[key]
        raise ValueError(
            f"unknown stimulus kind {text!r}; choose from "
            + ", ".join(k.value for k in cls) + " (or sham, rb, bb, wn, rs)")


_ALIASES = {
    "sham": StimulusKind.SHAM,
    "rb": StimulusKind.REPETITIVE_BEEP,
    "beep": StimulusKind.REPETITIVE_BEEP,
    "bb": StimulusKind.BINAURAL_BEAT,
    "binaural": StimulusKind.BINAURAL_BEAT,
    "wn": StimulusKind.WHITE_NOISE,
    "noise": StimulusKind.WHITE_NOISE,
    "rs": StimulusKind.RAIN_SOUND,
    "rain": StimulusKind.RAIN_SOUND,
}


class StimulusError(ValueError):
    pass


@dataclass(frozen=True)
class StimulusBuffer:
    """Stereo float64 audio in [-1, 1]; ``samples`` has shape (n, 2)."""

    kind: StimulusKind
    samples: np.ndarray = field(repr=False)
    gain_dbfs: float
    rate: int = AUDIO_RATE
    source: str = "synthetic"

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise StimulusError(f"stimulus buffer must be (n, 2), got {arr.shape}")
        if np.any(np.abs(arr) > 1.0):
            raise StimulusError("stimulus samples exceed full scale")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.rate

    @property
    def left(self):
        return self.samples[:, 0]

    @property
    def right(self):
        return self.samples[:, 1]


def gain_to_peak(gain_dbfs: float) -> float:
    if not np.isfinite(gain_dbfs) or gain_dbfs > 0:
        raise StimulusError(f"gain must be a finite value <= 0 dBFS, got {gain_dbfs}")
    return float(10.0 ** (gain_dbfs / 20.0))


def _peak_normalize(x: np.ndarray, peak: float) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    return x if m == 0 else x * (peak / m)


def beep_envelope(n: int, rate: int = AUDIO_RATE) -> np.ndarray:
    """Gate that is on for [5k, 5k+2) s, with raised-cosine ramps inside each on-window."""
    t = np.arange(n) / rate
    phase = np.mod(t, BEEP_PERIOD_S)
    env = np.zeros(n)
    on = phase < BEEP_ON_S
    env[on] = 1.0
    rise = on & (phase < RAMP_S)
    env[rise] = 0.5 * (1.0 - np.cos(np.pi * phase[rise] / RAMP_S))
    fall = on & (phase > BEEP_ON_S - RAMP_S)
    env[fall] = 0.5 * (1.0 - np.cos(np.pi * (BEEP_ON_S - phase[fall]) / RAMP_S))
    return env


def _rain(n: int, rng, rate: int) -> np.ndarray:
    """White noise through a one-pole 1 kHz low-pass, with decaying droplet clicks."""
    noise = rng.normal(0.0, 1.0, (2, n))
    a = float(np.exp(-2.0 * np.pi * RAIN_LOWPASS_HZ / rate))
    y = kernels.onepole_lowpass(noise, a).T.copy()
    n_drops = rng.poisson(RAIN_DROPS_PER_S * n / rate)
    drop_len = int(0.004 * rate)
    decay = np.exp(-np.arange(drop_len) / (0.0008 * rate))
    for start, amp, ch in zip(rng.integers(0, max(n - drop_len, 1), n_drops),
                              rng.uniform(0.5, 3.0, n_drops) * np.std(y),
                              rng.integers(0, 2, n_drops)):
        seg = y[start:start + drop_len, ch]
        seg += amp * decay[:seg.shape[0]] * rng.choice((-1.0, 1.0))
    return y


def load_audio(path, duration_s: float, rate: int = AUDIO_RATE) -> np.ndarray:
    """Read a 16-bit PCM WAV (mono or stereo, at ``rate``), looped/trimmed to duration."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getframerate() != rate or wf.getnchannels() not in (1, 2):
            raise StimulusError(
                f"{path}: need 16-bit PCM at {rate} Hz, mono or stereo "
                f"(got {8 * wf.getsampwidth()}-bit, {wf.getframerate()} Hz, {wf.getnchannels()} ch)")
        raw = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
        x = raw.reshape(-1, wf.getnchannels()).astype(np.float64) / 32768.0
    if x.shape[0] == 0:
        raise StimulusError(f"{path}: empty audio file")
    if x.shape[1] == 1:
        x = np.repeat(x, 2, axis=1)
    n = int(round(duration_s * rate))
    reps = -(-n // x.shape[0])
    return np.tile(x, (reps, 1))[:n]


def synth(kind, duration_s: float, seed: int = 0, gain_dbfs: float = 0.0,
          rain_file=None, allow_rain_fallback: bool = True, rate: int = AUDIO_RATE) -> StimulusBuffer:
    """Render ``duration_s`` seconds of one stimulus, peak-normalized to ``gain_dbfs``.

    Sham is exact digital silence. The beep is a 512 Hz tone gated on for 2 s
    of every 5 s; the binaural beat is 250 Hz left / 256 Hz right; white noise
    is seeded Gaussian, identical on both channels. Rain comes from
    ``rain_file`` when given, else from a labelled synthetic substitute.
    """
    kind = StimulusKind.parse(kind)
    if not duration_s > 0:
        raise StimulusError(f"duration must be positive, got {duration_s}")
    peak = gain_to_peak(gain_dbfs)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    source = "synthetic"
    if kind is StimulusKind.SHAM:
        x = np.zeros((n, 2))
    elif kind is StimulusKind.REPETITIVE_BEEP:
        local_t = np.mod(t, BEEP_PERIOD_S)
        tone = np.sin(2.0 * np.pi * BEEP_HZ * local_t) * beep_envelope(n, rate)
        x = np.column_stack([tone, tone])
    elif kind is StimulusKind.BINAURAL_BEAT:
        x = np.column_stack([np.sin(2.0 * np.pi * BINAURAL_LEFT_HZ * t),
                             np.sin(2.0 * np.pi * BINAURAL_RIGHT_HZ * t)])
    elif kind is StimulusKind.WHITE_NOISE:
        noise = np.random.default_rng(seed).normal(0.0, 1.0, n)
        x = np.column_stack([noise, noise])
    else:
        if rain_file is not None and Path(rain_file).exists():
            x = load_audio(rain_file, duration_s, rate)
            source = str(rain_file)
        elif allow_rain_fallback:
            if rain_file is not None:
                log.warning("rain file %s not found; using synthetic rain", rain_file)
            x = _rain(n, np.random.default_rng(seed), rate)
            source = "synthetic-rain"
        else:
            raise StimulusError(f"rain file {rain_file!r} is missing and the synthetic fallback is disabled")
    if kind is StimulusKind.BINAURAL_BEAT:
        # both channels at the same peak, not a joint normalization
        x = np.column_stack([_peak_normalize(x[:, 0], peak), _peak_normalize(x[:, 1], peak)])
    else:
        x = _peak_normalize(x, peak)
    return StimulusBuffer(kind, np.clip(x, -1.0, 1.0), gain_dbfs, rate, source)


def quantize(x) -> np.ndarray:
    """float in [-1, 1] -> int16, scale 32768, round half away from zero, clipped."""
    scaled = np.asarray(x, dtype=np.float64) * 32768.0
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(buffer: StimulusBuffer, path) -> Path:
    """16-bit PCM stereo little-endian RIFF/WAVE."""
    path = Path(path)
    try:
        with open(path, "wb") as fh, wave.open(fh, "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(buffer.rate)
            wf.writeframes(quantize(buffer.samples).tobytes())
    except OSError as exc:
        raise StimulusError(f"cannot write {path}: {exc}") from exc
    return path


def read_wav(path) -> tuple[np.ndarray, int]:
    """Returns (float samples of shape (n, channels), rate)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise StimulusError(f"{path}: only 16-bit PCM is supported")
        raw = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
        return raw.reshape(-1, wf.getnchannels()).astype(np.float64) / 32768.0, wf.getframerate()


def db_target_to_gain(target_db_spl: float, calibration_db_spl: float | None) -> float:
    """Digital gain that plays at ``target_db_spl`` given the device's SPL at 0 dBFS.

    Targets are meant to be in the 40-45 dB SPL comfort range; results above
    0 dBFS are clamped with a warning since the device cannot go louder.
    """
    if calibration_db_spl is None:
        raise StimulusError(
            "no loudness calibration: measure the SPL your device produces at 0 dBFS "
            "and pass it as the calibration (config key 'calibration_db_spl')")
    if not 40.0 <= target_db_spl <= 45.0:
        log.warning("target %.1f dB SPL is outside the 40-45 dB comfort range", target_db_spl)
    gain = float(target_db_spl) - float(calibration_db_spl)
    if gain > 0:
        log.warning("target %.1f dB SPL exceeds the device maximum (%.1f dB SPL at 0 dBFS); clamping to 0 dBFS",
                    target_db_spl, calibration_db_spl)
        gain = 0.0
    return gain
