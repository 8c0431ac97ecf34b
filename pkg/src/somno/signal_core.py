"""Deterministic EEG preprocessing: decimation, re-referencing, Pz-Oz, epoching.

All functions are pure. Records and signals hold float64 microvolts in
read-only arrays.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import kernels

EPOCH_SECONDS = 30
STAGING_RATE_HZ = 100

# actiCAP-style 10-20 montage as recorded against FCz; FCz itself is kept as
# the (all-zero) reference row so the record can be re-referenced losslessly.
MONTAGE_64 = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6",
    "T7", "C3", "Cz", "C4", "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10",
    "P7", "P3", "Pz", "P4", "P8", "PO9", "O1", "Oz", "O2", "PO10", "AF7",
    "AF3", "AF4", "AF8", "F5", "F1", "F2", "F6", "FT9", "FT7", "FC3", "FC4",
    "FT8", "FT10", "C5", "C1", "C2", "C6", "TP7", "CP3", "CPz", "CP4", "TP8",
    "P5", "P1", "P2", "P6", "PO7", "PO3", "POz", "PO4", "FCz",
)


class SignalError(ValueError):
    """Invalid signal, record, or preprocessing request."""


class DecimationError(SignalError):
    pass


class ChannelError(SignalError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def _frozen(samples, ndim):
    arr = np.array(samples, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise SignalError(f"expected {ndim}-d samples, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MultiChannelRecord:
    """Multichannel EEG block; ``samples`` has shape (n_channels, n_samples)."""

    channels: tuple[str, ...]
    samples: np.ndarray = field(repr=False)
    rate_hz: float
    reference: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        samples = _frozen(self.samples, 2)
        object.__setattr__(self, "samples", samples)
        if len(set(self.channels)) != len(self.channels):
            raise SignalError("channel names must be unique")
        if samples.shape[0] != len(self.channels):
            raise SignalError(
                f"{len(self.channels)} channel names but {samples.shape[0]} sample rows"
            )
        if not self.rate_hz > 0:
            raise SignalError(f"rate_hz must be positive, got {self.rate_hz}")
        if self.reference != "raw" and self.reference not in self.channels:
            raise SignalError(f"reference {self.reference!r} is not a channel of the record")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise ChannelError(
                f"unknown channel {name!r}; available: {', '.join(self.channels)}"
            ) from None

    def channel(self, name: str) -> np.ndarray:
        return self.samples[self.index(name)]


@dataclass(frozen=True)
class SingleChannelSignal:
    name: str
    samples: np.ndarray = field(repr=False)
    rate_hz: float

    def __post_init__(self):
        samples = _frozen(self.samples, 1)
        if not np.all(np.isfinite(samples)):
            raise SignalError(f"signal {self.name!r} contains non-finite samples")
        if not self.rate_hz > 0:
            raise SignalError(f"rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class Epoch:
    """One 30-s staging window."""

    samples: np.ndarray = field(repr=False)
    index: int
    rate_hz: float = STAGING_RATE_HZ

    def __post_init__(self):
        samples = _frozen(self.samples, 1)
        object.__setattr__(self, "samples", samples)
        if self.index < 0:
            raise SignalError("epoch index must be >= 0")
        expected = int(round(self.rate_hz * EPOCH_SECONDS))
        if samples.shape[0] != expected:
            raise SignalError(f"epoch must hold {expected} samples, got {samples.shape[0]}")


@functools.lru_cache(maxsize=16)
def antialias_taps(rate_hz: float, factor: int, atten_db: float = 60.0) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for decimation by ``factor``.

    Passband edge sits at 0.8 of the output Nyquist and the stopband starts at
    the output Nyquist (40 / 50 Hz for 1000 -> 100 Hz). Odd length, unity DC
    gain, symmetric, so the group delay is an integer number of samples.
    """
    nyq_out = rate_hz / factor / 2.0
    passband, stopband = 0.8 * nyq_out, nyq_out
    width = (stopband - passband) / (rate_hz / 2.0)
    n_taps = int(np.ceil((atten_db - 7.95) / (2.285 * np.pi * width))) + 1
    n_taps += 1 - n_taps % 2
    beta = 0.1102 * (atten_db - 8.7)
    cutoff = (passband + stopband) / 2.0 / rate_hz
    k = np.arange(n_taps) - (n_taps - 1) / 2.0
    taps = 2.0 * cutoff * np.sinc(2.0 * cutoff * k) * np.kaiser(n_taps, beta)
    taps /= taps.sum()
    taps.setflags(write=False)
    return taps


def _check_factor(rate_hz, factor):
    if isinstance(factor, bool) or not float(factor).is_integer() or factor < 1:
        raise DecimationError(f"decimation factor must be a positive integer, got {factor!r}")
    factor = int(factor)
    ratio = rate_hz / factor
    if not float(ratio).is_integer():
        raise DecimationError(
            f"rate {rate_hz} Hz is not an integer multiple of factor {factor}"
        )
    return factor


def decimate_array(x, rate_hz: float, factor: int = 10) -> np.ndarray:
    """Low-pass and downsample along the last axis.

    Accepts shape (n,) or (n_channels, n). Edges are reflect-padded by half
    the filter length, which also compensates the filter's group delay:
    output sample ``m`` is centred on input sample ``m * factor``.
    """
    factor = _check_factor(rate_hz, factor)
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2:
        raise SignalError(f"expected 1-d or 2-d input, got shape {x.shape}")
    n = x2.shape[1]
    if n == 0:
        raise DecimationError("cannot decimate an empty signal")
    taps = antialias_taps(float(rate_hz), factor)
    half = taps.shape[0] // 2
    if n < taps.shape[0]:
        raise DecimationError(
            f"signal of {n} samples is shorter than the {taps.shape[0]}-tap filter"
        )
    padded = np.pad(x2, ((0, 0), (half, half)), mode="reflect", reflect_type="odd")
    out = kernels.fir_decimate(np.ascontiguousarray(padded), taps, factor, n // factor)
    return out[0] if squeeze else out


def decimate(signal: SingleChannelSignal, factor: int = 10) -> SingleChannelSignal:
    """Anti-aliased decimation; output length is ``len(signal) // factor``."""
    out = decimate_array(signal.samples, signal.rate_hz, factor)
    return SingleChannelSignal(signal.name, out, signal.rate_hz / int(factor))


def rereference(record: MultiChannelRecord, new_ref: str) -> MultiChannelRecord:
    """Subtract channel ``new_ref`` from every channel (it becomes all zeros)."""
    ref = record.channel(new_ref)
    return MultiChannelRecord(record.channels, record.samples - ref, record.rate_hz, new_ref)


def derive_pz_oz(record: MultiChannelRecord) -> SingleChannelSignal:
    """Bipolar Pz-Oz derivation, ``potential(Pz) - potential(Oz)``.

    The common reference cancels, so the result does not depend on which
    reference the record carries. For float32-origin samples (as delivered by
    the replay file and the wire protocol) every intermediate difference is
    exact in float64 and the output is bit-identical across references.
    """
    missing = [c for c in ("Pz", "Oz") if c not in record.channels]
    if missing:
        raise ChannelError(
            f"record lacks {' and '.join(missing)}; available: {', '.join(record.channels)}"
        )
    return SingleChannelSignal("Pz-Oz", record.channel("Pz") - record.channel("Oz"), record.rate_hz)


def epoch_split(signal: SingleChannelSignal, start_index: int = 0) -> list[Epoch]:
    """Non-overlapping 30-s windows; a trailing partial window is dropped."""
    if signal.rate_hz != STAGING_RATE_HZ:
        raise SignalError(f"epoching expects {STAGING_RATE_HZ} Hz input, got {signal.rate_hz}")
    width = STAGING_RATE_HZ * EPOCH_SECONDS
    k = len(signal) // width
    return [
        Epoch(signal.samples[i * width:(i + 1) * width], start_index + i, STAGING_RATE_HZ)
        for i in range(k)
    ]


def preprocess_window(record: MultiChannelRecord, first_epoch_index: int = 0) -> list[Epoch]:
    """Raw acquisition block -> staging epochs (Pz reference, Pz-Oz, 100 Hz).

    Re-referencing to Pz before taking Pz-Oz mirrors the acquisition pipeline;
    the derivation is reference-free so the order with decimation is immaterial.
    """
    if record.reference != "Pz":
        record = rereference(record, "Pz")
    pz_oz = derive_pz_oz(record)
    factor = record.rate_hz / STAGING_RATE_HZ
    return epoch_split(decimate(pz_oz, factor), first_epoch_index)
