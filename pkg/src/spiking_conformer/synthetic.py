"""Synthetic fixtures: separable EEG-like segments and small EDF files.

Used by the test suite, the demos, and anyone who wants to exercise the
pipeline without real recordings.  The two classes are separable by
construction: positives carry rhythmic 10 Hz bursts on a subset of channels
on top of noise, negatives are plain white noise.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset, EdfSignal, SEGMENT_SAMPLES, N_CHANNELS, write_edf
from .tensor import DTYPE

FS = 256.0


def make_separable_dataset(
    n_segments: int = 2000,
    seed: int = 0,
    n_channels: int = N_CHANNELS,
    n_samples: int = SEGMENT_SAMPLES,
    burst_hz: float = 10.0,
    burst_amp: float = 2.0,
    burst_channels: int = 8,
    noise_std: float = 1.0,
) -> Dataset:
    """Half positive (bursting), half negative (noise) segments, shuffled."""
    rng = np.random.default_rng(seed)
    n_pos = n_segments // 2
    n_neg = n_segments - n_pos
    burst_channels = min(burst_channels, n_channels)
    t = np.arange(n_samples) / FS
    X = rng.normal(0.0, noise_std, size=(n_segments, n_channels, n_samples))
    for i in range(n_pos):
        phase = rng.uniform(0, 2 * np.pi)
        wave = burst_amp * np.sin(2 * np.pi * burst_hz * t + phase)
        chans = rng.choice(n_channels, size=burst_channels, replace=False)
        X[i, chans] += wave
    y = np.concatenate([np.zeros(n_pos, dtype=int), np.ones(n_neg, dtype=int)])
    order = rng.permutation(n_segments)
    X = np.ascontiguousarray(X[order], dtype=DTYPE)
    y = y[order]
    sources = [("synthetic", int(i)) for i in range(n_segments)]
    return Dataset(X=X, y=y, sources=sources)


def make_synthetic_edf(
    path,
    duration_s: float = 3600.0,
    seizures: list[tuple[float, float]] = ((1000.0, 1040.0),),
    n_channels: int = 23,
    fs: int = 256,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Write an EDF with noise background and high-amplitude ictal bursts.

    Returns the seizure (onset, offset) list for annotation files.
    """
    rng = np.random.default_rng(seed)
    n_samples = int(duration_s * fs)
    t = np.arange(n_samples) / fs
    phys = rng.normal(0.0, 30.0, size=(n_channels, n_samples))
    for onset, offset in seizures:
        sl = slice(int(onset * fs), int(offset * fs))
        wave = 400.0 * np.sin(2 * np.pi * 9.0 * t[sl])
        phys[:, sl] += wave
    phys = np.clip(phys, -999.0, 999.0)
    sig = EdfSignal(label="EEG", phys_min=-1000.0, phys_max=1000.0,
                    dig_min=-32768, dig_max=32767, samples_per_record=fs)
    digital = np.round((phys - sig.phys_min) / sig.gain + sig.dig_min).astype(np.int16)
    headers = [
        EdfSignal(label=f"EEG CH{c:02d}", phys_min=-1000.0, phys_max=1000.0,
                  dig_min=-32768, dig_max=32767, samples_per_record=fs)
        for c in range(n_channels)
    ]
    write_edf(path, digital, headers, record_duration=1.0)
    return list(seizures)
