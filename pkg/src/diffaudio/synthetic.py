"""Label-bearing toy audio: tones, chirps and noise with class-specific spectra."""

from __future__ import annotations

import numpy as np

from .frontend import SAMPLE_RATE, Waveform

CLASS_NAMES = ("low_tone", "high_tone", "up_chirp", "down_chirp")


def _chirp(t: np.ndarray, f0: float, f1: float) -> np.ndarray:
    dur = t[-1] if t[-1] > 0 else 1.0
    k = (f1 - f0) / dur
    return np.sin(2 * np.pi * (f0 * t + 0.5 * k * t * t))


def make_clip(label: int, rng: np.random.Generator, seconds: float = 1.0, noise: float = 0.02) -> Waveform:
    """One clip of class ``label`` (see ``CLASS_NAMES``) with randomized pitch and level."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    amp = rng.uniform(0.2, 0.6)
    if label == 0:
        f = rng.uniform(250.0, 600.0)
        x = np.sin(2 * np.pi * f * t) + 0.4 * np.sin(4 * np.pi * f * t)
    elif label == 1:
        f = rng.uniform(2500.0, 4500.0)
        x = np.sin(2 * np.pi * f * t) + 0.3 * np.sin(2 * np.pi * 1.5 * f * t)
    elif label == 2:
        x = _chirp(t, rng.uniform(200.0, 600.0), rng.uniform(3000.0, 6000.0))
    elif label == 3:
        x = _chirp(t, rng.uniform(3000.0, 6000.0), rng.uniform(200.0, 600.0))
    else:
        raise ValueError(f"label must be in [0, {len(CLASS_NAMES)}), got {label}")
    x = amp * x / np.max(np.abs(x)) + noise * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0))


def make_dataset(n: int, seed: int = 0, seconds: float = 1.0, n_classes: int = 4):
    """Balanced clips and integer labels, in shuffled order."""
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    return [make_clip(int(y), rng, seconds) for y in labels], labels
