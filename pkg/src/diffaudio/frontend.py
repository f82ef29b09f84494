"""Waveform I/O, log-mel filterbank features, patch embedding, positional encodings.

Patch tokens are ordered time-major: for a spectrogram of ``T`` frames and
``F`` mel bins cut into 16x16 patches, token ``r * grid_w + c`` covers frames
``16r .. 16r+15`` and mel bins ``16c .. 16c+15``.  Within a patch the 256
values are flattened row-major (frame, then mel bin).
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, concat, conv2d, matmul, reshape, slice_

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms at 16 kHz
FRAME_SHIFT = 160  # 10 ms at 16 kHz
N_FFT = 512
LOG_FLOOR = 1e-10
FBANK_MAGIC = b"FBNK"


class AudioFormatError(ValueError):
    """Unsupported or malformed audio input."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FbankSpectrogram:
    frames: np.ndarray  # (T_frames, n_mels)
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class PatchEmbeddings:
    tokens: Tensor  # (grid_h * grid_w, D)
    grid_h: int
    grid_w: int

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w


# ------------------------------------------------------------------ wav I/O


def load_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except wave.Error as exc:
        # the stdlib raises wave.Error both for non-PCM formats and broken headers
        msg = str(exc)
        if "unknown format" in msg:
            raise AudioFormatError(f"{path}: unsupported WAV encoding ({msg})") from exc
        raise AudioFormatError(f"{path}: cannot parse WAV header ({msg})") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated WAV header") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    pcm = np.frombuffer(raw[: 2 * (len(raw) // 2)], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write ``w`` as mono 16-bit PCM, clipping to the int16 range."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


# ------------------------------------------------------------------ fbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 128, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    mels = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(
    n_mels: int = 128,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float = 8000.0,
) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def n_frames_for(n_samples: int, frame_length: int = FRAME_LENGTH, hop: int = FRAME_SHIFT) -> int:
    return (n_samples - frame_length) // hop + 1


def compute_fbank(
    w: Waveform,
    n_mels: int = 128,
    n_fft: int = N_FFT,
    f_min: float = 0.0,
    f_max: float = 8000.0,
    log_floor: float = LOG_FLOOR,
    normalize: bool = False,
) -> FbankSpectrogram:
    """Log-mel filterbank energies with a 25 ms Hamming window every 10 ms.

    ``normalize`` standardizes the whole utterance to zero mean and unit
    variance (off by default).
    """
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"only {SAMPLE_RATE} Hz input is supported, got {w.sample_rate}")
    x = w.samples
    if x.size < FRAME_LENGTH:
        raise ValueError(f"clip of {x.size} samples is shorter than one {FRAME_LENGTH}-sample frame")
    n = n_frames_for(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LENGTH)[::FRAME_SHIFT][:n]
    windowed = frames * np.hamming(FRAME_LENGTH)
    power = np.abs(np.fft.rfft(windowed, n=n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, SAMPLE_RATE, f_min, f_max).T
    logmel = np.log(np.maximum(mel, log_floor))
    if normalize:
        logmel = (logmel - logmel.mean()) / (logmel.std() + 1e-8)
    return FbankSpectrogram(logmel)


def write_fbank(path: str | Path, spec: FbankSpectrogram) -> None:
    """FBNK dump: 16-byte little-endian header then row-major float32 frames."""
    frames = np.ascontiguousarray(spec.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FBANK_MAGIC + struct.pack("<III", frames.shape[0], frames.shape[1], 0))
        fh.write(frames.tobytes())


def read_fbank(path: str | Path) -> FbankSpectrogram:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != FBANK_MAGIC:
        raise AudioFormatError(f"{path}: not an FBNK file")
    t, m, _ = struct.unpack("<III", blob[4:16])
    if len(blob) != 16 + 4 * t * m:
        raise AudioFormatError(f"{path}: payload length does not match {t}x{m} header")
    return FbankSpectrogram(np.frombuffer(blob[16:], dtype="<f4").reshape(t, m).astype(np.float64))


# ------------------------------------------------------------------ patches


def pad_to_patches(frames: np.ndarray, patch: int = 16) -> np.ndarray:
    """Zero-pad the time axis up to a multiple of ``patch``."""
    t, f = frames.shape
    if f % patch:
        raise ValueError(f"mel axis {f} is not a multiple of patch size {patch}")
    target = -(-t // patch) * patch
    return np.pad(frames, ((0, target - t), (0, 0)))


def patch_matrix(padded: np.ndarray, patch: int = 16) -> np.ndarray:
    """``(grid_h * grid_w, patch * patch)`` matrix of flattened patches in token order."""
    t, f = padded.shape
    gh, gw = t // patch, f // patch
    return padded.reshape(gh, patch, gw, patch).transpose(0, 2, 1, 3).reshape(gh * gw, patch * patch)


def unpatchify(patches: np.ndarray, grid_h: int, grid_w: int, patch: int = 16) -> np.ndarray:
    """Inverse of :func:`patch_matrix`."""
    return patches.reshape(grid_h, grid_w, patch, patch).transpose(0, 2, 1, 3).reshape(grid_h * patch, grid_w * patch)


def patchify_and_embed(
    spec: FbankSpectrogram | np.ndarray | Tensor,
    proj: Tensor,
    patch: int = 16,
    front_conv: tuple[Tensor, Tensor] | None = None,
) -> PatchEmbeddings:
    """Cut the (padded) spectrogram into patches and project each to ``D`` dims.

    ``front_conv`` is an optional ``(weight (1,1,3,3), bias (1,))`` pair applied
    to the padded spectrogram before patching.
    """
    if proj.ndim != 2 or proj.shape[0] != patch * patch:
        raise ValueError(f"projection must have shape ({patch * patch}, D), got {proj.shape}")
    frames = spec.frames if isinstance(spec, FbankSpectrogram) else spec
    if isinstance(frames, Tensor):
        frames = frames.data
    padded = pad_to_patches(np.asarray(frames, dtype=np.float64), patch)
    gh, gw = padded.shape[0] // patch, padded.shape[1] // patch
    if front_conv is None:
        patches = Tensor(patch_matrix(padded, patch))
    else:
        weight, bias = front_conv
        img = conv2d(Tensor(padded[None]), weight, bias, stride=1, padding=1)
        # reshape/transpose chain equals patch_matrix on the conv output
        grid = reshape(img, (gh, patch, gw * patch))
        rows = []
        for r in range(gh):
            block = slice_(grid, (r,))  # (patch, gw*patch)
            for c in range(gw):
                piece = slice_(block, (slice(None), slice(c * patch, (c + 1) * patch)))
                rows.append(reshape(piece, (1, patch * patch)))
        patches = concat(rows, axis=0)
    return PatchEmbeddings(matmul(patches, proj), gh, gw)


def sinusoidal_pos_enc(n_tokens: int, dim: int) -> np.ndarray:
    """Fixed 1-D sine/cosine table: even columns sin, odd columns cos."""
    if dim % 2:
        raise ValueError(f"positional encoding width must be even, got {dim}")
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((n_tokens, dim))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe
