import math
import struct
import wave

import numpy as np
import pytest

from diffaudio.autograd import Tensor
from diffaudio.frontend import (
    AudioFormatError,
    Waveform,
    compute_fbank,
    hz_to_mel,
    load_wav,
    mel_to_hz,
    pad_to_patches,
    patch_matrix,
    patchify_and_embed,
    read_fbank,
    sinusoidal_pos_enc,
    unpatchify,
    write_fbank,
    write_wav,
)


def sine(freq, seconds=1.0, amp=0.5, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def test_load_silence(tmp_path):
    p = tmp_path / "zeros.wav"
    write_wav(p, Waveform(np.zeros(16000)))
    w = load_wav(p)
    assert w.sample_rate == 16000
    assert w.samples.shape == (16000,)
    assert np.all(w.samples == 0.0)


def test_load_full_scale_sample(tmp_path):
    p = tmp_path / "one.wav"
    with wave.open(str(p), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(struct.pack("<h", 32767))
    assert load_wav(p).samples.tolist() == [32767 / 32768]


def test_sine_roundtrip(tmp_path):
    p = tmp_path / "a440.wav"
    w = sine(440.0)
    write_wav(p, w)
    back = load_wav(p)
    expected = np.clip(np.round(w.samples * 32768), -32768, 32767) / 32768
    np.testing.assert_array_equal(back.samples, expected)


def test_rejects_stereo(tmp_path):
    p = tmp_path / "stereo.wav"
    with wave.open(str(p), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00" * 16)
    with pytest.raises(AudioFormatError, match="mono"):
        load_wav(p)


def test_rejects_non_pcm(tmp_path):
    # IEEE-float WAV (format tag 3)
    p = tmp_path / "float.wav"
    data = np.zeros(4, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    riff = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    p.write_bytes(b"RIFF" + struct.pack("<I", len(riff)) + riff)
    with pytest.raises(AudioFormatError, match="unsupported"):
        load_wav(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "trunc.wav"
    p.write_bytes(b"RIFF\x10\x00\x00\x00WAV")
    with pytest.raises(AudioFormatError):
        load_wav(p)


def test_ten_second_frame_count():
    spec = compute_fbank(Waveform(np.zeros(160000)))
    assert spec.frames.shape == ((160000 - 400) // 160 + 1, 128) == (998, 128)


def test_silence_hits_floor():
    spec = compute_fbank(Waveform(np.zeros(4000)))
    assert np.all(spec.frames == math.log(1e-10))


def test_short_clip_rejected():
    with pytest.raises(ValueError):
        compute_fbank(Waveform(np.zeros(399)))


def test_other_sample_rates_rejected():
    with pytest.raises(ValueError):
        compute_fbank(Waveform(np.zeros(8000), 8000))


def _filter_weight_at(freq_hz, n_mels=128, f_max=8000.0):
    # triangle heights at freq_hz, from the mel-spaced edges alone
    m_max = 2595.0 * math.log10(1 + f_max / 700.0)
    edges = [700.0 * (10 ** (m_max * i / (n_mels + 1) / 2595.0) - 1) for i in range(n_mels + 2)]
    w = []
    for k in range(n_mels):
        lo, c, hi = edges[k], edges[k + 1], edges[k + 2]
        if lo <= freq_hz <= c:
            w.append((freq_hz - lo) / (c - lo))
        elif c < freq_hz <= hi:
            w.append((hi - freq_hz) / (hi - c))
        else:
            w.append(0.0)
    return np.array(w)


def test_1khz_peak_in_expected_mel_bin():
    spec = compute_fbank(sine(1000.0))
    expected = int(np.argmax(_filter_weight_at(1000.0)))
    peaks = spec.frames.argmax(axis=1)
    assert np.all(peaks == expected)


def test_mel_scale_roundtrip():
    f = np.array([0.0, 100.0, 1000.0, 8000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


def test_fbank_deterministic():
    w = sine(700.0, 0.5)
    a, b = compute_fbank(w).frames, compute_fbank(w).frames
    assert np.array_equal(a, b)


def test_doubling_amplitude_adds_log4():
    rng = np.random.default_rng(0)
    x = 0.2 * rng.standard_normal(8000)
    a = compute_fbank(Waveform(x)).frames
    b = compute_fbank(Waveform(2 * x)).frames
    above = a > math.log(1e-10)
    assert above.mean() > 0.5
    np.testing.assert_allclose(b[above] - a[above], math.log(4.0), atol=1e-9)


def test_fbank_dump_roundtrip(tmp_path):
    spec = compute_fbank(sine(300.0, 0.3))
    p = tmp_path / "x.fbnk"
    write_fbank(p, spec)
    raw = p.read_bytes()
    assert raw[:4] == b"FBNK"
    assert struct.unpack("<III", raw[4:16]) == (spec.n_frames, 128, 0)
    assert len(raw) == 16 + 4 * spec.n_frames * 128
    back = read_fbank(p)
    np.testing.assert_array_equal(back.frames, spec.frames.astype(np.float32))


def test_ten_second_clip_patches():
    frames = np.zeros((998, 128))
    proj = Tensor(np.zeros((256, 768)))
    emb = patchify_and_embed(frames, proj)
    assert pad_to_patches(frames).shape == (1008, 128)
    assert (emb.grid_h, emb.grid_w) == (63, 8)
    assert emb.tokens.shape == (504, 768)
    # ~50 tokens per second of audio at width 768
    assert abs(emb.tokens.shape[0] / 10 - 50) < 1


def test_identity_projection_gives_raw_patches():
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((40, 128))
    emb = patchify_and_embed(frames, Tensor(np.eye(256)))
    padded = pad_to_patches(frames)
    # token r*8+c is frames 16r..16r+15, bins 16c..16c+15, row-major
    for r in range(emb.grid_h):
        for c in range(emb.grid_w):
            np.testing.assert_array_equal(
                emb.tokens.data[r * 8 + c], padded[16 * r : 16 * r + 16, 16 * c : 16 * c + 16].reshape(-1)
            )
    np.testing.assert_array_equal(unpatchify(emb.tokens.data, emb.grid_h, emb.grid_w), padded)


def test_projection_shape_checked():
    with pytest.raises(ValueError):
        patchify_and_embed(np.zeros((16, 128)), Tensor(np.zeros((128, 8))))


def test_front_conv_identity_kernel_matches_plain_path():
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((20, 128))
    proj = Tensor(rng.standard_normal((256, 8)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    with_conv = patchify_and_embed(frames, proj, front_conv=(Tensor(w), Tensor(np.zeros(1))))
    plain = patchify_and_embed(frames, proj)
    np.testing.assert_allclose(with_conv.tokens.data, plain.tokens.data, atol=1e-12)


def test_pos_enc_closed_forms():
    pe = sinusoidal_pos_enc(5, 8)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert abs(pe[1, 0] - 0.841471) < 1e-6
    assert pe[3, 2] == pytest.approx(math.sin(3 / 10000 ** (2 / 8)))
    assert pe[3, 3] == pytest.approx(math.cos(3 / 10000 ** (2 / 8)))


@pytest.mark.parametrize("n,d", [(1, 2), (17, 64), (505, 768)])
def test_pos_enc_bounded(n, d):
    pe = sinusoidal_pos_enc(n, d)
    assert pe.shape == (n, d)
    assert np.all(np.abs(pe) <= 1.0)


def test_pos_enc_odd_width():
    with pytest.raises(ValueError):
        sinusoidal_pos_enc(3, 5)


def test_patch_matrix_inverse():
    x = np.arange(32 * 128, dtype=float).reshape(32, 128)
    assert np.array_equal(unpatchify(patch_matrix(x), 2, 8), x)
