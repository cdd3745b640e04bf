import numpy as np
import pytest

from mmcla import audio
from mmcla.audio import MelSpec, Waveform


def sine(freq, rate, seconds, amp=0.5, phase=0.0):
    t = np.arange(int(round(rate * seconds))) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


# -- resampling --------------------------------------------------------------


def test_resample_same_rate_is_identity(np_rng):
    x = np_rng.uniform(-1, 1, 1000)
    out = audio.resample(Waveform(x, 16000), 16000)
    assert out.sample_rate == 16000
    np.testing.assert_array_equal(out.samples, x)


@pytest.mark.parametrize("src", [32000, 44100, 48000, 22050, 8000, 11025])
def test_resample_length_preserves_duration(src):
    n = src * 3 + 17
    out = audio.resample(Waveform(np.zeros(n), src), 16000)
    assert abs(len(out) - n * 16000 / src) <= 1


def test_resample_32k_halves_length():
    out = audio.resample(Waveform(np.zeros(32000), 32000), 16000)
    assert len(out) == 16000


def test_resample_440hz_peak_stays_put():
    out = audio.resample(Waveform(sine(440.0, 48000, 2.0), 48000), 16000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out), 1 / 16000)
    bin_width = freqs[1]
    assert abs(freqs[np.argmax(spectrum)] - 440.0) <= bin_width


@pytest.mark.parametrize("src,freq", [(48000, 440.0), (22050, 1234.5), (8000, 300.0)])
def test_resample_matches_analytic_sine_in_interior(src, freq):
    # a band-limited input sampled at the new rate is the exact answer
    out = audio.resample(Waveform(sine(freq, src, 1.0, phase=0.3), src), 16000)
    expected = sine(freq, 16000, len(out) / 16000, phase=0.3)[: len(out)]
    interior = slice(2000, len(out) - 2000)
    assert np.max(np.abs(out.samples[interior] - expected[interior])) < 1e-4


def test_resample_downsampling_rejects_above_nyquist():
    # 7 kHz is above the 4 kHz output Nyquist rate and must be filtered out
    out = audio.resample(Waveform(sine(7000.0, 48000, 1.0), 48000), 8000)
    interior = out.samples[1000:-1000]
    assert np.sqrt(np.mean(interior**2)) < 1e-3


def test_resample_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        audio.resample(Waveform(np.zeros(0), 8000), 16000)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), 0)
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)


# -- fix_length --------------------------------------------------------------


def test_fix_length_examples(np_rng):
    x = np_rng.uniform(-1, 1, 100000)
    same = audio.fix_length(Waveform(x[:96000], 16000))
    np.testing.assert_array_equal(same.samples, x[:96000])
    padded = audio.fix_length(Waveform(x[:80000], 16000))
    assert len(padded) == 96000
    np.testing.assert_array_equal(padded.samples[:80000], x[:80000])
    assert not padded.samples[80000:].any()
    cut = audio.fix_length(Waveform(x, 16000))
    np.testing.assert_array_equal(cut.samples, x[:96000])
    with pytest.raises(ValueError):
        audio.fix_length(Waveform(x, 16000), 0)


# -- filterbank and STFT -----------------------------------------------------


def test_filterbank_geometry():
    fb = audio.mel_filterbank()
    assert fb.shape == (80, 513)
    assert (fb >= 0).all()
    assert (fb.max(axis=1) > 0).all()
    assert fb.max() <= 1.0
    # adjacent triangles overlap
    assert all(np.any((fb[i] > 0) & (fb[i + 1] > 0)) for i in range(79))


def test_htk_mel_scale_values():
    assert audio.hz_to_mel(0.0) == 0.0
    assert audio.hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
    f = np.array([10.0, 440.0, 8000.0])
    np.testing.assert_allclose(audio.mel_to_hz(audio.hz_to_mel(f)), f, rtol=1e-12)


def test_hann_is_periodic():
    w = audio.hann_window(8)
    np.testing.assert_allclose(w, [0, 0.1464466, 0.5, 0.8535534, 1, 0.8535534, 0.5, 0.1464466], atol=1e-7)


def test_power_spectrogram_parseval(np_rng):
    x = sine(1000.0, 16000, 1.0) + 0.01 * np_rng.normal(size=16000)
    power = audio.power_spectrogram(x)
    n = audio.N_FFT
    # one-sided spectrum: interior bins count twice
    weights = np.full(n // 2 + 1, 2.0)
    weights[0] = weights[-1] = 1.0
    spectral = (weights[:, None] * power).sum(axis=0) / n
    pad = np.pad(x, n // 2, mode="reflect")
    win = audio.hann_window(n)
    frames = power.shape[1]
    temporal = np.array([np.sum((pad[i * audio.HOP : i * audio.HOP + n] * win) ** 2) for i in range(frames)])
    np.testing.assert_allclose(spectral, temporal, rtol=1e-9)


def test_windowed_sine_energy_matches_analytic():
    # interior frame of a unit sine: energy ~ N * sum(w^2) / 2 spread over two one-sided bins
    x = sine(1000.0, 16000, 1.0, amp=1.0)
    power = audio.power_spectrogram(x)
    w = audio.hann_window(audio.N_FFT)
    predicted = audio.N_FFT * np.sum(w**2) / 4.0
    frame = power[:, 50]
    assert abs(frame.sum() - predicted) / predicted < 0.05


# -- mel spectrogram ---------------------------------------------------------


@pytest.mark.parametrize("rate", [8000, 11025, 16000, 22050, 44100, 48000])
def test_any_rate_six_seconds_gives_80_by_601(np_rng, rate):
    wave = Waveform(np_rng.uniform(-0.5, 0.5, 6 * rate), rate)
    spec = audio.preprocess_audio(wave)
    assert spec.values.shape == (80, 601)
    assert spec.values.dtype == np.float32


def test_silence_hits_floor_exactly():
    spec = audio.mel_spectrogram(Waveform(np.zeros(96000), 16000))
    assert spec.values.shape == (80, 601)
    assert (spec.values == -100.0).all()
    assert spec.floor_db == -100.0


def test_one_khz_tone_peaks_at_nearest_filter_centre():
    spec = audio.mel_spectrogram(Waveform(sine(1000.0, 16000, 6.0), 16000))
    # filter centres from explicit HTK breakpoints: 82 points evenly spaced in mel
    top = 2595.0 * np.log10(1.0 + 8000.0 / 700.0)
    centres_hz = 700.0 * (10 ** (np.linspace(0.0, top, 82)[1:-1] / 2595.0) - 1.0)
    expected = int(np.argmin(np.abs(centres_hz - 1000.0)))
    peaks = spec.values[:, 5:-5].argmax(axis=0)
    assert (peaks == expected).all()


def test_mel_wrong_rate_says_resample_first():
    with pytest.raises(ValueError, match="resample first"):
        audio.mel_spectrogram(Waveform(np.zeros(96000), 22050))


def test_mel_is_deterministic(np_rng):
    wave = Waveform(np_rng.uniform(-1, 1, 96000), 16000)
    a = audio.mel_spectrogram(wave).values
    b = audio.mel_spectrogram(Waveform(wave.samples.copy(), 16000)).values
    assert a.tobytes() == b.tobytes()


def test_mel_frames_law():
    assert audio.mel_frames() == 601
    assert audio.mel_frames(16000, 6, 160) == 96000 // 160 + 1


# -- WAV I/O -----------------------------------------------------------------


def test_wav_roundtrip_pcm16(tmp_path, np_rng):
    x = np_rng.uniform(-0.9, 0.9, 2205)
    audio.write_wav(tmp_path / "a.wav", Waveform(x, 22050))
    back = audio.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 22050
    assert np.max(np.abs(back.samples - x)) < 1.0 / 32767


def test_wav_roundtrip_float32(tmp_path, np_rng):
    x = np_rng.uniform(-1, 1, 500)
    audio.write_wav(tmp_path / "f.wav", Waveform(x, 8000), pcm16=False)
    back = audio.read_wav(tmp_path / "f.wav")
    np.testing.assert_array_equal(back.samples, x.astype(np.float32))


def test_wav_rejects_stereo(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "s.wav", 8000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(ValueError, match="single channel"):
        audio.read_wav(tmp_path / "s.wav")


def test_melspec_frames_property():
    spec = MelSpec(np.zeros((80, 601), dtype=np.float32))
    assert spec.frames == 601
