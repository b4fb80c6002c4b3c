import math

import numpy as np
import pytest
import torch
from scipy import stats

from ctefm.audio import SHORT_REFERENCE, AudioFormatError, Utterance, read_wav, segment_reference, write_wav
from ctefm.corpus import SpeakerVoice, synth_utterance
from ctefm.features import (
    MelConfig,
    ProviderError,
    ProviderRegistry,
    SyntheticSpeakerProvider,
    UtteranceTooShort,
    align_frames,
    compute_mel,
    default_registry,
    extract_content,
    extract_speaker_embeddings,
    mel_center_frequencies,
    mel_filterbank,
)
from ctefm.tensorfile import TensorFileError, decode_tensor, encode_tensor, load_tensor, save_tensor

SR = 16000


def sine(freq, seconds=1.0, amp=0.5):
    n = int(seconds * SR)
    return Utterance(amp * np.sin(2 * np.pi * freq * np.arange(n) / SR))


@pytest.fixture(scope="module")
def registry():
    return default_registry(0)


def test_silence_is_log_floor():
    cfg = MelConfig()
    mel = compute_mel(Utterance(np.zeros(SR)), cfg)
    assert np.all(mel.frames == cfg.log_floor)
    assert cfg.log_floor == pytest.approx(math.log(1e-5))


def test_frame_count_for_four_seconds():
    mel = compute_mel(Utterance(np.zeros(64000)))
    # centred framing: floor(64000 / 256) + 1
    assert mel.n_frames == 251
    assert mel.frames.shape == (251, 80)


def test_silence_padding_never_below_floor(rng):
    x = np.concatenate([np.zeros(5000), 0.3 * rng.standard_normal(8000), np.zeros(5000)])
    mel = compute_mel(Utterance(np.clip(x, -1, 1)))
    assert mel.frames.min() >= MelConfig().log_floor


def test_sine_peaks_at_nearest_mel_bin():
    cfg = MelConfig()
    mel = compute_mel(sine(440.0), cfg)
    # oracle: direct DFT of the windowed centre frame, pushed through the filterbank
    x = sine(440.0).samples
    n = np.arange(cfg.n_fft)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.win_length)
    frame = x[4000 : 4000 + cfg.n_fft] * window
    k = np.arange(cfg.n_fft // 2 + 1)
    dft = np.abs(np.exp(-2j * np.pi * np.outer(k, n) / cfg.n_fft) @ frame)
    oracle_bin = int(np.argmax(mel_filterbank(cfg) @ dft))
    nearest = int(np.argmin(np.abs(mel_center_frequencies(cfg) - 440.0)))
    assert oracle_bin == nearest
    assert int(np.argmax(mel.frames[len(mel.frames) // 2])) == nearest


def test_too_short_utterance():
    with pytest.raises(UtteranceTooShort, match="utterance-too-short"):
        compute_mel(Utterance(np.zeros(500)))


@pytest.mark.parametrize(
    "samples, rate",
    [(np.zeros(0), SR), (np.zeros((2, 100)), SR), (np.zeros(100), 22050), (np.full(10, 1.5), SR), (np.full(10, np.nan), SR)],
)
def test_utterance_rejects_bad_input(samples, rate):
    with pytest.raises(AudioFormatError):
        Utterance(samples, rate)


def test_wav_round_trip_and_rate_check(tmp_path):
    utt = sine(220.0, 0.5)
    write_wav(tmp_path / "a.wav", utt)
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back.samples - utt.samples)) < 1 / 32767 + 1e-12
    import wave

    with wave.open(str(tmp_path / "b.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(22050)
        wf.writeframes(np.zeros(100, dtype="<i2").tobytes())
    with pytest.raises(AudioFormatError, match="22050"):
        read_wav(tmp_path / "b.wav")


def test_content_shape_and_determinism(registry, rng):
    utt = Utterance(np.clip(0.2 * rng.standard_normal(4 * SR), -1, 1))
    a = extract_content(utt, registry)
    b = extract_content(utt, registry)
    assert a.frames.shape == (200, 256)
    assert a.frame_rate == 50
    assert np.array_equal(a.frames, b.frames)


def test_content_needs_provider():
    reg = ProviderRegistry(None, (SyntheticSpeakerProvider("a", dim=4),))
    with pytest.raises(ProviderError):
        extract_content(sine(100.0), reg)


def test_align_frames_linear():
    src = np.array([[0.0], [1.0], [2.0]])
    # source centres at 0.5, 1.5, 2.5 (rate 1); targets at 0, 1, 2, 3 clamp at the ends
    out = align_frames(src, 1.0, 4, 1.0)
    assert np.allclose(out[:, 0], [0.0, 0.5, 1.5, 2.0])


def test_speaker_embeddings_contract(registry):
    utt = synth_utterance(SpeakerVoice.sample(0, 0), 0, 0, 0)
    embs = extract_speaker_embeddings(utt, registry)
    assert [e.dim for e in embs] == [192, 192, 192]
    assert len({e.provider_id for e in embs}) == 3
    for e in embs:
        assert np.linalg.norm(e.vector) == pytest.approx(1.0)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_speaker_separation(registry):
    utts = {s: [synth_utterance(SpeakerVoice.sample(0, s), 0, s, i) for i in range(2)] for s in range(4)}
    emb = {s: [extract_speaker_embeddings(u, registry) for u in us] for s, us in utts.items()}
    for s in emb:
        for p in range(3):
            assert _cos(emb[s][0][p].vector, emb[s][1][p].vector) >= 0.9
    for p in range(3):
        # speakers 0 and 1 of seed 0 are well apart
        assert _cos(emb[0][0][p].vector, emb[1][0][p].vector) <= 0.5


def test_embedding_mask_matches_unpadded(registry):
    prov = registry.sv_providers[0]
    mel = torch.randn(50, 80, dtype=torch.float64)
    padded = torch.cat([mel, torch.full((20, 80), 3.0, dtype=torch.float64)])
    mask = torch.cat([torch.ones(50), torch.zeros(20)]).double()
    assert torch.allclose(prov.embed_mel(mel), prov.embed_mel(padded, mask), atol=1e-12)


def test_segment_length_and_exact_fit(rng):
    utt = Utterance(np.clip(0.1 * rng.standard_normal(6 * SR), -1, 1))
    seg = segment_reference(utt, 4.0, rng)
    assert len(seg) == 64000
    exact = Utterance(utt.samples[:64000])
    out = segment_reference(exact, 4.0, rng)
    assert np.array_equal(out.samples, exact.samples)
    assert SHORT_REFERENCE not in out.flags


def test_short_reference_returned_whole(rng):
    utt = Utterance(np.zeros(3 * SR))
    out = segment_reference(utt, 4.0, rng)
    assert len(out) == 3 * SR
    assert SHORT_REFERENCE in out.flags


def test_segment_offsets_uniform():
    # marker samples reveal the offset: samples[i] = i * scale
    n, need = 16050, 16000
    utt = Utterance(np.arange(n) / n)
    rng = np.random.default_rng(99)
    offsets = [int(round(segment_reference(utt, need / SR, rng).samples[0] * n)) for _ in range(10000)]
    counts = np.bincount(offsets, minlength=n - need + 1)
    assert len(counts) == n - need + 1
    assert counts.min() > 0
    assert stats.chisquare(counts).pvalue > 0.001


def test_tensor_file_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "t.ctefm", a)
    raw = (tmp_path / "t.ctefm").read_bytes()
    assert raw[:6] == b"CTEFM1"
    assert len(raw) == 6 + 4 + 3 * 8 + a.size * 4
    assert np.array_equal(load_tensor(tmp_path / "t.ctefm"), a)
    assert decode_tensor(encode_tensor(np.zeros(()))).shape == ()


@pytest.mark.parametrize("data", [b"NOPE", b"CTEFM1\x01", encode_tensor(np.zeros(4))[:-1]])
def test_tensor_file_rejects_garbage(data):
    with pytest.raises(TensorFileError):
        decode_tensor(data)
