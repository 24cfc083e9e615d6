import io
import struct

import numpy as np
import pytest
from scipy.io import wavfile

from sparse_audio.errors import DomainError, FormatError, IngestionError, NormalizationError
from sparse_audio.gammachirp import BankConfig, build_bank
from sparse_audio.lca import Dictionary, LcaConfig
from sparse_audio.pipeline import (
    DatasetManifest,
    EventRepresentation,
    ManifestEntry,
    bin_spike_times,
    encode_dataset,
    load_wav,
    normalize_01,
    read_spike_csv,
    sparsity_ratio,
    write_wav,
)


def _rep(dense, kind="lca", label=None):
    return EventRepresentation.from_dense(np.asarray(dense, dtype=float), kind=kind, label=label)


def test_load_wav_zeros_and_full_scale(tmp_path):
    p = tmp_path / "z.wav"
    wavfile.write(p, 16000, np.zeros(100, dtype=np.int16))
    audio = load_wav(p)
    assert audio.sample_rate_hz == 16000 and not np.any(audio.samples)
    wavfile.write(p, 16000, np.array([32767, -32768], dtype=np.int16))
    x = load_wav(p).samples
    assert x[0] == pytest.approx(0.99997, abs=1e-5) and x[1] == -1.0


def test_load_wav_stereo_is_averaged(tmp_path):
    p = tmp_path / "s.wav"
    wavfile.write(p, 8000, np.array([[16384, 0], [0, -16384]], dtype=np.int16))
    np.testing.assert_array_equal(load_wav(p).samples, [0.25, -0.25])


def test_sine_roundtrip_within_quantization(tmp_path):
    t = np.arange(16000) / 16000
    x = 0.8 * np.sin(2 * np.pi * 440 * t)
    p = tmp_path / "sine.wav"
    write_wav(p, x, 16000)
    back = load_wav(p)
    assert back.samples.size == 16000
    assert np.max(np.abs(back.samples - x)) <= 2.0**-15


def test_unreadable_and_compressed_wav(tmp_path):
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"not a wav at all")
    with pytest.raises(IngestionError) as info:
        load_wav(junk)
    assert info.value.path == junk
    # IMA ADPCM format tag 0x11
    fmt = struct.pack("<HHIIHH", 0x11, 1, 8000, 4000, 256, 4)
    data = b"\x00" * 256
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    comp = tmp_path / "adpcm.wav"
    comp.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(IngestionError):
        load_wav(comp)
    with pytest.raises(IngestionError):
        load_wav(tmp_path / "missing.wav")


def test_frame_counts_for_table_geometries():
    b16 = build_bank(BankConfig(4, 256, 16000.0))
    assert Dictionary.for_length(b16, 128, 16000).num_frames == 124
    b48 = build_bank(BankConfig(4, 1024, 48000.0))
    d = Dictionary.for_length(b48, 512, int(round(1.0667 * 48000)))
    assert d.frame_period_s == pytest.approx(0.010667, abs=1e-6)


def _write_corpus(tmp_path, n=3, fs=8000, seed=0):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        p = tmp_path / f"utt{i}.wav"
        write_wav(p, 0.3 * rng.normal(size=int(fs * 0.05)), fs)
        entries.append(ManifestEntry(str(p), i % 2, "train" if i else "test"))
    return DatasetManifest(entries)


def test_encode_dataset_empty_and_basic(tmp_path):
    bank = build_bank(BankConfig(6, 32, 8000.0, 100.0, 3000.0))
    cfg = LcaConfig(0.1)
    empty = encode_dataset(DatasetManifest([]), bank, cfg, 16)
    assert empty.items == [] and empty.failures == []
    ds = encode_dataset(_write_corpus(tmp_path), bank, cfg, 16)
    assert len(ds.items) == 3 and not ds.failures
    for item in ds.items:
        rep = item.representation
        assert rep.grid == (6, Dictionary.for_length(bank, 16, 400).num_frames)
        assert rep.label == item.entry.label
        assert len(rep) == len(item.code)
    assert ds.snapshot["bank_sha256"] == bank.digest()


def test_encode_dataset_collects_failures(tmp_path):
    bank = build_bank(BankConfig(4, 32, 8000.0, 100.0, 3000.0))
    manifest = _write_corpus(tmp_path, n=2)
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"garbage")
    wrong_rate = tmp_path / "rate.wav"
    write_wav(wrong_rate, np.zeros(100), 16000)
    manifest.entries += [ManifestEntry(str(bad), 0, "train"), ManifestEntry(str(wrong_rate), 0, "train")]
    ds = encode_dataset(manifest, bank, LcaConfig(0.1), 16)
    assert len(ds.items) == 2
    assert [f[0] for f in ds.failures] == [str(bad), str(wrong_rate)]


def test_encode_dataset_is_deterministic(tmp_path):
    bank = build_bank(BankConfig(5, 32, 8000.0, 100.0, 3000.0))
    manifest = _write_corpus(tmp_path, n=4)
    runs = [encode_dataset(manifest, bank, LcaConfig(0.1), 16, jobs=j) for j in (1, 1, 2)]
    blobs = [[it.representation.to_bytes() + it.code.to_bytes() for it in r.items] for r in runs]
    assert blobs[0] == blobs[1] == blobs[2]


def test_encode_dataset_pads_to_fixed_duration(tmp_path):
    bank = build_bank(BankConfig(4, 32, 8000.0, 100.0, 3000.0))
    ds = encode_dataset(_write_corpus(tmp_path, n=2), bank, LcaConfig(0.1), 16, pad_seconds=0.1)
    assert {it.representation.grid for it in ds.items} == {(4, 49)}


def test_normalize_examples():
    (out,) = normalize_01([_rep([[0, -0.5]])])
    np.testing.assert_array_equal(out.to_dense(), [[0, 1.0]])
    unit = _rep([[0.2, 0, 1.0], [0.5, 0.0, 0.3]])
    (same,) = normalize_01([unit])
    np.testing.assert_array_equal(same.to_dense(), unit.to_dense())
    train, test = normalize_01([_rep([[2.0]]), _rep([[3.0, -1.0]])], splits=["train", "test"])
    np.testing.assert_array_equal(test.to_dense(), [[1.0, 0.5]])
    with pytest.raises(NormalizationError):
        normalize_01([_rep([[0.0]])])
    with pytest.raises(NormalizationError):
        normalize_01([])


def test_normalize_preserves_sparsity_pattern(rng):
    for _ in range(20):
        dense = rng.normal(size=(5, 7)) * (rng.random((5, 7)) < 0.3)
        reps = [_rep(dense), _rep(rng.normal(size=(5, 7)) * (rng.random((5, 7)) < 0.3))]
        for before, after in zip(reps, normalize_01(reps)):
            assert np.array_equal(before.to_dense() != 0, after.to_dense() != 0)
            assert np.all((after.values > 0) & (after.values <= 1))


def test_bin_spikes_examples():
    rep = bin_spike_times([(0, 0.005)], 0.1, 0.01, 2)
    dense = rep.to_dense()
    assert dense.shape == (2, 10) and dense[0, 0] == 1 and dense.sum() == 1
    rep = bin_spike_times([(1, 0.031), (1, 0.039), (0, 0.031)], 0.1, 0.01, 2)
    assert rep.to_dense()[1, 3] == 2
    assert bin_spike_times([], 1.28, 0.01, 700).grid == (700, 128)
    assert bin_spike_times([(0, 0.1)], 0.1, 0.01, 1).to_dense()[0, -1] == 1
    with pytest.raises(IngestionError):
        bin_spike_times([(0, 0.2)], 0.1, 0.01, 1)
    with pytest.raises(IngestionError):
        bin_spike_times([(3, 0.01)], 0.1, 0.01, 2)
    with pytest.raises(DomainError):
        bin_spike_times([], 0.1, 0.0, 2)


def test_bin_spikes_matches_brute_force(rng):
    for _ in range(20):
        n, k, dur, w = int(rng.integers(0, 300)), 7, 1.0, 0.01
        spikes = [(int(rng.integers(k)), float(rng.uniform(0, dur))) for _ in range(n)]
        ref = np.zeros((k, 100))
        for ch, t in spikes:
            ref[ch, min(int(t / w), 99)] += 1
        rep = bin_spike_times(spikes, dur, w, k)
        np.testing.assert_array_equal(rep.to_dense(), ref)
        assert rep.values.sum() == n


def test_read_spike_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("channel,time\n0,0.01\n3,0.5\n")
    assert read_spike_csv(p) == [(0, 0.01), (3, 0.5)]
    p.write_text("0,x\n")
    with pytest.raises(IngestionError):
        read_spike_csv(p)


def test_sparsity_ratio_examples(rng):
    reps = [_rep(rng.normal(size=(4, 5)) * (rng.random((4, 5)) < 0.5)) for _ in range(3)]
    assert sparsity_ratio(reps, reps) == 1.0
    lca = [_rep((np.arange(40) < 20).reshape(2, 20))]
    ref = [_rep([[100.0]], kind="external_spike_histogram")]
    assert sparsity_ratio(lca, ref) == pytest.approx(0.2)
    with pytest.raises(DomainError):
        sparsity_ratio(lca, [_rep([[0.0]], kind="external_spike_histogram")])
    with pytest.raises(DomainError):
        sparsity_ratio([], ref)


def test_sparsity_ratio_hand_counts_and_scale_invariance(rng):
    for _ in range(10):
        lca_dense = [rng.normal(size=(6, 8)) * (rng.random((6, 8)) < 0.2) for _ in range(4)]
        spikes = [rng.poisson(0.7, size=(6, 8)).astype(float) for _ in range(4)]
        nz = sum(int((d != 0).sum()) for d in lca_dense) / 4
        tot = sum(int(s.sum()) for s in spikes) / 4
        if tot == 0:
            continue
        lca = [_rep(d) for d in lca_dense]
        ref = [_rep(s, kind="external_spike_histogram") for s in spikes]
        assert sparsity_ratio(lca, ref) == nz / tot
        scaled = [r.replace_values(r.values * 7.5) for r in lca]
        assert sparsity_ratio(scaled, ref) == sparsity_ratio(lca, ref)


def test_event_representation_roundtrip(tmp_path, rng):
    rep = _rep(rng.normal(size=(3, 9)) * (rng.random((3, 9)) < 0.4), kind="alca", label=4)
    path = tmp_path / "r.evrp"
    rep.save(path)
    back = EventRepresentation.load(path)
    assert back.to_bytes() == rep.to_bytes()
    assert (back.kind, back.label, back.grid) == ("alca", 4, (3, 9))
    np.testing.assert_array_equal(back.to_dense(), rep.to_dense())
    data = path.read_bytes()
    with pytest.raises(FormatError):
        EventRepresentation.from_bytes(b"EVRQ" + data[4:])
    with pytest.raises(FormatError):
        EventRepresentation.from_bytes(data + b"\x00")
    with pytest.raises(FormatError):
        _rep([[1.0]], kind="mel")


def test_manifest_roundtrip_and_validation(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"")
    (tmp_path / "m.csv").write_text("path,label,split\na.wav,3,train\n")
    m = DatasetManifest.read_csv(tmp_path / "m.csv")
    assert m.entries[0].path == str(tmp_path / "a.wav") and m.entries[0].label == 3
    buf = io.StringIO()
    m.write_csv(buf)
    assert buf.getvalue().splitlines()[1].endswith(",3,train")
    (tmp_path / "dup.csv").write_text("path,label,split\na.wav,3,train\na.wav,3,test\n")
    with pytest.raises(IngestionError):
        DatasetManifest.read_csv(tmp_path / "dup.csv")
    (tmp_path / "miss.csv").write_text("path,label,split\nb.wav,1,train\n")
    with pytest.raises(IngestionError):
        DatasetManifest.read_csv(tmp_path / "miss.csv")
    (tmp_path / "cols.csv").write_text("file,label\na.wav,1\n")
    with pytest.raises(FormatError):
        DatasetManifest.read_csv(tmp_path / "cols.csv")
