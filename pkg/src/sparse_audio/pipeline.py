"""Dataset-level plumbing: WAV ingestion, encoding, normalization, binning, sparsity ratio."""

import csv
import os
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import DomainError, FormatError, IngestionError, NormalizationError, SparseAudioError
from .lca import Dictionary, SparseCode, run_lca

REPR_MAGIC = b"EVRP"
REPR_VERSION = 1
KINDS = ("lca", "alca", "external_spike_histogram")
SPLITS = ("train", "valid", "test")
REPR_EVENT = np.dtype([("channel", "<u4"), ("step", "<u4"), ("value", "<f8")])


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: float
    source_id: str = ""


def load_wav(path):
    """Read a PCM WAV file as mono floats in [-1, 1]."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            fs, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as exc:
        raise IngestionError(f"cannot read WAV: {exc}", path) from exc
    if data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(float)
    else:
        raise IngestionError(f"unsupported sample type {data.dtype}", path)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise IngestionError("WAV file has no samples", path)
    return AudioSignal(x, float(fs), os.path.splitext(os.path.basename(path))[0])


def write_wav(path, samples, sample_rate_hz):
    """Write 16-bit PCM."""
    x = np.clip(np.round(np.asarray(samples, dtype=float) * 32768.0), -32768, 32767)
    wavfile.write(path, int(round(sample_rate_hz)), x.astype(np.int16))


@dataclass
class EventRepresentation:
    channels: np.ndarray
    steps: np.ndarray
    values: np.ndarray
    grid: tuple
    kind: str = "lca"
    label: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"unknown representation kind {self.kind!r}")

    @classmethod
    def from_dense(cls, arr, kind="lca", label=None):
        arr = np.asarray(arr, dtype=float)
        ch, st = np.nonzero(arr)
        return cls(ch.astype(np.uint32), st.astype(np.uint32), arr[ch, st].copy(),
                   tuple(int(n) for n in arr.shape), kind, label)

    def to_dense(self):
        out = np.zeros(self.grid)
        out[self.channels.astype(np.intp), self.steps.astype(np.intp)] = self.values
        return out

    def replace_values(self, values):
        return EventRepresentation(self.channels, self.steps, values, self.grid, self.kind, self.label)

    def __len__(self):
        return len(self.values)

    def to_bytes(self):
        k, t = self.grid
        label = -1 if self.label is None else int(self.label)
        head = REPR_MAGIC + struct.pack(
            "<IIIIiI", REPR_VERSION, k, t, KINDS.index(self.kind), label, len(self.values)
        )
        ev = np.empty(len(self.values), dtype=REPR_EVENT)
        ev["channel"], ev["step"], ev["value"] = self.channels, self.steps, self.values
        return head + ev.tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != REPR_MAGIC:
            raise FormatError("not an event representation (bad magic)")
        head = struct.Struct("<IIIIiI")
        version, k, t, kind, label, n = head.unpack_from(data, 4)
        if version != REPR_VERSION:
            raise FormatError(f"unsupported representation version {version}")
        if kind >= len(KINDS):
            raise FormatError(f"unknown kind code {kind}")
        off = 4 + head.size
        if len(data) != off + n * REPR_EVENT.itemsize:
            raise FormatError("representation file is truncated or has trailing bytes")
        ev = np.frombuffer(data, dtype=REPR_EVENT, count=n, offset=off)
        return cls(ev["channel"].copy(), ev["step"].copy(), ev["value"].astype(float),
                   (k, t), KINDS[kind], None if label < 0 else label)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def activity_count(rep):
    """Spike total for binned spike data, nonzero-coefficient count otherwise."""
    if rep.kind == "external_spike_histogram":
        return float(np.sum(rep.values))
    return float(np.count_nonzero(rep.values))


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    snapshot: dict = field(default_factory=dict)

    def validate(self, check_files=True):
        seen = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise IngestionError(f"unknown split {e.split!r}", e.path)
            if seen.setdefault(e.path, e.split) != e.split:
                raise IngestionError(f"listed in both {seen[e.path]} and {e.split}", e.path)
            if check_files and not os.path.exists(e.path):
                raise IngestionError("file does not exist", e.path)
        return self

    @classmethod
    def read_csv(cls, path, check_files=True):
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or not {"path", "label", "split"} <= set(reader.fieldnames):
                    raise FormatError(f"{path}: manifest needs columns path,label,split")
                for row in reader:
                    p = row["path"]
                    if not os.path.isabs(p):
                        p = os.path.join(base, p)
                    label = row["label"].strip()
                    entries.append(ManifestEntry(p, int(label) if label else None, row["split"].strip()))
        except OSError as exc:
            raise IngestionError(f"cannot read manifest: {exc}", path) from exc
        return cls(entries).validate(check_files)

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in self.entries:
            writer.writerow([e.path, "" if e.label is None else e.label, e.split])


@dataclass
class EncodedItem:
    entry: ManifestEntry
    representation: EventRepresentation
    code: SparseCode
    energy: float
    mse: float


@dataclass
class EncodedDataset:
    items: list
    failures: list  # (path, message)
    snapshot: dict

    @property
    def representations(self):
        return [it.representation for it in self.items]


def fit_length(samples, target_len):
    """Zero-pad or truncate to exactly ``target_len`` samples."""
    if samples.size >= target_len:
        return samples[:target_len]
    return np.concatenate([samples, np.zeros(target_len - samples.size)])


def _encode_one(args):
    entry, bank, stride, cfg, kind, pad_seconds = args
    try:
        audio = load_wav(entry.path)
        fs = bank.config.sample_rate_hz
        if audio.sample_rate_hz != fs:
            raise IngestionError(f"sample rate {audio.sample_rate_hz} != bank rate {fs}", entry.path)
        x = audio.samples
        if pad_seconds is not None:
            x = fit_length(x, int(round(pad_seconds * fs)))
        d = Dictionary.for_length(bank, stride, x.size)
        run = run_lca(d.pad(x), d, cfg)
        a = run.state.activations
        code = SparseCode.from_dense(a, x.size, cfg.threshold, fs, stride)
        rep = EventRepresentation.from_dense(a, kind=kind, label=entry.label)
        return EncodedItem(entry, rep, code, float(run.trace.total[-1]), float(run.trace.mse_term[-1])), None
    except SparseAudioError as exc:
        return None, (entry.path, str(exc))


def encode_dataset(manifest, bank, cfg, stride, kind="lca", pad_seconds=None, jobs=1):
    """Encode every manifest entry; per-file failures are collected, not raised."""
    tasks = [(e, bank, stride, cfg, kind, pad_seconds) for e in manifest.entries]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_encode_one, tasks))
    else:
        results = [_encode_one(t) for t in tasks]
    items = [r for r, _ in results if r is not None]
    failures = [f for _, f in results if f is not None]
    snapshot = {
        "lambda": cfg.threshold,
        "step_ratio": cfg.step_ratio,
        "num_iterations": cfg.num_iterations,
        "bank_sha256": bank.digest(),
        "stride": stride,
        "filter_len": bank.filter_len,
        "sample_rate_hz": bank.config.sample_rate_hz,
        "kind": kind,
        "pad_seconds": pad_seconds,
    }
    return EncodedDataset(items, failures, snapshot)


def max_magnitude(reps):
    return max((float(np.max(np.abs(r.values))) for r in reps if len(r.values)), default=0.0)


def normalize_01(reps, splits=None, scale=None):
    """Map values to |value| / M with M the largest magnitude over the training split.

    ``splits`` parallels ``reps``; when omitted every representation counts as
    training data. Non-training values above M are clipped to 1.
    """
    reps = list(reps)
    if not reps:
        raise NormalizationError("nothing to normalize")
    if splits is None:
        splits = ["train"] * len(reps)
    if scale is None:
        scale = max_magnitude([r for r, s in zip(reps, splits) if s == "train"])
    if not scale > 0:
        raise NormalizationError("training split has no nonzero values")
    return [r.replace_values(np.minimum(np.abs(r.values) / scale, 1.0)) for r in reps]


def bin_spike_times(spike_times, duration, bin_width, num_channels, label=None):
    """Histogram (channel, time) spikes into ``bin_width`` bins over ``[0, duration]``."""
    if not bin_width > 0:
        raise DomainError(f"bin_width must be > 0, got {bin_width}")
    if not duration > 0:
        raise DomainError(f"duration must be > 0, got {duration}")
    n_bins = int(np.ceil(duration / bin_width - 1e-9))
    counts = np.zeros((num_channels, n_bins))
    if len(spike_times):
        arr = np.asarray(spike_times, dtype=float).reshape(-1, 2)
        ch, t = arr[:, 0], arr[:, 1]
        if np.any(t < 0) or np.any(t > duration):
            bad = t[(t < 0) | (t > duration)][0]
            raise IngestionError(f"spike time {bad} outside [0, {duration}]")
        if np.any(ch < 0) or np.any(ch >= num_channels) or np.any(ch != np.round(ch)):
            raise IngestionError(f"spike channel outside [0, {num_channels})")
        bins = np.minimum((t / bin_width).astype(np.intp), n_bins - 1)
        np.add.at(counts, (ch.astype(np.intp), bins), 1.0)
    return EventRepresentation.from_dense(counts, kind="external_spike_histogram", label=label)


def read_spike_csv(path):
    """Rows of ``channel,time`` (seconds); a header row is optional."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise IngestionError(f"cannot read spike file: {exc}", path) from exc
    if rows and not rows[0][0].strip().lstrip("-").replace(".", "", 1).isdigit():
        rows = rows[1:]
    try:
        return [(int(r[0]), float(r[1])) for r in rows]
    except (ValueError, IndexError) as exc:
        raise IngestionError(f"malformed spike row: {exc}", path) from exc


def sparsity_ratio(lca_reps, reference_reps):
    """Mean activity of ``lca_reps`` over mean activity of ``reference_reps``.

    Activity is the nonzero count for coefficient codes and the spike total
    for binned spike data (see :func:`activity_count`).
    """
    if not lca_reps or not reference_reps:
        raise DomainError("sparsity ratio needs two nonempty collections")
    num = np.mean([activity_count(r) for r in lca_reps])
    den = np.mean([activity_count(r) for r in reference_reps])
    if den == 0:
        raise DomainError("reference representation has no activity")
    return float(num / den)
