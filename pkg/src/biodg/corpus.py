"""Recordings, windows, domain manifests and the synthetic heart-sound generator."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (
    BalanceError,
    ConfigError,
    EmptyInputError,
    FoldError,
    TooShortError,
    UnsupportedEncodingError,
    WavFormatError,
)

CANONICAL_RATE_HZ = 2000
WINDOW_S = 1.0
DEFAULT_TRIM_S = 0.5
CLASSES = ("normal", "abnormal")


def class_index(label: str) -> int:
    try:
        return CLASSES.index(label)
    except ValueError:
        raise ConfigError(f"unknown class label {label!r}; expected one of {CLASSES}") from None


@dataclass(frozen=True)
class SignalRecord:
    record_id: str
    domain_id: str
    class_label: str
    sample_rate_hz: int
    samples: np.ndarray = field(repr=False)
    patient_id: str | None = None

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"record {self.record_id}: sample rate must be positive")
        if len(self.samples) == 0:
            raise EmptyInputError(f"record {self.record_id} has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError(f"record {self.record_id} has non-finite samples")
        class_index(self.class_label)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class WindowedInstance:
    source_record_id: str
    domain_id: str
    class_label: str
    window_start_s: float
    samples: np.ndarray = field(repr=False)


@dataclass
class DomainManifest:
    domain_id: str
    role: str
    window_shift_s: float
    trim_s: float = DEFAULT_TRIM_S
    canonical_rate_hz: int = CANONICAL_RATE_HZ
    provenance: str = "synthetic"
    seed: int | None = None
    counts: dict = field(default_factory=lambda: {c: 0 for c in CLASSES})

    def __post_init__(self):
        if self.role not in ("basis", "unseen"):
            raise ConfigError(f"domain {self.domain_id}: role must be 'basis' or 'unseen'")
        if self.window_shift_s <= 0:
            raise ConfigError(f"domain {self.domain_id}: window shift must be positive")

    def to_json(self) -> dict:
        return asdict(self)


# WAV

_INT_SCALE = {1: 128.0, 2: 32768.0, 3: 8388608.0, 4: 2147483648.0}


def read_wav(path) -> tuple[np.ndarray, int]:
    """Parse a RIFF/WAVE file; returns (first-channel samples in [-1, 1], rate)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too small")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if tag == 0xFFFE:  # WAVE_FORMAT_EXTENSIBLE carries the real tag in the sub-format GUID
        raw_fmt = raw[raw.index(b"fmt ") + 8:]
        tag = struct.unpack("<H", raw_fmt[24:26])[0]
    if channels < 1 or rate <= 0 or block_align == 0:
        raise WavFormatError(f"{path}: invalid fmt fields")
    width = bits // 8
    if tag == 1 and bits in (8, 16, 24, 32):
        n = len(data) // block_align
        if n == 0:
            raise EmptyInputError(f"{path}: no audio frames")
        frames = np.frombuffer(data[:n * block_align], dtype=np.uint8).reshape(n, block_align)
        b = frames[:, :width]
        if width == 1:
            vals = b[:, 0].astype(np.float64) - 128.0
        elif width == 3:
            as32 = (b[:, 0].astype(np.int32) | (b[:, 1].astype(np.int32) << 8) | (b[:, 2].astype(np.int32) << 16))
            vals = np.where(as32 >= 1 << 23, as32 - (1 << 24), as32).astype(np.float64)
        else:
            vals = np.frombuffer(b.tobytes(), dtype=f"<i{width}").astype(np.float64)
        return vals / _INT_SCALE[width], int(rate)
    if tag == 3 and bits == 32:
        n = len(data) // block_align
        if n == 0:
            raise EmptyInputError(f"{path}: no audio frames")
        frames = np.frombuffer(data[:n * block_align], dtype=np.uint8).reshape(n, block_align)
        vals = np.frombuffer(frames[:, :4].tobytes(), dtype="<f4").astype(np.float64)
        return np.clip(vals, -1.0, 1.0), int(rate)
    raise UnsupportedEncodingError(f"{path}: format tag {tag} with {bits} bits is not supported")


def write_wav(path, samples, rate: int, encoding: str = "float32") -> None:
    """Mono WAV writer (``float32`` or ``pcm16``)."""
    x = np.asarray(samples, dtype=np.float64)
    if encoding == "float32":
        payload, tag, bits = x.astype("<f4").tobytes(), 3, 32
    elif encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload, tag, bits = q.tobytes(), 1, 16
    else:
        raise UnsupportedEncodingError(encoding)
    align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, rate, rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def ingest_wav(path, domain_id: str, class_label: str, record_id: str | None = None,
               patient_id: str | None = None) -> SignalRecord:
    samples, rate = read_wav(path)
    return SignalRecord(
        record_id=record_id or Path(path).stem,
        domain_id=domain_id,
        class_label=class_label,
        sample_rate_hz=rate,
        samples=samples,
        patient_id=patient_id,
    )


def resample(record: SignalRecord, target_hz: int) -> SignalRecord:
    """Linear-interpolation resampling onto a ``target_hz`` grid starting at t=0."""
    if target_hz <= 0:
        raise ConfigError("target rate must be positive")
    if target_hz == record.sample_rate_hz:
        return record
    n = len(record.samples)
    n_out = max(1, int(round(n * target_hz / record.sample_rate_hz)))
    t_src = np.arange(n) / record.sample_rate_hz
    t_out = np.arange(n_out) / target_hz
    out = np.interp(t_out, t_src, record.samples)
    return SignalRecord(record.record_id, record.domain_id, record.class_label, int(target_hz), out,
                        record.patient_id)


def window_record(record: SignalRecord, shift_s: float, trim_s: float = DEFAULT_TRIM_S,
                  window_s: float = WINDOW_S) -> list[WindowedInstance]:
    """Cut 1 s windows from ``[trim_s, duration - trim_s]`` every ``shift_s`` seconds.

    All arithmetic is done in whole samples so the window count is exactly
    ``floor((usable - window) / shift) + 1``.
    """
    if shift_s <= 0 or trim_s < 0:
        raise ConfigError("shift must be positive and trim nonnegative")
    rate = record.sample_rate_hz
    win = int(round(window_s * rate))
    trim = int(round(trim_s * rate))
    hop = int(round(shift_s * rate))
    if hop <= 0:
        raise ConfigError(f"shift {shift_s}s is below one sample at {rate} Hz")
    usable = len(record.samples) - 2 * trim
    if usable < win:
        raise TooShortError(
            f"record {record.record_id} lasts {record.duration_s:.3f}s; needs at least "
            f"{2 * trim_s + window_s:.3f}s (trim {trim_s}s at both ends + {window_s}s window)"
        )
    count = (usable - win) // hop + 1
    out = []
    for k in range(count):
        start = trim + k * hop
        out.append(WindowedInstance(
            source_record_id=record.record_id,
            domain_id=record.domain_id,
            class_label=record.class_label,
            window_start_s=start / rate,
            samples=record.samples[start:start + win].copy(),
        ))
    return out


# synthetic corpora

@dataclass
class SynthConfig:
    seed: int
    heart_rate_bpm: tuple[float, float] = (60.0, 90.0)
    s1_center_hz: float = 60.0
    s2_center_hz: float = 90.0
    murmur_band_hz: tuple[float, float] = (200.0, 350.0)
    murmur_gain: float = 0.4
    device_coloration: tuple[float, float] = (1.0, 1.0)  # (low-shelf gain, high-shelf gain)
    shelf_crossover_hz: float = 150.0
    noise_std: float = 0.02
    hum_hz: float | None = None  # constant device tone
    hum_gain: float = 0.0
    n_records: tuple[int, int] = (10, 10)  # (normal, abnormal)
    record_s: float = 5.8
    rate_hz: int = CANONICAL_RATE_HZ

    def validate(self):
        nyq = self.rate_hz / 2
        freqs = [self.s1_center_hz, self.s2_center_hz, *self.murmur_band_hz, self.shelf_crossover_hz]
        if self.hum_hz is not None:
            freqs.append(self.hum_hz)
        if any(f >= nyq for f in freqs):
            raise ConfigError(f"synthetic frequencies {freqs} must lie below Nyquist ({nyq} Hz)")
        if any(f <= 0 for f in freqs):
            raise ConfigError("synthetic frequencies must be positive")
        lo, hi = self.murmur_band_hz
        if lo >= hi:
            raise ConfigError("murmur band must have low < high")
        if self.murmur_gain < 0 or self.noise_std < 0 or self.hum_gain < 0:
            raise ConfigError("murmur_gain, noise_std and hum_gain must be nonnegative")
        if self.heart_rate_bpm[0] <= 0 or self.heart_rate_bpm[0] > self.heart_rate_bpm[1]:
            raise ConfigError("heart rate range must be positive and ordered")
        if min(self.n_records) < 0:
            raise ConfigError("record counts must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthesis keys: {sorted(unknown)}")
        for key in ("heart_rate_bpm", "murmur_band_hz", "device_coloration", "n_records"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _burst(t, center_s, freq_hz, width_s, phase):
    env = np.exp(-0.5 * ((t - center_s) / width_s) ** 2)
    return env * np.sin(2 * np.pi * freq_hz * (t - center_s) + phase)


def synthesize_record(cfg: SynthConfig, domain_id: str, class_label: str, index: int) -> SignalRecord:
    """One recording; a pure function of (cfg, class, index)."""
    ci = class_index(class_label)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ci, index]))
    rate = cfg.rate_hz
    n = int(round(cfg.record_s * rate))
    t = np.arange(n) / rate
    bpm = rng.uniform(*cfg.heart_rate_bpm)
    rr = 60.0 / bpm
    x = np.zeros(n)
    murmur_mask = np.zeros(n)
    beat = rng.uniform(0.0, rr)
    first = beat - rr
    while first < cfg.record_s + rr:
        jitter = rr * rng.uniform(-0.03, 0.03)
        s1 = first + jitter
        systole = 0.3 * rr + 0.08
        s2 = s1 + systole
        f1 = cfg.s1_center_hz * rng.uniform(0.95, 1.05)
        f2 = cfg.s2_center_hz * rng.uniform(0.95, 1.05)
        x += rng.uniform(0.8, 1.0) * _burst(t, s1, f1, 0.02, rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.5, 0.7) * _burst(t, s2, f2, 0.015, rng.uniform(0, 2 * np.pi))
        lo, hi = s1 + 0.05, s2 - 0.03
        murmur_mask += np.where((t > lo) & (t < hi), np.sin(np.pi * np.clip((t - lo) / max(hi - lo, 1e-6), 0, 1)), 0)
        first += rr
    if ci == 1 and cfg.murmur_gain > 0:
        sos = sps.butter(4, cfg.murmur_band_hz, btype="bandpass", fs=rate, output="sos")
        noise = sps.sosfiltfilt(sos, rng.standard_normal(n))
        noise /= max(noise.std(), 1e-12)
        x += cfg.murmur_gain * murmur_mask * noise
    else:
        rng.standard_normal(n)  # keep the stream position identical across classes
    x += cfg.noise_std * rng.standard_normal(n)
    if cfg.hum_hz is not None and cfg.hum_gain > 0:
        x += cfg.hum_gain * np.sin(2 * np.pi * cfg.hum_hz * t + rng.uniform(0, 2 * np.pi))
    low_gain, high_gain = cfg.device_coloration
    if low_gain != 1.0 or high_gain != 1.0:
        sos_lp = sps.butter(2, cfg.shelf_crossover_hz, btype="lowpass", fs=rate, output="sos")
        low = sps.sosfiltfilt(sos_lp, x)
        x = low_gain * low + high_gain * (x - low)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.9 * x / peak
    rid = f"{domain_id}-{class_label[0]}{index:03d}"
    return SignalRecord(rid, domain_id, class_label, rate, x, patient_id=rid)


@dataclass
class SyntheticDomain:
    manifest: DomainManifest
    records: list
    instances: list


def generate_synthetic_domain(cfg: SynthConfig, domain_id: str, role: str = "basis",
                              window_shift_s: float = 0.2, trim_s: float = DEFAULT_TRIM_S) -> SyntheticDomain:
    cfg.validate()
    records = [
        synthesize_record(cfg, domain_id, label, i)
        for label, count in zip(CLASSES, cfg.n_records)
        for i in range(count)
    ]
    instances = [w for r in records for w in window_record(r, window_shift_s, trim_s)]
    counts = {c: sum(1 for w in instances if w.class_label == c) for c in CLASSES}
    manifest = DomainManifest(domain_id, role, window_shift_s, trim_s, cfg.rate_hz, "synthetic", cfg.seed, counts)
    return SyntheticDomain(manifest, records, instances)


# folds and balancing

def split_folds(items, k: int, seed: int) -> list[np.ndarray]:
    """Record-atomic, class-stratified k-fold partition of instance indices.

    ``items`` are instances (anything with ``source_record_id`` and
    ``class_label``) or ``(record_id, class_label)`` pairs. Records of each
    class are shuffled and dealt round-robin, continuing the deal across
    classes so fold sizes differ by at most one record.
    """
    if k < 2:
        raise FoldError("k must be at least 2")
    pairs = [(it.source_record_id, it.class_label) if hasattr(it, "source_record_id") else tuple(it)
             for it in items]
    rec_class: dict[str, str] = {}
    for rid, label in pairs:
        if rec_class.setdefault(rid, label) != label:
            raise FoldError(f"record {rid} has windows with conflicting class labels")
    if len(rec_class) < k:
        raise FoldError(f"{len(rec_class)} records cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    deal = 0
    for label in CLASSES + tuple(sorted(set(rec_class.values()) - set(CLASSES))):
        rids = sorted(r for r, c in rec_class.items() if c == label)
        for j in rng.permutation(len(rids)):
            fold_of[rids[j]] = deal % k
            deal += 1
    folds = [[] for _ in range(k)]
    for idx, (rid, _) in enumerate(pairs):
        folds[fold_of[rid]].append(idx)
    return [np.asarray(f, dtype=np.int64) for f in folds]


def balance_classes(instances, seed: int, labels=None) -> list:
    """Undersample the majority class to the minority count (original order kept).

    ``labels`` may be passed when ``instances`` are not WindowedInstance objects.
    """
    labels = [w.class_label for w in instances] if labels is None else list(labels)
    by_class: dict = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    if len(by_class) < 2:
        raise BalanceError("balancing needs both classes present")
    m = min(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    keep = []
    for lab in sorted(by_class):
        idx = by_class[lab]
        keep.extend(idx if len(idx) == m else sorted(rng.choice(idx, size=m, replace=False).tolist()))
    keep.sort()
    return [instances[i] for i in keep]


# manifests on disk

def write_domain(out_dir, manifest: DomainManifest, records, instances) -> Path:
    """Write records as float32 WAV plus the manifest header and instance rows."""
    out = Path(out_dir)
    rec_dir = out / "records" / manifest.domain_id
    rec_dir.mkdir(parents=True, exist_ok=True)
    for r in records:
        write_wav(rec_dir / f"{r.record_id}.wav", r.samples, r.sample_rate_hz)
    rows = [
        {
            "record_id": w.source_record_id,
            "window_start_s": w.window_start_s,
            "class": w.class_label,
            "sample_path": f"records/{manifest.domain_id}/{w.source_record_id}.wav",
        }
        for w in instances
    ]
    write_manifest(out, manifest, rows)
    return out / f"{manifest.domain_id}.manifest.json"


def write_manifest(out_dir, manifest: DomainManifest, rows) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.counts = {c: sum(1 for r in rows if r["class"] == c) for c in CLASSES}
    (out / f"{manifest.domain_id}.manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True))
    with open(out / f"{manifest.domain_id}.instances.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(corpus_dir, domain_id: str) -> tuple[DomainManifest, list[dict]]:
    d = Path(corpus_dir)
    header = json.loads((d / f"{domain_id}.manifest.json").read_text())
    manifest = DomainManifest(**header)
    rows = [json.loads(line) for line in (d / f"{domain_id}.instances.jsonl").read_text().splitlines() if line]
    counts = {c: sum(1 for r in rows if r["class"] == c) for c in CLASSES}
    if counts != {c: manifest.counts.get(c, 0) for c in CLASSES}:
        raise ConfigError(f"domain {domain_id}: manifest counts {manifest.counts} disagree with rows {counts}")
    return manifest, rows


def list_domains(corpus_dir) -> list[str]:
    """Domain ids in the corpus, ordered by corpus.json when present, else by name."""
    d = Path(corpus_dir)
    index = d / "corpus.json"
    if index.exists():
        return list(json.loads(index.read_text())["domains"])
    return sorted(p.name[: -len(".manifest.json")] for p in d.glob("*.manifest.json"))


def load_window(corpus_dir, domain_id: str, row: dict, cache=None) -> WindowedInstance:
    """Re-cut one window from its source record (records are cached per call site)."""
    path = Path(corpus_dir) / row["sample_path"]
    key = str(path)
    if cache is not None and key in cache:
        samples, rate = cache[key]
    else:
        samples, rate = read_wav(path)
        if cache is not None:
            cache[key] = (samples, rate)
    start = int(round(row["window_start_s"] * rate))
    win = int(round(WINDOW_S * rate))
    seg = samples[start:start + win]
    if len(seg) != win:
        raise TooShortError(f"{path}: window at {row['window_start_s']}s runs past the end")
    return WindowedInstance(row["record_id"], domain_id, row["class"], row["window_start_s"], seg)
