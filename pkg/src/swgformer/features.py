"""FOA front-end: STFT, log-mel, intensity vectors, and a synthetic scene generator.

Features are stored as [T, F, C] with channel order
[logmel_W, logmel_X, logmel_Y, logmel_Z, IV_x, IV_y, IV_z].

FOA convention is unit-gain W: a plane wave s(t) from unit direction u is
encoded as W = s, (X, Y, Z) = u * s.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .numerics.io import load_tensor, save_tensor

LOG_EPS = 1e-10
IV_EPS = 1e-10
LABEL_HOP_S = 0.1
N_LOGMEL = 4


@dataclass
class SpectralConfig:
    sample_rate: int = 24000
    n_fft: int = 1024
    hop: int = 480
    n_mels: int = 64
    f_min: float = 50.0
    f_max: float = 12000.0
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop={self.hop} must lie in (0, n_fft={self.n_fft}]")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError(f"need 0 <= f_min < f_max <= sr/2, got {self.f_min}, {self.f_max}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass
class AudioClip:
    samples: np.ndarray  # [4, L] in FOA order W, X, Y, Z
    sample_rate: int = 24000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 4:
            raise ValueError(f"FOA clip must be [4, L], got {self.samples.shape}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class FeatureStats:
    """Per-channel standardization; IV channels keep mean 0 / std 1."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n_channels: int = 7) -> "FeatureStats":
        return cls(np.zeros(n_channels), np.ones(n_channels))

    def apply(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean) / self.std


@dataclass
class FeatureTensor:
    data: np.ndarray  # [T, F, 7]
    frame_rate: float

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class EventSpec:
    cls: int
    onset: float
    offset: float
    azimuth: float = 0.0
    elevation: float = 0.0
    path: np.ndarray | None = None  # optional per-label-frame [n_label, 2] az/el (deg)

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"event onset {self.onset} must precede offset {self.offset}")
        if not -180.0 <= self.azimuth < 180.0 or not -90.0 <= self.elevation <= 90.0:
            raise ValueError(f"direction ({self.azimuth}, {self.elevation}) outside az [-180,180), el [-90,90]")


@dataclass
class SceneSpec:
    events: list = field(default_factory=list)
    duration: float = 5.0
    n_classes: int = 13
    snr_db: float | None = None
    sample_rate: int = 24000
    max_overlap: int = 3


# ---------------------------------------------------------------------------
# spectral front end


def stft(clip: AudioClip, cfg: SpectralConfig) -> np.ndarray:
    """Hann-windowed one-sided STFT without centring -> [4, T, n_fft/2+1] complex."""
    x = clip.samples
    if clip.n_samples < cfg.n_fft:
        raise ValueError(f"clip of {clip.n_samples} samples is shorter than one frame (n_fft={cfg.n_fft})")
    T = cfg.n_frames(clip.n_samples)
    win = get_window(cfg.window, cfg.n_fft, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft, axis=1)[:, ::cfg.hop][:, :T]
    return np.fft.rfft(frames * win, axis=-1)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, min_log_mel = 1000.0, 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f < min_log_hz, f / f_sp, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, min_log_mel = 1000.0, 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m < min_log_mel, m * f_sp, min_log_hz * np.exp(logstep * (m - min_log_mel)))


def mel_centers(cfg: SpectralConfig) -> np.ndarray:
    """Hz positions of the n_mels + 2 triangle corners."""
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: SpectralConfig) -> np.ndarray:
    """[n_mels, n_bins] triangles with unit peak at each filter's centre frequency."""
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_centers(cfg)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(spec: np.ndarray, cfg: SpectralConfig, fb: np.ndarray | None = None) -> np.ndarray:
    """[ch, T, bins] complex -> [ch, T, n_mels] log(mel power + 1e-10)."""
    fb = mel_filterbank(cfg) if fb is None else fb
    return np.log((np.abs(spec) ** 2) @ fb.T + LOG_EPS)


def intensity_vectors(spec: np.ndarray, cfg: SpectralConfig, fb: np.ndarray | None = None) -> np.ndarray:
    """Active intensity per mel band, normalized into [-1, 1] -> [3, T, n_mels].

    I = Re{conj(W) [X, Y, Z]} is aggregated through the filterbank and divided
    by the band's |W|^2 + (|X|^2 + |Y|^2 + |Z|^2) / 3. Since |Re{W* X}| <=
    |W||X| <= |W|^2 + |X|^2 / 3 bin by bin and the filter weights are
    non-negative, every component stays in [-1, 1]. A plane wave gives
    IV = 0.75 u.
    """
    fb = mel_filterbank(cfg) if fb is None else fb
    W, XYZ = spec[0], spec[1:]
    inten = np.real(np.conj(W)[None] * XYZ) @ fb.T
    energy = (np.abs(W) ** 2 + (np.abs(XYZ) ** 2).sum(axis=0) / 3.0) @ fb.T
    return inten / (energy + IV_EPS)[None]


def iv_directions(iv: np.ndarray, bands=None) -> np.ndarray:
    """Per-frame unit DoA from [3, T, n_mels] intensity vectors.

    Sums the IVs over ``bands`` (all by default) and normalizes; frames with a
    zero sum come back as zero vectors.
    """
    iv = np.asarray(iv, dtype=np.float64)
    s = iv.sum(axis=-1) if bands is None else iv[..., bands].sum(axis=-1)
    s = s.T  # [T, 3]
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    return np.divide(s, norm, out=np.zeros_like(s), where=norm > 0)


def raw_features(clip: AudioClip, cfg: SpectralConfig) -> np.ndarray:
    """Unstandardized [T, n_mels, 7] features."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate}")
    spec = stft(clip, cfg)
    fb = mel_filterbank(cfg)
    feats = np.concatenate([log_mel(spec, cfg, fb), intensity_vectors(spec, cfg, fb)], axis=0)
    return np.ascontiguousarray(feats.transpose(1, 2, 0))


def compute_stats(features: list[np.ndarray]) -> FeatureStats:
    """Training-corpus mean/std of the log-mel channels over all frames and bands."""
    if not features:
        return FeatureStats.identity()
    stack = np.concatenate([f.reshape(-1, f.shape[-1]) for f in features], axis=0)
    mean = np.zeros(stack.shape[1])
    std = np.ones(stack.shape[1])
    mean[:N_LOGMEL] = stack[:, :N_LOGMEL].mean(axis=0)
    sd = stack[:, :N_LOGMEL].std(axis=0)
    std[:N_LOGMEL] = np.where(sd > 1e-8, sd, 1.0)
    return FeatureStats(mean, std)


def extract_features(clip: AudioClip, cfg: SpectralConfig, stats: FeatureStats | None = None) -> FeatureTensor:
    raw = raw_features(clip, cfg)
    data = stats.apply(raw) if stats is not None else raw
    return FeatureTensor(data.astype(np.float32), cfg.frame_rate)


def fit_frames(data: np.ndarray, frames: int) -> np.ndarray:
    """Pad (by repeating the last frame) or crop the time axis to ``frames``."""
    T = data.shape[0]
    if T >= frames:
        return data[:frames]
    return np.concatenate([data, np.repeat(data[-1:], frames - T, axis=0)], axis=0)


# ---------------------------------------------------------------------------
# synthetic FOA scenes


def unit_vector(az_deg, el_deg) -> np.ndarray:
    az, el = np.deg2rad(az_deg), np.deg2rad(el_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def class_band(cls: int, n_classes: int, f_lo: float = 200.0, f_hi: float = 8000.0) -> tuple[float, float]:
    """Disjoint log-spaced pass band of class ``cls``."""
    edges = np.geomspace(f_lo, f_hi, n_classes + 1)
    return float(edges[cls]), float(edges[cls + 1])


def class_signal(cls: int, n_classes: int, n_samples: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS band-limited noise in the class's pass band."""
    lo, hi = class_band(cls, n_classes)
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sr)
    spectrum[(freqs < lo) | (freqs >= hi)] = 0.0
    s = np.fft.irfft(spectrum, n=n_samples)
    rms = np.sqrt(np.mean(s ** 2))
    return s / rms if rms > 0 else s


def _check_scene(spec: SceneSpec) -> None:
    evs = spec.events
    for e in evs:
        if not 0 <= e.cls < spec.n_classes:
            raise ValueError(f"event class {e.cls} outside [0, {spec.n_classes})")
        if e.onset < 0 or e.offset > spec.duration + 1e-9:
            raise ValueError(f"event [{e.onset}, {e.offset}] outside the {spec.duration} s clip")
    for i, a in enumerate(evs):
        for b in evs[i + 1:]:
            overlap = a.onset < b.offset and b.onset < a.offset
            if overlap and a.cls == b.cls and a.path is None and b.path is None and \
                    np.isclose(a.azimuth, b.azimuth) and np.isclose(a.elevation, b.elevation):
                raise ValueError(f"duplicate overlapping events: class {a.cls} at ({a.azimuth}, {a.elevation})")
    bounds = sorted({e.onset for e in evs} | {e.offset for e in evs})
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        mid = 0.5 * (lo + hi)
        active = sum(e.onset <= mid < e.offset for e in evs)
        if active > spec.max_overlap:
            raise ValueError(f"{active} simultaneous events at t={mid:.2f} s exceed max_overlap={spec.max_overlap}")


def _event_directions(e: EventSpec, n_label: int) -> np.ndarray:
    """[n_label, 2] az/el per label frame (constant unless a path is given)."""
    if e.path is None:
        return np.tile([e.azimuth, e.elevation], (n_label, 1)).astype(float)
    path = np.asarray(e.path, dtype=float)
    if path.shape != (n_label, 2):
        raise ValueError(f"motion path must be [{n_label}, 2], got {path.shape}")
    return path


def label_frames_of(e: EventSpec, n_label: int) -> np.ndarray:
    """Label frames whose centre lies inside [onset, offset)."""
    centres = (np.arange(n_label) + 0.5) * LABEL_HOP_S
    return np.nonzero((centres >= e.onset) & (centres < e.offset))[0]


def synth_foa_scene(spec: SceneSpec, rng: np.random.Generator, peak: float = 0.9):
    """Render a scene to a 4-channel FOA clip plus annotation rows.

    Rows are (frame_idx, class_idx, source_idx, azimuth_deg, elevation_deg),
    one per 100 ms label frame per active event; ``source_idx`` is the event's
    position in ``spec.events``.
    """
    _check_scene(spec)
    sr = spec.sample_rate
    L = int(round(spec.duration * sr))
    n_label = int(round(spec.duration / LABEL_HOP_S))
    hop = int(round(LABEL_HOP_S * sr))
    out = np.zeros((4, L))
    rows = []
    for src, e in enumerate(spec.events):
        start, stop = int(round(e.onset * sr)), min(L, int(round(e.offset * sr)))
        s = np.zeros(L)
        s[start:stop] = class_signal(e.cls, spec.n_classes, stop - start, sr, rng)
        dirs = _event_directions(e, n_label)
        u_frames = unit_vector(dirs[:, 0], dirs[:, 1])  # [n_label, 3]
        u = np.repeat(u_frames, hop, axis=0)[:L]
        if len(u) < L:
            u = np.concatenate([u, np.repeat(u[-1:], L - len(u), axis=0)])
        out[0] += s
        out[1:] += u.T * s
        for l in label_frames_of(e, n_label):
            rows.append((int(l), e.cls, src, float(dirs[l, 0]), float(dirs[l, 1])))
    if spec.snr_db is not None and spec.events:
        sig_power = np.mean(out[0] ** 2)
        if sig_power > 0:
            noise_power = sig_power / 10 ** (spec.snr_db / 10)
            noise = rng.standard_normal((4, L)) * np.sqrt(noise_power)
            noise[1:] /= np.sqrt(3.0)  # diffuse field: XYZ carry a third of W's power each
            out += noise
    m = np.abs(out).max()
    if m > 0:
        out *= peak / m
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return AudioClip(out, sr), rows


def random_scene_spec(rng: np.random.Generator, n_classes: int = 13, duration: float = 5.0,
                      max_overlap: int = 3, n_events: int | None = None, min_len: float = 1.0,
                      snr_db: float | None = None, sample_rate: int = 24000) -> SceneSpec:
    """Random static events on the 100 ms grid; same-class events never overlap."""
    if not 1 <= max_overlap <= 3:
        raise ValueError(f"max_overlap must be in [1, 3], got {max_overlap}")
    n_label = int(round(duration / LABEL_HOP_S))
    min_frames = max(1, int(round(min_len / LABEL_HOP_S)))
    n_events = int(rng.integers(1, max_overlap + 2)) if n_events is None else n_events
    events: list[EventSpec] = []
    active = np.zeros(n_label, dtype=int)
    class_busy = np.zeros((n_classes, n_label), dtype=bool)
    for _ in range(50 * max(1, n_events)):
        if len(events) == n_events:
            break
        length = int(rng.integers(min_frames, n_label + 1))
        start = int(rng.integers(0, n_label - length + 1))
        cls = int(rng.integers(n_classes))
        span = slice(start, start + length)
        if (active[span] >= max_overlap).any() or class_busy[cls, span].any():
            continue
        az = float(rng.integers(-180, 180))
        el = float(rng.integers(-45, 46))
        events.append(EventSpec(cls, start * LABEL_HOP_S, (start + length) * LABEL_HOP_S, az, el))
        active[span] += 1
        class_busy[cls, span] = True
    return SceneSpec(events, duration, n_classes, snr_db, sample_rate, max_overlap)


# ---------------------------------------------------------------------------
# file formats


def write_wav(path, clip: AudioClip, subtype: str = "PCM_16") -> None:
    data = clip.samples.T
    if subtype == "PCM_16":
        wavfile.write(path, clip.sample_rate, np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2"))
    elif subtype == "FLOAT":
        wavfile.write(path, clip.sample_rate, data.astype("<f4"))
    else:
        raise ValueError(f"unsupported WAV subtype {subtype!r}")


def read_wav(path) -> AudioClip:
    """4-channel RIFF WAV (PCM 16/24/32-bit or float) -> AudioClip in [-1, 1]."""
    sr, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 4:
        raise ValueError(f"{path}: expected 4 FOA channels, got shape {data.shape}")
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:  # 24-bit PCM is left-aligned into int32 by scipy
        x = data / 2147483648.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample type {data.dtype}")
    return AudioClip(x.T, sr)


def write_annotations(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for frame, cls, src, az, el in rows:
            w.writerow([int(frame), int(cls), int(src), f"{az:.4f}", f"{el:.4f}"])


def read_annotations(path) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if len(rec) < 5:
                raise ValueError(f"{path}:{lineno}: expected 5 columns, got {len(rec)}")
            rows.append((int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3]), float(rec[4])))
    return rows


def save_features(path, feat: FeatureTensor, cfg: SpectralConfig, stats: FeatureStats | None = None) -> None:
    """SWGT tensor plus a ``<path>.hdr`` sidecar echoing the config and stats."""
    save_tensor(path, feat.data)
    stats = stats or FeatureStats.identity(feat.data.shape[-1])
    buf = io.StringIO()
    for key, value in dataclasses.asdict(cfg).items():
        buf.write(f"{key}={value}\n")
    buf.write(f"frame_rate={feat.frame_rate!r}\n")
    buf.write("mean=" + ",".join(repr(float(v)) for v in stats.mean) + "\n")
    buf.write("std=" + ",".join(repr(float(v)) for v in stats.std) + "\n")
    Path(str(path) + ".hdr").write_text(buf.getvalue())


def read_header(path) -> dict:
    hdr = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            hdr[k] = v
    return hdr


def load_features(path) -> FeatureTensor:
    data = load_tensor(path)
    hdr = read_header(path) if Path(str(path) + ".hdr").exists() else {}
    return FeatureTensor(data, float(hdr.get("frame_rate", 50.0)))


def stats_from_header(hdr: dict) -> FeatureStats:
    return FeatureStats(np.array([float(v) for v in hdr["mean"].split(",")]),
                        np.array([float(v) for v in hdr["std"].split(",")]))


def save_stats(path, stats: FeatureStats) -> None:
    Path(path).write_text("mean=" + ",".join(repr(float(v)) for v in stats.mean) + "\n"
                          + "std=" + ",".join(repr(float(v)) for v in stats.std) + "\n")


def load_stats(path) -> FeatureStats:
    hdr = dict(line.split("=", 1) for line in Path(path).read_text().splitlines() if "=" in line)
    return stats_from_header(hdr)
