"""Audio front end: WAV I/O, resampling, log-mel features, normalization, noise mixing."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.io.wavfile
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

TARGET_SR = 16000
STD_FLOOR = 1e-8


class AudioError(ValueError):
    """Unreadable, malformed or unsupported audio input."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"{self.source_id or 'clip'}: samples must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError(f"{self.source_id or 'clip'}: non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = TARGET_SR
    n_fft: int = 1024
    hop: int = 500
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    n_frames: Optional[int] = 160
    clip_seconds: float = 5.0
    log_floor: float = 1e-10


@dataclass
class MelSpectrogram:
    bins: np.ndarray  # n_mels × n_frames, float32
    frame_hop: int
    clip_ref: str = ""

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


# -- WAV I/O ------------------------------------------------------------------
def load_wav(path) -> AudioClip:
    """Read a PCM or float WAV file as mono float samples in [-1, 1]."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.io.wavfile.WavFileWarning)
            rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: no such file") from None
    except (ValueError, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: cannot decode WAV ({exc})") from None
    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"{path}: no samples")
    if not np.all(np.isfinite(x)):
        raise AudioError(f"{path}: non-finite samples")
    return AudioClip(x, int(rate), path.stem)


def write_wav(path, clip: AudioClip, sample_format: str = "pcm16") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if sample_format == "pcm16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    elif sample_format == "float32":
        data = clip.samples.astype("<f4")
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    scipy.io.wavfile.write(path, clip.sample_rate, data)


# -- resampling ---------------------------------------------------------------
def resample(clip: AudioClip, target_hz: int = TARGET_SR) -> AudioClip:
    """Band-limited polyphase (Kaiser-windowed sinc) downsampling."""
    src = clip.sample_rate
    if src == target_hz:
        return clip
    if src < target_hz:
        raise AudioError(f"{clip.source_id}: upsampling {src} Hz -> {target_hz} Hz is unsupported")
    g = math.gcd(src, target_hz)
    up, down = target_hz // g, src // g
    n_out = int(round(len(clip.samples) * target_hz / src))
    y = scipy.signal.resample_poly(clip.samples, up, down, padtype="line")
    y = y[:n_out] if len(y) >= n_out else np.pad(y, (0, n_out - len(y)))
    return AudioClip(y, target_hz, clip.source_id)


def fix_length(clip: AudioClip, seconds: float) -> AudioClip:
    """Zero-pad at the tail or center-crop to exactly ``seconds``."""
    n = int(round(seconds * clip.sample_rate))
    x = clip.samples
    if len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    elif len(x) > n:
        start = (len(x) - n) // 2
        x = x[start : start + n]
    return AudioClip(x, clip.sample_rate, clip.source_id)


# -- log-mel ------------------------------------------------------------------
def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp, min_log_hz = 200.0 / 3, 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mel)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp, min_log_hz = 200.0 / 3, 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular, area-normalized mel filters, ``n_mels × (n_fft//2 + 1)``."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fdiff = np.diff(mel_f)
    ramps = mel_f[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_f[2:] - mel_f[:-2]))[:, None]
    return weights


_FB_CACHE: dict = {}


def _filterbank(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def stft_magnitude(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered magnitude STFT with a periodic Hann window, ``(n_fft//2+1) × frames``."""
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad))
    frames = sliding_window_view(xp, n_fft)[::hop]
    window = scipy.signal.get_window("hann", n_fft, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def logmel(clip: AudioClip, cfg: Optional[FeatureConfig] = None) -> MelSpectrogram:
    cfg = cfg or FeatureConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise AudioError(f"{clip.source_id}: expected {cfg.sample_rate} Hz audio, got {clip.sample_rate} Hz")
    if len(clip.samples) < cfg.n_fft:
        raise AudioError(f"{clip.source_id}: clip of {len(clip.samples)} samples is shorter than one window ({cfg.n_fft})")
    mag = stft_magnitude(clip.samples, cfg.n_fft, cfg.hop)
    bins = np.log(_filterbank(cfg) @ mag + cfg.log_floor)
    if cfg.n_frames is not None:
        if bins.shape[1] >= cfg.n_frames:
            bins = bins[:, : cfg.n_frames]
        else:
            fill = np.full((cfg.n_mels, cfg.n_frames - bins.shape[1]), math.log(cfg.log_floor))
            bins = np.concatenate([bins, fill], axis=1)
    return MelSpectrogram(bins.astype(np.float32), cfg.hop, clip.source_id)


# -- normalization --------------------------------------------------------------
@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    n_clips_fitted: int

    def to_json(self) -> str:
        return json.dumps(
            {"mean": self.mean.tolist(), "std": self.std.tolist(), "n_clips_fitted": self.n_clips_fitted}
        )

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        d = json.loads(text)
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), int(d["n_clips_fitted"]))


def fit_norm(train_specs: Sequence) -> NormStats:
    """Per-bin mean and std over every frame of the training spectrograms."""
    specs = [s.bins if isinstance(s, MelSpectrogram) else np.asarray(s) for s in train_specs]
    if not specs:
        raise ValueError("cannot fit normalization statistics on an empty set")
    n_bins = specs[0].shape[0]
    count = 0
    total = np.zeros(n_bins)
    for b in specs:
        total += b.sum(axis=1, dtype=np.float64)
        count += b.shape[1]
    mean = total / count
    sq = np.zeros(n_bins)
    for b in specs:
        d = b.astype(np.float64) - mean[:, None]
        sq += (d * d).sum(axis=1)
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return NormStats(mean, std, len(specs))


def apply_norm(spec, stats: Optional[NormStats]):
    if stats is None or stats.n_clips_fitted == 0:
        raise RuntimeError("normalization statistics have not been fitted")
    bins = spec.bins if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    out = ((bins - stats.mean[:, None]) / stats.std[:, None]).astype(np.float32)
    if isinstance(spec, MelSpectrogram):
        return MelSpectrogram(out, spec.frame_hop, spec.clip_ref)
    return out


# -- noise mixing ---------------------------------------------------------------
@dataclass
class MixInfo:
    offset: int
    gain: float
    snr_db: float
    peak_scale: float = 1.0


def active_mask(x: np.ndarray, frame: int = 320, floor_db: float = -60.0) -> np.ndarray:
    """Samples inside frames whose energy is within ``floor_db`` of the loudest frame."""
    n_frames = -(-len(x) // frame)
    padded = np.pad(x, (0, n_frames * frame - len(x)))
    energy = (padded.reshape(n_frames, frame) ** 2).sum(axis=1)
    active = energy >= energy.max() * 10 ** (floor_db / 10)
    return np.repeat(active, frame)[: len(x)]


def mix_noise(
    event: AudioClip,
    scene: AudioClip,
    snr_db: float,
    seed=None,
    return_info: bool = False,
):
    """Add a random crop of ``scene`` to ``event`` at the requested SNR.

    Power is measured over the event's active frames. ``snr_db=inf`` returns
    the event untouched. The mix is peak-normalized when it would clip.
    """
    if event.sample_rate != scene.sample_rate:
        raise AudioError(f"sample rate mismatch: event {event.sample_rate} Hz, scene {scene.sample_rate} Hz")
    if math.isinf(snr_db) and snr_db > 0:
        out = AudioClip(event.samples.copy(), event.sample_rate, event.source_id)
        return (out, MixInfo(0, 0.0, snr_db)) if return_info else out
    n = len(event.samples)
    if len(scene.samples) < n:
        raise AudioError(f"scene {scene.source_id} ({len(scene.samples)} samples) is shorter than event ({n})")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, len(scene.samples) - n + 1))
    crop = scene.samples[offset : offset + n]
    mask = active_mask(event.samples)
    p_event = float(np.mean(event.samples[mask] ** 2))
    p_scene = float(np.mean(crop[mask] ** 2))
    if p_scene <= 0:
        raise AudioError(f"scene {scene.source_id} is silent over the event's active region")
    gain = math.sqrt(p_event / (p_scene * 10 ** (snr_db / 10)))
    out = event.samples + gain * crop
    peak = float(np.max(np.abs(out)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    out = out * scale
    clip = AudioClip(out, event.sample_rate, event.source_id)
    return (clip, MixInfo(offset, gain, snr_db, scale)) if return_info else clip


# -- feature cache and manifest -------------------------------------------------------
def write_lmel(path, bins: np.ndarray) -> None:
    bins = np.asarray(bins, dtype="<f4")
    rows, cols = bins.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(bins).tobytes())


def read_lmel(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise AudioError(f"{path}: truncated feature file")
    rows, cols = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * rows * cols:
        raise AudioError(f"{path}: expected {rows}x{cols} floats, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float32)


@dataclass
class ManifestRow:
    filename: str
    class_label: str
    split: str
    extra: dict = field(default_factory=dict)

    @property
    def source_id(self) -> str:
        return Path(self.filename).stem


MANIFEST_FIELDS = ["filename", "class_label", "split"]


def manifest_text(rows: Iterable[ManifestRow]) -> str:
    """CSV text of a manifest; extra columns follow the fixed ones in sorted order."""
    rows = list(rows)
    extra = sorted({k for r in rows for k in r.extra})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS + extra)
    for r in rows:
        w.writerow([r.filename, r.class_label, r.split] + [r.extra.get(k, "") for k in extra])
    return buf.getvalue()


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    Path(path).write_text(manifest_text(rows))


def read_manifest(path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {missing}")
        return [
            ManifestRow(
                d["filename"], d["class_label"], d["split"],
                {k: v for k, v in d.items() if k not in MANIFEST_FIELDS},
            )
            for d in reader
        ]
