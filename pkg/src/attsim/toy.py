"""Synthetic transient-event corpus.

Each class is a short motif (0.2 to 0.8 s): a tone, chirp, pip train, harmonic
stack or band-limited burst, played once or as two short repeats. A clip places
one jittered rendering of its class motif at a random offset inside five seconds
of colored background noise, so the event covers a small fraction of the clip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .dsp import AudioClip, mix_noise, write_wav

SR = 16000
CLIP_SECONDS = 5.0


@dataclass(frozen=True)
class Element:
    kind: str
    start: float  # seconds from motif onset
    dur: float
    f0: float
    f1: float  # chirp end frequency, pip rate or harmonic count depending on kind


@dataclass(frozen=True)
class ToyConfig:
    n_classes: int = 15
    clips_per_class: int = 200
    seed: int = 0
    snr_db: tuple = (0.0, 10.0)
    jitter: float = 0.04
    sample_rate: int = SR
    seconds: float = CLIP_SECONDS


# element shapes: (kind, chirp direction or pip rate or partial count or bandwidth ratio)
SHAPES = (
    ("tone", 1.0),
    ("chirp", 2.5),
    ("chirp", 0.4),
    ("pips", 6.0),
    ("pips", 14.0),
    ("harmonic", 5.0),
    ("burst", 1.3),
    ("burst", 3.0),
)
LAYOUTS = ("single", "double")


def make_motifs(n_classes: int, seed: int) -> list:
    """One motif (a tuple of elements) per class.

    Classes are distinct (shape, layout) pairs, so they differ in
    spectro-temporal form rather than only in pitch.
    """
    combos = [(s, lay) for s in SHAPES for lay in LAYOUTS]
    if n_classes > len(combos):
        raise ValueError(f"at most {len(combos)} toy classes are available")
    rng = np.random.default_rng([seed, 1])
    motifs = []
    for i in rng.permutation(len(combos))[:n_classes]:
        (kind, arg), layout = combos[i]
        f0 = float(np.exp(rng.uniform(np.log(400), np.log(2500))))
        if kind == "harmonic":
            f0 /= 3
        f1 = f0 * arg if kind in ("chirp", "burst") else arg
        if layout == "single":
            dur = float(rng.uniform(0.5, 0.7))
            motifs.append((Element(kind, 0.0, dur, f0, f1),))
        else:
            dur = float(rng.uniform(0.12, 0.18))
            gap = float(rng.uniform(0.15, 0.3))
            motifs.append((Element(kind, 0.0, dur, f0, f1), Element(kind, dur + gap, dur, f0, f1)))
    return motifs


def _fade(n: int, sr: int) -> np.ndarray:
    w = np.ones(n)
    r = min(n // 2, int(0.01 * sr))
    if r:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        w[:r], w[n - r :] = ramp, ramp[::-1]
    return w


def render_element(el: Element, scale: float, stretch: float, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = max(int(el.dur * stretch * sr), 16)
    t = np.arange(n) / sr
    f0 = min(el.f0 * scale, 0.45 * sr)
    if el.kind == "tone":
        x = np.sin(2 * np.pi * f0 * t)
    elif el.kind == "chirp":
        f1 = min(el.f1 * scale, 0.45 * sr)
        k = np.log(f1 / f0) / t[-1]
        x = np.sin(2 * np.pi * f0 * (np.exp(k * t) - 1) / k)
    elif el.kind == "pips":
        gate = (np.mod(t * el.f1, 1.0) < 0.4).astype(float)
        x = np.sin(2 * np.pi * f0 * t) * gate
    elif el.kind == "harmonic":
        parts = [np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, int(el.f1) + 1) if f0 * h < 0.45 * sr]
        x = np.sum(parts, axis=0)
    elif el.kind == "burst":
        spec = np.fft.rfft(rng.normal(size=n))
        f = np.fft.rfftfreq(n, 1 / sr)
        spec[(f < f0) | (f > min(el.f1 * scale, 0.45 * sr))] = 0
        x = np.fft.irfft(spec, n)
    else:
        raise ValueError(f"unknown element kind {el.kind!r}")
    x = x * _fade(n, sr)
    return x / (np.max(np.abs(x)) + 1e-12)


def render_event(motif: tuple, rng: np.random.Generator, cfg: ToyConfig) -> np.ndarray:
    """A jittered rendering of ``motif`` placed at a random offset in a silent clip."""
    sr = cfg.sample_rate
    scale = float(np.exp(rng.normal(0, cfg.jitter)))
    stretch = float(np.exp(rng.normal(0, cfg.jitter)))
    length = max(el.start + el.dur for el in motif) * stretch
    n = int(cfg.seconds * sr)
    onset = int(rng.integers(0, n - int(length * sr) - 16))
    out = np.zeros(n)
    for el in motif:
        x = render_element(el, scale, stretch, sr, rng)
        a = onset + int(el.start * stretch * sr)
        x = x[: n - a]
        out[a : a + len(x)] += x
    return 0.5 * out / (np.max(np.abs(out)) + 1e-12)


def colored_noise(n: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with a 1/f^beta power spectrum, unit RMS."""
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n)
    f[0] = f[1]
    spec *= f ** (-beta / 2)
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x * x))


def render_clip(motif: tuple, class_idx: int, clip_idx: int, cfg: ToyConfig) -> AudioClip:
    rng = np.random.default_rng([cfg.seed, 2, class_idx, clip_idx])
    sr = cfg.sample_rate
    event = AudioClip(render_event(motif, rng, cfg), sr, f"toy-{class_idx:02d}-{clip_idx:04d}")
    scene = AudioClip(0.1 * colored_noise(int((cfg.seconds + 1) * sr), rng.uniform(0.0, 2.0), rng), sr, "noise")
    snr = rng.uniform(*cfg.snr_db)
    return mix_noise(event, scene, snr, seed=rng)


def class_name(i: int) -> str:
    return f"toy{i:02d}"


def iter_corpus(cfg: Optional[ToyConfig] = None) -> Iterator[tuple]:
    """Yield ``(clip_id, class_label, AudioClip)`` for every clip, class by class."""
    cfg = cfg or ToyConfig()
    for ci, motif in enumerate(make_motifs(cfg.n_classes, cfg.seed)):
        for j in range(cfg.clips_per_class):
            clip = render_clip(motif, ci, j, cfg)
            yield clip.source_id, class_name(ci), clip


def write_corpus(out_dir, cfg: Optional[ToyConfig] = None) -> int:
    """Write the corpus in the ESC-50 layout: ``audio/*.wav`` plus ``meta/esc50.csv``."""
    out = Path(out_dir)
    (out / "meta").mkdir(parents=True, exist_ok=True)
    rows = []
    for clip_id, label, clip in iter_corpus(cfg):
        name = f"{clip_id}.wav"
        write_wav(out / "audio" / name, clip)
        rows.append((name, 1, int(label[3:]), label))
    with open(out / "meta" / "esc50.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "fold", "target", "category"])
        w.writerows(rows)
    return len(rows)
