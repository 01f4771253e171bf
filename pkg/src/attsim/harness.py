"""Run configuration and the dataset, training, evaluation and report pipelines."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import checkpoint, dsp
from .backbone import BackboneConfig
from .episodic import ClassSplit, DataError, FeatureStore, FewShotModel, HeadConfig, make_split
from .training import TrainSchedule, evaluate, train

log = logging.getLogger("attsim")

SECTIONS = ("train", "val", "test")
REPORT_SETTINGS = ((5, 1), (5, 5), (10, 1), (10, 5))


class ConfigError(ValueError):
    """Invalid configuration or an invocation that contradicts it."""


# -- configuration ---------------------------------------------------------------
@dataclass
class SplitConfig:
    seed: int = 0
    n_train: int = 35
    n_val: int = 5
    n_test: int = 10


@dataclass
class EvalConfig:
    way: int = 5
    shot: int = 1
    episodes: int = 600
    seed: int = 0
    section: str = "test"

    def __post_init__(self):
        if self.section not in ("val", "test"):
            raise ConfigError(f"eval section must be 'val' or 'test', got {self.section!r}")


def _build(cls, d: Optional[Mapping], name: str, drop: Sequence[str] = ()):
    d = dict(d or {})
    known = {f.name for f in fields(cls)} - set(drop)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {name} option(s): {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from None


@dataclass
class RunConfig:
    """Everything a run depends on. The model-relevant part is digested into checkpoints."""

    features_dir: str = "features"
    seed: int = 0
    features: dsp.FeatureConfig = field(default_factory=dsp.FeatureConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.schedule.seed = self.seed
        self.backbone.attention = self.head.attentional
        shape = (self.features.n_mels, self.features.n_frames)
        if tuple(self.backbone.input_shape) != shape:
            raise ConfigError(f"backbone input_shape {self.backbone.input_shape} does not match features {shape}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        top = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - top)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        backbone = dict(d.get("backbone") or {})
        backbone.pop("attention", None)  # follows the head
        return cls(
            features_dir=str(d.get("features_dir", "features")),
            seed=int(d.get("seed", 0)),
            features=_build(dsp.FeatureConfig, d.get("features"), "features"),
            split=_build(SplitConfig, d.get("split"), "split"),
            head=_build(HeadConfig, d.get("head"), "head"),
            backbone=_build(BackboneConfig, backbone, "backbone"),
            schedule=_build(TrainSchedule, d.get("schedule"), "schedule", drop=("seed",)),
            eval=_build(EvalConfig, d.get("eval"), "eval"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self) -> dict:
        sched = self.schedule.to_dict()
        sched.pop("seed")
        return {
            "features_dir": self.features_dir,
            "seed": self.seed,
            "features": asdict(self.features),
            "split": asdict(self.split),
            "head": self.head.to_dict(),
            "backbone": self.backbone.to_dict(),
            "schedule": sched,
            "eval": asdict(self.eval),
        }

    def model_dict(self) -> dict:
        """The part of the config that determines the trained parameters."""
        d = self.to_dict()
        del d["features_dir"], d["eval"]
        return d

    def digest(self) -> bytes:
        return checkpoint.config_digest(self.model_dict())


# -- prepare ---------------------------------------------------------------------
def find_metadata(data_dir: Path) -> Path:
    for cand in (data_dir / "meta" / "esc50.csv", data_dir / "metadata.csv"):
        if cand.is_file():
            return cand
    found = sorted((data_dir / "meta").glob("*.csv")) + sorted(data_dir.glob("*.csv"))
    if len(found) == 1:
        return found[0]
    raise DataError(f"{data_dir}: no clips found (no metadata CSV such as meta/esc50.csv)")


def read_metadata(data_dir: Path) -> list:
    """(filename, class label, other columns) per clip, sorted by filename."""
    meta = find_metadata(data_dir)
    with open(meta, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        label_col = "category" if "category" in cols else "class_label" if "class_label" in cols else None
        if "filename" not in cols or label_col is None:
            raise DataError(f"{meta}: metadata needs 'filename' and 'category' columns, found {cols}")
        rows = [(r["filename"], r[label_col], r) for r in reader]
    if not rows:
        raise DataError(f"{data_dir}: no clips found")
    return sorted(rows, key=lambda r: r[0])


def audio_path(data_dir: Path, filename: str) -> Path:
    p = data_dir / "audio" / filename
    return p if p.exists() else data_dir / filename


def _content_digest(raw: bytes, fcfg: dsp.FeatureConfig) -> str:
    h = hashlib.sha256(raw)
    h.update(json.dumps(asdict(fcfg), sort_keys=True).encode())
    return h.hexdigest()


def _extract(job: tuple) -> tuple:
    """Worker: audio file -> cached log-mel. Returns (filename, digest, error)."""
    src, dst, digest, fcfg = job
    try:
        clip = dsp.load_wav(src)
        clip = dsp.fix_length(dsp.resample(clip, fcfg.sample_rate), fcfg.clip_seconds)
        dsp.write_lmel(dst, dsp.logmel(clip, fcfg).bins)
        return src.name, digest, None
    except (dsp.AudioError, OSError) as exc:
        return src.name, digest, str(exc)


def _map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
    return [fn(j) for j in jobs]


def prepare(data_dir, out_dir, cfg: RunConfig, jobs: int = 1) -> dict:
    """Extract features for every clip, split classes, fit normalization on the train section.

    Clips whose audio and feature settings are unchanged since the last run are
    not recomputed. Returns counts ``computed`` and ``cached``.
    """
    data_dir, out = Path(data_dir), Path(out_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: not a directory")
    rows = read_metadata(data_dir)
    split = make_split({r[1] for r in rows}, cfg.split.n_train, cfg.split.n_val, cfg.split.n_test, cfg.split.seed)
    (out / "cache").mkdir(parents=True, exist_ok=True)
    old = {}
    if (out / "manifest.csv").is_file():
        old = {r.extra.get("source"): r.extra.get("digest") for r in dsp.read_manifest(out / "manifest.csv")}
    manifest, todo, errors = [], [], []
    for filename, label, _ in rows:
        src = audio_path(data_dir, filename)
        try:
            raw = src.read_bytes()
        except OSError as exc:
            errors.append(f"{filename}: {exc.strerror}")
            continue
        digest = _content_digest(raw, cfg.features)
        dst = out / "cache" / (Path(filename).stem + ".lmel")
        if old.get(filename) != digest or not dst.is_file():
            todo.append((src, dst, digest, cfg.features))
        manifest.append(
            dsp.ManifestRow(f"cache/{dst.name}", label, split.section_of(label), {"source": filename, "digest": digest})
        )
    for name, _, err in _map(_extract, todo, jobs):
        if err:
            errors.append(err)
    if errors:
        raise DataError(f"{len(errors)} clip(s) failed:\n  " + "\n  ".join(errors))
    new_text = dsp.manifest_text(manifest)
    old_text = (out / "manifest.csv").read_text() if (out / "manifest.csv").is_file() else None
    if todo or new_text != old_text or not (out / "norm.json").is_file():
        train_specs = [dsp.read_lmel(out / r.filename) for r in manifest if r.split == "train"]
        (out / "norm.json").write_text(dsp.fit_norm(train_specs).to_json())
        (out / "manifest.csv").write_text(new_text)
    return {"clips": len(manifest), "computed": len(todo), "cached": len(manifest) - len(todo)}


# -- prepared data ---------------------------------------------------------------
class LazyFeatures(Mapping):
    """Normalized features read from the cache on first access."""

    def __init__(self, root: Path, files: Mapping[str, str], stats: dsp.NormStats):
        self.root, self.files, self.stats = root, dict(files), stats
        self._loaded: dict = {}

    def __getitem__(self, clip_id):
        if clip_id not in self._loaded:
            self._loaded[clip_id] = dsp.apply_norm(dsp.read_lmel(self.root / self.files[clip_id]), self.stats)
        return self._loaded[clip_id]

    def __iter__(self):
        return iter(self.files)

    def __len__(self):
        return len(self.files)


def load_prepared(features_dir) -> tuple:
    """(ClassSplit, FeatureStore) for a prepared directory."""
    root = Path(features_dir)
    if not (root / "manifest.csv").is_file():
        raise DataError(f"{root}: no manifest.csv; run 'attsim prepare' first")
    rows = dsp.read_manifest(root / "manifest.csv")
    try:
        stats = dsp.NormStats.from_json((root / "norm.json").read_text())
    except OSError:
        raise DataError(f"{root}: normalization statistics missing (norm.json)") from None
    by_section = {s: sorted({r.class_label for r in rows if r.split == s}) for s in SECTIONS}
    split = ClassSplit(*(tuple(by_section[s]) for s in SECTIONS))
    files = {r.source_id: r.filename for r in rows}
    store = FeatureStore(LazyFeatures(root, files, stats), {r.source_id: r.class_label for r in rows})
    return split, store


# -- train / eval ----------------------------------------------------------------
def build_model(cfg: RunConfig) -> FewShotModel:
    return FewShotModel(cfg.backbone, cfg.head, seed=cfg.seed)


def run_train(cfg: RunConfig, out_dir) -> dict:
    """Train and write ``model.ckpt``, ``train_log.jsonl`` and ``config.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split, store = load_prepared(cfg.features_dir)
    model = build_model(cfg)
    with open(out / "train_log.jsonl", "w") as fh:

        def record(r):
            fh.write(json.dumps(r) + "\n")
            fh.flush()
            log.info("epoch %d lr %.6g loss %.4f val %s", r["epoch"], r["lr"], r["train_loss"], r["val_acc"])

        result = train(model, cfg.schedule, split, store, log=record)
    checkpoint.save(out / "model.ckpt", model.backbone.state_arrays(), cfg.digest())
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return {"epochs": len(result.history), "best_epoch": result.best_epoch, "best_val": result.best_val}


def load_model(cfg: RunConfig, ckpt_path) -> FewShotModel:
    digest, arrays = checkpoint.load(ckpt_path)
    if digest != cfg.digest():
        raise ConfigError(
            f"{ckpt_path} was trained with a different configuration "
            f"(checkpoint digest {digest.hex()[:12]}, config digest {cfg.digest().hex()[:12]}); "
            "pass the config the checkpoint was trained with"
        )
    model = build_model(cfg)
    model.backbone.load_state_arrays(arrays)
    return model.eval()


def run_eval(cfg: RunConfig, ckpt_path) -> dict:
    """One report fragment: accuracy and CI for the configured section and (way, shot)."""
    model = load_model(cfg, ckpt_path)
    split, store = load_prepared(cfg.features_dir)
    e = cfg.eval
    acc, ci = evaluate(model, store.pool(split.section(e.section)), e.way, e.shot, e.episodes, e.seed)
    return {
        "model": cfg.head.kind,
        "attentional": cfg.head.attentional,
        "depth": cfg.backbone.n_blocks,
        "params": model.backbone.n_params(),
        "section": e.section,
        "way": e.way,
        "shot": e.shot,
        "episodes": e.episodes,
        "seed": e.seed,
        "accuracy": acc,
        "ci": ci,
    }


# -- report ----------------------------------------------------------------------
@dataclass
class ReportRow:
    model: str
    attentional: bool
    depth: int
    params: int
    cells: dict = field(default_factory=dict)  # (way, shot) -> (accuracy, ci)
    delta: Optional[float] = None

    @property
    def mean_accuracy(self) -> Optional[float]:
        return float(np.mean([a for a, _ in self.cells.values()])) if self.cells else None


def collect_rows(fragments: Iterable[dict]) -> list:
    """Group eval fragments into report rows and fill the attentional-vs-plain delta."""
    rows: dict = {}
    for f in fragments:
        key = (f["model"], bool(f["attentional"]), int(f["depth"]), int(f["params"]))
        row = rows.setdefault(key, ReportRow(*key))
        row.cells[(int(f["way"]), int(f["shot"]))] = (float(f["accuracy"]), float(f["ci"]))
    out = sorted(rows.values(), key=lambda r: (r.model, r.attentional, r.depth))
    for r in out:
        if not r.attentional:
            continue
        base = [b for b in out if b.model == r.model and not b.attentional and b.depth == r.depth]
        if base:
            shared = sorted(set(r.cells) & set(base[0].cells))
            if shared:
                r.delta = float(np.mean([r.cells[s][0] - base[0].cells[s][0] for s in shared]))
    return out


def _settings(rows: Sequence[ReportRow]) -> list:
    """The standard table columns plus any other (way, shot) that was evaluated."""
    extra = sorted({s for r in rows for s in r.cells} - set(REPORT_SETTINGS))
    return list(REPORT_SETTINGS) + extra


def _setting(s):
    return f"{s[0]}-way {s[1]}-shot"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    settings = _settings(rows)
    head = ["model", "attentional", "depth", "params"]
    for way, shot in settings:
        head += [f"acc_{way}w{shot}s", f"ci_{way}w{shot}s"]
    w.writerow(head + ["delta"])
    for r in rows:
        line = [r.model, "on" if r.attentional else "off", r.depth, r.params]
        for s in settings:
            line += [f"{r.cells[s][0]:.4f}", f"{r.cells[s][1]:.4f}"] if s in r.cells else ["", ""]
        w.writerow(line + ["" if r.delta is None else f"{r.delta:+.4f}"])
    return buf.getvalue()


def report_text(rows: Sequence[ReportRow]) -> str:
    settings = _settings(rows)
    head = ["model", "att", "depth", "params"] + [_setting(s) for s in settings] + ["delta"]
    table = [head]
    for r in rows:
        line = [r.model, "on" if r.attentional else "off", str(r.depth), f"{r.params:,}"]
        for s in settings:
            line.append(f"{100 * r.cells[s][0]:.1f} ± {100 * r.cells[s][1]:.1f}" if s in r.cells else "-")
        line.append("" if r.delta is None else f"{100 * r.delta:+.1f}")
        table.append(line)
    widths = [max(len(t[i]) for t in table) for i in range(len(head))]
    fmt = lambda t: "  ".join(c.ljust(wd) if i < 2 else c.rjust(wd) for i, (c, wd) in enumerate(zip(t, widths)))
    lines = [fmt(table[0]), "  ".join("-" * wd for wd in widths)] + [fmt(t) for t in table[1:]]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def read_fragments(paths: Iterable) -> list:
    out = []
    for p in paths:
        try:
            text = Path(p).read_text()
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc.strerror}") from None
        for i, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    raise DataError(f"{p}:{i}: not a JSON record") from None
    return out


# -- noise synthesis -------------------------------------------------------------
def find_scenes(scenes_dir: Path) -> list:
    scenes = sorted(p for p in scenes_dir.rglob("*") if p.suffix.lower() == ".wav")
    if not scenes:
        raise DataError(f"{scenes_dir}: no scene audio (*.wav) found")
    return scenes


@functools.lru_cache(maxsize=64)
def _scene_clip(path: str, rate: int) -> dsp.AudioClip:
    clip = dsp.load_wav(path)
    return dsp.resample(clip, rate) if clip.sample_rate != rate else clip


def _synth_one(job: tuple) -> dict:
    index, src, dst, scenes, scenes_root, seed, snr_range = job
    rng = np.random.default_rng([seed, index])
    scene_path = scenes[int(rng.integers(len(scenes)))]
    snr = float(rng.uniform(*snr_range))
    event = dsp.load_wav(src)
    scene = _scene_clip(str(scene_path), event.sample_rate)
    mixed, info = dsp.mix_noise(event, scene, snr, seed=rng, return_info=True)
    dsp.write_wav(dst, mixed)
    return {
        "scene_file": scene_path.relative_to(scenes_root).as_posix(),
        "offset": info.offset,
        "snr_db": f"{info.snr_db:.6f}",
        "gain": repr(info.gain),
        "peak_scale": repr(info.peak_scale),
    }


def synth_noise(esc_dir, scenes_dir, out_dir, seed: int = 0, snr_db=(5.0, 20.0), jobs: int = 1) -> int:
    """Mix every clip with a random scene crop at a random SNR; one output per input."""
    esc_dir, scenes_dir, out = Path(esc_dir), Path(scenes_dir), Path(out_dir)
    rows = read_metadata(esc_dir)
    scenes = find_scenes(scenes_dir)
    work = [
        (i, audio_path(esc_dir, name), out / "audio" / name, tuple(scenes), scenes_dir, seed, tuple(snr_db))
        for i, (name, _, _) in enumerate(rows)
    ]
    try:
        infos = _map(_synth_one, work, jobs)
    except dsp.AudioError as exc:
        raise DataError(str(exc)) from None
    (out / "meta").mkdir(parents=True, exist_ok=True)
    cols = list(rows[0][2].keys())
    extra = ["scene_file", "offset", "snr_db", "gain", "peak_scale"]
    with open(out / "meta" / "esc50.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols + [c for c in extra if c not in cols], lineterminator="\n")
        w.writeheader()
        for (_, _, meta), info in zip(rows, infos):
            w.writerow({**meta, **info})
    return len(rows)
