"""End-to-end orchestration with content-hashed, resumable stages."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .dsp import (ArtifactConfig, design_highpass, feature_matrix, preprocess,
                  segment_recording)
from .eeg_io import (BAND_NAMES, FS, EegRecording, SyntheticSpec, Task, TaskAnnotation,
                     fetch_subject, load_recording, save_recording, subject_filename,
                     subject_signatures, synth_recording)
from .isd import isd_matrix, model_averages, subject_averages
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .ssfi import build_ssfi, read_ssfi, write_ssfi
from .train import (SegmentSet, SplitSpec, TrainConfig, evaluate, serial_split,
                    train_model)
from .viz import AscentConfig, Target, activation_maximization, export_kernels, render_matrix, render_topomap

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# configuration


@dataclass
class SyntheticConfig:
    noise_floor: float = 10.0
    snr: float = 6.0
    n_experiments: int = 144
    task_samples: dict[str, int] = field(default_factory=lambda: {"L": 160, "W": 224, "R": 160})
    gap_samples: int = 0


@dataclass
class VizConfig:
    layers: list[str] = field(default_factory=lambda: ["CNV1"])
    units: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    kernel_layers: list[str] = field(default_factory=lambda: ["CNV1", "CNV5"])
    steps: int = 200
    step_size: float = 0.1
    l2_decay: float = 1e-4
    upscale: int = 4


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    source: str = "csv"  # csv | fetch | synthetic
    base_url: str = ""  # host serving S{n}.csv files
    fetch_timeout: float = 30.0
    subjects: list[int] = field(default_factory=lambda: [1])
    grid: int = 64
    filter_order: int = 5
    cutoff_hz: float = 1.0
    window: int = 128
    hop: int = 32
    artifact_method: str = "threshold_default"
    beta: float = 0.1
    train_tasks: tuple[int, int] = (1, 100)
    test_tasks: tuple[int, int] = (101, 144)
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    viz: VizConfig = field(default_factory=VizConfig)

    def __post_init__(self):
        if self.source not in ("csv", "fetch", "synthetic"):
            raise ValueError(f"unknown data source {self.source!r}")
        self.train_tasks = tuple(self.train_tasks)
        self.test_tasks = tuple(self.test_tasks)
        self.subjects = [int(s) for s in self.subjects]
        # the model grid always follows the featurization grid
        self.train.grid = self.grid

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        nested = {"train": TrainConfig, "synthetic": SyntheticConfig, "viz": VizConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in fields(typ)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ValueError(f"unknown {key} field(s): {', '.join(sorted(bad))}")
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["train_tasks"] = list(self.train_tasks)
        d["test_tasks"] = list(self.test_tasks)
        return d

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.train_tasks, self.test_tasks)

    @property
    def artifacts(self) -> ArtifactConfig:
        return ArtifactConfig(self.artifact_method, self.beta)


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, Path):
            h.update(p.read_bytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
    return h.hexdigest()


# --------------------------------------------------------------------------
# per-stage building blocks (also used by the CLI)


def synthetic_recording(subject_id: int, cfg: PipelineConfig) -> EegRecording:
    syn = cfg.synthetic
    spec = SyntheticSpec(
        signatures=subject_signatures(subject_id, syn.snr),
        noise_floor=syn.noise_floor,
        n_experiments=syn.n_experiments,
        task_samples={Task.from_code(k): v for k, v in syn.task_samples.items()},
        gap_samples=syn.gap_samples,
        subject_id=subject_id,
        seed=cfg.seed * 1000 + subject_id,
    )
    return synth_recording(spec)


def save_preprocessed(rec: EegRecording, path) -> None:
    ann = np.array([[a.label, a.task_index, a.start_sample, a.end_sample] for a in rec.annotations],
                   dtype=np.int64).reshape(-1, 4)
    with open(path, "wb") as fh:
        np.savez(fh, samples=rec.samples, annotations=ann, subject=np.int64(rec.subject_id))


def load_preprocessed(path) -> EegRecording:
    with np.load(path) as z:
        anns = [TaskAnnotation(Task(int(l)), int(t), int(s), int(e)) for l, t, s, e in z["annotations"]]
        return EegRecording(z["samples"], FS, subject_id=int(z["subject"]), annotations=anns)


def featurize(rec: EegRecording, grid: int = 64, window: int = 128, hop: int = 32):
    """Segments -> (SegmentSet of SSFIs, (N, 84) band powers, start samples)."""
    segs = segment_recording(rec, window, hop)
    feats = feature_matrix(segs)
    x = build_ssfi(feats, size=grid).astype(np.float32) if segs else np.zeros((0, grid, grid, 6), np.float32)
    data = SegmentSet(x, [int(s.label) for s in segs], [s.task_index for s in segs], rec.subject_id)
    return data, feats, np.array([s.start_sample for s in segs], dtype=np.int64)


def write_feature_store(prefix, data: SegmentSet, feats: np.ndarray, starts: np.ndarray) -> list[Path]:
    prefix = Path(prefix)
    ssfi_path = prefix.with_name(prefix.name + ".ssfi")
    meta_path = prefix.with_name(prefix.name + "_meta.csv")
    write_ssfi(ssfi_path, data.x, BAND_NAMES)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "label", "task", "start"] + [f"f{i}" for i in range(feats.shape[1] if feats.size else 84)])
    for i in range(len(data)):
        w.writerow([data.subject_id, Task(int(data.y[i])).code, int(data.task_index[i]), int(starts[i])]
                   + [repr(float(v)) for v in feats[i]])
    meta_path.write_text(buf.getvalue())
    return [ssfi_path, meta_path]


def read_feature_store(prefix) -> SegmentSet:
    prefix = Path(prefix)
    x, _ = read_ssfi(prefix.with_name(prefix.name + ".ssfi"))
    rows = list(csv.reader(prefix.with_name(prefix.name + "_meta.csv").read_text().splitlines()))[1:]
    subject = int(rows[0][0]) if rows else 0
    return SegmentSet(x, [Task.from_code(r[1]) for r in rows], [int(r[2]) for r in rows], subject)


def load_subject_data(data_dir, subject_id: int, cfg: PipelineConfig | None = None) -> SegmentSet:
    """Features from ``S{n}.ssfi``/``S{n}_meta.csv`` if present, else from the raw CSV."""
    cfg = cfg or PipelineConfig()
    data_dir = Path(data_dir)
    prefix = data_dir / f"S{subject_id}"
    if prefix.with_name(prefix.name + ".ssfi").exists():
        return read_feature_store(prefix)
    raw = data_dir / subject_filename(subject_id)
    if not raw.exists():
        raise FileNotFoundError(f"no features or raw recording for subject {subject_id} in {data_dir}")
    rec = preprocess(load_recording(raw, subject_id),
                     design_highpass(cfg.filter_order, cfg.cutoff_hz, FS), cfg.artifacts)
    return featurize(rec, cfg.grid, cfg.window, cfg.hop)[0]


# --------------------------------------------------------------------------
# runner


class Runner:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}
        self.manifest.setdefault("stages", {})
        self.ran: list[str] = []
        self.skipped: list[str] = []

    def stage(self, name: str, key: list, outputs: Sequence[Path], fn: Callable[[list[Path]], None]):
        """Run ``fn`` unless every output exists and the input hash is unchanged.

        ``fn`` writes to ``<output>.partial`` paths, which are renamed into
        place only after it returns; on failure they are left behind.
        """
        digest = _hash(name, *key)
        rec = self.manifest["stages"].get(name)
        if rec and rec["hash"] == digest and all(p.exists() for p in outputs):
            log.info("%s: cached", name)
            self.skipped.append(name)
            return
        for p in outputs:
            p.parent.mkdir(parents=True, exist_ok=True)
        partial = [p.with_name(p.name + ".partial") for p in outputs]
        try:
            fn(partial)
        except Exception as exc:
            raise StageError(name, exc) from exc
        for src, dst in zip(partial, outputs):
            os.replace(src, dst)
        self.manifest["stages"][name] = {"hash": digest, "outputs": [str(p) for p in outputs]}
        self._write_manifest()
        self.ran.append(name)
        log.info("%s: done", name)

    def _write_manifest(self):
        self.manifest["config"] = self.cfg.to_dict()
        self.manifest["config_hash"] = _hash(self.cfg.to_dict())
        self.manifest["seed"] = self.cfg.seed
        self.manifest["version"] = __version__
        tmp = self.manifest_path.with_name("manifest.json.partial")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        os.replace(tmp, self.manifest_path)

    # -- stages -----------------------------------------------------------

    def raw(self, s: int) -> Path:
        cfg = self.cfg
        data_dir = Path(cfg.data_dir)
        path = data_dir / subject_filename(s)
        if cfg.source == "csv":
            if not path.exists():
                raise StageError(f"raw:S{s}", FileNotFoundError(path))
            return path
        if cfg.source == "fetch":
            try:
                return fetch_subject(s, cfg.base_url, data_dir, cfg.fetch_timeout)
            except Exception as exc:
                raise StageError(f"fetch:S{s}", exc) from exc
        syn_key = [asdict(cfg.synthetic), cfg.seed, s]
        self.stage(f"synth:S{s}", syn_key, [path],
                   lambda outs: save_recording(synthetic_recording(s, cfg), outs[0]))
        return path

    def preprocessed(self, s: int, raw: Path) -> Path:
        cfg = self.cfg
        out = self.out / "preprocessed" / f"S{s}.npz"
        key = [raw, cfg.filter_order, cfg.cutoff_hz, cfg.artifact_method, cfg.beta]

        def run(outs):
            rec = load_recording(raw, s)
            rec = preprocess(rec, design_highpass(cfg.filter_order, cfg.cutoff_hz, rec.fs), cfg.artifacts)
            save_preprocessed(rec, outs[0])

        self.stage(f"preprocess:S{s}", key, [out], run)
        return out

    def features(self, s: int, pre: Path) -> Path:
        cfg = self.cfg
        prefix = self.out / "features" / f"S{s}"
        outs = [prefix.with_name(f"S{s}.ssfi"), prefix.with_name(f"S{s}_meta.csv")]

        def run(partial):
            data, feats, starts = featurize(load_preprocessed(pre), cfg.grid, cfg.window, cfg.hop)
            written = write_feature_store(prefix.with_name(f"S{s}.tmp"), data, feats, starts)
            for src, dst in zip(written, partial):
                os.replace(src, dst)

        self.stage(f"featurize:S{s}", [pre, cfg.grid, cfg.window, cfg.hop], outs, run)
        return prefix

    def trained(self, s: int, prefix: Path) -> Path:
        cfg = self.cfg
        ckpt = self.out / "models" / f"S{s}.ckpt"
        hist = self.out / "models" / f"S{s}_history.csv"

        def run(outs):
            data = read_feature_store(prefix)
            train, _ = serial_split(data, cfg.split)
            model, history = train_model(train, cfg.train)
            save_checkpoint(model, outs[0], extra={"subject": s})
            outs[1].write_text(history.to_csv())

        key = [prefix.with_name(f"S{s}.ssfi"), prefix.with_name(f"S{s}_meta.csv"),
               cfg.train.to_dict(), list(cfg.split.train_tasks)]
        self.stage(f"train:S{s}", key, [ckpt, hist], run)
        return ckpt

    def evaluated(self, s: int, prefix: Path, ckpt: Path) -> Path:
        cfg = self.cfg
        out = self.out / "reports" / f"S{s}.json"

        def run(outs):
            model = load_checkpoint(ckpt)
            data = read_feature_store(prefix)
            train, test = serial_split(data, cfg.split)
            report = {"subject": s, "test": evaluate(model, test).to_dict(),
                      "train": evaluate(model, train).to_dict()}
            outs[0].write_text(json.dumps(report, indent=2))

        key = [ckpt, prefix.with_name(f"S{s}.ssfi"), prefix.with_name(f"S{s}_meta.csv"),
               list(cfg.train_tasks), list(cfg.test_tasks)]
        self.stage(f"eval:S{s}", key, [out], run)
        return out

    def isd(self, ckpts: dict[int, Path], prefixes: dict[int, Path]) -> list[Path]:
        outs = [self.out / "isd" / "matrix.csv", self.out / "isd" / "averages.csv",
                self.out / "isd" / "heatmap.ppm"]

        def run(partial):
            models = {s: load_checkpoint(p) for s, p in ckpts.items()}
            data = {s: read_feature_store(p) for s, p in prefixes.items()}
            m = isd_matrix(models, data)
            m.save_csv(partial[0])
            lines = ["subject,subject_average,model_average"]
            for s, sa, ma in zip(m.subjects, subject_averages(m), model_averages(m)):
                lines.append(f"{s},{sa!r},{ma!r}")
            partial[1].write_text("\n".join(lines) + "\n")
            render_matrix(m.accuracy, partial[2])

        key = [[ckpts[s] for s in sorted(ckpts)], [prefixes[s].with_name(f"S{s}.ssfi") for s in sorted(prefixes)]]
        self.stage("isd", key, outs, run)
        return outs

    def viz(self, s: int, ckpt: Path) -> list[Path]:
        v = self.cfg.viz
        vdir = self.out / "viz" / f"S{s}"
        outs = [vdir / f"kernels_{layer}.ppm" for layer in v.kernel_layers]
        for layer in v.layers:
            for u in v.units:
                outs += [vdir / f"{layer}_u{u}_{band}.ppm" for band in BAND_NAMES]
                outs.append(vdir / f"{layer}_u{u}_trace.csv")

        def run(partial):
            model = load_checkpoint(ckpt)
            it = iter(partial)
            for layer in v.kernel_layers:
                export_kernels(model, layer, next(it))
            for layer in v.layers:
                for u in v.units:
                    res = activation_maximization(model, AscentConfig(
                        Target(layer, u), steps=v.steps, step_size=v.step_size,
                        seed=self.cfg.seed, l2_decay=v.l2_decay))
                    for b in range(len(BAND_NAMES)):
                        render_topomap(res.pattern[..., b], next(it), upscale=v.upscale, electrodes=True)
                    trace = "step,activation\n" + "".join(f"{i},{a!r}\n" for i, a in enumerate(res.trace))
                    next(it).write_text(trace)

        self.stage(f"viz:S{s}", [ckpt, asdict(v), self.cfg.seed], outs, run)
        return outs


def run_pipeline(cfg: PipelineConfig) -> Runner:
    """fetch/synth -> preprocess -> featurize -> train -> eval -> isd -> viz."""
    runner = Runner(cfg)
    ckpts, prefixes = {}, {}
    for s in cfg.subjects:
        raw = runner.raw(s)
        pre = runner.preprocessed(s, raw)
        prefixes[s] = runner.features(s, pre)
        ckpts[s] = runner.trained(s, prefixes[s])
        runner.evaluated(s, prefixes[s], ckpts[s])
    if len(cfg.subjects) > 1:
        runner.isd(ckpts, prefixes)
    for s in cfg.subjects:
        runner.viz(s, ckpts[s])
    runner._write_manifest()
    return runner
