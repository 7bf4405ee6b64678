"""Command-line entry point: ``eegssfi <subcommand> ...`` (or ``python -m eegssfi``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .dsp import ArtifactConfig, design_highpass, preprocess
from .eeg_io import BAND_NAMES, FS, fetch_subject, load_recording, save_recording
from .isd import isd_matrix, model_averages, subject_averages
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .pipeline import (PipelineConfig, StageError, featurize, load_preprocessed, load_subject_data,
                       run_pipeline, save_preprocessed, synthetic_recording, write_feature_store)
from .ssfi import read_ssfi
from .train import SplitSpec, TrainConfig, evaluate, serial_split, train_model
from .viz import AscentConfig, Target, activation_maximization, export_kernels, render_matrix, render_topomap

log = logging.getLogger("eegssfi")


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        pipeline_only = {f.name for f in fields(PipelineConfig)} - {f.name for f in fields(TrainConfig)}
        if pipeline_only & set(raw):
            cfg = PipelineConfig.from_dict(raw).train  # full pipeline config; grid follows it
        else:
            cfg = TrainConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _parse_units(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def _parse_subjects(text: str) -> list[int]:
    return _parse_units(text)


# --------------------------------------------------------------------------


def cmd_fetch(args):
    cfg = _pipeline_config(args)
    path = fetch_subject(args.subject, args.base_url or cfg.base_url, args.dest or cfg.data_dir,
                         args.timeout or cfg.fetch_timeout)
    print(path)


def cmd_synth(args):
    cfg = _pipeline_config(args)
    rec = synthetic_recording(args.subject, cfg)
    print(save_recording(rec, args.out))


def cmd_preprocess(args):
    cfg = _pipeline_config(args)
    rec = load_recording(args.input, args.subject)
    rec = preprocess(rec, design_highpass(cfg.filter_order, cfg.cutoff_hz, rec.fs),
                     ArtifactConfig(cfg.artifact_method, cfg.beta))
    save_preprocessed(rec, args.out)
    print(args.out)


def cmd_featurize(args):
    cfg = _pipeline_config(args)
    grid = args.grid or cfg.grid
    src = Path(args.input)
    if src.suffix == ".npz":
        rec = load_preprocessed(src)
    else:
        rec = preprocess(load_recording(src, args.subject),
                         design_highpass(cfg.filter_order, cfg.cutoff_hz, FS), cfg.artifacts)
    data, feats, starts = featurize(rec, grid, cfg.window, cfg.hop)
    for p in write_feature_store(args.out, data, feats, starts):
        print(p)


def cmd_train(args):
    tcfg = _train_config(args)
    pcfg = PipelineConfig(grid=tcfg.grid)
    data = load_subject_data(args.data, args.subject, pcfg)
    if data.x.shape[1] != tcfg.grid:
        raise CliError("train", f"features have grid {data.x.shape[1]}, config asks for {tcfg.grid}")
    train, _ = serial_split(data, SplitSpec())
    model, hist = train_model(train, tcfg)
    save_checkpoint(model, args.out, extra={"subject": args.subject})
    hist_path = Path(args.history) if args.history else Path(args.out).with_suffix(".history.csv")
    hist_path.write_text(hist.to_csv())
    print(args.out)


def cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    data = load_subject_data(args.data, args.subject, PipelineConfig(grid=model.grid))
    train, test = serial_split(data, SplitSpec())
    part = {"train": train, "test": test, "all": data}[args.split]
    report = evaluate(model, part).to_json()
    if args.out:
        Path(args.out).write_text(report)
    print(report)


def cmd_isd(args):
    subjects = _parse_subjects(args.subjects)
    ckdir = Path(args.ckpts)
    models, data = {}, {}
    for s in subjects:
        path = ckdir / f"S{s}.ckpt"
        if not path.exists():
            raise CliError("isd", f"missing checkpoint for subject {s}: {path}")
        models[s] = load_checkpoint(path)
        data[s] = load_subject_data(args.data, s, PipelineConfig(grid=models[s].grid))
    m = isd_matrix(models, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m.save_csv(out / "matrix.csv")
    lines = ["subject,subject_average,model_average"]
    lines += [f"{s},{a!r},{b!r}" for s, a, b in zip(m.subjects, subject_averages(m), model_averages(m))]
    (out / "averages.csv").write_text("\n".join(lines) + "\n")
    render_matrix(m.accuracy, out / "heatmap.ppm")
    print(m.to_csv(), end="")


def cmd_viz(args):
    if args.viz_cmd == "patterns":
        model = load_checkpoint(args.ckpt)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for u in _parse_units(args.units):
            cfg = AscentConfig(Target(args.layer, u), steps=args.steps, step_size=args.step_size,
                               seed=args.seed or 0, l2_decay=args.l2_decay, per_channel=args.per_channel)
            res = activation_maximization(model, cfg)
            results = res if isinstance(res, list) else [res]
            for r in results:
                bands = [r.band] if r.band is not None else range(len(BAND_NAMES))
                for b in bands:
                    render_topomap(r.pattern[..., b], out / f"{args.layer}_u{u}_{BAND_NAMES[b]}.ppm",
                                   upscale=args.upscale, electrodes=True)
            print(f"{args.layer} unit {u}: activation {results[0].trace[0]:.4g} -> {results[0].trace[-1]:.4g}")
    elif args.viz_cmd == "kernels":
        model = load_checkpoint(args.ckpt)
        _, n = export_kernels(model, args.layer, args.out)
        print(f"{args.out}: {n} tiles")
    elif args.viz_cmd == "topomap":
        arrays, names = read_ssfi(args.ssfi)
        if args.band not in names:
            raise CliError("viz", f"band {args.band!r} not in {names}")
        render_topomap(arrays[args.index][..., names.index(args.band)], args.out,
                       upscale=args.upscale, electrodes=args.electrodes)
        print(args.out)


def cmd_pipeline(args):
    runner = run_pipeline(_pipeline_config(args))
    print(f"ran {len(runner.ran)} stage(s), skipped {len(runner.skipped)}")


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegssfi", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("fetch", cmd_fetch, "download one subject's recording")
    sp.add_argument("--subject", type=int, required=True)
    sp.add_argument("--base-url")
    sp.add_argument("--dest")
    sp.add_argument("--timeout", type=float)

    sp = add("synth", cmd_synth, "write a synthetic recording CSV")
    sp.add_argument("--subject", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = add("preprocess", cmd_preprocess, "highpass + artifact removal")
    sp.add_argument("--input", required=True)
    sp.add_argument("--subject", type=int)
    sp.add_argument("--out", required=True)

    sp = add("featurize", cmd_featurize, "segments -> band powers -> SSFI cache")
    sp.add_argument("--input", required=True, help="raw CSV or preprocessed .npz")
    sp.add_argument("--subject", type=int)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--out", required=True, help="output prefix, e.g. feats/S1")

    sp = add("train", cmd_train, "train one subject's model")
    sp.add_argument("--subject", type=int, required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--subject", type=int, required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "test", "all"], default="test")
    sp.add_argument("--out")

    sp = add("isd", cmd_isd, "inter-subject dependency matrix")
    sp.add_argument("--ckpts", required=True, help="directory of S{n}.ckpt files")
    sp.add_argument("--data", required=True)
    sp.add_argument("--subjects", required=True, help="e.g. 1..25 or 1,3,5")
    sp.add_argument("--out", required=True)

    sp = add("viz", cmd_viz, "patterns, kernels and topographic maps")
    vsub = sp.add_subparsers(dest="viz_cmd", required=True)
    vp = vsub.add_parser("patterns")
    vp.add_argument("--ckpt", required=True)
    vp.add_argument("--layer", default="CNV1")
    vp.add_argument("--units", default="0..3")
    vp.add_argument("--steps", type=int, default=200)
    vp.add_argument("--step-size", type=float, default=0.1)
    vp.add_argument("--l2-decay", type=float, default=1e-4)
    vp.add_argument("--per-channel", action="store_true")
    vp.add_argument("--upscale", type=int, default=4)
    vp.add_argument("--out", required=True)
    vp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    vk = vsub.add_parser("kernels")
    vk.add_argument("--ckpt", required=True)
    vk.add_argument("--layer", default="CNV1")
    vk.add_argument("--out", required=True)
    vt = vsub.add_parser("topomap")
    vt.add_argument("--ssfi", required=True)
    vt.add_argument("--band", default="alpha")
    vt.add_argument("--index", type=int, default=0)
    vt.add_argument("--upscale", type=int, default=4)
    vt.add_argument("--electrodes", action="store_true")
    vt.add_argument("--out", required=True)

    add("pipeline", cmd_pipeline, "run every stage, resuming from cached outputs")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except CliError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, OSError, RuntimeError) as exc:
        print(f"error [{args.cmd}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
