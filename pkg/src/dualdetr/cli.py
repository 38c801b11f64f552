"""Command line: ``dualdetr {synth,train,eval,infer}``."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_checkpoint
from .config import ABLATION_ROWS, RunConfig
from .data import (VideoRecord, load_features, make_windows, read_dataset, synth_generate,
                   write_dataset)
from .errors import ConfigError, DualDetrError
from .evaluation import write_report
from .trainer import evaluate, predict_windows, train

log = logging.getLogger("dualdetr")

DATASET_FILES = ("manifest.tsv", "annotations.csv", "classes.txt", "config.txt")


def _prepare_out(out: Path, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise ConfigError(f"output directory {out} is not empty (pass --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: RunConfig, out: str | Path, overwrite: bool = False) -> Path:
    cfg.validate(check_paths=False)
    out = _prepare_out(Path(out), overwrite)
    if overwrite:
        shutil.rmtree(out / "features", ignore_errors=True)
        for name in DATASET_FILES:
            (out / name).unlink(missing_ok=True)
    d, m = cfg.data, cfg.model
    common = dict(num_classes=m.num_classes, T=d.synth_length, D=m.d_model,
                  overlap_level=d.synth_overlap_level, noise_sigma=d.synth_noise_sigma,
                  snippet_seconds=d.synth_snippet_seconds, min_instances=d.synth_min_instances,
                  max_instances=d.synth_max_instances)
    splits = {"train": synth_generate(cfg.train.seed, d.synth_num_videos, **common)}
    if d.synth_num_heldout:
        splits["heldout"] = synth_generate(cfg.train.seed, d.synth_num_heldout,
                                           first_index=d.synth_num_videos, **common)
    manifest = write_dataset(out, splits, [f"class_{c}" for c in range(m.num_classes)])
    cfg.save(out / "config.txt")
    return manifest


def _dataset_dir(cfg: RunConfig, given: str | None, key: str) -> Path:
    path = given or getattr(cfg.data, key)
    if not path:
        raise ConfigError(f"no dataset directory: pass --data or set data.{key}")
    if not Path(path).exists():
        raise ConfigError(f"dataset directory does not exist: {path}")
    return Path(path)


def cmd_train(cfg: RunConfig, out: str | Path, data: str | None = None, split: str = "train",
              overwrite: bool = False, epochs: int | None = None) -> dict[str, Path]:
    cfg.validate(check_paths=False)
    videos = read_dataset(_dataset_dir(cfg, data, "train_dir"), split)
    if not videos:
        raise ConfigError(f"no videos in split {split!r}")
    out = _prepare_out(Path(out), overwrite)
    cfg.save(out / "config.txt")
    log_path = out / "epochs.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
        result = train(videos, cfg, epochs=epochs, on_epoch=on_epoch)
    paths = {"log": log_path, "model": save_checkpoint(out / "model.ckpt", result.model, cfg)}
    if result.ema_model is not None:
        paths["ema"] = save_checkpoint(out / "model_ema.ckpt", result.ema_model, cfg)
    return paths


def cmd_eval(checkpoint: str | Path, data: str | Path, out: str | Path, split: str | None = "heldout",
             overwrite: bool = False, cfg: RunConfig | None = None):
    model, stored = load_model(checkpoint, cfg)
    cfg = cfg or stored
    videos = read_dataset(data, split)
    if not videos:
        raise ConfigError(f"no videos in split {split!r} of {data}")
    report = evaluate(model, videos, cfg)
    out = _prepare_out(Path(out), overwrite)
    write_report(report, out, cfg.to_text())
    return report


def cmd_infer(checkpoint: str | Path, features: str | Path, snippet_seconds: float = 0.5,
              cfg: RunConfig | None = None, all_classes: bool = False) -> list[tuple]:
    """Detections of one feature file as (start_s, end_s, class_id, score), best first."""
    model, stored = load_model(checkpoint, cfg)
    cfg = cfg or stored
    X = load_features(features)
    video = VideoRecord(Path(features).stem, X, [], X.shape[0] * snippet_seconds, snippet_seconds)
    windows = make_windows(video, cfg.data.window, cfg.data.infer_stride_ratio)
    records = []
    for _vid, offset, span, det in predict_windows(model, windows, cfg.train.batch_size):
        iv = offset + det.intervals * span
        for k in range(len(det)):
            classes = range(det.scores.shape[1]) if all_classes else [int(np.argmax(det.scores[k]))]
            for c in classes:
                records.append((float(iv[k, 0]), float(iv[k, 1]), c, float(det.scores[k, c])))
    records.sort(key=lambda r: -r[3])
    return records


def format_records(records) -> str:
    return "".join(f"{s:.4f},{e:.4f},{c},{p:.4f}\n" for s, e, c, p in records)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "preset", None):
        cfg.apply_preset(args.preset)
    if getattr(args, "ablation", None):
        cfg = cfg.use_ablation_row(args.ablation)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualdetr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--preset", help="apply a preset (tiny, long) on top of --config")
        sp.add_argument("--seed", type=int, help="overrides train.seed")
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--overwrite", action="store_true")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp)
    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: data.train_dir)")
    sp.add_argument("--split", default="train")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ablation", choices=sorted(ABLATION_ROWS))
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory (default: data.eval_dir)")
    sp.add_argument("--split", default="heldout", help="manifest split; 'all' for every video")
    sp = sub.add_parser("infer", help="detect actions in one feature file")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--snippet-seconds", type=float, default=0.5)
    sp.add_argument("--all-classes", action="store_true",
                    help="one record per (detection, class) instead of the best class")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            manifest = cmd_synth(_load_config(args), args.out, args.overwrite)
            print(manifest)
        elif args.command == "train":
            cfg = _load_config(args)
            paths = cmd_train(cfg, args.out, args.data, args.split, args.overwrite, args.epochs)
            for k, v in paths.items():
                print(f"{k}\t{v}")
        elif args.command == "eval":
            cfg = _load_config(args) if args.config or args.preset else None
            data = args.data or (cfg.data.eval_dir if cfg else "")
            if not data:
                raise ConfigError("no dataset directory: pass --data or set data.eval_dir")
            split = None if args.split == "all" else args.split
            report = cmd_eval(args.checkpoint, data, args.out, split, args.overwrite, cfg)
            for k, v in report.metrics().items():
                print(f"{k} = {v:.4f}")
        elif args.command == "infer":
            cfg = _load_config(args) if args.config or args.preset else None
            text = format_records(cmd_infer(args.checkpoint, args.features, args.snippet_seconds,
                                            cfg, args.all_classes))
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
    except DualDetrError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
