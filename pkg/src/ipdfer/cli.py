"""Command-line entry point.

    ipdfer generate | pretrain-id | train | eval | synthesize | export-embeddings
           [--config PATH] [--seed N] [--mode M] [--out DIR] [--resume PATH]
           [--set key=value ...]

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set IPDFER_THREADS to cap the number of torch worker threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfgmod
from .evaluation import (EvalReport, evaluate, export_embeddings, format_table,
                         synthesis_panel, write_panel)
from .factorgen import Dataset, build_dataset, bucket_histogram, POSE_EDGES
from .model import Encoder, ModelConfig, freeze, parameter_digest, pretrain_identity_encoder
from .trainer import Trainer, bundle_from_tensors, build_bundle, check_compatible

log = logging.getLogger("ipdfer")

COMMANDS = ("generate", "pretrain-id", "train", "eval", "synthesize", "export-embeddings")


class UsageError(Exception):
    """Bad invocation, config or missing input: exit code 2."""


def _model_config(cfg: dict, dataset: Dataset, pose_branch: bool = True) -> ModelConfig:
    h, w, c = dataset.shape
    m = cfg["model"]
    return ModelConfig(feature_dim=m["feature_dim"], widths=tuple(m["widths"]), height=h,
                       width=w, channels=c, n_expressions=dataset.n_expressions,
                       pose_branch=pose_branch, decoder_norm=m["decoder_norm"])


def _dataset_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["paths"]["dataset"] or out / "dataset.ipdf")


def _identity_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["paths"]["identity_checkpoint"] or out / "identity.ckpt")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_dataset(cfg: dict, out: Path) -> Dataset:
    return Dataset.load(_require(_dataset_path(cfg, out), "dataset"))


def _split(dataset: Dataset, cfg: dict, which: str | None = None) -> Dataset:
    which = which or cfg["eval"]["split"]
    if which == "all":
        return dataset
    train, test = dataset.split(cfg["train"]["test_fold"])
    return train if which == "train" else test


def _echo_config(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.txt").write_text(cfgmod.dump(cfg))


def load_identity_encoder(path: Path) -> tuple[Encoder, dict]:
    tensors, header = ckpt.load_checkpoint(path)
    if header.get("kind") != "identity":
        raise UsageError(f"{path} is not an identity-encoder checkpoint")
    enc = Encoder(ModelConfig.from_dict(header["model_config"]))
    enc.load_state_dict({k[len("e_id."):]: v for k, v in tensors.items() if k.startswith("e_id.")})
    freeze(enc)
    if parameter_digest(enc) != header["e_id_digest"]:
        raise RuntimeError(f"{path}: identity encoder digest mismatch")
    return enc, header


def load_bundle(path: Path):
    tensors, header = ckpt.load_checkpoint(_require(path, "checkpoint"))
    if header.get("kind") != "bundle":
        raise UsageError(f"{path} is not a training checkpoint")
    return bundle_from_tensors(tensors, header), header


def _latest_checkpoint(run_dir: Path) -> Path | None:
    found = sorted(run_dir.glob("epoch_*.ckpt"))
    return found[-1] if found else None


def _checkpoints(cfg: dict, out: Path, modes=("baseline", "id-only", "ipd")) -> list[Path]:
    listed = list(cfg["eval"]["checkpoints"]) or ([cfg["paths"]["checkpoint"]]
                                                  if cfg["paths"]["checkpoint"] else [])
    if listed:
        return [_require(Path(p), "checkpoint") for p in listed]
    found = [c for m in modes if (c := _latest_checkpoint(out / f"train-{m}")) is not None]
    if not found:
        raise UsageError(f"no checkpoint given and none found under {out}")
    return found


# --- commands ----------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path) -> int:
    dataset = build_dataset(cfgmod.generator_config(cfg))
    _echo_config(cfg, out, "generate")
    path = _dataset_path(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(path)
    hist = bucket_histogram(dataset)
    edges = (0,) + POSE_EDGES
    print(f"wrote {len(dataset)} samples to {path}")
    print(f"{'Pose':<6}{'Yaw':<10}{'Count':>7}")
    for k, n in enumerate(hist):
        span = f">{edges[k]:g}" if k == len(edges) - 1 else f"{edges[k]:g}-{edges[k + 1]:g}"
        print(f"{k:<6}{span:<10}{int(n):>7}")
    print(f"{'total':<16}{int(hist.sum()):>7}")
    return 0


def cmd_pretrain_id(cfg: dict, out: Path) -> int:
    dataset = _load_dataset(cfg, out)
    train, _ = dataset.split(cfg["train"]["test_fold"])
    mcfg = _model_config(cfg, dataset)
    p = cfg["pretrain"]
    result = pretrain_identity_encoder(train.images, train.identity_id, mcfg, epochs=p["epochs"],
                                       lr=p["lr"], batch_size=p["batch_size"], seed=p["seed"])
    _echo_config(cfg, out, "pretrain-id")
    path = _identity_path(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"kind": "identity", "model_config": mcfg.to_dict(), "e_id_digest": result.digest,
              "frozen": {"e_id": True}, "epoch": p["epochs"],
              "extra": {"identity_accuracy": result.accuracy,
                        "identities": sorted(int(i) for i in np.unique(train.identity_id))}}
    tensors = {f"e_id.{k}": v for k, v in result.encoder.state_dict().items()}
    tensors.update({f"id_head.{k}": v for k, v in result.head.state_dict().items()})
    ckpt.save_checkpoint(path, tensors, header)
    print(f"identity accuracy {result.accuracy:.4f}")
    print(f"e_id digest {result.digest}")
    return 0


def cmd_train(cfg: dict, out: Path, resume: str | None = None) -> int:
    tcfg = cfgmod.train_config(cfg)
    dataset = _load_dataset(cfg, out)
    if resume:
        # the checkpoint carries the run's own training config
        trainer = Trainer.resume(_require(Path(resume), "resume checkpoint"))
        if trainer.config.mode != tcfg.mode:
            raise UsageError(f"checkpoint was trained in mode {trainer.config.mode!r}, "
                             f"not {tcfg.mode!r}")
        tcfg = trainer.config
        check_compatible(trainer.bundle.cfg, dataset)
    else:
        encoder, _ = load_identity_encoder(_require(_identity_path(cfg, out), "identity checkpoint"))
        mcfg = _model_config(cfg, dataset, pose_branch=tcfg.mode == "ipd")
        check_compatible(mcfg, dataset)
        trainer = Trainer(build_bundle(encoder, mcfg, tcfg), tcfg)
    run_dir = out / f"train-{tcfg.mode}"
    _echo_config(cfg, out, "train")
    train_split, test_split = dataset.split(tcfg.test_fold)
    trainer.train(train_split, run_dir)
    report = evaluate(trainer.bundle, test_split, synthesis=tcfg.mode != "baseline",
                      seed=cfg["eval"]["seed"])
    (run_dir / "eval.json").write_text(report.to_json())
    print(f"{tcfg.mode}: test accuracy {report.accuracy:.4f} after {trainer.epoch} epochs")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    dataset = _load_dataset(cfg, out)
    paths = _checkpoints(cfg, out)
    split = _split(dataset, cfg)
    reports: dict[str, EvalReport] = {}
    loaded = [load_bundle(p) for p in paths]
    _echo_config(cfg, out, "eval")
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    for path, (bundle, header) in zip(paths, loaded):
        mode = header["train_config"]["mode"]
        label = mode if mode not in reports else f"{mode}:{path.stem}"
        rep = evaluate(bundle, split, synthesis=mode != "baseline", seed=cfg["eval"]["seed"])
        reports[label] = rep
        (eval_dir / f"report_{label.replace(':', '_')}.json").write_text(rep.to_json())
    table = format_table(reports)
    (eval_dir / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_synthesize(cfg: dict, out: Path) -> int:
    dataset = _load_dataset(cfg, out)
    path = _checkpoints(cfg, out, modes=("ipd", "id-only"))[-1]
    bundle, _ = load_bundle(path)
    split = _split(dataset, cfg)
    n = min(cfg["eval"]["n_panels"], len(split))
    rng = np.random.default_rng(cfg["eval"]["seed"])
    picks = np.sort(rng.choice(len(split), size=n, replace=False))
    _echo_config(cfg, out, "synthesize")
    written = []
    for i in picks:
        written += write_panel(out / "panels", int(i), synthesis_panel(bundle, split.images[i]))
    print(f"wrote {len(written)} images to {out / 'panels'}")
    return 0


def cmd_export_embeddings(cfg: dict, out: Path) -> int:
    dataset = _load_dataset(cfg, out)
    paths = _checkpoints(cfg, out)
    split = _split(dataset, cfg)
    loaded = [load_bundle(p) for p in paths]
    _echo_config(cfg, out, "export-embeddings")
    emb_dir = out / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)
    for (bundle, header), path in zip(loaded, paths):
        name = f"{header['train_config']['mode']}_{path.stem}.tsv"
        export_embeddings(bundle, split, emb_dir / name)
        print(f"wrote {len(split)} rows to {emb_dir / name}")
    return 0


# --- argument handling -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipdfer", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--seed", type=int, help="seed for generation, pretraining and training")
    ap.add_argument("--mode", choices=("ipd", "id-only", "baseline"))
    ap.add_argument("--out", default="runs/default", help="output directory")
    ap.add_argument("--resume", help="training checkpoint to resume from")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"generator.seed = {args.seed}", f"train.seed = {args.seed}",
                      f"pretrain.seed = {args.seed}"]
    if args.mode is not None:
        overrides.append(f'train.mode = "{args.mode}"')
    for o in args.set:
        if "=" not in o:
            raise cfgmod.ConfigError(f"--set expects key=value, got {o!r}")
    return cfgmod.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("IPDFER_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        if args.resume and args.command != "train":
            raise UsageError("--resume only applies to train")
        handler = {
            "generate": cmd_generate, "pretrain-id": cmd_pretrain_id, "eval": cmd_eval,
            "synthesize": cmd_synthesize, "export-embeddings": cmd_export_embeddings,
        }.get(args.command)
        if handler is None:
            return cmd_train(cfg, out, args.resume)
        return handler(cfg, out)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
