"""Shared reference training runs and the acceptance summary.

Reference runs use the default desk config (20 identities x 5 yaws x 4
expressions at 32x32, fold 0 held out, 30 epochs). They are trained lazily,
once per session, and cached under the pytest cache keyed by a hash of the
package source. Set IPDFER_REF_CACHE=0 to always retrain.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

import ipdfer
from ipdfer.evaluation import EvalReport, class_separation, evaluate, features
from ipdfer.factorgen import Dataset, GeneratorConfig, build_dataset
from ipdfer.model import Encoder, ModelBundle, pretrain_identity_encoder
from ipdfer.trainer import TrainConfig, Trainer, build_bundle, model_config_for

REF_SEEDS = (0, 1, 2)
ACCEPTANCE_LINES: list[str] = []


def record(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(ipdfer.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RefRun:
    seed: int
    mode: str
    dataset: Dataset
    test: Dataset
    bundle: ModelBundle
    log_lines: list[str]
    e_id_start: str
    e_id_end: str
    identity_digest: str
    report: EvalReport

    def separation(self) -> float:
        _, _, f_exp = features(self.bundle, self.test.images)
        return class_separation(f_exp.numpy().astype(np.float64), self.test.y_e)


class ReferenceRuns:
    def __init__(self, cache_dir: Path | None):
        self.cache_dir = cache_dir
        self._data: dict[int, tuple[Dataset, Encoder, str]] = {}
        self._runs: dict[tuple[int, str], RefRun] = {}

    def data(self, seed: int):
        if seed not in self._data:
            ds = build_dataset(GeneratorConfig(seed=seed))
            train, _ = ds.split(0)
            res = pretrain_identity_encoder(train.images, train.identity_id,
                                            model_config_for(ds), epochs=40, seed=seed)
            self._data[seed] = (ds, res.encoder, res.digest)
        return self._data[seed]

    def get(self, seed: int, mode: str) -> RefRun:
        key = (seed, mode)
        if key not in self._runs:
            self._runs[key] = self._load_or_train(seed, mode)
        return self._runs[key]

    def _load_or_train(self, seed: int, mode: str) -> RefRun:
        ds, enc, id_digest = self.data(seed)
        train_split, test_split = ds.split(0)
        stem = self.cache_dir / f"{mode}_seed{seed}" if self.cache_dir else None
        if stem is not None and (stem.with_suffix(".ckpt")).exists():
            trainer = Trainer.resume(stem.with_suffix(".ckpt"))
            meta = json.loads(stem.with_suffix(".json").read_text())
            log_lines = stem.with_suffix(".jsonl").read_text().splitlines()
        else:
            cfg = TrainConfig(seed=seed, mode=mode)
            trainer = Trainer(build_bundle(enc, model_config_for(ds), cfg), cfg)
            start = trainer.bundle.digest("e_id")
            trainer.train(train_split)
            meta = {"e_id_start": start, "e_id_end": trainer.bundle.digest("e_id")}
            log_lines = trainer.log_lines
            if stem is not None:
                trainer.save(stem.with_suffix(".ckpt"))
                stem.with_suffix(".json").write_text(json.dumps(meta))
                stem.with_suffix(".jsonl").write_text("".join(l + "\n" for l in log_lines))
        report = evaluate(trainer.bundle, test_split, synthesis=mode != "baseline", seed=seed)
        return RefRun(seed, mode, ds, test_split, trainer.bundle, log_lines,
                      meta["e_id_start"], meta["e_id_end"], id_digest, report)


@pytest.fixture(scope="session")
def reference_runs(request) -> ReferenceRuns:
    cache = None
    if os.environ.get("IPDFER_REF_CACHE", "1") != "0":
        cache = Path(request.config.cache.mkdir(f"ipdfer-ref-{_source_hash()}"))
    return ReferenceRuns(cache)


@pytest.fixture(autouse=True)
def _float32_default():
    torch.set_default_dtype(torch.float32)
    yield
