"""Accuracy tables, synthesis panels, orthogonality and embedding export."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .factorgen import NEUTRAL, Dataset, FactorTuple, render, write_pnm
from .losses import cosine_abs
from .model import ModelBundle, compose, decode, to_tensor

SUBSETS = (("All", None), (">10", 10.0), (">20", 20.0), (">30", 30.0), (">40", 40.0))
PANEL_NAMES = ("real", "id", "id_pose", "id_pose_exp")


@dataclass
class EvalReport:
    accuracy: float
    per_class: list[float | None]
    confusion: list[list[float]]
    subsets: dict[str, dict] = field(default_factory=dict)
    cos_mean: float | None = None
    cos_max: float | None = None
    disentanglement: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _batched(fn, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(x[i:i + batch]) for i in range(0, len(x), batch)])


def predict_logits(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    return _batched(bundle.predict, to_tensor(images)).numpy()


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first (lowest) index on ties
    return np.argmax(logits, axis=1)


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Row-normalized K x K matrix; rows are true classes, empty rows stay zero."""
    counts = np.zeros((k, k))
    np.add.at(counts, (labels, pred), 1.0)
    totals = counts.sum(1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def subset_table(pred: np.ndarray, labels: np.ndarray, yaw: np.ndarray) -> dict[str, dict]:
    """Accuracy on All and on |yaw| > 10/20/30/40; empty subsets report accuracy None."""
    table = {}
    for name, thresh in SUBSETS:
        mask = np.ones(len(labels), bool) if thresh is None else yaw > thresh
        n = int(mask.sum())
        acc = float((pred[mask] == labels[mask]).mean()) if n else None
        table[name] = {"count": n, "accuracy": acc}
    return table


def bucket_counts(dataset: Dataset) -> dict[int, int]:
    return {int(k): int(v) for k, v in zip(*np.unique(dataset.y_p, return_counts=True))}


def evaluate(bundle: ModelBundle, dataset: Dataset, synthesis: bool = True,
             seed: int = 0) -> EvalReport:
    """Expression accuracy through C_exp(E_exp(x)) plus disentanglement statistics."""
    k = bundle.cfg.n_expressions
    pred = argmax_lowest(predict_logits(bundle, dataset.images))
    labels = dataset.y_e
    per_class = [float((pred[labels == c] == c).mean()) if np.any(labels == c) else None
                 for c in range(k)]
    report = EvalReport(
        accuracy=float((pred == labels).mean()) if len(labels) else float("nan"),
        per_class=per_class,
        confusion=confusion_matrix(pred, labels, k).tolist(),
        subsets=subset_table(pred, labels, dataset.yaw_deg),
    )
    if synthesis:
        orth = orthogonality_report(bundle, dataset)
        report.cos_mean, report.cos_max = orth["mean"], orth["max"]
        report.disentanglement = disentanglement_score(bundle, dataset, seed=seed)
    return report


def features(bundle: ModelBundle, images: np.ndarray):
    x = to_tensor(images)
    with torch.no_grad():
        return bundle.features(x)


def orthogonality_report(bundle: ModelBundle, dataset: Dataset) -> dict[str, float]:
    f_id, _, f_exp = features(bundle, dataset.images)
    cos, degenerate = cosine_abs(f_id.double(), f_exp.double())
    return {"mean": float(cos.mean()), "max": float(cos.max()), "degenerate": degenerate}


def random_cosine_expectation(d: int) -> float:
    """E|cos| between two independent isotropic vectors in R^d."""
    return math.exp(math.lgamma(d / 2) - math.lgamma((d + 1) / 2)) / math.sqrt(math.pi)


def synthesize_neutral(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    """decode(f_id + f_pose) as (N, H, W, C)."""
    f_id, f_pose, _ = features(bundle, images)
    with torch.no_grad():
        out = _batched(lambda f: decode(bundle.dec, f), compose(f_id, f_pose))
    return out.numpy().transpose(0, 2, 3, 1)


def disentanglement_score(bundle: ModelBundle, dataset: Dataset, seed: int = 0) -> float:
    """Fraction of samples whose synthesized neutral is L1-closer to the
    ground-truth neutral render of its own identity than to that of a random
    other identity at the same yaw."""
    ids = np.unique(dataset.identity_id)
    if len(ids) < 2 or len(dataset) == 0:
        return float("nan")
    fake = synthesize_neutral(bundle, dataset.images)
    rng = np.random.default_rng(seed)
    shape, k = dataset.shape, dataset.n_expressions
    wins = 0
    for i in range(len(dataset)):
        own_id, yaw = int(dataset.identity_id[i]), float(dataset.yaw_deg[i])
        other_id = int(rng.choice(ids[ids != own_id]))
        own = render(FactorTuple(own_id, yaw, NEUTRAL), shape, k)
        other = render(FactorTuple(other_id, yaw, NEUTRAL), shape, k)
        wins += np.abs(fake[i] - own).mean() < np.abs(fake[i] - other).mean()
    return wins / len(dataset)


def synthesis_panel(bundle: ModelBundle, image: np.ndarray) -> list[np.ndarray]:
    """[x, decode(f_id), decode(f_id + f_pose), decode(f_id + f_pose + f_exp)]."""
    x = to_tensor(image[None])
    with torch.no_grad():
        f_id, f_pose, f_exp = bundle.features(x)
        outs = [decode(bundle.dec, f) for f in
                (f_id, compose(f_id, f_pose), compose(f_id, f_pose, f_exp))]
    return [np.asarray(image, np.float32)] + [o[0].numpy().transpose(1, 2, 0) for o in outs]


def write_panel(out_dir: str | Path, sample: int | str, panel: list[np.ndarray]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in zip(PANEL_NAMES, panel):
        ext = "pgm" if img.shape[-1] == 1 else "ppm"
        p = out / f"{sample}_{name}.{ext}"
        write_pnm(p, img)
        paths.append(p)
    return paths


EMBED_FIXED = ("index", "identity_id", "y_e", "y_p")


def export_embeddings(bundle: ModelBundle, dataset: Dataset, path: str | Path) -> Path:
    """Tab-separated rows: index, identity_id, y_e, y_p, f_exp[0..d-1] (%.9g)."""
    _, _, f_exp = features(bundle, dataset.images)
    f = f_exp.numpy().astype(np.float32)
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("\t".join(EMBED_FIXED + tuple(f"f{j}" for j in range(f.shape[1]))) + "\n")
        for i in range(len(dataset)):
            vals = "\t".join(format(float(v), ".9g") for v in f[i])
            fh.write(f"{i}\t{dataset.identity_id[i]}\t{dataset.y_e[i]}\t{dataset.y_p[i]}\t{vals}\n")
    return path


def load_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return (meta int array (N, 4), features float32 (N, d))."""
    rows = np.loadtxt(path, delimiter="\t", skiprows=1, dtype=str, ndmin=2)
    meta = rows[:, :4].astype(np.int64)
    feats = np.array([[np.float32(v) for v in r] for r in rows[:, 4:]], dtype=np.float32)
    return meta, feats


def class_separation(feats: np.ndarray, labels: np.ndarray) -> float:
    """Mean pairwise distance between class means over mean distance to own class mean."""
    classes = np.unique(labels)
    means = np.stack([feats[labels == c].mean(0) for c in classes])
    within = np.mean([np.linalg.norm(feats[labels == c] - means[i], axis=1).mean()
                      for i, c in enumerate(classes)])
    diff = means[:, None, :] - means[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    between = dist[np.triu_indices(len(classes), 1)].mean()
    return float(between / within)


def format_table(reports: dict[str, EvalReport]) -> str:
    """Aligned plain-text table: subset, count, one accuracy column per model."""
    cols = list(reports)
    first = next(iter(reports.values()))
    lines = [f"{'Subset':<8}{'Count':>7}" + "".join(f"{c:>12}" for c in cols)]
    for name, _ in SUBSETS:
        row = f"{name:<8}{first.subsets[name]['count']:>7}"
        for c in cols:
            acc = reports[c].subsets[name]["accuracy"]
            row += f"{'-':>12}" if acc is None else f"{100 * acc:>12.2f}"
        lines.append(row)
    return "\n".join(lines)
