"""Loss terms of the disentangling objective.

Expectations are mini-batch means. L1 image/feature distances are mean
absolute differences over elements, so the weights stay meaningful across
image and feature sizes.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .factorgen import NEUTRAL

EPS = 1e-8


class LossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.001   # fake-neutral adversarial
    lambda2: float = 0.001   # fake-expressional adversarial
    lambda3: float = 1.0     # identity consistency
    lambda4: float = 10.0    # reconstruction
    beta1: float = 0.5       # cosine orthogonality
    beta2: float = 1.0       # pose confusion

    def __post_init__(self):
        for k, v in dataclasses.asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    recon: float = 0.0
    id: float = 0.0
    cos: float = 0.0
    confusion: float = 0.0
    exp_cls: float = 0.0
    pose_cls: float = 0.0
    c: float = 0.0
    d_real: float = 0.0
    neu_fake: float = 0.0
    exp_fake: float = 0.0
    g_prime: float = 0.0
    g_total: float = 0.0
    cos_degenerate: bool = False

    def update(self, **terms) -> "LossReport":
        for k, v in terms.items():
            if not hasattr(self, k):
                raise KeyError(k)
            if isinstance(v, torch.Tensor):
                v = float(v.detach())
            setattr(self, k, v if isinstance(v, bool) else float(v))
        return self

    def finalize(self, weights: LossWeights) -> "LossReport":
        """Fill c, g_prime and g_total from the component terms."""
        self.c = self.exp_cls + self.pose_cls
        self.g_prime, self.g_total = assemble_generator_loss(
            {k: getattr(self, k) for k in GENERATOR_TERMS}, weights)
        return self

    def to_line(self, **prefix) -> str:
        rec = dict(prefix)
        rec.update(dataclasses.asdict(self))
        return json.dumps(rec, sort_keys=False)


GENERATOR_TERMS = ("neu_fake", "exp_fake", "id", "recon", "c", "cos", "confusion")


def _l1_per_sample(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().flatten(1).mean(1)


def loss_recon(x_fake_ipe: torch.Tensor, x_fake_ip: torch.Tensor, x: torch.Tensor,
               y_e: torch.Tensor, neutral: int = NEUTRAL) -> torch.Tensor:
    """L1 of the expressional fake to x, plus L1 of the neutral fake when x is neutral."""
    is_neutral = (y_e == neutral).to(x.dtype)
    per = _l1_per_sample(x_fake_ipe, x) + is_neutral * _l1_per_sample(x_fake_ip, x)
    return per.mean()


def loss_id(net, x_fake_ipe: torch.Tensor, x_fake_ip: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Identity consistency through the frozen identity network ``net``."""
    with torch.no_grad():
        target = net(x)
    n = len(x)
    feats = net(torch.cat([x_fake_ipe, x_fake_ip]))
    return loss_id_from_features(feats[:n], feats[n:], target)


def loss_id_from_features(n_ipe: torch.Tensor, n_ip: torch.Tensor, n_x: torch.Tensor) -> torch.Tensor:
    return (_l1_per_sample(n_ipe, n_x) + _l1_per_sample(n_ip, n_x)).mean()


def cosine_abs(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Per-sample |cos(a, b)| and whether any denominator hit the eps guard."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    degenerate = bool((denom < EPS).any())
    return (a * b).sum(-1).abs() / denom.clamp_min(EPS), degenerate


def loss_cos(f_id: torch.Tensor, f_exp: torch.Tensor, return_flag: bool = False):
    val, degenerate = cosine_abs(f_id, f_exp)
    return (val.mean(), degenerate) if return_flag else val.mean()


def confusion_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmax(logits) against the uniform distribution."""
    return -F.log_softmax(logits, dim=-1).mean(-1).mean()


def loss_confusion(c_p, f_exp: torch.Tensor) -> torch.Tensor:
    return confusion_from_logits(c_p(f_exp))


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return -F.log_softmax(logits, dim=-1).gather(-1, labels.long()[:, None]).mean()


def assemble_generator_loss(terms: dict, weights: LossWeights):
    """Return (g_prime, g_total); terms keyed as in GENERATOR_TERMS.

    Works on python floats and on tensors alike.
    """
    for name in GENERATOR_TERMS:
        v = terms[name]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise LossError(f"loss term {name!r} is not finite ({fv})")
    w = weights
    g_prime = (w.lambda1 * terms["neu_fake"] + w.lambda2 * terms["exp_fake"]
               + w.lambda3 * terms["id"] + w.lambda4 * terms["recon"])
    g_total = g_prime + terms["c"] + w.beta1 * terms["cos"] + w.beta2 * terms["confusion"]
    return g_prime, g_total
