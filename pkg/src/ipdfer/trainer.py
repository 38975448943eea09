"""Three-phase alternating optimization.

Each iteration runs, on the same mini-batch:

1. classifiers: L_c + beta1 * L_cos over {E_pose, C_p, E_exp, C_exp}
2. discriminator: L_exp^r over D
3. generator: L_G' + beta2 * L_confusion over {E_pose, E_exp, G_dec}

Everything outside the updated set is left bit-identical. Modes:
``ipd`` (full model), ``id-only`` (no pose branch), ``baseline``
(E_exp + C_exp with cross-entropy only).
"""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .factorgen import NEUTRAL, Dataset
from .losses import (LossError, LossReport, LossWeights, confusion_from_logits,
                     loss_ce, loss_cos, loss_id_from_features, loss_recon)
from .model import Encoder, ModelBundle, ModelConfig, compose, decode, to_tensor

log = logging.getLogger(__name__)

MODES = ("ipd", "id-only", "baseline")
_ADAM = dict(betas=(0.9, 0.999), eps=1e-8)


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    mode: str = "ipd"
    test_fold: int = 0
    # shuffled passes over the training split that make up one epoch
    epoch_repeats: int = 15
    # start E_pose, E_exp and D from the pretrained identity encoder
    init_from_identity: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epoch_repeats < 1:
            raise ValueError("epoch_repeats must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


class TrainingError(RuntimeError):
    pass


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not math.isfinite(float(value.detach())):
        raise LossError(f"{name} became non-finite ({float(value.detach())}); aborting step")


class Trainer:
    """Owns a ModelBundle, its optimizers and the shuffling RNG."""

    def __init__(self, bundle: ModelBundle, config: TrainConfig):
        config.validate()
        if not bundle.id_frozen:
            raise TrainingError("identity encoder must be pretrained and frozen before training")
        if (config.mode == "ipd") != bundle.cfg.pose_branch:
            raise TrainingError(f"mode {config.mode!r} inconsistent with pose_branch="
                                f"{bundle.cfg.pose_branch}")
        self.bundle = bundle
        self.config = config
        self.weights = config.weights
        self.epoch = 0
        self.step_count = 0
        self.log_lines: list[str] = []
        self.rng = torch.Generator().manual_seed(config.seed)
        b = bundle
        if config.mode == "baseline":
            self.optimizers = {
                "cls": self._adam({"e_exp": b.e_exp, "c_exp": b.c_exp}),
            }
        else:
            cls_nets = {"e_exp": b.e_exp, "c_exp": b.c_exp}
            gen_nets = {"e_exp": b.e_exp, "dec": b.dec}
            if b.e_pose is not None:
                cls_nets.update(e_pose=b.e_pose, c_p=b.c_p)
                gen_nets.update(e_pose=b.e_pose)
            self.optimizers = {
                "cls": self._adam(cls_nets),
                "disc": self._adam({"disc": b.disc}),
                "gen": self._adam(gen_nets),
            }

    def _adam(self, nets: dict) -> torch.optim.Adam:
        named = [(f"{k}.{n}", p) for k, net in sorted(nets.items())
                 for n, p in net.named_parameters()]
        opt = torch.optim.Adam([p for _, p in named], lr=self.config.lr, **_ADAM)
        opt.param_names = [n for n, _ in named]
        return opt

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for g in opt.param_groups:
                g["lr"] = lr

    def _zero_all(self) -> None:
        for p in self.bundle.parameters():
            p.grad = None

    # --- the three steps -------------------------------------------------

    def classifier_objective(self, x, y_e, y_p) -> tuple[torch.Tensor, LossReport]:
        """L_c + beta1 * L_cos (L_exp alone in baseline mode)."""
        b, w = self.bundle, self.weights
        f_exp = b.e_exp(x)
        exp_cls = loss_ce(b.c_exp(f_exp), y_e)
        report = LossReport()
        if self.config.mode == "baseline":
            report.update(exp_cls=exp_cls, c=exp_cls)
            return exp_cls, report
        with torch.no_grad():
            f_id = b.e_id(x)
        cos, degenerate = loss_cos(f_id, f_exp, return_flag=True)
        pose_cls = loss_ce(b.c_p(b.e_pose(x)), y_p) if b.e_pose is not None else torch.zeros(())
        loss = exp_cls + pose_cls + w.beta1 * cos
        report.update(exp_cls=exp_cls, pose_cls=pose_cls, c=exp_cls + pose_cls, cos=cos,
                      cos_degenerate=degenerate)
        return loss, report

    def discriminator_objective(self, x, y_e) -> tuple[torch.Tensor, LossReport]:
        loss = loss_ce(self.bundle.disc(x), y_e)
        return loss, LossReport().update(d_real=loss)

    def generator_terms(self, x: torch.Tensor, y_e: torch.Tensor) -> dict[str, torch.Tensor]:
        """Synthesize both fakes and return every generator loss term."""
        b = self.bundle
        with torch.no_grad():
            f_id = b.e_id(x)
        f_pose = b.e_pose(x) if b.e_pose is not None else None
        f_exp = b.e_exp(x)
        x_ip = decode(b.dec, compose(f_id, f_pose))
        x_ipe = decode(b.dec, compose(f_id, f_pose, f_exp))
        n = len(x)
        fakes = torch.cat([x_ipe, x_ip])
        d_logits = b.disc(fakes)
        n_feats = b.e_id(fakes)
        terms = {
            "neu_fake": loss_ce(d_logits[n:], torch.full_like(y_e, NEUTRAL)),
            "exp_fake": loss_ce(d_logits[:n], y_e),
            # the identity network is E_id itself, so N(x) is f_id
            "id": loss_id_from_features(n_feats[:n], n_feats[n:], f_id),
            "recon": loss_recon(x_ipe, x_ip, x, y_e),
        }
        if b.c_p is not None:
            terms["confusion"] = confusion_from_logits(b.c_p(f_exp))
        return terms

    def generator_objective(self, x, y_e) -> tuple[torch.Tensor, LossReport]:
        """L_G' + beta2 * L_confusion."""
        w = self.weights
        t = self.generator_terms(x, y_e)
        loss = (w.lambda1 * t["neu_fake"] + w.lambda2 * t["exp_fake"]
                + w.lambda3 * t["id"] + w.lambda4 * t["recon"])
        if "confusion" in t:
            loss = loss + w.beta2 * t["confusion"]
        return loss, LossReport().update(**t)

    def _update(self, name: str, loss: torch.Tensor) -> None:
        _check_finite(f"{name} loss", loss)
        loss.backward()
        self.optimizers[name].step()

    def step_classifiers(self, x, y_e, y_p) -> LossReport:
        """Update E_pose, C_p, E_exp, C_exp; everything else stays fixed."""
        self._zero_all()
        loss, report = self.classifier_objective(x, y_e, y_p)
        self._update("cls", loss)
        return report

    def step_discriminator(self, x, y_e) -> LossReport:
        """Update D on the real-image expression cross-entropy."""
        self._zero_all()
        loss, report = self.discriminator_objective(x, y_e)
        self._update("disc", loss)
        return report

    def step_generator(self, x, y_e) -> LossReport:
        """Update E_pose, E_exp, G_dec; D and the classifiers stay fixed."""
        self._zero_all()
        # gradients pass through D and C_p but never accumulate on them
        with _no_param_grads(self.bundle.disc, self.bundle.c_p):
            loss, report = self.generator_objective(x, y_e)
            self._update("gen", loss)
        return report

    # --- epochs ----------------------------------------------------------

    def iteration(self, x, y_e, y_p) -> LossReport:
        r1 = self.step_classifiers(x, y_e, y_p)
        if self.config.mode == "baseline":
            return r1
        r2 = self.step_discriminator(x, y_e)
        r3 = self.step_generator(x, y_e)
        report = LossReport(
            exp_cls=r1.exp_cls, pose_cls=r1.pose_cls, cos=r1.cos,
            cos_degenerate=r1.cos_degenerate, d_real=r2.d_real,
            recon=r3.recon, id=r3.id, confusion=r3.confusion,
            neu_fake=r3.neu_fake, exp_fake=r3.exp_fake)
        return report.finalize(self.weights)

    def _log_fields(self) -> tuple[str, ...]:
        if self.config.mode == "baseline":
            return ("exp_cls", "c")
        fields = ["recon", "id", "cos", "confusion", "exp_cls", "pose_cls", "c", "d_real",
                  "neu_fake", "exp_fake", "g_prime", "g_total"]
        if self.config.mode == "id-only":
            fields = [f for f in fields if f not in ("confusion", "pose_cls")]
        return tuple(fields)

    def train_epoch(self, data: Dataset) -> list[LossReport]:
        x_all = to_tensor(data.images)
        y_e_all = torch.from_numpy(data.y_e.astype(np.int64))
        y_p_all = torch.from_numpy(data.y_p.astype(np.int64))
        lr = self.config.lr_at(self.epoch)
        self.set_lr(lr)
        order = torch.cat([torch.randperm(len(x_all), generator=self.rng)
                           for _ in range(self.config.epoch_repeats)])
        reports = []
        fields = self._log_fields()
        for start in range(0, len(order), self.config.batch_size):
            idx = order[start:start + self.config.batch_size]
            report = self.iteration(x_all[idx], y_e_all[idx], y_p_all[idx])
            reports.append(report)
            rec = {"step": self.step_count, "epoch": self.epoch, "lr": lr}
            rec.update({f: getattr(report, f) for f in fields})
            if self.config.mode != "baseline":
                rec["cos_degenerate"] = report.cos_degenerate
            self.log_lines.append(_json_line(rec))
            self.step_count += 1
        self.epoch += 1
        return reports

    def train(self, data: Dataset, out_dir: str | Path | None = None,
              metrics_path: str | Path | None = None) -> list[str]:
        """Run the remaining epochs, checkpointing after each one."""
        check_compatible(self.bundle.cfg, data)
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        metrics = Path(metrics_path) if metrics_path else (out / "metrics.jsonl" if out else None)
        while self.epoch < self.config.epochs:
            n_before = len(self.log_lines)
            reports = self.train_epoch(data)
            last = reports[-1]
            log.info("epoch %d lr %.2e exp_cls %.4f recon %.4f g_total %.4f", self.epoch,
                     self.config.lr_at(self.epoch - 1), last.exp_cls, last.recon, last.g_total)
            if metrics is not None:
                with open(metrics, "a") as fh:
                    fh.write("".join(l + "\n" for l in self.log_lines[n_before:]))
            if out is not None:
                self.save(out / f"epoch_{self.epoch:03d}.ckpt")
        return self.log_lines

    # --- persistence -----------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        tensors = {f"{k}.{n}": t for k, net in self.bundle.networks().items()
                   for n, t in net.state_dict().items()}
        for oname, opt in self.optimizers.items():
            for pname, p in zip(opt.param_names, opt.param_groups[0]["params"]):
                st = opt.state.get(p)
                if st:
                    tensors[f"opt.{oname}.{pname}.exp_avg"] = st["exp_avg"]
                    tensors[f"opt.{oname}.{pname}.exp_avg_sq"] = st["exp_avg_sq"]
        return tensors

    def save(self, path: str | Path) -> None:
        steps = {}
        for oname, opt in self.optimizers.items():
            steps[oname] = {pname: float(opt.state[p]["step"])
                            for pname, p in zip(opt.param_names, opt.param_groups[0]["params"])
                            if opt.state.get(p)}
        header = {
            "kind": "bundle",
            "model_config": self.bundle.cfg.to_dict(),
            "train_config": self.config.to_dict(),
            "e_id_digest": self.bundle.digest("e_id"),
            "frozen": {"e_id": True},
            "epoch": self.epoch,
            "extra": {"step": self.step_count, "optimizer_steps": steps,
                      "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
                      "rng_state": self.rng.get_state().numpy().tobytes().hex()},
        }
        ckpt.save_checkpoint(path, self.state_tensors(), header)

    @classmethod
    def resume(cls, path: str | Path, config: TrainConfig | None = None) -> "Trainer":
        tensors, header = ckpt.load_checkpoint(path)
        if header.get("kind") != "bundle":
            raise ValueError(f"{path}: not a training checkpoint")
        bundle = bundle_from_tensors(tensors, header)
        trainer = cls(bundle, config or TrainConfig.from_dict(header["train_config"]))
        trainer.epoch = header["epoch"]
        extra = header["extra"]
        trainer.step_count = extra["step"]
        trainer.rng.set_state(torch.from_numpy(
            np.frombuffer(bytes.fromhex(extra["rng_state"]), np.uint8).copy()))
        for oname, opt in trainer.optimizers.items():
            for pname, p in zip(opt.param_names, opt.param_groups[0]["params"]):
                key = f"opt.{oname}.{pname}"
                if f"{key}.exp_avg" not in tensors:
                    continue
                opt.state[p] = {
                    "step": torch.tensor(extra["optimizer_steps"][oname][pname]),
                    "exp_avg": tensors[f"{key}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
                }
        return trainer


@contextlib.contextmanager
def _no_param_grads(*modules):
    params = [p for m in modules if m is not None for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def _json_line(rec: dict) -> str:
    import json
    return json.dumps(rec)


def bundle_from_tensors(tensors: dict[str, torch.Tensor], header: dict) -> ModelBundle:
    cfg = ModelConfig.from_dict(header["model_config"])
    bundle = ModelBundle(cfg)
    for k, net in bundle.networks().items():
        sd = {n[len(k) + 1:]: t for n, t in tensors.items() if n.startswith(k + ".")}
        net.load_state_dict(sd)
    bundle.load_identity_encoder(bundle.e_id)
    if bundle.digest("e_id") != header["e_id_digest"]:
        raise ValueError("identity encoder digest mismatch in checkpoint")
    return bundle


def check_compatible(cfg: ModelConfig, data: Dataset) -> None:
    h, w, c = data.shape
    if (c, h, w) != cfg.image_shape:
        raise TrainingError(f"dataset images {(h, w, c)} do not match model input "
                            f"{cfg.image_shape} (C, H, W)")
    if data.n_expressions != cfg.n_expressions:
        raise TrainingError(f"dataset has K={data.n_expressions}, model expects {cfg.n_expressions}")


def build_bundle(identity_encoder: Encoder, model_cfg: ModelConfig, config: TrainConfig) -> ModelBundle:
    """Fresh bundle around a pretrained identity encoder.

    With ``init_from_identity`` the trainable encoders and D's body start
    from the identity encoder's weights.
    """
    cfg = dataclasses.replace(model_cfg, pose_branch=(config.mode == "ipd"))
    bundle = ModelBundle(cfg, seed=config.seed)
    bundle.load_identity_encoder(identity_encoder)
    if config.init_from_identity:
        state = identity_encoder.state_dict()
        for enc in (bundle.e_exp, bundle.e_pose, bundle.disc.body):
            if enc is not None:
                enc.load_state_dict(state)
    return bundle


def train(config: TrainConfig, dataset: Dataset, identity_encoder: Encoder,
          model_cfg: ModelConfig | None = None, out_dir=None) -> Trainer:
    """Build a bundle, train on the train split of ``test_fold`` and return the trainer."""
    model_cfg = model_cfg or model_config_for(dataset)
    check_compatible(model_cfg, dataset)
    train_split, _ = dataset.split(config.test_fold)
    trainer = Trainer(build_bundle(identity_encoder, model_cfg, config), config)
    trainer.train(train_split, out_dir)
    return trainer


def model_config_for(dataset: Dataset, **overrides) -> ModelConfig:
    h, w, c = dataset.shape
    return ModelConfig(height=h, width=w, channels=c, n_expressions=dataset.n_expressions,
                       **overrides)
