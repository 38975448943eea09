"""Encoders, decoder, discriminator and classifiers, plus identity pretraining.

Images enter the networks as NCHW float tensors; :func:`to_tensor` converts
the generator's NHWC arrays.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    height: int = 32
    width: int = 32
    channels: int = 1
    n_expressions: int = 4
    n_poses: int = 5
    pose_branch: bool = True
    # "group" normalizes each sample over all channels; "instance" per channel
    decoder_norm: str = "group"

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) array -> (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    """Strided conv stack -> flatten -> affine map to a d-dim feature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, c = [], cfg.channels
        for w in cfg.widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        self.conv = nn.Sequential(*layers)
        side = cfg.height // 2 ** len(cfg.widths)
        self.fc = nn.Linear(c * side * side, cfg.feature_dim)
        self.input_shape = cfg.image_shape
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv(x).flatten(1))


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(1, channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    raise ValueError(f"unknown decoder_norm {kind!r}")


class Decoder(nn.Module):
    """Affine map to a small spatial block, transposed convs up to image size."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = list(cfg.widths)[::-1]
        self.side = cfg.height // 2 ** len(widths)
        self.fc = nn.Linear(cfg.feature_dim, widths[0] * self.side * self.side)
        layers = []
        for cin, cout in zip(widths, widths[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                       _norm(cfg.decoder_norm, cout), nn.ReLU()]
        layers += [nn.ConvTranspose2d(widths[-1], cfg.channels, 4, stride=2, padding=1),
                   nn.Sigmoid()]
        self.up = nn.Sequential(*layers)
        self.widths = widths
        self.feature_dim = cfg.feature_dim
        _init_weights(self)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(f)).view(-1, self.widths[0], self.side, self.side)
        return self.up(h)


class Discriminator(nn.Module):
    """Encoder topology with a K-way expression head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.body = Encoder(cfg)
        self.head = nn.Linear(cfg.feature_dim, cfg.n_expressions)
        self.input_shape = cfg.image_shape
        _init_weights(self.head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(F.leaky_relu(self.body(x), 0.2))


def _classifier(d: int, k: int) -> nn.Linear:
    c = nn.Linear(d, k)
    nn.init.normal_(c.weight, std=d ** -0.5)
    nn.init.zeros_(c.bias)
    return c


class ModelBundle(nn.Module):
    """E_id (frozen), E_pose, E_exp, G_dec, D, C_p, C_exp.

    With ``pose_branch=False`` the pose encoder and classifier are absent.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.e_id = Encoder(cfg)
            self.e_exp = Encoder(cfg)
            self.dec = Decoder(cfg)
            self.disc = Discriminator(cfg)
            self.c_exp = _classifier(cfg.feature_dim, cfg.n_expressions)
            if cfg.pose_branch:
                self.e_pose = Encoder(cfg)
                self.c_p = _classifier(cfg.feature_dim, cfg.n_poses)
            else:
                self.e_pose = None
                self.c_p = None
        self.id_frozen = False

    def networks(self) -> dict[str, nn.Module]:
        nets = {"e_id": self.e_id, "e_pose": self.e_pose, "e_exp": self.e_exp,
                "dec": self.dec, "disc": self.disc, "c_p": self.c_p, "c_exp": self.c_exp}
        return {k: v for k, v in nets.items() if v is not None}

    def trainable(self) -> dict[str, bool]:
        return {k: any(p.requires_grad for p in net.parameters())
                for k, net in self.networks().items()}

    def load_identity_encoder(self, encoder: Encoder) -> None:
        self.e_id.load_state_dict(encoder.state_dict())
        freeze(self.e_id)
        self.id_frozen = True

    def digest(self, name: str) -> str:
        return parameter_digest(self.networks()[name])

    def digests(self) -> dict[str, str]:
        return {k: parameter_digest(v) for k, v in self.networks().items()}

    # feature helpers used by trainer and eval
    def features(self, x: torch.Tensor):
        f_id = encode(self.e_id, x)
        f_pose = encode(self.e_pose, x) if self.e_pose is not None else None
        f_exp = encode(self.e_exp, x)
        return f_id, f_pose, f_exp

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Inference path: C_exp(E_exp(x)) logits."""
        return classify(self.c_exp, encode(self.e_exp, x))


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and little-endian float32 bytes."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


def _check_image(x: torch.Tensor, expected: tuple[int, int, int]) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"expected images of shape (N, {', '.join(map(str, expected))}), "
                         f"got {tuple(x.shape)}")


def _check_feature(f: torch.Tensor, d: int) -> None:
    if f.shape[-1] != d:
        raise ShapeError(f"expected feature dimension {d}, got {f.shape[-1]}")


def encode(encoder: Encoder, image: torch.Tensor) -> torch.Tensor:
    _check_image(image, encoder.input_shape)
    return encoder(image)


def compose(f_id: torch.Tensor, f_pose: torch.Tensor | None,
            f_exp: torch.Tensor | None = None) -> torch.Tensor:
    """Holistic feature as the vector sum f_id + f_pose (+ f_exp)."""
    out = f_id
    for f in (f_pose, f_exp):
        if f is None:
            continue
        if f.shape != out.shape:
            raise ShapeError(f"feature shapes differ: {tuple(out.shape)} vs {tuple(f.shape)}")
        out = out + f
    return out


def decode(decoder: Decoder, f: torch.Tensor) -> torch.Tensor:
    _check_feature(f, decoder.feature_dim)
    return decoder(f)


def discriminate(disc: Discriminator, image: torch.Tensor):
    """Return (softmax probabilities, logits)."""
    _check_image(image, disc.input_shape)
    logits = disc(image)
    return torch.softmax(logits, dim=-1), logits


def classify(classifier: nn.Linear, f: torch.Tensor) -> torch.Tensor:
    _check_feature(f, classifier.in_features)
    return classifier(f)


@dataclass
class PretrainResult:
    encoder: Encoder
    digest: str
    accuracy: float
    # identity head matched to the rescaled encoder; only used for recounts
    head: nn.Linear | None = None


def pretrain_identity_encoder(images: np.ndarray, identity_ids: np.ndarray, cfg: ModelConfig,
                              epochs: int = 40, lr: float = 1e-3, batch_size: int = 32,
                              seed: int = 0) -> PretrainResult:
    """Train an encoder + temporary linear identity head by cross-entropy.

    The head is not part of the model; the returned encoder is frozen.
    ``accuracy`` is the final training-set identity accuracy, reproducible as
    ``head(leaky_relu(encoder(x), 0.2))`` with the returned head.
    """
    uniq, labels = np.unique(identity_ids, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("identity pretraining needs at least 2 identities")
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc = Encoder(cfg)
        head = _classifier(cfg.feature_dim, len(uniq))
    x = to_tensor(images)
    y = torch.from_numpy(labels.astype(np.int64))
    params = list(enc.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(head(F.leaky_relu(enc(x[idx]), 0.2)), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        # rescale the output layer so features have unit RMS per component;
        # the head is discarded, so this only fixes the feature scale
        rms = enc(x).pow(2).mean().sqrt()
        enc.fc.weight.div_(rms)
        enc.fc.bias.div_(rms)
        # leaky_relu is positively homogeneous, so this keeps the logits
        head.weight.mul_(rms)
        pred = head(F.leaky_relu(enc(x), 0.2)).argmax(1)
        acc = int((pred == y).sum()) / len(y)
    freeze(enc)
    freeze(head)
    return PretrainResult(enc, parameter_digest(enc), acc, head)


def clone_frozen(module: nn.Module) -> nn.Module:
    return freeze(copy.deepcopy(module))
