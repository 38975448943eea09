"""Central finite differences against autograd, in float64.

A central difference is only meaningful where the function is smooth over
[theta - h, theta + h]. ReLU-family activations and absolute values have
kinks; when a perturbation moves any of their inputs across zero the sampled
entry is replaced by another one and counted in ``skipped``.
"""
import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

_KINKED = {F.relu, torch.relu, F.leaky_relu, torch.abs, torch.Tensor.abs}


class SignPattern(TorchFunctionMode):
    """Record input signs of every kinked op evaluated inside the context."""

    def __init__(self):
        super().__init__()
        self.patterns = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func in _KINKED:
            self.patterns.append((args[0].detach() > 0).clone())
        return func(*args, **(kwargs or {}))


def _eval(fn):
    with SignPattern() as sp:
        val = fn().item()
    return val, sp.patterns


def _same(pa, pb):
    return len(pa) == len(pb) and all(torch.equal(a, b) for a, b in zip(pa, pb))


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _probe(fn, flat, i, h):
    """Central difference at flat[i]; None when a kink lies inside the window."""
    orig = flat[i].item()
    flat[i] = orig + h
    up, p_up = _eval(fn)
    flat[i] = orig - h
    down, p_down = _eval(fn)
    flat[i] = orig
    if not _same(p_up, p_down):
        return None
    return (up - down) / (2 * h)


def check_tensor(fn, tensor: torch.Tensor, n: int = 20, h: float = 1e-4, seed: int = 0):
    """Relative errors of autograd vs central differences on ``n`` entries of a leaf tensor."""
    errors, _ = _check([tensor], fn, n, h, seed)
    return errors


def check_module(fn, module: torch.nn.Module, n: int = 20, h: float = 1e-4, seed: int = 0,
                 return_skipped: bool = False):
    """Sample ``n`` smooth scalar parameters across all of ``module``'s tensors."""
    params = [p for p in module.parameters() if p.requires_grad]
    errors, skipped = _check(params, fn, n, h, seed)
    return (errors, skipped) if return_skipped else errors


def _check(params, fn, n, h, seed, max_tries=50):
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone().reshape(-1) if p.grad is not None
                else torch.zeros(p.numel(), dtype=p.dtype) for p in params]
    sizes = np.array([p.numel() for p in params], dtype=float)
    rng = np.random.default_rng(seed)
    errors, skipped, tried = [], 0, set()
    total = int(sizes.sum())
    with torch.no_grad():
        while len(errors) < min(n, total) and len(tried) < total:
            if skipped > max_tries * n:
                raise RuntimeError("too many sampled entries sit on kinks")
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            flat = params[k].data.view(-1)
            i = int(rng.integers(flat.numel()))
            if (k, i) in tried:
                continue
            tried.add((k, i))
            numeric = _probe(fn, flat, i, h)
            if numeric is None:
                skipped += 1
                continue
            errors.append(rel_err(analytic[k][i].item(), numeric))
    return errors, skipped
