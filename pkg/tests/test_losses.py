import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fdcheck import check_tensor
from ipdfer.losses import (
    LossError, LossReport, LossWeights, assemble_generator_loss, confusion_from_logits,
    cosine_abs, loss_ce, loss_confusion, loss_cos, loss_id, loss_id_from_features, loss_recon,
)

torch.set_default_dtype(torch.float32)


def imgs(n=4, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 1, 8, 8, generator=g, dtype=dtype)


# reconstruction

def test_recon_zero_when_fakes_match():
    x = imgs()
    y = torch.tensor([0, 1, 0, 2])
    assert float(loss_recon(x, x, x, y)) == 0.0


def test_recon_constant_offset():
    x = imgs() * 0.5
    y = torch.tensor([1, 1, 2, 3])
    assert float(loss_recon(x + 0.5, x, x, y)) == pytest.approx(0.5, abs=1e-7)


def test_recon_neutral_gate_brute_force():
    x, a, b = imgs(seed=0), imgs(seed=1), imgs(seed=2)
    y = torch.tensor([0, 1, 0, 3])
    total = 0.0
    for n in range(4):
        s_ipe = sum(abs(float(a[n, 0, i, j] - x[n, 0, i, j])) for i in range(8) for j in range(8)) / 64
        s_ip = sum(abs(float(b[n, 0, i, j] - x[n, 0, i, j])) for i in range(8) for j in range(8)) / 64
        total += s_ipe + (s_ip if int(y[n]) == 0 else 0.0)
    assert float(loss_recon(a, b, x, y)) == pytest.approx(total / 4, abs=1e-6)


def test_recon_ignores_neutral_fake_for_expressive():
    x, a = imgs(seed=0), imgs(seed=1)
    y = torch.tensor([1, 2, 3, 1])
    junk = torch.full_like(x, 7.0)
    assert float(loss_recon(a, junk, x, y)) == float(loss_recon(a, x, x, y))


def test_recon_shape_mismatch():
    with pytest.raises(ValueError):
        loss_recon(imgs(3), imgs(4), imgs(4), torch.zeros(4, dtype=torch.long))


def test_recon_gradient_fd():
    x = imgs(dtype=torch.float64)
    y = torch.tensor([0, 1, 0, 2])
    a = (imgs(seed=3, dtype=torch.float64)).requires_grad_()
    b = imgs(seed=4, dtype=torch.float64)
    errs = check_tensor(lambda: loss_recon(a, b, x, y), a)
    assert max(errs) < 1e-3


# identity consistency

def test_id_loss_uses_same_network_and_matches_features():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(64, 5))
    x, a, b = imgs(seed=0), imgs(seed=1), imgs(seed=2)
    with torch.no_grad():
        expect = ((net(a) - net(x)).abs().mean(1) + (net(b) - net(x)).abs().mean(1)).mean()
    assert float(loss_id(net, a, b, x).detach()) == pytest.approx(float(expect), rel=1e-6)


def test_id_loss_zero_for_identical_features():
    f = torch.randn(5, 16)
    assert float(loss_id_from_features(f, f, f)) == 0.0


def test_id_loss_no_grad_into_target():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(64, 5))
    x = imgs().requires_grad_()
    a, b = imgs(seed=1).requires_grad_(), imgs(seed=2)
    loss_id(net, a, b, x).backward()
    assert x.grad is None and a.grad is not None


# cosine orthogonality

@pytest.mark.parametrize("a,b,expected", [
    ((1.0, 0.0), (0.0, 1.0), 0.0),
    ((1.0, 0.0), (-2.0, 0.0), 1.0),
    ((3.0, 4.0), (4.0, -3.0), 0.0),
])
def test_cos_examples(a, b, expected):
    val = loss_cos(torch.tensor([a]), torch.tensor([b]))
    assert float(val) == pytest.approx(expected, abs=1e-7)


def test_cos_degenerate_flag():
    val, flag = loss_cos(torch.zeros(2, 3), torch.ones(2, 3), return_flag=True)
    assert flag and float(val) == 0.0 and math.isfinite(float(val))
    _, flag = loss_cos(torch.ones(2, 3), torch.ones(2, 3), return_flag=True)
    assert not flag


def test_cos_against_numpy_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 12)), rng.normal(size=(7, 12))
    ref = np.mean([abs(a[i] @ b[i]) / (np.linalg.norm(a[i]) * np.linalg.norm(b[i])) for i in range(7)])
    assert float(loss_cos(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_cos_scale_invariant(seed, s1, s2):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(3, 8, generator=g, dtype=torch.float64)
    b = torch.randn(3, 8, generator=g, dtype=torch.float64)
    base = float(loss_cos(a, b))
    assert float(loss_cos(a * s1, b * s2)) == pytest.approx(base, abs=1e-10)
    assert 0.0 <= base <= 1.0 + 1e-12


def test_cos_gradient_fd():
    g = torch.Generator().manual_seed(2)
    a = torch.randn(4, 6, generator=g, dtype=torch.float64).requires_grad_()
    b = torch.randn(4, 6, generator=g, dtype=torch.float64)
    assert max(check_tensor(lambda: loss_cos(a, b), a)) < 1e-3


# pose confusion

def test_confusion_uniform_is_log_k():
    assert float(confusion_from_logits(torch.zeros(3, 5))) == pytest.approx(math.log(5), abs=1e-6)


def test_confusion_peaked_scalar_oracle():
    z = [10.0, 0.0, 0.0, 0.0, 0.0]
    lse = math.log(sum(math.exp(v) for v in z))
    ref = -sum(v - lse for v in z) / 5
    assert float(confusion_from_logits(torch.tensor([z], dtype=torch.float64))) == pytest.approx(ref, rel=1e-12)
    assert ref > math.log(5)


def test_confusion_minimum_at_uniform_grid():
    # scan logit offsets of one class; the minimum sits at zero offset
    grid = np.linspace(-3, 3, 61)
    vals = [float(confusion_from_logits(torch.tensor([[t, 0, 0, 0, 0]], dtype=torch.float64))) for t in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(0.0, abs=1e-9)
    assert min(vals) == pytest.approx(math.log(5), abs=1e-12)


def test_confusion_through_classifier():
    c_p = torch.nn.Linear(6, 5)
    f = torch.randn(4, 6)
    assert float(loss_confusion(c_p, f).detach()) == pytest.approx(float(confusion_from_logits(c_p(f)).detach()))


def test_confusion_gradient_fd():
    z = torch.randn(4, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(5)).requires_grad_()
    assert max(check_tensor(lambda: confusion_from_logits(z), z)) < 1e-3


# cross-entropy

def test_ce_confident_correct():
    logits = torch.tensor([[20.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(loss_ce(logits, torch.tensor([0]))) < 1e-8


def test_ce_zero_logits_log_k():
    assert float(loss_ce(torch.zeros(6, 4), torch.tensor([0, 1, 2, 3, 0, 1]))) == pytest.approx(math.log(4), abs=1e-6)


def test_ce_logsumexp_oracle():
    rng = np.random.default_rng(3)
    z = rng.normal(scale=5, size=(9, 4))
    y = rng.integers(0, 4, 9)
    ref = np.mean([np.log(np.sum(np.exp(z[i] - z[i].max()))) + z[i].max() - z[i, y[i]] for i in range(9)])
    got = float(loss_ce(torch.from_numpy(z), torch.from_numpy(y)))
    assert got == pytest.approx(ref, abs=1e-12)


def test_ce_label_range():
    with pytest.raises(ValueError):
        loss_ce(torch.zeros(2, 4), torch.tensor([0, 4]))
    with pytest.raises(ValueError):
        loss_ce(torch.zeros(2, 4), torch.tensor([-1, 0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_batch_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    n = 6
    z = torch.randn(n, 4, generator=g, dtype=torch.float64)
    y = torch.randint(0, 4, (n,), generator=g)
    x, a, b = (torch.rand(n, 1, 4, 4, generator=g, dtype=torch.float64) for _ in range(3))
    f1, f2 = torch.randn(n, 8, generator=g, dtype=torch.float64), torch.randn(n, 8, generator=g, dtype=torch.float64)
    p = torch.randperm(n, generator=g)
    close = lambda u, v: abs(float(u) - float(v)) < 1e-12
    assert close(loss_ce(z, y), loss_ce(z[p], y[p]))
    assert close(loss_recon(a, b, x, y), loss_recon(a[p], b[p], x[p], y[p]))
    assert close(loss_cos(f1, f2), loss_cos(f1[p], f2[p]))
    assert close(confusion_from_logits(z), confusion_from_logits(z[p]))


def test_ce_gradient_fd():
    z = torch.randn(5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(6)).requires_grad_()
    y = torch.tensor([0, 3, 1, 2, 2])
    assert max(check_tensor(lambda: loss_ce(z, y), z)) < 1e-3


# assembly

def _terms(**kw):
    t = dict(neu_fake=1.0, exp_fake=1.0, id=1.0, recon=1.0, c=1.0, cos=1.0, confusion=1.0)
    t.update(kw)
    return t


def test_assemble_all_ones():
    g_prime, g_total = assemble_generator_loss(_terms(), LossWeights())
    assert g_prime == pytest.approx(11.002, abs=1e-12)
    assert g_total == pytest.approx(13.502, abs=1e-12)


def test_assemble_random_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = dict(zip(("neu_fake", "exp_fake", "id", "recon", "c", "cos", "confusion"), rng.uniform(0, 5, 7)))
        w = LossWeights(*rng.uniform(0, 3, 6))
        gp = (w.lambda1 * vals["neu_fake"] + w.lambda2 * vals["exp_fake"] + w.lambda3 * vals["id"]
              + w.lambda4 * vals["recon"])
        gt = gp + vals["c"] + w.beta1 * vals["cos"] + w.beta2 * vals["confusion"]
        got = assemble_generator_loss(vals, w)
        assert got[0] == pytest.approx(gp, rel=1e-12) and got[1] == pytest.approx(gt, rel=1e-12)


def test_assemble_tensor_terms_keep_graph():
    x = torch.tensor(2.0, requires_grad=True)
    _, total = assemble_generator_loss(_terms(recon=x * 1.0), LossWeights())
    total.backward()
    assert float(x.grad) == pytest.approx(10.0)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_assemble_non_finite_raises(bad):
    with pytest.raises(LossError, match="cos"):
        assemble_generator_loss(_terms(cos=bad), LossWeights())


@pytest.mark.parametrize("kw", [dict(lambda1=-1.0), dict(beta2=float("nan"))])
def test_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_report_finalize():
    r = LossReport().update(**_terms(c=0.0), exp_cls=0.7, pose_cls=0.3)
    r.finalize(LossWeights())
    assert r.c == pytest.approx(1.0)
    assert r.g_total == pytest.approx(13.502)


def test_cosine_abs_shape_mismatch():
    with pytest.raises(ValueError):
        cosine_abs(torch.zeros(2, 3), torch.zeros(2, 4))
