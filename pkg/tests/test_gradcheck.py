import numpy as np
import pytest
import torch
from torch import nn

from conftest import tiny_model
from tagret.errors import ConfigError
from tagret.gradcheck import REL_FLOOR, check_model, grad_check, relative_error, toy_batch
from tagret.losses import LossWeights, id_loss, nitc_loss, ortho_loss, ritc_loss, view_loss


def _leaf(seed, *shape):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape)).requires_grad_(True)


def test_relative_error_floor():
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-9 / REL_FLOOR)


def test_linear_layer_is_exact():
    torch.manual_seed(0)
    layer = nn.Linear(5, 3).double()
    x = torch.randn(7, 5, dtype=torch.float64)
    params = dict(layer.named_parameters())
    report = grad_check(lambda: (layer(x) ** 2).sum(), params, n_per_param=15)
    assert report.n_checked == 15 + 3
    assert report.max_rel_error < 1e-7


def test_rejects_float32():
    w = torch.zeros(3, requires_grad=True)
    with pytest.raises(ConfigError):
        grad_check(lambda: (w**2).sum(), {"w": w})


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x**2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # should be 2x


def test_detects_wrong_backward():
    good, bad = _leaf(0, 4), _leaf(1, 4)
    report = grad_check(lambda: (good**2).sum() + _WrongSquare.apply(bad).sum(), {"good": good, "bad": bad}, n_per_param=4)
    assert not report.passed
    assert report.worst_param == "bad"
    assert report.per_param["good"] < 1e-7


def test_discrete_switch_is_skipped():
    # loss jumps when the argmax changes; eps is large enough to flip it for element 0
    w = torch.tensor([1.0, 0.9999], dtype=torch.float64, requires_grad=True)
    state = {}

    def loss():
        state["z"] = int(torch.argmax(w))
        return w[state["z"]] * 10 + w.sum()

    report = grad_check(loss, {"w": w}, eps=1e-3, n_per_param=2, signature_fn=lambda: state["z"])
    assert report.n_skipped >= 1
    assert report.passed


@pytest.mark.parametrize(
    "name, fn",
    [
        ("nitc", lambda a, b: nitc_loss(a, b, torch.tensor([0, 0, 1, 2]), 0.2)),
        ("ritc", lambda a, b: ritc_loss(a, b, torch.tensor([0, 0, 1, 2]), 0.2, 0.05)),
        ("ortho_hinge", lambda a, b: ortho_loss(a, b, 0.1, "hinge")),
        ("ortho_verbatim", lambda a, b: ortho_loss(a, b, 1.0)),
        ("view", lambda a, b: view_loss(a[:, :2], torch.tensor([0, 1, 1, 0]))),
    ],
)
def test_each_loss_in_isolation(name, fn):
    a, b = _leaf(10, 4, 6), _leaf(11, 4, 6)
    report = grad_check(lambda: fn(a, b), {"a": a, "b": b}, n_per_param=24)
    assert report.max_rel_error < 1e-4, name


def test_id_loss_in_isolation():
    torch.manual_seed(0)
    clf = nn.Linear(6, 3).double()
    a, b = _leaf(12, 4, 6), _leaf(13, 4, 6)
    params = {"a": a, "b": b, **dict(clf.named_parameters())}
    report = grad_check(lambda: id_loss(a, b, torch.tensor([0, 2, 1, 0]), clf), params, n_per_param=24)
    assert report.max_rel_error < 1e-4


def test_toy_batch_contents():
    images, tokens, ids, views = toy_batch(4, seed=0)
    assert images.shape == (4, 32, 32, 3) and tokens.shape[0] == 4
    assert len(set(ids.tolist())) < 4  # a repeated identity exercises multi-positive rows
    assert set(views.tolist()) == {0, 1}


def test_full_model_total_loss():
    report, excluded = check_model(batch_size=4, seed=0)
    assert report.max_rel_error < 1e-4, (report.worst_param, report.max_rel_error)
    assert report.n_checked > 100
    assert excluded


def test_tiny_model_components():
    for component in ("L_GA", "L_LA", "L_view"):
        report, _ = check_model(tiny_model(n_classes=4), component=component, n_per_param=2)
        assert report.passed, component


def test_routing_exclusion_without_view_loss():
    # routers then receive no gradient at all
    _, excluded = check_model(tiny_model(n_classes=4), LossWeights(view_loss=False), n_per_param=1)
    assert excluded
