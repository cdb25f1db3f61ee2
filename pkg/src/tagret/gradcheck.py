"""Central finite-difference checks of autograd gradients at float64."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .backbone import ModelConfig, TagClip, build_model
from .data import GeneratorConfig, compose_caption, generate_identities, render_image
from .errors import ConfigError, NumericError
from .losses import BatchFeatures, LossWeights, total_loss

# Gradients smaller than this are compared absolutely: round-off in the
# finite difference of an O(10) loss is ~1e-10 at eps=1e-5, and some true
# gradients are exactly zero (attention key biases).
REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    n_checked: int
    n_skipped: int  # elements whose perturbation flipped a discrete routing/selection choice
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    eps: float = 1e-5,
    n_per_param: int = 3,
    seed: int = 0,
    tolerance: float = 1e-4,
    signature_fn: Callable[[], object] | None = None,
) -> GradCheckReport:
    """Compare autograd with central differences on a random subset of elements.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    If ``signature_fn`` is given, it returns the discrete decisions of the last
    ``loss_fn`` call; perturbations that change them are skipped, since the
    loss is not differentiable across such a switch.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    names = list(params)
    loss = loss_fn()
    base_sig = signature_fn() if signature_fn else None
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)

    worst = (0.0, "", -1)
    n_checked = n_skipped = 0
    per_param = {}
    with torch.no_grad():
        for name, g in zip(names, grads):
            p = params[name]
            flat = p.view(-1)
            g = torch.zeros_like(p) if g is None else g
            picks = rng.choice(flat.numel(), size=min(n_per_param, flat.numel()), replace=False)
            param_worst = 0.0
            for i in picks:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                sig_plus = signature_fn() if signature_fn else None
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                sig_minus = signature_fn() if signature_fn else None
                flat[i] = orig
                if signature_fn and not (sig_plus == base_sig == sig_minus):
                    n_skipped += 1
                    continue
                numeric = (f_plus - f_minus) / (2 * eps)
                err = relative_error(float(g.view(-1)[i]), numeric)
                n_checked += 1
                param_worst = max(param_worst, err)
                if err > worst[0]:
                    worst = (err, name, i)
            per_param[name] = param_worst
    return GradCheckReport(worst[0], worst[1], worst[2], n_checked, n_skipped, tolerance, per_param)


def toy_batch(batch_size: int = 4, seed: int = 0, config: GeneratorConfig | None = None):
    """In-memory batch with one repeated identity and both views."""
    config = config or GeneratorConfig(n_train_ids=batch_size, n_test_ids=1, test_id_start=batch_size)
    n_ids = max(batch_size - 1, 1)
    specs = generate_identities(seed, list(range(n_ids)), config)
    ids = [specs[i % n_ids].id_index for i in range(batch_size)]
    ids[-1] = ids[0]
    views = [i % 2 for i in range(batch_size)]
    images = np.stack([render_image(specs[ids[i]], views[i], seed * 1000 + i, config) for i in range(batch_size)])
    captions = [compose_caption(specs[ids[i]], seed * 1000 + i, config) for i in range(batch_size)]
    tokens = np.zeros((batch_size, config.max_len), dtype=np.int64)
    for i, c in enumerate(captions):
        tokens[i, : len(c)] = c
    return (
        torch.from_numpy(images),
        torch.from_numpy(tokens),
        torch.tensor(ids),
        torch.tensor(views),
    )


def _tse_keep(locals_, global_, ratio, mask=None):
    d = locals_.shape[-1]
    scores = (locals_ @ global_.unsqueeze(-1)).squeeze(-1) / d**0.5
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return tuple(torch.argsort(scores, dim=-1, descending=True, stable=True).reshape(-1).tolist())


def model_loss_closure(model: TagClip, batch, weights: LossWeights, component: str = "L"):
    """(loss_fn, signature_fn) over a fixed batch for :func:`grad_check`."""
    images, tokens, ids, views = batch
    images = images.to(torch.float64)
    n_classes = model.cfg.n_classes
    class_ids = ids % n_classes
    state = {}

    def loss_fn():
        vf = model.encode_image(images, view_hint=views)
        tf = model.encode_text(tokens)
        report = total_loss(BatchFeatures(vf, tf, ids, class_ids, views), model, weights)
        state["sig"] = (
            tuple(tuple(t.z.tolist()) for t in vf.traces if t.z is not None),
            tuple(tuple(t.indices.reshape(-1).tolist()) for t in vf.traces),
            _tse_keep(vf.locals, vf.cls, model.cfg.tse_ratio),
            _tse_keep(tf.locals, tf.eos, model.cfg.tse_ratio, tf.local_mask),
        )
        state["report"] = report
        return getattr(report, component)

    return loss_fn, lambda: state["sig"]


def routing_exclusion(model: TagClip, batch, weights: LossWeights) -> bool:
    """True if the image routers get no gradient except through the view loss."""
    routers = [p for r in model.image_routers() for p in r.parameters()]
    if not routers:
        return True
    images, tokens, ids, views = batch
    vf = model.encode_image(images.to(torch.float64), view_hint=views)
    tf = model.encode_text(tokens)
    report = total_loss(BatchFeatures(vf, tf, ids, ids % model.cfg.n_classes, views), model, weights)
    without_view = report.L1 + weights.lambda_ortho * report.L_ortho
    grads = torch.autograd.grad(without_view, routers, allow_unused=True)
    return all(g is None or bool((g == 0).all()) for g in grads)


def check_model(
    model_cfg: ModelConfig | None = None,
    weights: LossWeights | None = None,
    batch_size: int = 4,
    seed: int = 0,
    n_per_param: int = 3,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    component: str = "L",
) -> tuple[GradCheckReport, bool]:
    """Grad-check one loss component of a freshly initialized float64 model.

    Returns the report and whether the routing-path exclusion holds.
    """
    model_cfg = model_cfg or ModelConfig(n_classes=batch_size)
    weights = weights or LossWeights()
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        model = build_model(model_cfg, seed).double()
        batch = toy_batch(batch_size, seed)
        loss_fn, sig_fn = model_loss_closure(model, batch, weights, component)
        params = dict(model.named_parameters())
        report = grad_check(loss_fn, params, eps, n_per_param, seed, tolerance, sig_fn)
        excluded = routing_exclusion(model, batch, weights)
    finally:
        torch.set_default_dtype(prev)
    if not np.isfinite(report.max_rel_error):
        raise NumericError("non-finite gradient check result")
    return report, excluded
