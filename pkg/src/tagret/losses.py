"""Training objectives.

Alignment losses compare the softmaxed image-text similarity matrix with the
identity label distribution ``q`` (rows share mass equally among positives):

* N-ITC: forward KL, ``0.5 * [KL(q || p_i2t) + KL(q || p_t2i)]``
* R-ITC: reverse KL against a smoothed target,
  ``0.5 * [KL(p_i2t || q~) + KL(p_t2i || q~)]`` with ``q~ = (1-eps) q + eps/B``

Viewpoint decoupling adds a cross-entropy view loss on the image router's
logits and a clamped orthogonality loss ``min(|cos(v_cls, v_view)|, alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch.nn import functional as F

from .errors import ConfigError, InputError, NumericError

ORTHO_VARIANTS = ("verbatim", "hinge")


def _normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    zero = (norms == 0).reshape(-1).nonzero()
    if len(zero):
        raise NumericError(f"{what}: zero-norm feature at sample index {int(zero[0])}")
    return x / norms


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; raises on zero-norm rows."""
    return (_normalize(a, "cosine") * _normalize(b, "cosine")).sum(dim=-1)


def similarity_matrix(img: torch.Tensor, txt: torch.Tensor, temperature) -> torch.Tensor:
    """``S[i, j] = cos(img_i, txt_j) / temperature``."""
    t = temperature.item() if isinstance(temperature, torch.Tensor) else float(temperature)
    if t <= 0:
        raise ConfigError(f"temperature must be positive, got {t}")
    return _normalize(img, "image features") @ _normalize(txt, "text features").T / temperature


def label_distribution(ids: torch.Tensor, dtype: torch.dtype | None = None) -> torch.Tensor:
    same = (ids.unsqueeze(0) == ids.unsqueeze(1)).to(dtype or torch.get_default_dtype())
    return same / same.sum(dim=1, keepdim=True)


def _kl_rows(p: torch.Tensor, log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Mean over rows of sum_j p log(p/q), with 0 log 0 = 0."""
    terms = torch.where(p > 0, p * (log_p - log_q), torch.zeros_like(p))
    return terms.sum(dim=1).mean()


def nitc_loss(img, txt, ids, temperature) -> torch.Tensor:
    s = similarity_matrix(img, txt, temperature)
    q = label_distribution(ids, s.dtype)
    log_q = torch.log(q.clamp_min(torch.finfo(s.dtype).tiny))
    i2t = _kl_rows(q, log_q, F.log_softmax(s, dim=1))
    t2i = _kl_rows(q, log_q, F.log_softmax(s.T, dim=1))
    return 0.5 * (i2t + t2i)


def ritc_loss(img, txt, ids, temperature, epsilon: float = 0.05) -> torch.Tensor:
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    s = similarity_matrix(img, txt, temperature)
    b = s.shape[0]
    q = (1 - epsilon) * label_distribution(ids, s.dtype) + epsilon / b
    log_q = torch.log(q)
    out = 0.0
    for logits in (s, s.T):
        log_p = F.log_softmax(logits, dim=1)
        out = out + _kl_rows(log_p.exp(), log_p, log_q)
    return 0.5 * out


def alignment_loss(img, txt, ids, temperature, epsilon: float = 0.05) -> torch.Tensor:
    if img.shape[0] < 2:
        raise InputError("alignment losses need a batch of at least 2")
    return nitc_loss(img, txt, ids, temperature) + ritc_loss(img, txt, ids, temperature, epsilon)


def global_alignment(batch: "BatchFeatures", temperature, epsilon: float = 0.05) -> torch.Tensor:
    return alignment_loss(batch.visual.cls, batch.text.eos, batch.ids, temperature, epsilon)


def local_alignment(batch: "BatchFeatures", temperature, epsilon: float = 0.05) -> torch.Tensor:
    return alignment_loss(batch.visual.tse, batch.text.tse, batch.ids, temperature, epsilon)


def id_loss(img_global, txt_global, class_ids, classifier) -> torch.Tensor:
    """Shared identity classifier on both modalities; ``class_ids`` in [0, n_classes)."""
    n_classes = classifier.out_features
    if bool(((class_ids < 0) | (class_ids >= n_classes)).any()):
        raise InputError(f"identity label outside classifier range [0, {n_classes})")
    return 0.5 * (F.cross_entropy(classifier(img_global), class_ids) + F.cross_entropy(classifier(txt_global), class_ids))


def view_loss(g_img: torch.Tensor, z_gt: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(g_img, z_gt.long())


def ortho_loss(v_cls, v_view, alpha: float = 0.1, variant: str = "verbatim") -> torch.Tensor:
    """Batch mean of ``min(|cos|, alpha)``; ``hinge`` gives ``max(|cos| - alpha, 0)``.

    The verbatim form has zero gradient wherever ``|cos| > alpha``.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    c = cosine(v_cls, v_view).abs()
    if variant == "verbatim":
        per = torch.clamp(c, max=alpha)
    elif variant == "hinge":
        per = torch.clamp(c - alpha, min=0.0)
    else:
        raise ConfigError(f"ortho variant must be one of {ORTHO_VARIANTS}")
    return per.mean()


@dataclass
class BatchFeatures:
    visual: "VisualFeatures"
    text: "TextFeatures"
    ids: torch.Tensor  # identity labels, used for q
    class_ids: torch.Tensor  # identity labels remapped to classifier rows
    views: torch.Tensor  # ground-truth view labels

    def __post_init__(self):
        b = len(self.ids)
        if not (len(self.class_ids) == len(self.views) == self.visual.cls.shape[0] == self.text.eos.shape[0] == b):
            raise InputError("batch features disagree on batch length")


@dataclass
class LossWeights:
    lambda_id: float = 0.5
    lambda_ortho: float = 100.0
    alpha: float = 0.1
    epsilon: float = 0.05
    view_loss: bool = True
    ortho_variant: str = "verbatim"


@dataclass
class LossReport:
    L_GA: torch.Tensor
    L_LA: torch.Tensor
    L_id: torch.Tensor
    L_view: torch.Tensor
    L_ortho: torch.Tensor
    L1: torch.Tensor
    L2: torch.Tensor
    L: torch.Tensor
    temperature: float
    positive_pairs: int  # off-diagonal same-identity pairs in the batch

    def scalars(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.item() if isinstance(v, torch.Tensor) else v
        return out


def total_loss(batch: BatchFeatures, model, weights: LossWeights) -> LossReport:
    """``L = (L_GA + L_LA + lambda_id L_id) + (L_view + lambda_ortho L_ortho)``."""
    tau = model.temperature
    v, t = batch.visual, batch.text
    zero = v.cls.sum() * 0
    l_ga = global_alignment(batch, tau, weights.epsilon)
    l_la = local_alignment(batch, tau, weights.epsilon)
    l_id = id_loss(v.cls, t.eos, batch.class_ids, model.id_classifier)
    if weights.view_loss:
        if not v.view_logits:
            raise ConfigError("view loss needs an image-level router (block_type='hrmoe')")
        l_view = torch.stack([view_loss(g, batch.views) for g in v.view_logits]).mean()
    else:
        l_view = zero
    l_ortho = ortho_loss(v.cls, v.view, weights.alpha, weights.ortho_variant)
    l1 = l_ga + l_la + weights.lambda_id * l_id
    l2 = l_view + weights.lambda_ortho * l_ortho
    total = l1 + l2
    parts = dict(L_GA=l_ga, L_LA=l_la, L_id=l_id, L_view=l_view, L_ortho=l_ortho, L1=l1, L2=l2, L=total)
    for name, value in parts.items():
        if not bool(torch.isfinite(value)):
            raise NumericError(f"non-finite loss component {name} = {float(value)}")
    same = batch.ids.unsqueeze(0) == batch.ids.unsqueeze(1)
    positives = int(same.sum()) - len(batch.ids)
    return LossReport(**parts, temperature=tau.item(), positive_pairs=positives)


def recombine(report: LossReport, weights: LossWeights) -> float:
    v = report.scalars()
    l1 = v["L_GA"] + v["L_LA"] + weights.lambda_id * v["L_id"]
    l2 = v["L_view"] + weights.lambda_ortho * v["L_ortho"]
    return l1 + l2
