"""Hierarchically-routed mixture of experts.

An image-level router reads the view token and picks a view (aerial or
ground); that view selects an expert group. A feature-level router then
spreads every token over the experts of that group, the top-K are kept, and
their outputs are mixed with renormalized weights.

Expert groups overlap: with the default layout of six experts, expert 0 is
aerial-only, 1-4 are shared and 5 is ground-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, NumericError

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ExpertPartition:
    n_experts: int
    aerial: tuple[int, ...]
    ground: tuple[int, ...]

    @property
    def shared(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.aerial) & set(self.ground)))

    def group(self, z: int) -> tuple[int, ...]:
        return self.aerial if z == 0 else self.ground

    def allowed(self) -> torch.Tensor:
        """(2, N_e) boolean table: row z marks the experts of view z."""
        table = torch.zeros(2, self.n_experts, dtype=torch.bool)
        table[0, list(self.aerial)] = True
        table[1, list(self.ground)] = True
        return table


def make_partition(n_experts: int, aerial_only: int = 1, ground_only: int = 1) -> ExpertPartition:
    """Aerial-only experts take the lowest indices, ground-only the highest."""
    if aerial_only < 0 or ground_only < 0:
        raise ConfigError("view-specific expert counts must be non-negative")
    if aerial_only + ground_only >= n_experts:
        raise ConfigError(
            f"{aerial_only} aerial-only + {ground_only} ground-only experts leave no shared "
            f"expert out of {n_experts}; the two groups must partially overlap"
        )
    return ExpertPartition(
        n_experts,
        aerial=tuple(range(0, n_experts - ground_only)),
        ground=tuple(range(aerial_only, n_experts)),
    )


def route_image(view_token: torch.Tensor, router: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """View logits and the predicted view. Ties go to the lower index (aerial)."""
    g_img = router(view_token)
    return g_img, argmax_first(g_img)


def argmax_first(x: torch.Tensor) -> torch.Tensor:
    # torch.argmax does not document its tie rule
    is_max = x == x.max(dim=-1, keepdim=True).values
    idx = torch.arange(x.shape[-1], device=x.device).expand_as(x)
    return torch.where(is_max, idx, x.shape[-1]).min(dim=-1).values


def build_mask(z: int, partition: ExpertPartition) -> torch.Tensor:
    """Additive mask: 0 inside the group picked by ``z``, -inf elsewhere."""
    if z not in (0, 1):
        raise ConfigError(f"view must be 0 or 1, got {z!r}")
    mask = torch.full((partition.n_experts,), NEG_INF)
    mask[list(partition.group(z))] = 0.0
    return mask


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the allowed experts only; excluded entries are exactly 0.

    ``allowed`` broadcasts against ``logits``. Excluded logits never reach
    ``exp``: they are replaced before the exponential and zeroed after.
    """
    if allowed is None:
        return torch.softmax(logits, dim=-1)
    allowed = allowed.expand_as(logits)
    if not bool(allowed.any(dim=-1).all()):
        raise NumericError("every expert is masked for some token")
    if bool(allowed.all()):
        return torch.softmax(logits, dim=-1)
    safe = torch.where(allowed, logits, torch.zeros_like(logits))
    top = torch.where(allowed, logits, torch.full_like(logits, NEG_INF)).max(dim=-1, keepdim=True).values
    e = torch.where(allowed, torch.exp(safe - top.detach()), torch.zeros_like(logits))
    return e / e.sum(dim=-1, keepdim=True)


def route_feature(features: torch.Tensor, router: nn.Linear, mask: torch.Tensor | None) -> torch.Tensor:
    """Per-token expert probabilities ``softmax(g_feat + M)``."""
    g_feat = router(features)
    allowed = None if mask is None else mask == 0
    return masked_softmax(g_feat, allowed)


def select_topk(probs: torch.Tensor, k: int, check: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of the ``k`` largest probabilities and their renormalized weights.

    Ties break toward the lowest expert index. ``check`` verifies that every
    row has at least ``k`` strictly positive entries; module forwards skip it
    because group sizes are validated at construction and an allowed
    probability may underflow to 0 late in training.
    """
    if k < 1 or k > probs.shape[-1]:
        raise ConfigError(f"top-k={k} outside [1, {probs.shape[-1]}]")
    if check and probs.numel():
        n_positive = int((probs > 0).sum(dim=-1).min())
        if k > n_positive:
            raise ConfigError(f"top-k={k} but only {n_positive} experts are reachable")
    _, order = torch.sort(probs.detach(), dim=-1, descending=True, stable=True)
    idx = order[..., :k]
    p = probs.gather(-1, idx)
    return idx, p / p.sum(dim=-1, keepdim=True)


class Expert(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass
class RoutingTrace:
    """Diagnostics from one MoE call. ``g_img``/``z`` are None for vanilla MoE."""

    g_img: torch.Tensor | None  # (B, 2)
    z: torch.Tensor | None  # (B,)
    probs: torch.Tensor  # (B, L, N_e)
    indices: torch.Tensor  # (B, L, K)
    weights: torch.Tensor  # (B, L, K)


class MoE(nn.Module):
    """Plain top-K mixture of experts with a linear router over all experts."""

    def __init__(self, dim: int, hidden: int, n_experts: int, top_k: int):
        super().__init__()
        if not 1 <= top_k <= n_experts:
            raise ConfigError(f"top_k={top_k} must be in [1, {n_experts}]")
        self.n_experts = n_experts
        self.top_k = top_k
        self.experts = nn.ModuleList(Expert(dim, hidden) for _ in range(n_experts))
        self.feat_router = nn.Linear(dim, n_experts)

    def combine(self, x: torch.Tensor, probs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx, w = select_topk(probs, self.top_k, check=False)
        outs = torch.stack([e(x) for e in self.experts], dim=-2)  # (..., N_e, D)
        picked = outs.gather(-2, idx.unsqueeze(-1).expand(*idx.shape, outs.shape[-1]))
        return (w.unsqueeze(-1) * picked).sum(dim=-2), idx, w

    def forward(self, x: torch.Tensor, view_hint: torch.Tensor | None = None):
        probs = route_feature(x, self.feat_router, None)
        out, idx, w = self.combine(x, probs)
        return out, RoutingTrace(None, None, probs.detach(), idx, w.detach())


class HRMoE(MoE):
    """Image-level view routing on top of the feature-level MoE.

    ``x`` is ``(B, L, D)`` with the view token at row ``view_index``. With
    ``use_mask=False`` every expert is allowed and the forward pass is the
    plain :class:`MoE` computation (the image router still runs, so the view
    logits stay available for supervision).
    """

    def __init__(
        self,
        dim: int,
        hidden: int,
        partition: ExpertPartition,
        top_k: int,
        view_index: int = 1,
        use_mask: bool = True,
        teacher_forcing: bool = False,
        route_special_tokens: bool = True,
        n_special: int = 2,
    ):
        super().__init__(dim, hidden, partition.n_experts, top_k)
        if use_mask and top_k > min(len(partition.aerial), len(partition.ground)):
            raise ConfigError(
                f"top_k={top_k} exceeds the smallest expert group "
                f"({min(len(partition.aerial), len(partition.ground))} experts)"
            )
        self.partition = partition
        self.img_router = nn.Linear(dim, 2)
        self.view_index = view_index
        self.use_mask = use_mask
        self.teacher_forcing = teacher_forcing
        self.route_special_tokens = route_special_tokens
        self.n_special = n_special
        self.register_buffer("allowed_table", partition.allowed(), persistent=False)

    def forward(self, x: torch.Tensor, view_hint: torch.Tensor | None = None):
        g_img, z = route_image(x[:, self.view_index], self.img_router)
        z_route = view_hint.long() if (self.teacher_forcing and view_hint is not None) else z
        allowed = self.allowed_table[z_route].unsqueeze(1) if self.use_mask else None  # (B, 1, N_e)
        probs = masked_softmax(self.feat_router(x), allowed)
        out, idx, w = self.combine(x, probs)
        if not self.route_special_tokens:
            # the block residual carries the special tokens unchanged
            s = self.n_special
            out = torch.cat([torch.zeros_like(out[:, :s]), out[:, s:]], dim=1)
        return out, RoutingTrace(g_img, z, probs.detach(), idx, w.detach())


def expert_usage(traces: list[RoutingTrace], n_experts: int) -> dict:
    """Selection counts per expert, split by routed view."""
    counts = {"aerial": [0] * n_experts, "ground": [0] * n_experts, "all": [0] * n_experts}
    for t in traces:
        flat = torch.bincount(t.indices.reshape(-1), minlength=n_experts)
        counts["all"] = [a + int(b) for a, b in zip(counts["all"], flat)]
        if t.z is None:
            continue
        for view, name in ((0, "aerial"), (1, "ground")):
            sel = t.indices[t.z == view]
            c = torch.bincount(sel.reshape(-1), minlength=n_experts)
            counts[name] = [a + int(b) for a, b in zip(counts[name], c)]
    return counts
