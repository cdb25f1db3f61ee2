"""Toy dual encoders: a ViT with [CLS] and view tokens, and a text transformer.

Image token order inside the encoder is ``[CLS], [VIEW], patch_1..patch_S``.
Both encoders end in a shared-width projection; features are *not*
L2-normalized here, losses and similarity do that themselves.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file, save
from torch import nn
from torch.nn import functional as F

from .data import EOS, PAD
from .errors import ConfigError, DataError, InputError, ShapeError
from .moe import HRMoE, MoE, RoutingTrace, make_partition, masked_softmax

BLOCK_TYPES = ("vit", "moe", "hrmoe")
CLS_INDEX, VIEW_INDEX, N_SPECIAL_IMG = 0, 1, 2


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    width: int = 64
    embed_dim: int = 64
    heads: int = 4
    image_depth: int = 4
    text_depth: int = 4
    mlp_hidden: int = 128
    vocab_size: int = 64
    max_len: int = 24
    tse_ratio: float = 0.3
    block_type: str = "hrmoe"
    moe_blocks: tuple[int, ...] = (2,)
    n_experts: int = 6
    aerial_only: int = 1
    ground_only: int = 1
    top_k: int = 5
    expert_hidden: int = 128
    use_mask: bool = True
    teacher_forcing: bool = False
    route_special_tokens: bool = True
    causal_text: bool = False
    init_temperature: float = 0.07
    n_classes: int = 100

    def __post_init__(self):
        self.moe_blocks = tuple(int(b) for b in self.moe_blocks)
        self.validate()

    def validate(self) -> None:
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"block_type must be one of {BLOCK_TYPES}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if any(not 0 <= b < self.image_depth for b in self.moe_blocks):
            raise ConfigError(f"moe_blocks {self.moe_blocks} outside [0, {self.image_depth})")
        if not 0 < self.tse_ratio <= 1:
            raise ConfigError("tse_ratio must be in (0, 1]")
        if not 1e-3 <= self.init_temperature <= 1:
            raise ConfigError("init_temperature must be in [1e-3, 1]")
        if self.block_type != "vit":
            make_partition(self.n_experts, self.aerial_only, self.ground_only)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def has_router(self) -> bool:
        return self.block_type == "hrmoe" and len(self.moe_blocks) > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_blocks"] = list(self.moe_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VisualFeatures:
    cls: torch.Tensor  # (B, D)
    locals: torch.Tensor  # (B, S, D)
    view: torch.Tensor  # (B, D)
    tse: torch.Tensor  # (B, D)
    view_logits: list[torch.Tensor] = field(default_factory=list)  # one (B, 2) per HR-MoE block
    traces: list[RoutingTrace] = field(default_factory=list)


@dataclass
class TextFeatures:
    sos: torch.Tensor  # (B, D)
    locals: torch.Tensor  # (B, T, D); rows outside local_mask are padding
    local_mask: torch.Tensor  # (B, T) bool
    eos: torch.Tensor  # (B, D)
    tse: torch.Tensor  # (B, D)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None, causal=False, return_weights=False):
        """``key_mask`` is (B, L) bool, True where a key may be attended to."""
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = scores.softmax(dim=-1)
        y = self.out((attn @ v).transpose(1, 2).reshape(b, n, d))
        return (y, attn) if return_weights else y


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, view_hint=None):
        return self.fc2(F.gelu(self.fc1(x))), None


class Block(nn.Module):
    """Pre-norm attention then MLP (or MoE), each wrapped in a residual."""

    def __init__(self, dim: int, heads: int, ffn: nn.Module):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = ffn

    def forward(self, x, key_mask=None, causal=False, view_hint=None):
        x = x + self.attn(self.ln1(x), key_mask, causal)
        y, trace = self.ffn(self.ln2(x), view_hint)
        return x + y, trace


def transformer_block(seq, block: Block, key_mask=None, causal=False, view_hint=None):
    return block(seq, key_mask, causal, view_hint)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, S, p*p*C) non-overlapping patches in raster order."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def tse_aggregate(
    locals_: torch.Tensor,
    global_: torch.Tensor,
    proj: nn.Module,
    ratio: float,
    mask: torch.Tensor | None = None,
    scores: torch.Tensor | None = None,
) -> torch.Tensor:
    """Token-selection pooling.

    Locals are scored by scaled dot product with the global token, the top
    ``ceil(ratio * L)`` valid locals are kept, and their softmax(score)
    weighted mean (renormalized over the kept set) is projected.
    """
    b, n, d = locals_.shape
    if mask is None:
        mask = torch.ones(b, n, dtype=torch.bool, device=locals_.device)
    n_valid = mask.sum(dim=-1)
    if bool((n_valid < 1).any()):
        raise InputError("token selection needs at least one local token")
    if scores is None:
        scores = (locals_ @ global_.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
    n_keep = torch.ceil(ratio * n_valid.to(torch.float64) - 1e-9).clamp(min=1).long()
    ranked = scores.detach().masked_fill(~mask, float("-inf"))
    order = torch.sort(ranked, dim=-1, descending=True, stable=True).indices
    rank = torch.empty_like(order).scatter_(-1, order, torch.arange(n, device=order.device).expand_as(order))
    keep = (rank < n_keep.unsqueeze(-1)) & mask
    w = masked_softmax(scores, keep)
    return proj((w.unsqueeze(-1) * locals_).sum(dim=1))


def _ffn(cfg: ModelConfig, index: int) -> nn.Module:
    if cfg.block_type == "vit" or index not in cfg.moe_blocks:
        return MLP(cfg.width, cfg.mlp_hidden)
    if cfg.block_type == "moe":
        return MoE(cfg.width, cfg.expert_hidden, cfg.n_experts, cfg.top_k)
    return HRMoE(
        cfg.width,
        cfg.expert_hidden,
        make_partition(cfg.n_experts, cfg.aerial_only, cfg.ground_only),
        cfg.top_k,
        view_index=VIEW_INDEX,
        use_mask=cfg.use_mask,
        teacher_forcing=cfg.teacher_forcing,
        route_special_tokens=cfg.route_special_tokens,
        n_special=N_SPECIAL_IMG,
    )


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.patch_proj = nn.Linear(cfg.patch_size**2 * cfg.channels, d)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.n_patches, d))
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.view_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, _ffn(cfg, i)) for i in range(cfg.image_depth))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.embed_dim, bias=False)
        self.tse_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """Projected patches before positional embeddings."""
        return self.patch_proj(patchify(images, self.cfg.patch_size))

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Input sequence ``[CLS], [VIEW], patches + pos`` of shape (B, S+2, D)."""
        x = self.patch_embed(images) + self.pos_emb
        b = x.shape[0]
        special = torch.stack([self.cls_token, self.view_token]).expand(b, -1, -1)
        return torch.cat([special, x], dim=1)

    def forward(self, images: torch.Tensor, view_hint: torch.Tensor | None = None) -> VisualFeatures:
        x = self.tokens(images)
        logits, traces = [], []
        for block in self.blocks:
            x, trace = block(x, view_hint=view_hint)
            if trace is not None:
                traces.append(trace)
                if trace.g_img is not None:
                    logits.append(trace.g_img)
        x = self.proj(self.ln_post(x))
        cls, view, locals_ = x[:, CLS_INDEX], x[:, VIEW_INDEX], x[:, N_SPECIAL_IMG:]
        tse = tse_aggregate(locals_, cls, self.tse_proj, self.cfg.tse_ratio)
        return VisualFeatures(cls, locals_, view, tse, logits, traces)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, MLP(d, cfg.mlp_hidden)) for _ in range(cfg.text_depth))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.embed_dim, bias=False)
        self.tse_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, tokens: torch.Tensor) -> TextFeatures:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        b, n = tokens.shape
        if n > self.cfg.max_len:
            raise InputError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        if bool(((tokens < 0) | (tokens >= self.cfg.vocab_size)).any()):
            raise InputError("token id outside the vocabulary")
        is_eos = tokens == EOS
        if not bool(is_eos.any(dim=1).all()):
            raise InputError("every sequence must contain the end marker")
        pos = torch.arange(n, device=tokens.device)
        eos_pos = torch.where(is_eos, pos, n).min(dim=1).values
        key_mask = tokens != PAD
        x = self.tok_emb(tokens) + self.pos_emb[:n]
        for block in self.blocks:
            x, _ = block(x, key_mask=key_mask, causal=self.cfg.causal_text)
        x = self.proj(self.ln_post(x))
        local_mask = (pos >= 1) & (pos < eos_pos.unsqueeze(1))
        eos = x[torch.arange(b), eos_pos]
        empty = local_mask.sum(dim=1) == 0
        # a caption with no locals pools its end token
        tse_mask = torch.where(empty.unsqueeze(1), pos == eos_pos.unsqueeze(1), local_mask)
        tse = tse_aggregate(x, eos, self.tse_proj, self.cfg.tse_ratio, mask=tse_mask)
        return TextFeatures(x[:, 0], x, local_mask, eos, tse)


class TagClip(nn.Module):
    """Both encoders, the identity classifier and the learnable temperature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.id_classifier = nn.Linear(cfg.embed_dim, cfg.n_classes)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.init_temperature)))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)
        for p in (self.image.pos_emb, self.text.pos_emb):
            nn.init.trunc_normal_(p, std=0.02)
        scale = self.cfg.width**-0.5
        with torch.no_grad():
            cls = torch.randn(self.cfg.width)
            view = torch.randn(self.cfg.width)
            # start the view token orthogonal to [CLS]
            view = view - (view @ cls) / (cls @ cls) * cls
            self.image.cls_token.copy_(scale * cls)
            self.image.view_token.copy_(scale * view * cls.norm() / view.norm())

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp().clamp(1e-3, 1.0)

    def encode_image(self, images, view_hint=None) -> VisualFeatures:
        return self.image(images, view_hint)

    def encode_text(self, tokens) -> TextFeatures:
        return self.text(tokens)

    def image_routers(self) -> list[nn.Linear]:
        return [b.ffn.img_router for b in self.image.blocks if isinstance(b.ffn, HRMoE)]


def build_model(cfg: ModelConfig, seed: int = 0) -> TagClip:
    torch.manual_seed(seed)
    return TagClip(cfg)


# --------------------------------------------------------------------------
# checkpoints: safetensors, i.e. a JSON index (name -> dtype, shape, byte
# offsets) followed by little-endian blobs; config goes in the metadata


def save_checkpoint(path: str | Path, model: TagClip, extra: dict | None = None) -> None:
    tensors = {k: v.detach().to(torch.float32).contiguous().clone() for k, v in model.state_dict().items()}
    meta = {"model_config": json.dumps(model.cfg.to_dict(), sort_keys=True)}
    meta["extra"] = json.dumps(extra or {}, sort_keys=True)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_canonical_header(save(tensors, metadata=meta)))


def _canonical_header(blob: bytes) -> bytes:
    # safetensors emits metadata keys in hash order; sort them so equal
    # checkpoints are equal bytes. Same length, so data offsets are unchanged.
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.dumps(json.loads(blob[8 : 8 + n]), sort_keys=True, separators=(",", ":")).encode()
    if len(header) > n:
        raise DataError("checkpoint header grew while sorting keys")
    return blob[:8] + header.ljust(n, b" ") + blob[8 + n :]


def load_checkpoint(path: str | Path) -> tuple[TagClip, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata()
    cfg = ModelConfig.from_dict(json.loads(meta["model_config"]))
    model = TagClip(cfg)
    model.load_state_dict(load_file(str(path)))
    model.eval()
    return model, json.loads(meta.get("extra", "{}"))
