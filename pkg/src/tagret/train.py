"""Training loop: AdamW with linear warm-up and cosine decay."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig, TagClip, build_model, save_checkpoint
from .data import DatasetManifest, load_batch
from .errors import ConfigError, NumericError
from .losses import ORTHO_VARIANTS, BatchFeatures, LossWeights, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 200
    batch_size: int = 32
    lr_init: float = 1e-5
    lr_peak: float = 3e-4
    lr_final: float = 1.5e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.02
    grad_clip: float = 0.0  # 0 disables clipping
    lambda_id: float = 0.5
    lambda_ortho: float = 100.0
    alpha: float = 0.1
    epsilon: float = 0.05
    view_loss: bool = True
    ortho_variant: str = "verbatim"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.lr_init <= self.lr_peak:
            raise ConfigError("need 0 < lr_init <= lr_peak")
        if not 0 <= self.lr_final <= self.lr_peak:
            raise ConfigError("need 0 <= lr_final <= lr_peak")
        if not 0 <= self.warmup_frac <= 1:
            raise ConfigError("warmup_frac must be in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.ortho_variant not in ORTHO_VARIANTS:
            raise ConfigError(f"ortho_variant must be one of {ORTHO_VARIANTS}")
        if self.alpha < 0 or self.lambda_id < 0 or self.lambda_ortho < 0:
            raise ConfigError("loss weights and alpha must be non-negative")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_id=self.lambda_id,
            lambda_ortho=self.lambda_ortho,
            alpha=self.alpha,
            epsilon=self.epsilon,
            view_loss=self.view_loss,
            ortho_variant=self.ortho_variant,
        )


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp ``lr_init -> lr_peak`` then cosine ``lr_peak -> lr_final``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_frac * total_steps))
    if step < warmup:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / warmup
    decay = total_steps - warmup
    progress = (step - warmup) / decay if decay else 1.0
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1 + math.cos(math.pi * progress))


def pair_index(manifest: DatasetManifest) -> np.ndarray:
    """(record, caption) pairs; one training example per caption."""
    return np.array([(r.index, k) for r in manifest.records for k in range(len(r.caption_rows))], dtype=np.int64)


def epoch_batches(pairs: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    n = len(order) // batch_size
    return [pairs[order[i * batch_size : (i + 1) * batch_size]] for i in range(n)]


def to_tensors(manifest: DatasetManifest, pairs: np.ndarray, dtype=torch.float32):
    batch = load_batch(manifest, pairs[:, 0])
    images = torch.from_numpy(batch.images).to(dtype)
    tokens = torch.from_numpy(batch.tokens[np.arange(len(pairs)), pairs[:, 1]])
    return images, tokens, torch.from_numpy(batch.ids), torch.from_numpy(batch.views)


def forward_batch(model: TagClip, images, tokens, ids, views, class_of: dict[int, int]) -> BatchFeatures:
    vf = model.encode_image(images, view_hint=views)
    tf = model.encode_text(tokens)
    class_ids = torch.tensor([class_of[int(i)] for i in ids], dtype=torch.long)
    return BatchFeatures(vf, tf, ids, class_ids, views)


@dataclass
class TrainResult:
    model: TagClip
    log: list[dict]
    checkpoint: Path | None


def _fingerprint(pairs: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(pairs).tobytes()).hexdigest()[:12]


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train from scratch. Deterministic given configs and dataset.

    Writes ``train_log.jsonl`` and ``checkpoint.safetensors`` when ``out_dir``
    is given. A non-finite loss aborts the run after saving the last good
    parameters to ``last_good.safetensors``.
    """
    train_ids = manifest.identities
    class_of = {idx: c for c, idx in enumerate(train_ids)}
    model_cfg = copy.deepcopy(model_cfg)
    model_cfg.n_classes = len(train_ids)
    if cfg.view_loss and not model_cfg.has_router:
        raise ConfigError("view loss enabled but the image encoder has no HR-MoE router")
    model = build_model(model_cfg, cfg.seed)
    model.train()
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() < 2 or "token" in name or "pos_emb" in name else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_init,
    )
    weights = cfg.loss_weights()
    pairs = pair_index(manifest)
    steps_per_epoch = len(pairs) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"{len(pairs)} training pairs cannot fill one batch of {cfg.batch_size}")
    total_steps = steps_per_epoch * cfg.epochs
    extra = {"train_config": asdict(cfg), "train_ids": train_ids, "dataset_seed": manifest.seed}

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    step = 0
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        for batch_pairs in epoch_batches(pairs, cfg.batch_size, cfg.seed, epoch):
            if max_steps is not None and step >= max_steps:
                break
            lr = lr_schedule(step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            try:
                feats = forward_batch(model, *to_tensors(manifest, batch_pairs), class_of)
                report = total_loss(feats, model, weights)
            except NumericError as err:
                if out is not None:
                    model.load_state_dict(last_good)
                    save_checkpoint(out / "last_good.safetensors", model, {**extra, "step": step})
                raise NumericError(f"step {step}: {err}") from err
            last_good = copy.deepcopy(model.state_dict())
            opt.zero_grad(set_to_none=True)
            report.L.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            entry = {"step": step, "epoch": epoch, "lr": lr, "batch": _fingerprint(batch_pairs), **report.scalars()}
            records.append(entry)
            if step % 50 == 0:
                log.info("step %d  L=%.4f  lr=%.2e", step, entry["L"], lr)
            step += 1

    model.eval()
    ckpt = None
    if out is not None:
        with open(out / "train_log.jsonl", "w") as f:
            for entry in records:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        ckpt = out / "checkpoint.safetensors"
        save_checkpoint(ckpt, model, {**extra, "step": step})
    return TrainResult(model, records, ckpt)


def train_config_from_dict(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)
