"""Ablation runner: train and evaluate a list of config variants on shared data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, from_dict
from .data import build_dataset, load_manifest
from .errors import ConfigError
from .evaluate import evaluate_model, view_entanglement
from .train import train

log = logging.getLogger(__name__)

CSV_HEADER = ("variant", "R1", "R5", "R10", "mAP", "router_acc_aerial", "router_acc_ground")


@dataclass
class Variant:
    name: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Variant":
        unknown = set(d) - {"name", "model", "train", "data"}
        if unknown or "name" not in d:
            raise ConfigError(f"variant needs 'name' and only model/train/data overrides; got {sorted(d)}")
        return cls(d["name"], dict(d.get("model", {})), dict(d.get("train", {})), dict(d.get("data", {})))


_OFF = {"view_loss": False, "lambda_ortho": 0.0}

# Block type x decoupling losses, one row per numbered configuration.
COMPONENT_GRID = (
    Variant("1-vit", {"block_type": "vit"}, dict(_OFF)),
    Variant("2-moe", {"block_type": "moe"}, dict(_OFF)),
    Variant("3-hrmoe", {}, dict(_OFF)),
    Variant("4-hrmoe+view", {}, {"lambda_ortho": 0.0}),
    Variant("5-hrmoe+ortho", {}, {"view_loss": False}),
    Variant("6-full", {}, {}),
)

# Train regime | test regime.
VIEWPOINT_GRID = (
    Variant("1-aerial|aerial", data={"train_regime": "aerial", "test_regime": "aerial"}),
    Variant("2-mixed|aerial", data={"train_regime": "mixed", "test_regime": "aerial"}),
    Variant("3-ground|ground", data={"train_regime": "ground", "test_regime": "ground"}),
    Variant("4-mixed|ground", data={"train_regime": "mixed", "test_regime": "ground"}),
    Variant("5-aerial|mixed", data={"train_regime": "aerial", "test_regime": "mixed"}),
    Variant("6-ground|mixed", data={"train_regime": "ground", "test_regime": "mixed"}),
    Variant("7-mixed|mixed", data={"train_regime": "mixed", "test_regime": "mixed"}),
)

# Number and depth of HR-MoE blocks, scaled to a 4-block image encoder.
PLACEMENT_GRID = (
    Variant("1@early", {"moe_blocks": [0]}),
    Variant("1@middle", {"moe_blocks": [2]}),
    Variant("1@late", {"moe_blocks": [3]}),
    Variant("2@early", {"moe_blocks": [0, 1]}),
    Variant("2@middle", {"moe_blocks": [1, 2]}),
    Variant("2@late", {"moe_blocks": [2, 3]}),
    Variant("3@early", {"moe_blocks": [0, 1, 2]}),
    Variant("3@late", {"moe_blocks": [1, 2, 3]}),
)

# (N_e, K) with one view-specific expert per group.
EXPERT_GRID = tuple(
    Variant(f"{n}e-top{k}", {"n_experts": n, "aerial_only": 1, "ground_only": 1, "top_k": k})
    for n, k in ((4, 3), (5, 4), (6, 4), (6, 5), (7, 6))
)

GRIDS = {
    "component": COMPONENT_GRID,
    "viewpoint": VIEWPOINT_GRID,
    "placement": PLACEMENT_GRID,
    "experts": EXPERT_GRID,
}


def load_variants(spec: str | Path) -> list[Variant]:
    """A built-in grid name or a JSON file holding a list of variant objects."""
    if str(spec) in GRIDS:
        return list(GRIDS[str(spec)])
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"unknown grid {str(spec)!r} and no such variants file (grids: {sorted(GRIDS)})")
    doc = json.loads(path.read_text())
    if not isinstance(doc, list) or not doc:
        raise ConfigError("variants file must hold a non-empty JSON list")
    return [Variant.from_dict(d) for d in doc]


def apply_variant(base: RunConfig, variant: Variant) -> RunConfig:
    doc = base.to_dict()
    for section in ("model", "train", "data"):
        doc[section].update(getattr(variant, section))
    return from_dict(doc)


def _data_key(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict()["data"], sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


@dataclass
class AblationRow:
    variant: str
    seed: int
    metrics: object
    entanglement: float
    step0_L1: float
    batches: list[str]

    def csv_row(self) -> list:
        ra = self.metrics.router_accuracy

        def fmt(x):
            return "" if x is None else f"{x:.2f}"

        m = self.metrics
        return [self.variant, fmt(m.R1), fmt(m.R5), fmt(m.R10), fmt(m.mAP), fmt(ra.get("aerial")), fmt(ra.get("ground"))]


class DatasetCache:
    """Generates each distinct data config once under ``root``."""

    def __init__(self, root: str | Path | None = None):
        self._tmp = None
        if root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="tagret-ablate-")
            root = self._tmp.name
        self.root = Path(root)
        self._cache: dict = {}

    def get(self, cfg: RunConfig):
        key = _data_key(cfg)
        if key not in self._cache:
            where = self.root / key
            if (where / "train" / "manifest.jsonl").is_file():
                self._cache[key] = (load_manifest(where, "train"), load_manifest(where, "test"))
            else:
                self._cache[key] = build_dataset(cfg.data, where)
        return self._cache[key]


def run_variant(cfg: RunConfig, name: str, cache: DatasetCache, max_steps: int | None = None) -> AblationRow:
    train_m, test_m = cache.get(cfg)
    result = train(cfg.model, cfg.train, train_m, max_steps=max_steps)
    metrics = evaluate_model(result.model, test_m, train_m.identities)
    ent = view_entanglement(result.model, test_m)
    return AblationRow(
        name, cfg.train.seed, metrics, ent, result.log[0]["L1"], [e["batch"] for e in result.log]
    )


def run_ablation(
    base: RunConfig,
    variants,
    out_dir: str | Path | None = None,
    cache: DatasetCache | None = None,
    max_steps: int | None = None,
) -> list[AblationRow]:
    """Train/evaluate every variant with the base seed; write ``ablation.csv`` if ``out_dir``."""
    variants = [v if isinstance(v, Variant) else Variant.from_dict(v) for v in variants]
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    configs = [apply_variant(base, v) for v in variants]  # validate all before training any
    if cache is None:
        cache = DatasetCache(Path(out_dir) / "data" if out_dir is not None else None)
    rows = []
    for v, cfg in zip(variants, configs):
        log.info("variant %s", v.name)
        rows.append(run_variant(cfg, v.name, cache, max_steps))
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / "ablation.csv")
        with open(Path(out_dir) / "ablation_log.jsonl", "w") as f:
            for r in rows:
                f.write(json.dumps({
                    "variant": r.variant, "seed": r.seed, "step0_L1": r.step0_L1,
                    "entanglement": r.entanglement, "batches": r.batches,
                    "metrics": r.metrics.row(),
                }, sort_keys=True) + "\n")
    return rows


def write_csv(rows: list[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_row())
    return path
