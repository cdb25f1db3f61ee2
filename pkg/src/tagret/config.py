"""Run configuration: one JSON document with data/model/train/eval/out sections.

Resolution order (later wins): dataclass defaults, config file, ``TAGRET_``
environment variables, command-line flags. ``TAGRET_<SECTION>__<KEY>`` sets a
single field (value parsed as JSON, falling back to a bare string);
``TAGRET_SEED``, ``TAGRET_OUT`` and ``TAGRET_THREADS`` mirror the global flags.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import ModelConfig
from .data import GeneratorConfig
from .errors import ConfigError
from .train import TrainConfig

SECTIONS = ("data", "model", "train", "eval")
# Model fields fixed by the data section; setting them directly is rejected.
DERIVED_MODEL_KEYS = ("image_size", "channels", "vocab_size", "max_len", "n_classes")

PUBLISHED = "published"
TOY = "toy"

# Values taken from the method's published training setup; everything else is
# a toy-scale choice. Keys are "<section>.<field>".
_PUBLISHED_KEYS = {
    "model.n_experts": "N_e = 6",
    "model.aerial_only": "e0 = 5 -> one aerial-only expert",
    "model.ground_only": "e1 = 1 -> one ground-only expert",
    "model.top_k": "top-5 experts per token",
    "train.lambda_id": "lambda_id = 0.5",
    "train.lambda_ortho": "lambda_ortho = 100",
    "train.alpha": "alpha = 0.1",
    "data.captions_per_image": "2 descriptions per image",
}


def _section_defaults() -> dict:
    model = ModelConfig().to_dict()
    for key in DERIVED_MODEL_KEYS:
        model.pop(key)
    return {
        "data": _plain(asdict(GeneratorConfig())),
        "model": model,
        "train": asdict(TrainConfig()),
        "eval": asdict(EvalConfig()),
    }


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def provenance() -> dict:
    """``{"section.key": {"source": "published" | "toy", "note": ...}}`` for every field."""
    out = {}
    for section, values in _section_defaults().items():
        for key in values:
            name = f"{section}.{key}"
            if name in _PUBLISHED_KEYS:
                out[name] = {"source": PUBLISHED, "note": _PUBLISHED_KEYS[name]}
            else:
                out[name] = {"source": TOY, "note": "toy-scale choice"}
    out["out"] = {"source": TOY, "note": "output directory"}
    return out


@dataclass
class EvalConfig:
    batch_size: int = 128
    dump_embeddings: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("eval batch_size must be positive")


@dataclass
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs/default"

    @property
    def dataset_dir(self) -> Path:
        return Path(self.out) / "data"

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        for key in DERIVED_MODEL_KEYS:
            model.pop(key)
        return {
            "data": _plain(asdict(self.data)),
            "model": model,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "out": self.out,
        }

    def resolved(self) -> dict:
        """The echo written beside outputs; :func:`from_dict` accepts it back."""
        return {**self.to_dict(), "provenance": provenance()}

    def write_resolved(self, directory: str | Path) -> Path:
        path = Path(directory) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
        return path


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys("top level", doc, (*SECTIONS, "out", "provenance"))
    defaults = _section_defaults()
    merged = {}
    for section in SECTIONS:
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section [{section}] must be an object")
        if section == "model":
            derived = set(given) & set(DERIVED_MODEL_KEYS)
            if derived:
                raise ConfigError(f"model keys {sorted(derived)} are derived from [data]; set them there")
        _check_keys(section, given, defaults[section])
        merged[section] = {**defaults[section], **given}
    try:
        data = GeneratorConfig(**merged["data"])
        model = ModelConfig(
            **merged["model"],
            image_size=data.image_size,
            channels=data.channels,
            vocab_size=data.vocab_size,
            max_len=data.max_len,
            n_classes=data.n_train_ids,
        )
        train = TrainConfig(**merged["train"])
        eval_ = EvalConfig(**merged["eval"])
    except TypeError as err:  # wrong value types surface as constructor errors
        raise ConfigError(str(err)) from err
    return RunConfig(data, model, train, eval_, str(doc.get("out", RunConfig.out)))


def load(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, env: dict | None = None, seed: int | None = None, out: str | None = None) -> dict:
    """Layer environment variables and then explicit flags over ``doc``."""
    env = os.environ if env is None else env
    doc = json.loads(json.dumps(doc))
    for name, raw in sorted(env.items()):
        if not name.startswith("TAGRET_") or "__" not in name:
            continue
        section, _, key = name[len("TAGRET_") :].partition("__")
        section = section.lower()
        if section not in SECTIONS:
            raise ConfigError(f"{name}: unknown section {section!r}")
        doc.setdefault(section, {})[key.lower()] = _parse_env_value(raw)
    if "TAGRET_SEED" in env:
        doc.setdefault("train", {})["seed"] = int(env["TAGRET_SEED"])
    if "TAGRET_OUT" in env:
        doc["out"] = env["TAGRET_OUT"]
    if seed is not None:
        doc.setdefault("train", {})["seed"] = seed
    if out is not None:
        doc["out"] = out
    return doc


def resolve(path=None, env=None, seed=None, out=None) -> RunConfig:
    return from_dict(apply_overrides(load(path), env, seed, out))


def threads_from(flag: int | None, env: dict | None = None) -> int:
    env = os.environ if env is None else env
    if flag is not None:
        value = flag
    elif "TAGRET_THREADS" in env:
        value = int(env["TAGRET_THREADS"])
    else:
        value = 1
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


def field_names(section: str) -> list[str]:
    cls = {"data": GeneratorConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}[section]
    return [f.name for f in fields(cls)]
