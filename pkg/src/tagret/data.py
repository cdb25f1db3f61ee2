"""Procedural multi-view person dataset.

Each identity is a vector of categorical attributes (hat colour, top colour,
shoes colour, ...). Images are rendered from that vector under an aerial or a
ground layout; captions are view-agnostic token sequences naming the
attributes. Everything is a pure function of ``(seed, config)``.

On disk, one directory per split::

    <root>/vocab.json
    <root>/<split>/manifest.jsonl   header line, then one record per sample
    <root>/<split>/images.bin       float32 LE, row-major (N, H, W, C)
    <root>/<split>/images.json      sidecar: dtype, shape, sha256
    <root>/<split>/tokens.bin       int32 LE, row-major (N * captions, T_max)
    <root>/<split>/tokens.json      sidecar: dtype, shape, sha256
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CapacityError, ChecksumError, ConfigError, DataError

AERIAL, GROUND = 0, 1
VIEW_NAMES = ("aerial", "ground")
REGIMES = ("aerial", "ground", "mixed")

PAD, SOS, EOS = 0, 1, 2
N_SPECIAL = 3

SLOT_NAMES = ("hat", "hair", "top", "sleeve", "bottom", "shoes", "bag", "belt")
SHOES_SLOT = SLOT_NAMES.index("shoes")

# No greys: the background is grey.
PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],  # red
        [0.15, 0.70, 0.20],  # green
        [0.15, 0.25, 0.85],  # blue
        [0.90, 0.85, 0.15],  # yellow
        [0.80, 0.20, 0.80],  # magenta
        [0.15, 0.80, 0.85],  # cyan
        [0.95, 0.55, 0.10],  # orange
        [0.45, 0.15, 0.60],  # purple
    ],
    dtype=np.float32,
)
# Top-down shots see pavement/grass instead of street-level walls.
AERIAL_GROUND_TINT = np.array([-0.06, 0.04, -0.10], dtype=np.float32)

COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple")


@dataclass
class GeneratorConfig:
    seed: int = 0
    image_size: int = 32
    channels: int = 3
    slot_vocab: tuple[int, ...] = (6, 6, 6, 6, 6, 6, 6, 6)
    max_len: int = 24
    vocab_size: int = 64
    caption_keep: float = 0.8
    captions_per_image: int = 2
    images_per_id: int = 4
    n_train_ids: int = 100
    n_test_ids: int = 50
    train_id_start: int = 0
    test_id_start: int = 100
    train_regime: str = "mixed"
    test_regime: str = "mixed"
    noise: float = 0.08
    aerial_downsample: bool = True

    def __post_init__(self):
        self.slot_vocab = tuple(int(v) for v in self.slot_vocab)
        self.validate()

    @property
    def n_slots(self) -> int:
        return len(self.slot_vocab)

    def validate(self) -> None:
        if not 1 <= self.n_slots <= len(SLOT_NAMES):
            raise ConfigError(f"slot count must be in [1, {len(SLOT_NAMES)}], got {self.n_slots}")
        if any(v < 2 or v > len(PALETTE) for v in self.slot_vocab):
            raise ConfigError(f"per-slot vocabulary sizes must be in [2, {len(PALETTE)}]: {self.slot_vocab}")
        if self.image_size != 32 or self.channels != 3:
            raise ConfigError("the renderer draws 32x32 RGB canvases only")
        if N_SPECIAL + self.n_slots + sum(self.slot_vocab) > self.vocab_size:
            raise ConfigError("token vocabulary too small for slot markers and attribute values")
        if self.max_len < 4:
            raise ConfigError("max_len must leave room for [SOS], one attribute pair and [EOS]")
        if not 0.0 < self.caption_keep <= 1.0:
            raise ConfigError("caption_keep must be in (0, 1]")
        if self.images_per_id < 2:
            raise ConfigError("every identity needs at least 2 samples")
        if self.captions_per_image < 1:
            raise ConfigError("every sample needs at least 1 caption")
        for name in ("train_regime", "test_regime"):
            if getattr(self, name) not in REGIMES:
                raise ConfigError(f"{name} must be one of {REGIMES}")
        if self.noise < 0:
            raise ConfigError("noise amplitude must be non-negative")

    def train_ids(self) -> range:
        return range(self.train_id_start, self.train_id_start + self.n_train_ids)

    def test_ids(self) -> range:
        return range(self.test_id_start, self.test_id_start + self.n_test_ids)


@dataclass(frozen=True)
class IdentitySpec:
    id_index: int
    attributes: tuple[int, ...]


# --------------------------------------------------------------------------
# vocabulary


def marker_token(slot: int) -> int:
    return N_SPECIAL + slot


def value_token(slot: int, value: int, config: GeneratorConfig) -> int:
    return N_SPECIAL + config.n_slots + sum(config.slot_vocab[:slot]) + value


def vocabulary(config: GeneratorConfig) -> dict:
    tokens = ["[PAD]", "[SOS]", "[EOS]"]
    tokens += [f"<{SLOT_NAMES[s]}>" for s in range(config.n_slots)]
    for s, size in enumerate(config.slot_vocab):
        tokens += [f"{SLOT_NAMES[s]}:{COLOR_NAMES[v]}" for v in range(size)]
    tokens += [f"[UNUSED{i}]" for i in range(config.vocab_size - len(tokens))]
    return {
        "tokens": tokens,
        "specials": {"[PAD]": PAD, "[SOS]": SOS, "[EOS]": EOS},
        "slots": list(SLOT_NAMES[: config.n_slots]),
        "slot_vocab": list(config.slot_vocab),
        "palette": PALETTE.tolist(),
    }


# --------------------------------------------------------------------------
# identities


def identity_capacity(config: GeneratorConfig) -> int:
    return math.prod(config.slot_vocab)


def generate_identity(
    seed: int, id_index: int, config: GeneratorConfig, taken: frozenset | set = frozenset()
) -> IdentitySpec:
    """Draw the attribute vector of one identity.

    Recipe: for ``attempt = 0, 1, ...`` draw
    ``np.random.default_rng([seed, id_index, attempt]).integers(0, slot_vocab)``
    and keep the first vector not already in ``taken``.
    """
    if len(taken) >= identity_capacity(config):
        raise CapacityError(
            f"slot vocabularies {config.slot_vocab} allow at most "
            f"{identity_capacity(config)} unique identities"
        )
    sizes = np.asarray(config.slot_vocab)
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, id_index, attempt])
        attrs = tuple(int(a) for a in rng.integers(0, sizes))
        if attrs not in taken:
            return IdentitySpec(id_index, attrs)
        attempt += 1


def generate_identities(seed: int, id_indices: Sequence[int], config: GeneratorConfig) -> list[IdentitySpec]:
    """Unique identities for ``id_indices``, drawn in ascending id order."""
    if len(set(id_indices)) > identity_capacity(config):
        raise CapacityError(
            f"requested {len(set(id_indices))} identities but slot vocabularies "
            f"{config.slot_vocab} allow at most {identity_capacity(config)}"
        )
    taken: set = set()
    out = {}
    for idx in sorted(set(id_indices)):
        spec = generate_identity(seed, idx, config, taken)
        taken.add(spec.attributes)
        out[idx] = spec
    return [out[i] for i in id_indices]


# --------------------------------------------------------------------------
# rendering

# (slot, y0, y1, x0, x1) boxes on a 32x32 canvas, drawn in order. Coordinates
# are even so the aerial 2x downsample keeps region interiors intact.
GROUND_LAYOUT = (
    (1, 4, 8, 12, 20),  # hair
    (0, 2, 4, 12, 20),  # hat
    (2, 8, 18, 10, 22),  # top
    (3, 8, 16, 8, 10),  # sleeve left
    (3, 8, 16, 22, 24),  # sleeve right
    (7, 18, 20, 10, 22),  # belt
    (4, 20, 28, 12, 20),  # bottom
    (6, 12, 20, 24, 28),  # bag
    (5, 28, 32, 10, 22),  # shoes
)
AERIAL_LAYOUT = (
    (1, 2, 16, 8, 24),  # hair ring around the hat
    (2, 14, 24, 6, 26),  # shoulders / top seen from above
    (3, 14, 22, 2, 6),  # sleeve left
    (3, 14, 22, 26, 30),  # sleeve right
    (0, 4, 14, 10, 22),  # hat dominates the top-down view
    (6, 16, 24, 24, 30),  # bag
    (7, 24, 26, 10, 22),  # belt
    (4, 26, 30, 12, 20),  # foreshortened legs
)


def layout(view: int, config: GeneratorConfig, shift: int = 0) -> list[tuple[int, int, int, int, int]]:
    """Region boxes for a view, keeping only slots the config defines."""
    if view not in (AERIAL, GROUND):
        raise ConfigError(f"view must be 0 (aerial) or 1 (ground), got {view!r}")
    boxes = GROUND_LAYOUT if view == GROUND else AERIAL_LAYOUT
    return [(s, y0, y1, x0 + shift, x1 + shift) for s, y0, y1, x0, x1 in boxes if s < config.n_slots]


def render_image(identity: IdentitySpec, view: int, noise_seed: int, config: GeneratorConfig) -> np.ndarray:
    """Render an ``H x W x C`` float32 image in [0, 1]."""
    rng = np.random.default_rng([noise_seed, view])
    size = config.image_size
    grey = np.float32(rng.uniform(0.3, 0.6))
    img = np.full((size, size, config.channels), grey, dtype=np.float32)
    if view == AERIAL:
        img += AERIAL_GROUND_TINT
    shift = 2 * int(rng.integers(-1, 2))
    for slot, y0, y1, x0, x1 in layout(view, config, shift):
        img[y0:y1, max(x0, 0) : min(x1, size)] = PALETTE[identity.attributes[slot]]
    if view == AERIAL and config.aerial_downsample:
        pooled = img.reshape(size // 2, 2, size // 2, 2, -1).mean(axis=(1, 3), dtype=np.float32)
        img = pooled.repeat(2, axis=0).repeat(2, axis=1)
    if config.noise > 0:
        img = img + np.float32(config.noise) * rng.standard_normal(img.shape, dtype=np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# captions


def min_kept_slots(config: GeneratorConfig) -> int:
    return math.ceil(config.caption_keep * config.n_slots - 1e-9)


def compose_caption(identity: IdentitySpec, rng_seed: int, config: GeneratorConfig) -> list[int]:
    """``[SOS] (<slot> value)* [EOS]`` over a shuffled subset of the slots.

    Between ``ceil(caption_keep * A)`` and ``A`` slots are kept. Nothing about
    the view enters the caption.
    """
    rng = np.random.default_rng([rng_seed, 0xCA])
    n_keep = int(rng.integers(min_kept_slots(config), config.n_slots + 1))
    slots = rng.permutation(config.n_slots)[:n_keep]
    max_pairs = (config.max_len - 2) // 2
    tokens = [SOS]
    for slot in slots[:max_pairs]:
        tokens += [marker_token(int(slot)), value_token(int(slot), identity.attributes[slot], config)]
    tokens.append(EOS)
    return tokens


def decode_caption(tokens: Sequence[int], config: GeneratorConfig) -> dict[int, int]:
    """Map slot -> attribute value for the value tokens in a caption."""
    out = {}
    base = N_SPECIAL + config.n_slots
    offsets = np.cumsum((0,) + config.slot_vocab)
    for t in tokens:
        if t < base:
            continue
        rel = t - base
        slot = int(np.searchsorted(offsets, rel, side="right") - 1)
        if slot < config.n_slots:
            out[slot] = int(rel - offsets[slot])
    return out


# --------------------------------------------------------------------------
# manifests and I/O


@dataclass
class Record:
    index: int
    sample_id: str
    id_index: int
    view: int
    image_offset: int
    image_shape: tuple[int, int, int]
    caption_rows: tuple[int, ...]
    caption_offsets: tuple[int, ...]
    caption_lengths: tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    seed: int
    regime: str
    records: list[Record]
    vocab: dict
    header: dict = field(default_factory=dict)
    _arrays: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def split_dir(self) -> Path:
        return self.root / self.split

    @property
    def identities(self) -> list[int]:
        return sorted({r.id_index for r in self.records})

    @property
    def views(self) -> np.ndarray:
        return np.array([r.view for r in self.records], dtype=np.int64)

    @property
    def id_array(self) -> np.ndarray:
        return np.array([r.id_index for r in self.records], dtype=np.int64)


@dataclass
class Sample:
    image: np.ndarray
    tokens: np.ndarray  # (captions, T_max), PAD-padded
    view: int
    id_index: int


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, C) float32
    tokens: np.ndarray  # (B, captions, T_max) int64
    views: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.tokens[i], int(self.views[i]), int(self.ids[i]))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_array(path: Path, array: np.ndarray) -> dict:
    dtype = array.dtype.newbyteorder("<")
    np.ascontiguousarray(array, dtype=dtype).tofile(path)
    sidecar = {
        "dtype": dtype.name,
        "byteorder": "little",
        "order": "C",
        "shape": list(array.shape),
        "sha256": _sha256(path),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return sidecar


def _read_array(path: Path) -> np.ndarray:
    sidecar_path = path.with_suffix(".json")
    if not path.exists() or not sidecar_path.exists():
        raise DataError(f"missing array file or sidecar: {path}")
    sidecar = json.loads(sidecar_path.read_text())
    digest = _sha256(path)
    if digest != sidecar["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupted or truncated)")
    dtype = np.dtype(sidecar["dtype"]).newbyteorder("<")
    data = np.fromfile(path, dtype=dtype)
    shape = tuple(sidecar["shape"])
    if data.size != math.prod(shape):
        raise ChecksumError(f"{path}: expected {math.prod(shape)} elements, found {data.size}")
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def sample_plan(regime: str, n: int) -> list[tuple[int, int]]:
    """``(slot, view)`` per sample of one identity.

    Every regime draws from the same alternating plan of ``n`` slots; the
    single-view regimes keep only their view's slots, so an aerial-only split
    is exactly the aerial half of the mixed split.
    """
    plan = [(j, AERIAL if j % 2 == 0 else GROUND) for j in range(n)]
    if regime == "aerial":
        return [p for p in plan if p[1] == AERIAL]
    if regime == "ground":
        return [p for p in plan if p[1] == GROUND]
    return plan


def _sample_seed(seed: int, id_index: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, id_index, j]).generate_state(1)[0])


def write_split(
    root: Path, split: str, identities: list[IdentitySpec], regime: str, config: GeneratorConfig
) -> DatasetManifest:
    split_dir = Path(root) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    size, n_cap, t_max = config.image_size, config.captions_per_image, config.max_len

    images, token_rows, records = [], [], []
    image_bytes = size * size * config.channels * 4
    for ident in identities:
        for j, view in sample_plan(regime, config.images_per_id):
            index = len(records)
            sseed = _sample_seed(config.seed, ident.id_index, j)
            images.append(render_image(ident, view, sseed, config))
            rows, lengths = [], []
            for k in range(n_cap):
                caption = compose_caption(ident, sseed * n_cap + k, config)
                row = np.full(t_max, PAD, dtype=np.int32)
                row[: len(caption)] = caption
                rows.append(len(token_rows))
                lengths.append(len(caption))
                token_rows.append(row)
            records.append(
                Record(
                    index=index,
                    sample_id=f"{split}-{index:06d}",
                    id_index=ident.id_index,
                    view=view,
                    image_offset=index * image_bytes,
                    image_shape=(size, size, config.channels),
                    caption_rows=tuple(rows),
                    caption_offsets=tuple(r * t_max * 4 for r in rows),
                    caption_lengths=tuple(lengths),
                )
            )

    _write_array(split_dir / "images.bin", np.stack(images))
    _write_array(split_dir / "tokens.bin", np.stack(token_rows))
    views = [r.view for r in records]
    header = {
        "format_version": 1,
        "split": split,
        "seed": config.seed,
        "regime": regime,
        "n_records": len(records),
        "n_captions": len(token_rows),
        "n_identities": len(identities),
        "view_counts": {"aerial": views.count(AERIAL), "ground": views.count(GROUND)},
        "generator": _config_dict(config),
    }
    with open(split_dir / "manifest.jsonl", "w") as f:
        f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return DatasetManifest(Path(root), split, config.seed, regime, records, vocabulary(config), header)


def _config_dict(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d["slot_vocab"] = list(config.slot_vocab)
    return d


def build_dataset(config: GeneratorConfig, root: str | Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Render train and test splits under ``root``; returns both manifests."""
    config.validate()
    train_ids, test_ids = config.train_ids(), config.test_ids()
    if set(train_ids) & set(test_ids):
        raise ConfigError(f"train ids {train_ids} and test ids {test_ids} overlap")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    specs = generate_identities(config.seed, list(train_ids) + list(test_ids), config)
    by_id = {s.id_index: s for s in specs}
    (root / "vocab.json").write_text(json.dumps(vocabulary(config), indent=2) + "\n")
    train = write_split(root, "train", [by_id[i] for i in train_ids], config.train_regime, config)
    test = write_split(root, "test", [by_id[i] for i in test_ids], config.test_regime, config)
    return train, test


def load_manifest(root: str | Path, split: str) -> DatasetManifest:
    root = Path(root)
    path = root / split / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"empty manifest {path}")
    header = json.loads(lines[0])["header"]
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        for key in ("image_shape", "caption_rows", "caption_offsets", "caption_lengths"):
            d[key] = tuple(d[key])
        records.append(Record(**d))
    if len(records) != header["n_records"]:
        raise DataError(f"{path}: header says {header['n_records']} records, found {len(records)}")
    vocab = json.loads((root / "vocab.json").read_text())
    return DatasetManifest(root, split, header["seed"], header["regime"], records, vocab, header)


def _arrays(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    if manifest._arrays is None:
        images = _read_array(manifest.split_dir / "images.bin")
        tokens = _read_array(manifest.split_dir / "tokens.bin")
        manifest._arrays = (images, tokens)
    return manifest._arrays


def load_batch(manifest: DatasetManifest, indices: Sequence[int]) -> Batch:
    """Samples at ``indices``, in the order given."""
    n = len(manifest)
    indices = [int(i) for i in indices]
    bad = [i for i in indices if not 0 <= i < n]
    if bad:
        raise IndexError(f"sample indices {bad} out of range for {n} records")
    images, tokens = _arrays(manifest)
    recs = [manifest.records[i] for i in indices]
    return Batch(
        images=images[indices],
        tokens=np.stack([tokens[list(r.caption_rows)] for r in recs]).astype(np.int64),
        views=np.array([r.view for r in recs], dtype=np.int64),
        ids=np.array([r.id_index for r in recs], dtype=np.int64),
    )
