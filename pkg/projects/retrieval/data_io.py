"""
Feature files, manifests, batching and the synthetic paired corpus.

Feature file layout (little-endian):
    header  magic "SMDC" | version u32 | item count u32 | max length u32 | width u32
    item    id u64 | length L u32 | L x width float32
"""

import logging
import struct
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import ConfigError, DimensionError, FormatError, GroundTruthError

logger = logging.getLogger(__name__)

MAGIC = b"SMDC"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")
ITEM_HEADER = struct.Struct("<QI")
SPLITS = ("train", "val", "test")


def decode_utf8(raw: bytes, field: str, offset: int) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(field, offset + e.start, "UTF-8 text", repr(raw[e.start:e.end])) from e


@dataclass
class FeatureItem:
    id: int
    values: np.ndarray
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionError(f"item {self.id}: expected L x width, got shape {self.values.shape}")

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass
class FeatureFile:
    width: int
    max_length: int
    items: list[FeatureItem]
    version: int = FORMAT_VERSION
    _by_id: dict[int, FeatureItem] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self._by_id = {item.id: item for item in self.items}

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._by_id

    def ids(self) -> list[int]:
        return [item.id for item in self.items]

    def features(self, item_id: int) -> np.ndarray:
        """L x width, widened to float64 for compute."""
        return self._by_id[item_id].values.astype(np.float64)


def write_features(items: Iterable[FeatureItem], path: str | Path, width: int | None = None) -> None:
    items = list(items)
    widths = {item.values.shape[1] for item in items}
    if len(widths) > 1:
        raise DimensionError(f"feature widths must be uniform, got {sorted(widths)}")
    if widths:
        if width is not None and width not in widths:
            raise DimensionError(f"declared width {width} but items have width {widths.pop()}")
        width = widths.pop()
    width = width or 0
    max_length = max((item.length for item in items), default=0)

    buf = bytearray(HEADER.pack(MAGIC, FORMAT_VERSION, len(items), max_length, width))
    for item in items:
        if item.length < 1:
            raise DimensionError(f"item {item.id} has no rows")
        buf += ITEM_HEADER.pack(item.id, item.length)
        buf += item.values.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_features(path: str | Path) -> FeatureFile:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError("header", 0, f"{HEADER.size} bytes", f"{len(raw)} bytes")
    magic, version, count, max_length, width = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError("magic", 0, MAGIC, magic)
    if version != FORMAT_VERSION:
        raise FormatError("version", 4, FORMAT_VERSION, version)

    items: list[FeatureItem] = []
    seen: set[int] = set()
    offset = HEADER.size
    for k in range(count):
        remaining = len(raw) - offset
        if remaining < ITEM_HEADER.size:
            raise FormatError(f"item {k} header", offset, f"{ITEM_HEADER.size} bytes", f"{remaining} bytes")
        item_id, length = ITEM_HEADER.unpack_from(raw, offset)
        if not 1 <= length <= max_length:
            raise FormatError(f"item {k} length", offset + 8, f"1..{max_length}", length)
        if item_id in seen:
            raise FormatError(f"item {k} id", offset, "unique id", item_id)
        need = length * width * 4
        if remaining - ITEM_HEADER.size < need:
            raise FormatError(f"item {k} payload", offset + ITEM_HEADER.size,
                              f"{need} bytes", f"{remaining - ITEM_HEADER.size} bytes")
        values = np.frombuffer(raw, dtype="<f4", count=length * width,
                               offset=offset + ITEM_HEADER.size).reshape(length, width)
        items.append(FeatureItem(item_id, values.astype(np.float32), offset))
        seen.add(item_id)
        offset += ITEM_HEADER.size + need
    if offset != len(raw):
        raise FormatError("end of file", offset, f"{offset} bytes", f"{len(raw)} bytes")
    return FeatureFile(width, max_length, items, version)


# ============================================================
# Manifests
# ============================================================

@dataclass
class Manifest:
    split: str
    entries: list[tuple[int, list[int]]]

    def video_ids(self) -> list[int]:
        return [vid for vid, _ in self.entries]

    def caption_ids(self) -> list[int]:
        return [cap for _, caps in self.entries for cap in caps]

    def caption_to_video(self) -> dict[int, int]:
        return {cap: vid for vid, caps in self.entries for cap in caps}


def write_manifest(manifests: Iterable[Manifest], path: str | Path) -> None:
    lines = []
    for manifest in manifests:
        lines.append(f"#split:{manifest.split}")
        for vid, caps in manifest.entries:
            lines.append(f"{vid}\t{','.join(str(c) for c in caps)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path, video_file: FeatureFile | None = None,
                  text_file: FeatureFile | None = None) -> dict[str, Manifest]:
    """Parse every `#split:` section. With feature files given, every id must resolve."""
    manifests: dict[str, Manifest] = {}
    current: Manifest | None = None
    offset = 0
    for raw_line in Path(path).read_bytes().splitlines(keepends=True):
        line_offset, offset = offset, offset + len(raw_line)
        line = decode_utf8(raw_line, "manifest line", line_offset).strip()
        if not line:
            continue
        if line.startswith("#split:"):
            split = line[len("#split:"):].strip()
            if split not in SPLITS:
                raise FormatError("split tag", line_offset, "/".join(SPLITS), split)
            if split in manifests:
                raise FormatError("split tag", line_offset, "each split once", split)
            current = manifests[split] = Manifest(split, [])
            continue
        if line.startswith("#"):
            continue
        if current is None:
            raise FormatError("entry before #split header", line_offset)
        vid, _, caps = line.partition("\t")
        try:
            captions = [int(c) for c in caps.split(",") if c.strip()]
            current.entries.append((int(vid), captions))
        except ValueError as e:
            raise FormatError("manifest entry", line_offset, "video_id<TAB>caption_id[,...]", line) from e
        if not captions:
            raise FormatError("caption list", line_offset, "at least one caption", line)
    validate_manifests(manifests, video_file, text_file)
    return manifests


def validate_manifests(manifests: dict[str, Manifest], video_file: FeatureFile | None = None,
                       text_file: FeatureFile | None = None) -> None:
    """Every video listed once and every caption under exactly one video, across all splits."""
    owner_v: dict[int, str] = {}
    owner_c: dict[int, tuple[str, int]] = {}
    for split, manifest in manifests.items():
        for vid, caps in manifest.entries:
            if vid in owner_v:
                where = "twice in" if owner_v[vid] == split else f"in both {owner_v[vid]} and"
                raise GroundTruthError(f"video {vid} appears {where} {split}")
            owner_v[vid] = split
            if video_file is not None and vid not in video_file:
                raise GroundTruthError(f"video {vid} ({split}) not found in video features")
            for cap in caps:
                if cap in owner_c:
                    other_split, other_vid = owner_c[cap]
                    raise GroundTruthError(f"caption {cap} listed under video {other_vid} ({other_split}) "
                                           f"and video {vid} ({split})")
                owner_c[cap] = (split, vid)
                if text_file is not None and cap not in text_file:
                    raise GroundTruthError(f"caption {cap} ({split}) not found in text features")


# ============================================================
# Batching
# ============================================================

def make_batches(manifest: Manifest, batch_size: int, seed: int, epoch: int,
                 training: bool = True) -> list[list[tuple[int, int]]]:
    """(video id, caption id) batches; each video once per epoch with one sampled caption."""
    if not manifest.entries:
        raise ConfigError(f"split '{manifest.split}' is empty")
    if batch_size < 1 or batch_size > len(manifest.entries):
        raise ConfigError(f"batch size {batch_size} not in 1..{len(manifest.entries)} videos")
    if len(set(manifest.video_ids())) != len(manifest.entries):
        raise GroundTruthError(f"split '{manifest.split}' lists a video more than once")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(manifest.entries))
    pairs = []
    for i in order:
        vid, caps = manifest.entries[i]
        pairs.append((vid, caps[int(rng.integers(len(caps)))]))
    batches = [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)]
    if training and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# ============================================================
# Synthetic corpus
# ============================================================

@dataclass(frozen=True)
class SynthSpec:
    pairs: int = 500
    val_pairs: int = 100
    test_pairs: int = 0
    latent_dim: int = 16
    video_min_len: int = 4
    video_max_len: int = 8
    text_min_len: int = 3
    text_max_len: int = 6
    video_width: int = 64
    text_width: int = 48
    noise: float = 0.1
    captions_per_video: int = 1
    seed: int = 0

    def __post_init__(self):
        positive = ("pairs", "latent_dim", "video_min_len", "text_min_len",
                    "video_width", "text_width", "captions_per_video")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic spec: {name} must be positive")
        if self.val_pairs < 0 or self.test_pairs < 0 or self.noise < 0:
            raise ConfigError("synthetic spec: val_pairs, test_pairs and noise must be >= 0")
        if self.video_max_len < max(2, self.video_min_len) or self.text_max_len < max(2, self.text_min_len):
            raise ConfigError("synthetic spec: max lengths must be >= 2 and >= the min lengths")

    @classmethod
    def from_pairs(cls, pairs: Iterable[str]) -> "SynthSpec":
        """Build from `key=value` strings, values coerced to the field's type."""
        kwargs = {}
        fields = cls.__dataclass_fields__
        for pair in pairs:
            key, sep, value = pair.partition("=")
            key = key.strip()
            if not sep or key not in fields:
                raise ConfigError(f"unknown synthetic spec entry '{pair}'")
            kind = float if fields[key].type in (float, "float") else int
            try:
                kwargs[key] = kind(value)
            except ValueError as e:
                raise ConfigError(f"synthetic spec: bad value for {key}: '{value}'") from e
        return cls(**kwargs)


def generate_synthetic(spec: SynthSpec) -> tuple[FeatureFile, FeatureFile, dict[str, Manifest]]:
    """Video rows are z_p @ A + noise, caption rows z_p @ B + noise, with A and B fixed
    random maps and z_p ~ N(0, I) shared only by the video and its own captions."""
    rng = np.random.default_rng(spec.seed)
    A = rng.standard_normal((spec.latent_dim, spec.video_width)) / np.sqrt(spec.latent_dim)
    B = rng.standard_normal((spec.latent_dim, spec.text_width)) / np.sqrt(spec.latent_dim)

    videos: list[FeatureItem] = []
    texts: list[FeatureItem] = []
    manifests: dict[str, Manifest] = {}
    for split, count in (("train", spec.pairs), ("val", spec.val_pairs), ("test", spec.test_pairs)):
        if count == 0:
            continue
        entries = []
        for _ in range(count):
            z = rng.standard_normal(spec.latent_dim)
            n = int(rng.integers(spec.video_min_len, spec.video_max_len + 1))
            vid = len(videos)
            videos.append(FeatureItem(vid, z @ A + spec.noise * rng.standard_normal((n, spec.video_width))))
            caps = []
            for _ in range(spec.captions_per_video):
                m = int(rng.integers(spec.text_min_len, spec.text_max_len + 1))
                cap = len(texts)
                texts.append(FeatureItem(cap, z @ B + spec.noise * rng.standard_normal((m, spec.text_width))))
                caps.append(cap)
            entries.append((vid, caps))
        manifests[split] = Manifest(split, entries)

    logger.info("synthesized %d videos and %d captions", len(videos), len(texts))
    video_file = FeatureFile(spec.video_width, spec.video_max_len, videos)
    text_file = FeatureFile(spec.text_width, spec.text_max_len, texts)
    return video_file, text_file, manifests


def least_squares_pairing_accuracy(video_file: FeatureFile, text_file: FeatureFile,
                                   manifest: Manifest) -> float:
    """Fit one linear map from mean video features to mean caption features and report
    how often the mapped video lands closest (cosine) to its own caption."""
    X = np.stack([video_file.features(vid).mean(axis=0) for vid, _ in manifest.entries])
    Y = np.stack([text_file.features(caps[0]).mean(axis=0) for _, caps in manifest.entries])
    M, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = X @ M
    pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    Y = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    hits = np.argmax(pred @ Y.T, axis=1) == np.arange(len(Y))
    return float(hits.mean())


def write_corpus(out_dir: str | Path, video_file: FeatureFile, text_file: FeatureFile,
                 manifests: dict[str, Manifest]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"video": out / "video.smdc", "text": out / "text.smdc", "manifest": out / "manifest.tsv"}
    write_features(video_file.items, paths["video"], video_file.width)
    write_features(text_file.items, paths["text"], text_file.width)
    write_manifest(manifests.values(), paths["manifest"])
    return paths
