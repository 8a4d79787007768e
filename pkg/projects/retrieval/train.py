"""
Training and evaluation: config, Adam, plateau schedule, checkpoints, the epoch loop.

Checkpoint layout (little-endian):
    header  magic "SMCK" | version u32 | record count u32
    record  key length u32 | key utf-8 | kind u8 (0 = float64 array, 1 = JSON text)
            array: ndim u32 | ndim x u32 dims | float64 data
            JSON:  byte length u32 | utf-8 text
Records are written in sorted key order.
"""

import json
import logging
import struct
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from data_io import (SPLITS, FeatureFile, FeatureItem, Manifest, decode_utf8, make_batches,
                     read_features, read_manifest, write_features)
from encoders import EncoderConfig, TextEncoder, VideoEncoder
from errors import ConfigError, DimensionError, FormatError, NumericalError
from joint_space import (JointEmbedder, fuse_global_local, hard_negative_ranking_loss,
                         similarity_matrix, similarity_tensor)
from layers import Module
from metrics import GroundTruth, RetrievalReport, full_report
from tensor import Tensor, backward, stack

logger = logging.getLogger(__name__)


# ============================================================
# Config
# ============================================================

@dataclass
class TrainConfig:
    """Flat config. Field `video_smsdc_n` is the dotted key `video.smsdc.n`."""
    seed: int = 0
    alpha: float = 0.2
    embed_dim: int = 2048
    batch_size: int = 64
    lr: float = 5e-5
    lr_factor: float = 0.5
    patience: int = 3
    epochs: int = 30
    video_d_in: int = 2048
    video_hidden: int = 512
    video_smsdc_n: int = 4
    video_smsdc_m: int = 2
    text_d_model: int = 768
    text_heads: int = 8
    text_ffn: int = 3072
    text_layers: int = 3
    text_encoder: str = "transformer"
    text_hidden: int = 384
    text_positional: bool = True
    text_smsdc_n: int = 3
    text_smsdc_m: int = 2
    smsdc_sigma: str = "relu"
    smsdc_stacked: bool = True
    smsdc_centered: bool = False
    smsdc_local: bool = True
    paths_video_features: str = ""
    paths_text_features: str = ""
    paths_manifest: str = ""
    paths_output: str = "runs"
    eval_split: str = "val"

    @classmethod
    def toy(cls, **changes) -> "TrainConfig":
        """Desk-scale dims for the synthetic corpus."""
        base = dict(video_d_in=64, video_hidden=32, text_d_model=48, text_heads=4, text_ffn=96,
                    text_layers=2, text_hidden=24, embed_dim=128, batch_size=32, lr=1e-3)
        base.update(changes)
        return cls(**base)

    @staticmethod
    def field_name(key: str) -> str:
        return key.strip().replace(".", "_")

    @classmethod
    def keys(cls) -> list[str]:
        return [dotted_key(f.name) for f in fields(cls)]

    def set(self, key: str, raw: str) -> None:
        name = self.field_name(key)
        kinds = {f.name: f.type for f in fields(self)}
        if name not in kinds:
            raise ConfigError(f"unknown config key '{key.strip()}'")
        setattr(self, name, _coerce(kinds[name], raw.strip(), key.strip()))

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for hard negatives, got {self.batch_size}")
        if self.alpha < 0 or self.lr <= 0 or self.embed_dim < 1:
            raise ConfigError("alpha must be >= 0, lr > 0 and embed_dim >= 1")
        if not 0 < self.lr_factor < 1 or self.patience < 1 or self.epochs < 0:
            raise ConfigError("need 0 < lr_factor < 1, patience >= 1 and epochs >= 0")
        if self.eval_split not in SPLITS:
            raise ConfigError(f"eval.split must be one of {SPLITS}, got '{self.eval_split}'")
        self.encoder_config()
        return self

    def encoder_config(self) -> EncoderConfig:
        cfg = EncoderConfig(
            video_d_in=self.video_d_in, video_hidden=self.video_hidden,
            video_n=self.video_smsdc_n, video_m=self.video_smsdc_m,
            text_d_model=self.text_d_model, text_heads=self.text_heads, text_ffn=self.text_ffn,
            text_layers=self.text_layers, text_encoder=self.text_encoder,
            text_hidden=self.text_hidden, text_positional=self.text_positional,
            text_n=self.text_smsdc_n, text_m=self.text_smsdc_m, sigma=self.smsdc_sigma,
            stacked=self.smsdc_stacked, centered=self.smsdc_centered, local=self.smsdc_local)
        cfg.video_smsdc()
        cfg.text_smsdc()
        return cfg

    def to_json(self) -> str:
        return json.dumps({dotted_key(k): v for k, v in asdict(self).items()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        cfg = cls()
        for key, value in json.loads(text).items():
            name = cls.field_name(key)
            if name not in cfg.__dataclass_fields__:
                raise ConfigError(f"unknown config key '{key}' in snapshot")
            setattr(cfg, name, value)
        return cfg


_DOTTED_PREFIXES = ("video_smsdc_", "text_smsdc_", "video_", "text_", "smsdc_", "paths_", "eval_")


def dotted_key(name: str) -> str:
    for prefix in _DOTTED_PREFIXES:
        if name.startswith(prefix):
            return prefix.replace("_", ".") + name[len(prefix):]
    return name


def _coerce(kind: type, raw: str, key: str):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"config key '{key}': cannot read '{raw}' as {kind.__name__}") from e


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                base: TrainConfig | None = None) -> TrainConfig:
    """`key = value` lines with `#` comments, then `key=value` overrides on top."""
    cfg = base if base is not None else TrainConfig()
    if path is not None:
        offset = 0
        for raw_line in Path(path).read_bytes().splitlines(keepends=True):
            line_offset, offset = offset, offset + len(raw_line)
            line = decode_utf8(raw_line, "config line", line_offset).split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError("config line", line_offset, "key = value", line)
            cfg.set(key, value)
    for pair in overrides:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override '{pair}' is not key=value")
        cfg.set(key, value)
    return cfg.validate()


# ============================================================
# Optimizer and schedule
# ============================================================

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for path, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{path}'")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            continue
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_schedule(history: list[float], lr: float, patience: int = 3, factor: float = 0.5) -> float:
    """Halve when the last `patience` epochs all failed to beat the best RSum before them.
    The history is replayed so a halving resets the stall counter."""
    if not history:
        raise ConfigError("lr_schedule needs at least one epoch of history")
    best = -np.inf
    stalled = 0
    halve = False
    for rsum in history:
        if rsum > best:
            best, stalled = rsum, 0
        else:
            stalled += 1
        halve = stalled == patience
        if halve:
            stalled = 0
    return lr * factor if halve else lr


# ============================================================
# Model
# ============================================================

class Model(Module):
    def __init__(self, cfg: EncoderConfig, embed_dim: int, seed: int):
        self.video = VideoEncoder(cfg, seed)
        self.text = TextEncoder(cfg, seed)
        self.joint = JointEmbedder(cfg.video_fused_width, cfg.text_fused_width, embed_dim, seed)

    def fused_video(self, V: np.ndarray) -> Tensor:
        f = self.video(Tensor(V))
        return fuse_global_local(f.global_vec, f.local_vec)

    def fused_text(self, T: np.ndarray) -> Tensor:
        f = self.text(Tensor(T))
        return fuse_global_local(f.global_vec, f.local_vec)

    def embed_videos(self, videos: list[np.ndarray], mode: str = "train") -> Tensor:
        return self.joint.embed(stack([self.fused_video(v) for v in videos]), "video", mode)

    def embed_texts(self, texts: list[np.ndarray], mode: str = "train") -> Tensor:
        return self.joint.embed(stack([self.fused_text(t) for t in texts]), "text", mode)


# ============================================================
# Checkpoints
# ============================================================

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_ARRAY, _JSON = 0, 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    best_rsum: float | None = None
    lr: float = 0.0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, model: Model, cfg: TrainConfig, adam: AdamState, epoch: int,
                best_rsum: float | None, lr: float) -> "Checkpoint":
        return cls(cfg, {k: p.data.copy() for k, p in model.named_parameters().items()},
                   {k: b.copy() for k, b in model.named_buffers().items()},
                   {k: m.copy() for k, m in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()},
                   adam.t, epoch, best_rsum, lr)

    def build_model(self) -> Model:
        model = Model(self.config.encoder_config(), self.config.embed_dim, self.config.seed)
        params = model.named_parameters()
        if set(params) != set(self.params):
            raise FormatError("parameter set", 0, sorted(params), sorted(self.params))
        for path, p in params.items():
            if p.data.shape != self.params[path].shape:
                raise DimensionError(f"checkpoint {path}: {self.params[path].shape} != {p.data.shape}")
            p.data[...] = self.params[path]
        for path, state in model.named_states().items():
            state.running_mean[...] = self.buffers[f"{path}.running_mean"]
            state.running_var[...] = self.buffers[f"{path}.running_var"]
        return model

    def adam_state(self) -> AdamState:
        return AdamState({k: m.copy() for k, m in self.adam_m.items()},
                         {k: v.copy() for k, v in self.adam_v.items()}, self.adam_t)

    def records(self) -> dict[str, np.ndarray | str]:
        out: dict[str, np.ndarray | str] = {}
        out.update({f"param/{k}": v for k, v in self.params.items()})
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        out.update({f"adam.m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.adam_v.items()})
        out["config"] = self.config.to_json()
        out["meta"] = json.dumps({"adam_t": self.adam_t, "best_rsum": self.best_rsum,
                                  "epoch": self.epoch, "lr": self.lr}, sort_keys=True)
        return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    records = ckpt.records()
    chunks = [_CK_HEADER.pack(CHECKPOINT_MAGIC, ckpt.version, len(records))]
    for key in sorted(records):
        value = records[key]
        name = key.encode("utf-8")
        chunks.append(_U32.pack(len(name)) + name)
        if isinstance(value, str):
            text = value.encode("utf-8")
            chunks.append(bytes([_JSON]) + _U32.pack(len(text)) + text)
        else:
            arr = np.ascontiguousarray(value, dtype="<f8")
            chunks.append(bytes([_ARRAY]) + _U32.pack(arr.ndim)
                          + b"".join(_U32.pack(n) for n in arr.shape) + arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.debug("saved %d checkpoint records to %s", len(records), path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(what, self.pos, f"{n} bytes", f"{len(self.blob) - self.pos} bytes")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic, version, count = _CK_HEADER.unpack(r.take(_CK_HEADER.size, "checkpoint header"))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("checkpoint magic", 0, CHECKPOINT_MAGIC, magic)
    if version != CHECKPOINT_VERSION:
        raise FormatError("checkpoint version", 4, CHECKPOINT_VERSION, version)
    records: dict[str, np.ndarray | str] = {}
    offsets: dict[str, int] = {}
    for _ in range(count):
        start = r.pos
        length = r.u32("key length")
        key = decode_utf8(r.take(length, "key"), "record key", r.pos - length)
        kind = r.take(1, "record kind")[0]
        if kind == _ARRAY:
            shape = tuple(r.u32("array dim") for _ in range(r.u32("array rank")))
            n = int(np.prod(shape, dtype=np.int64))
            records[key] = np.frombuffer(r.take(8 * n, f"{key} data"), dtype="<f8").reshape(shape).copy()
        elif kind == _JSON:
            length = r.u32("text length")
            offsets[key] = r.pos
            records[key] = decode_utf8(r.take(length, f"{key} text"), f"{key} text", r.pos - length)
        else:
            raise FormatError("record kind", start, "0 or 1", kind)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes", r.pos, 0, len(r.blob) - r.pos)
    for required in ("config", "meta"):
        if not isinstance(records.get(required), str):
            raise FormatError(f"{required} record", 0, "JSON text", "missing")

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)}

    try:
        cfg = TrainConfig.from_json(records["config"])
    except (ValueError, AttributeError, TypeError) as e:
        raise FormatError("config record", offsets["config"], "TrainConfig JSON object", str(e)) from e
    try:
        meta = json.loads(records["meta"])
        adam_t, epoch, best_rsum, lr = meta["adam_t"], meta["epoch"], meta["best_rsum"], meta["lr"]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError("meta record", offsets["meta"],
                          "JSON object with adam_t, epoch, best_rsum, lr", str(e)) from e
    return Checkpoint(cfg, group("param/"), group("buffer/"), group("adam.m/"), group("adam.v/"),
                      adam_t, epoch, best_rsum, lr, version)


# ============================================================
# Corpus
# ============================================================

@dataclass
class Corpus:
    videos: FeatureFile
    texts: FeatureFile
    splits: dict[str, Manifest]

    def split(self, name: str) -> Manifest:
        if name not in self.splits:
            raise ConfigError(f"split '{name}' not in manifest (have {sorted(self.splits)})")
        return self.splits[name]


def load_corpus(cfg: TrainConfig) -> Corpus:
    for key in ("paths_video_features", "paths_text_features", "paths_manifest"):
        if not getattr(cfg, key):
            raise ConfigError(f"{dotted_key(key)} is not set")
    videos = read_features(cfg.paths_video_features)
    texts = read_features(cfg.paths_text_features)
    if videos.width != cfg.video_d_in:
        raise DimensionError(f"video features are {videos.width} wide, video.d_in is {cfg.video_d_in}")
    if texts.width != cfg.text_d_model:
        raise DimensionError(f"text features are {texts.width} wide, text.d_model is {cfg.text_d_model}")
    return Corpus(videos, texts, read_manifest(cfg.paths_manifest, videos, texts))


# ============================================================
# Training
# ============================================================

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_rsum: float
    best: float

    def line(self) -> str:
        return f"{self.epoch} {self.loss!r} {self.lr!r} {self.val_rsum!r} {self.best!r}"


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord]
    checkpoint_path: Path


def train_step(model: Model, corpus: Corpus, batch: list[tuple[int, int]], alpha: float,
               adam: AdamState, lr: float, epoch: int, index: int) -> float:
    model.zero_grad()
    V = model.embed_videos([corpus.videos.features(vid) for vid, _ in batch], "train")
    T = model.embed_texts([corpus.texts.features(cap) for _, cap in batch], "train")
    loss = hard_negative_ranking_loss(similarity_tensor(V, T), alpha)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss at epoch {epoch} batch {index}")
    if not 0.0 <= value <= 2 * (alpha + 2):
        raise NumericalError(f"loss {value} outside [0, {2 * (alpha + 2)}] at epoch {epoch} batch {index}")
    backward(loss)
    params = model.named_parameters()
    adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr)
    return value


def evaluate_model(model: Model, corpus: Corpus,
                   manifest: Manifest) -> tuple[RetrievalReport, RetrievalReport, float]:
    """Embed the split in infer mode and score every caption against every video."""
    V = model.embed_videos([corpus.videos.features(vid) for vid in manifest.video_ids()], "infer")
    T = model.embed_texts([corpus.texts.features(cap) for cap in manifest.caption_ids()], "infer")
    S = similarity_matrix(V.data, T.data, manifest.video_ids(), manifest.caption_ids())
    v2t = GroundTruth({vid: set(caps) for vid, caps in manifest.entries})
    t2v = GroundTruth({cap: {vid} for cap, vid in manifest.caption_to_video().items()})
    return full_report(S, t2v, v2t)


def train(cfg: TrainConfig, corpus: Corpus | None = None) -> TrainResult:
    cfg.validate()
    corpus = corpus if corpus is not None else load_corpus(cfg)
    train_split, val_split = corpus.split("train"), corpus.split(cfg.eval_split)
    out = Path(cfg.paths_output)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    with log_path.open("a") as fp:
        fp.write("epoch loss lr val_rsum best\n")

    model = Model(cfg.encoder_config(), cfg.embed_dim, cfg.seed)
    adam = AdamState()
    lr = cfg.lr
    best = Checkpoint.capture(model, cfg, adam, 0, None, lr)
    history: list[EpochRecord] = []
    rsums: list[float] = []
    logger.info("training %d parameters for %d epochs", sum(p.size for p in model.parameters()), cfg.epochs)

    for epoch in range(1, cfg.epochs + 1):
        batches = make_batches(train_split, cfg.batch_size, cfg.seed, epoch)
        losses = [train_step(model, corpus, batch, cfg.alpha, adam, lr, epoch, i)
                  for i, batch in enumerate(batches)]
        _, _, rsum = evaluate_model(model, corpus, val_split)
        rsums.append(rsum)
        if best.best_rsum is None or rsum > best.best_rsum:
            best = Checkpoint.capture(model, cfg, adam, epoch, rsum, lr)
        record = EpochRecord(epoch, float(np.mean(losses)), lr, rsum, best.best_rsum)
        history.append(record)
        with log_path.open("a") as fp:
            fp.write(record.line() + "\n")
        logger.info("epoch %d loss %.4f lr %.3g val RSum %.1f best %.1f",
                    epoch, record.loss, lr, rsum, record.best)
        next_lr = lr_schedule(rsums, lr, cfg.patience, cfg.lr_factor)
        if next_lr != lr:
            logger.info("validation RSum stalled for %d epochs, lr %.3g -> %.3g", cfg.patience, lr, next_lr)
        lr = next_lr

    path = out / "best.smck"
    save_checkpoint(best, path)
    return TrainResult(best, history, path)


def evaluate(checkpoint: Checkpoint | str | Path, split: str | None = None,
             corpus: Corpus | None = None) -> tuple[RetrievalReport, RetrievalReport, float]:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    corpus = corpus if corpus is not None else load_corpus(ckpt.config)
    manifest = corpus.split(split or ckpt.config.eval_split)
    return evaluate_model(ckpt.build_model(), corpus, manifest)


def embed(checkpoint: Checkpoint | str | Path, side: str, out_path: str | Path,
          corpus: Corpus | None = None) -> FeatureFile:
    """Joint-space embeddings of every item on one side, written as a feature file of length-1 items."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    corpus = corpus if corpus is not None else load_corpus(ckpt.config)
    model = ckpt.build_model()
    if side == "video":
        source, embed_fn = corpus.videos, model.embed_videos
    elif side == "text":
        source, embed_fn = corpus.texts, model.embed_texts
    else:
        raise ConfigError(f"side must be 'video' or 'text', got '{side}'")
    ids = source.ids()
    E = embed_fn([source.features(i) for i in ids], "infer").data
    items = [FeatureItem(i, E[row:row + 1]) for row, i in enumerate(ids)]
    write_features(items, out_path, ckpt.config.embed_dim)
    logger.info("wrote %d %s embeddings to %s", len(items), side, out_path)
    return FeatureFile(ckpt.config.embed_dim, 1, items)
