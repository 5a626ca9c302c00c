"""Compressed replay storage for class-incremental training.

Exemplars are kept as discrete code grids, losslessly entropy-coded with a
pair of latent-chain models (one per grid level) and a frozen patch codec.
When a new class arrives, the buffer decodes everything it holds, refits
the chain models on the union, and re-encodes every stream with the new
tables, so all stored streams always share one model version.

A raw store keeping byte-per-channel pixels provides the memory baseline;
both report through the same arithmetic so the comparison is honest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .bits_back import (
    CodingTables,
    CompressedStream,
    FitConfig,
    LatentChainModel,
    build_coding_tables,
    chunk_symbols,
    decode_stream,
    deserialize_models,
    deserialize_stream,
    encode_stream,
    finetune,
    serialize_models,
    serialize_stream,
)
from .errors import DataCorruptionError, InvalidInputError, StateError
from .rans import DEFAULT_PRECISION
from .vq_codec import (
    CodecParams,
    CodeGrid,
    decode_codes,
    deserialize_codec,
    encode_image,
    serialize_codec,
)

INDEX_NAME = "index.txt"
CODEC_NAME = "codec.drrc"
MODELS_NAME = "models.drrm"
STREAM_DIR = "streams"
INDEX_HEADER = "drr-replay-buffer 1"

BYTES_PER_MEGABYTE = 1 << 20
DEFAULT_EXEMPLARS_PER_CLASS = 20


def select_exemplars(images: np.ndarray, count: int, rng) -> np.ndarray:
    """Uniform choice without replacement; order follows the draw."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise InvalidInputError("expected a batch of images (n, h, w, c)")
    if count < 1 or count > len(images):
        raise InvalidInputError(
            f"cannot select {count} exemplars from {len(images)} images")
    idx = rng.choice(len(images), size=count, replace=False)
    return images[idx]


def raw_store_bytes(n_images: int, image_shape) -> int:
    """Bytes to hold images at one byte per channel value."""
    h, w, c = image_shape
    return int(n_images) * int(h) * int(w) * int(c)


def bytes_to_megabytes(n_bytes: int) -> float:
    return n_bytes / BYTES_PER_MEGABYTE


def format_megabytes(n_bytes: int) -> str:
    return f"{bytes_to_megabytes(n_bytes):.2f}"


@dataclass
class MemoryReport:
    """Footprint of a store, with the raw-pixel baseline for the same count."""

    label: str
    exemplar_count: int
    raw_bytes: int
    stream_bytes: int = 0
    model_bytes: int = 0
    codec_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return self.stream_bytes + self.model_bytes + self.codec_bytes

    @property
    def payload_bytes(self) -> int:
        return self.total_bytes if self.total_bytes else self.raw_bytes

    def summary(self) -> list[str]:
        lines = [f"{self.label}: {self.exemplar_count} exemplars"]
        if self.total_bytes:
            lines.append(f"  streams {format_megabytes(self.stream_bytes)} MB"
                         f" + models {format_megabytes(self.model_bytes)} MB"
                         f" + codec {format_megabytes(self.codec_bytes)} MB"
                         f" = {format_megabytes(self.total_bytes)} MB")
            lines.append(f"  raw equivalent {format_megabytes(self.raw_bytes)} MB")
        else:
            lines.append(f"  raw pixels {format_megabytes(self.raw_bytes)} MB")
        return lines


class RawExemplarStore:
    """Per-class uint8 exemplars; the uncompressed baseline."""

    def __init__(self, exemplars_per_class: int = DEFAULT_EXEMPLARS_PER_CLASS, seed: int = 0):
        if exemplars_per_class < 1:
            raise InvalidInputError("need at least one exemplar per class")
        self.exemplars_per_class = exemplars_per_class
        self.seed = seed
        self._classes: dict[int, np.ndarray] = {}

    @property
    def class_labels(self) -> list[int]:
        return sorted(self._classes)

    def add_class(self, label: int, images: np.ndarray) -> None:
        label = int(label)
        if label in self._classes:
            raise InvalidInputError(f"class {label} is already stored")
        rng = np.random.default_rng([self.seed, label])
        chosen = select_exemplars(images, self.exemplars_per_class, rng)
        self._classes[label] = np.round(np.clip(chosen, 0.0, 1.0) * 255).astype(np.uint8)

    def get(self, label: int) -> np.ndarray:
        if label not in self._classes:
            raise InvalidInputError(f"class {label} is not stored")
        return self._classes[label].astype(np.float64) / 255.0

    def reconstruct_all(self) -> dict[int, np.ndarray]:
        return {label: self.get(label) for label in self.class_labels}

    def account(self) -> MemoryReport:
        count = sum(len(v) for v in self._classes.values())
        raw = sum(raw_store_bytes(len(v), v.shape[1:]) for v in self._classes.values())
        return MemoryReport(label="raw", exemplar_count=count, raw_bytes=raw)


# -- model pair ------------------------------------------------------------------

@dataclass
class LatentModelPair:
    """One chain model per grid level, versioned in lockstep."""

    top: LatentChainModel
    bottom: LatentChainModel

    def __post_init__(self):
        if self.top.version != self.bottom.version:
            raise InvalidInputError("pair levels must share a version")

    @property
    def version(self) -> int:
        return self.top.version

    def copy(self) -> "LatentModelPair":
        return LatentModelPair(self.top.copy(), self.bottom.copy())

    def tables(self, precision: int = DEFAULT_PRECISION) -> tuple[CodingTables, CodingTables]:
        return (build_coding_tables(self.top, precision),
                build_coding_tables(self.bottom, precision))

    def serialize(self) -> bytes:
        return serialize_models([self.top, self.bottom])

    @staticmethod
    def deserialize(data: bytes) -> "LatentModelPair":
        models = deserialize_models(data)
        if len(models) != 2:
            raise DataCorruptionError(f"expected 2 model records, found {len(models)}")
        return LatentModelPair(models[0], models[1])


def grid_blocks(grid: CodeGrid, pair: LatentModelPair) -> tuple[list, list]:
    """Row-major symbols of each level, chunked to that level's block length."""
    return (chunk_symbols(grid.top.ravel(), pair.top.block_len),
            chunk_symbols(grid.bottom.ravel(), pair.bottom.block_len))


def _block_lens(n_symbols: int, block_len: int) -> list[int]:
    full, rest = divmod(n_symbols, block_len)
    return [block_len] * full + ([rest] if rest else [])


def compress_grid(grid: CodeGrid, pair: LatentModelPair,
                  tables: tuple[CodingTables, CodingTables] | None = None,
                  precision: int = DEFAULT_PRECISION,
                  initial_bits: int = 256, seed=0, method: str = "bitswap") -> CompressedStream:
    top_tables, bottom_tables = tables if tables is not None else pair.tables(precision)
    top_blocks, bottom_blocks = grid_blocks(grid, pair)
    return encode_stream([(top_blocks, top_tables), (bottom_blocks, bottom_tables)],
                         initial_bits=initial_bits, seed=seed, method=method)


def decompress_grid(stream: CompressedStream, pair: LatentModelPair,
                    top_shape, bottom_shape,
                    tables: tuple[CodingTables, CodingTables] | None = None,
                    precision: int = DEFAULT_PRECISION,
                    method: str = "bitswap") -> CodeGrid:
    top_tables, bottom_tables = tables if tables is not None else pair.tables(precision)
    top_lens = _block_lens(int(np.prod(top_shape)), pair.top.block_len)
    bottom_lens = _block_lens(int(np.prod(bottom_shape)), pair.bottom.block_len)
    out = decode_stream(stream, [(top_lens, top_tables), (bottom_lens, bottom_tables)],
                        method=method)
    top = np.concatenate(out[0]) if out[0] else np.array([], dtype=np.int64)
    bottom = np.concatenate(out[1]) if out[1] else np.array([], dtype=np.int64)
    return CodeGrid(top=top.reshape(top_shape).astype(np.int32),
                    bottom=bottom.reshape(bottom_shape).astype(np.int32))


# -- compressed replay buffer ------------------------------------------------------

@dataclass
class ClassShelf:
    label: int
    image_shape: tuple[int, int, int]
    top_shape: tuple[int, int]
    bottom_shape: tuple[int, int]
    streams: list[CompressedStream] = field(default_factory=list)


@dataclass
class IngestReport:
    """Fresh-encode accounting for one ingested class."""

    label: int
    exemplar_count: int
    symbol_count: int
    net_bits: float
    gross_bits: float
    returned_bits: float
    peak_demand_bits: float
    stream_bytes: int
    model_version: int

    @property
    def bits_per_code(self) -> float:
        return self.net_bits / self.symbol_count if self.symbol_count else 0.0


class ReplayBuffer:
    """Compressed exemplar store over a frozen codec and a model pair."""

    def __init__(self, codec: CodecParams, pair: LatentModelPair,
                 exemplars_per_class: int = DEFAULT_EXEMPLARS_PER_CLASS,
                 precision: int = DEFAULT_PRECISION, initial_bits: int = 256,
                 seed: int = 0, method: str = "bitswap"):
        if exemplars_per_class < 1:
            raise InvalidInputError("need at least one exemplar per class")
        self.codec = codec
        self.pair = pair
        self.exemplars_per_class = exemplars_per_class
        self.precision = precision
        self.initial_bits = initial_bits
        self.seed = seed
        self.method = method
        self._shelves: dict[int, ClassShelf] = {}

    @property
    def class_labels(self) -> list[int]:
        return sorted(self._shelves)

    @property
    def exemplar_count(self) -> int:
        return sum(len(s.streams) for s in self._shelves.values())

    def _require_frozen(self):
        if not self.codec.frozen:
            raise StateError("codec must be frozen before the buffer can code images")

    def _stream_seed(self, label: int, index: int):
        return [self.seed, int(label) + 1, index + 1]

    def _decode_shelf_grids(self, shelf: ClassShelf,
                            tables: tuple[CodingTables, CodingTables]) -> list[CodeGrid]:
        grids = []
        for stream in shelf.streams:
            if stream.model_version != self.pair.version:
                raise DataCorruptionError(
                    f"stream for class {shelf.label} has model version "
                    f"{stream.model_version}, buffer is at {self.pair.version}")
            grids.append(decompress_grid(stream, self.pair, shelf.top_shape,
                                         shelf.bottom_shape, tables=tables,
                                         method=self.method))
        return grids

    def ingest_phase(self, class_data, fit_config: FitConfig = FitConfig()) -> dict[int, IngestReport]:
        """Add one phase's classes: pick exemplars per class, refit the
        models once on everything stored plus the newcomers, then re-encode
        the whole buffer under the bumped version."""
        self._require_frozen()
        items = sorted((int(label), images) for label, images in class_data.items())
        if not items:
            raise InvalidInputError("a phase must add at least one class")
        for label, _ in items:
            if label in self._shelves:
                raise InvalidInputError(f"class {label} was already ingested")
        if len({label for label, _ in items}) != len(items):
            raise InvalidInputError("duplicate class labels within the phase")

        new_per_class: dict[int, list[CodeGrid]] = {}
        chosen_shapes: dict[int, tuple] = {}
        for label, images in items:
            rng = np.random.default_rng([self.seed, label])
            chosen = select_exemplars(images, self.exemplars_per_class, rng)
            new_per_class[label] = [encode_image(img, self.codec) for img in chosen]
            chosen_shapes[label] = tuple(chosen.shape[1:])

        old_tables = self.pair.tables(self.precision)
        buffered: list[tuple[ClassShelf, list[CodeGrid]]] = []
        for shelf in self._shelves.values():
            buffered.append((shelf, self._decode_shelf_grids(shelf, old_tables)))

        def split_blocks(grids):
            top, bottom = [], []
            for g in grids:
                t, b = grid_blocks(g, self.pair)
                top += t
                bottom += b
            return top, bottom

        new_top, new_bottom = split_blocks(g for grids in new_per_class.values() for g in grids)
        old_top, old_bottom = split_blocks(g for _, grids in buffered for g in grids)
        self.pair = LatentModelPair(
            finetune(self.pair.top, new_top, fit_config, buffered_blocks=old_top),
            finetune(self.pair.bottom, new_bottom, fit_config, buffered_blocks=old_bottom))

        tables = self.pair.tables(self.precision)

        def encode_all(label, grids):
            return [compress_grid(g, self.pair, tables=tables, initial_bits=self.initial_bits,
                                  seed=self._stream_seed(label, i), method=self.method)
                    for i, g in enumerate(grids)]

        for shelf, grids in buffered:
            shelf.streams = encode_all(shelf.label, grids)

        reports = {}
        for label, grids in new_per_class.items():
            shelf = ClassShelf(label=label, image_shape=chosen_shapes[label],
                               top_shape=tuple(grids[0].top.shape),
                               bottom_shape=tuple(grids[0].bottom.shape))
            shelf.streams = encode_all(label, grids)
            self._shelves[label] = shelf
            reports[label] = IngestReport(
                label=label,
                exemplar_count=len(shelf.streams),
                symbol_count=sum(s.symbol_count for s in shelf.streams),
                net_bits=sum(s.net_bits for s in shelf.streams),
                gross_bits=sum(s.gross_bits for s in shelf.streams),
                returned_bits=sum(s.returned_bits for s in shelf.streams),
                peak_demand_bits=max(s.peak_demand_bits for s in shelf.streams),
                stream_bytes=sum(len(serialize_stream(s)) for s in shelf.streams),
                model_version=self.pair.version,
            )
        return reports

    def reconstruct_class(self, label: int) -> np.ndarray:
        if label not in self._shelves:
            raise InvalidInputError(f"class {label} is not stored")
        shelf = self._shelves[label]
        tables = self.pair.tables(self.precision)
        grids = self._decode_shelf_grids(shelf, tables)
        return np.stack([decode_codes(g, self.codec) for g in grids])

    def reconstruct_all(self) -> dict[int, np.ndarray]:
        return {label: self.reconstruct_class(label) for label in self.class_labels}

    def account(self) -> MemoryReport:
        count = self.exemplar_count
        raw = sum(raw_store_bytes(len(s.streams), s.image_shape)
                  for s in self._shelves.values())
        streams = sum(len(serialize_stream(st)) for s in self._shelves.values()
                      for st in s.streams)
        return MemoryReport(
            label="compressed", exemplar_count=count, raw_bytes=raw,
            stream_bytes=streams,
            model_bytes=len(self.pair.serialize()),
            codec_bytes=len(serialize_codec(self.codec)),
        )

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(os.path.join(directory, STREAM_DIR), exist_ok=True)
        with open(os.path.join(directory, CODEC_NAME), "wb") as f:
            f.write(serialize_codec(self.codec))
        with open(os.path.join(directory, MODELS_NAME), "wb") as f:
            f.write(self.pair.serialize())
        lines = [INDEX_HEADER,
                 f"seed={self.seed} precision={self.precision} "
                 f"initial_bits={self.initial_bits} "
                 f"exemplars_per_class={self.exemplars_per_class} method={self.method}"]
        for label in self.class_labels:
            shelf = self._shelves[label]
            h, w, c = shelf.image_shape
            lines.append(f"class label={label} image={h},{w},{c} "
                         f"top={shelf.top_shape[0]},{shelf.top_shape[1]} "
                         f"bottom={shelf.bottom_shape[0]},{shelf.bottom_shape[1]} "
                         f"count={len(shelf.streams)}")
            for i, stream in enumerate(shelf.streams):
                name = f"{STREAM_DIR}/{label}_{i}.drrs"
                lines.append(f"stream label={label} index={i} file={name} "
                             f"version={stream.model_version}")
                with open(os.path.join(directory, name), "wb") as f:
                    f.write(serialize_stream(stream))
        with open(os.path.join(directory, INDEX_NAME), "w") as f:
            f.write("\n".join(lines) + "\n")

    @staticmethod
    def load(directory: str) -> "ReplayBuffer":
        index_path = os.path.join(directory, INDEX_NAME)
        try:
            with open(index_path) as f:
                lines = [ln.strip() for ln in f if ln.strip()]
            with open(os.path.join(directory, CODEC_NAME), "rb") as f:
                codec = deserialize_codec(f.read())
            with open(os.path.join(directory, MODELS_NAME), "rb") as f:
                pair = LatentModelPair.deserialize(f.read())
        except OSError as exc:
            raise DataCorruptionError(f"unreadable buffer directory: {exc}") from exc
        if not lines or lines[0] != INDEX_HEADER:
            raise DataCorruptionError("bad index header")

        def fields(line, kind):
            parts = line.split()
            if parts[0] != kind:
                raise DataCorruptionError(f"expected a {kind} line, got: {line}")
            return dict(p.split("=", 1) for p in parts[1:])

        def int_tuple(text):
            return tuple(int(v) for v in text.split(","))

        opts = dict(p.split("=", 1) for p in lines[1].split())
        buffer = ReplayBuffer.__new__(ReplayBuffer)
        buffer.codec = codec
        buffer.pair = pair
        buffer.exemplars_per_class = int(opts["exemplars_per_class"])
        buffer.precision = int(opts["precision"])
        buffer.initial_bits = int(opts["initial_bits"])
        buffer.seed = int(opts["seed"])
        buffer.method = opts["method"]
        buffer._shelves = {}
        try:
            i = 2
            while i < len(lines):
                info = fields(lines[i], "class")
                i += 1
                label = int(info["label"])
                shelf = ClassShelf(label=label,
                                   image_shape=int_tuple(info["image"]),
                                   top_shape=int_tuple(info["top"]),
                                   bottom_shape=int_tuple(info["bottom"]))
                for _ in range(int(info["count"])):
                    entry = fields(lines[i], "stream")
                    i += 1
                    if int(entry["label"]) != label:
                        raise DataCorruptionError("stream entry under the wrong class")
                    with open(os.path.join(directory, entry["file"]), "rb") as f:
                        stream = deserialize_stream(f.read())
                    if stream.model_version != int(entry["version"]):
                        raise DataCorruptionError(
                            f"stream file version {stream.model_version} does not "
                            f"match index version {entry['version']}")
                    shelf.streams.append(stream)
                buffer._shelves[label] = shelf
        except (OSError, KeyError, ValueError, IndexError) as exc:
            raise DataCorruptionError(f"corrupt buffer index: {exc}") from exc
        for shelf in buffer._shelves.values():
            for stream in shelf.streams:
                if stream.model_version != pair.version:
                    raise DataCorruptionError(
                        f"stream for class {shelf.label} has model version "
                        f"{stream.model_version}, models file is at {pair.version}")
        return buffer
