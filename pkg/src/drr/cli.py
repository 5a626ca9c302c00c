"""Command-line entry point.

Commands: pretrain-codec, compress, decompress, run-phases, report,
inspect.  Exit codes: 0 success, 1 usage or invalid input, 2 I/O failure,
3 corrupt data.  All randomness is seeded, and every command writes
byte-identical outputs when rerun with the same flags.

Images travel in a minimal raw tensor format: height, width, channels as
little-endian u32, then one byte per channel value, row-major.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

import numpy as np

from .bits_back import (
    FitConfig,
    deserialize_models,
    deserialize_stream,
    fit,
    random_model,
    serialize_stream,
)
from .errors import (
    DataCorruptionError,
    DegenerateInputError,
    DrrError,
    InvalidInputError,
    StateError,
)
from .learner import (
    ExperimentConfig,
    LatentSpec,
    PhaseSchedule,
    TrainConfig,
    make_toy_dataset,
    run_experiment,
)
from .rans import DEFAULT_PRECISION
from .replay_store import (
    LatentModelPair,
    compress_grid,
    decompress_grid,
    format_megabytes,
    grid_blocks,
)
from .vq_codec import (
    CodecConfig,
    decode_codes,
    deserialize_codec,
    encode_image,
    freeze,
    mean_reconstruction_error,
    serialize_codec,
    train_codec,
)

IMAGE_SUFFIX = ".img"
STREAM_SET_HEADER = "drr-stream-set 1"
RESULTS_HEADER = "drr-results 1"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CORRUPT = 3


# -- raw tensor image files ------------------------------------------------------

def write_image(path: str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError("images are written as (height, width, channels)")
    h, w, c = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack("<III", h, w, c))
        f.write(data.tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise DataCorruptionError(f"{path}: truncated image header")
    h, w, c = struct.unpack("<III", data[:12])
    if len(data) != 12 + h * w * c:
        raise DataCorruptionError(f"{path}: size does not match header")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=12)
    return pixels.reshape(h, w, c).astype(np.float64) / 255.0


def _list_images(directory: str) -> list[str]:
    try:
        names = sorted(n for n in os.listdir(directory) if n.endswith(IMAGE_SUFFIX))
    except OSError as exc:
        raise OSError(f"cannot list {directory}: {exc}") from exc
    if not names:
        raise InvalidInputError(f"no {IMAGE_SUFFIX} files in {directory}")
    return [os.path.join(directory, n) for n in names]


# -- pretrain-codec ----------------------------------------------------------------

def cmd_pretrain_codec(args) -> int:
    images = np.stack([read_image(p) for p in _list_images(args.data)])
    config = CodecConfig(patch=args.patch, pool=args.pool, channels=images.shape[-1],
                         codebook_size=args.codebook_size, embed_dim=args.embed_dim,
                         beta=args.beta, lr=args.lr, epochs=args.epochs, seed=args.seed)
    params = freeze(train_codec(images, config))
    with open(args.out, "wb") as f:
        f.write(serialize_codec(params))
    mse = mean_reconstruction_error(images, params)
    print(f"trained codec on {len(images)} images; reconstruction mse {mse:.6f}")
    print(f"wrote {args.out} ({os.path.getsize(args.out)} bytes)")
    return EXIT_OK


# -- compress / decompress ----------------------------------------------------------

def _load_codec(path: str):
    with open(path, "rb") as f:
        return deserialize_codec(f.read())


def _load_pair(path: str) -> LatentModelPair:
    with open(path, "rb") as f:
        return LatentModelPair.deserialize(f.read())


def _make_pair(codebook_size: int, alphabets, block_len: int, seed: int) -> LatentModelPair:
    return LatentModelPair(
        random_model(codebook_size, alphabets, block_len=block_len, seed=2 * seed + 1),
        random_model(codebook_size, alphabets, block_len=block_len, seed=2 * seed + 2))


def cmd_compress(args) -> int:
    codec = _load_codec(args.codec)
    paths = _list_images(args.in_dir)
    images = [read_image(p) for p in paths]
    grids = [encode_image(img, codec) for img in images]

    if os.path.exists(args.model):
        pair = _load_pair(args.model)
    else:
        alphabets = tuple(int(a) for a in args.alphabets.split(","))
        pair = _make_pair(codec.codebook_size, alphabets,
                          args.block_len, args.seed)
        if args.fit_iterations > 0:
            top, bottom = [], []
            for g in grids:
                t, b = grid_blocks(g, pair)
                top += t
                bottom += b
            pair = LatentModelPair(
                fit(pair.top, top, FitConfig(args.fit_iterations)),
                fit(pair.bottom, bottom, FitConfig(args.fit_iterations)))
        with open(args.model, "wb") as f:
            f.write(pair.serialize())
        print(f"wrote model pair to {args.model}")

    os.makedirs(args.out, exist_ok=True)
    tables = pair.tables(args.precision)
    lines = [STREAM_SET_HEADER]
    net = 0.0
    symbols = 0
    payload = 0
    for i, (path, grid) in enumerate(zip(paths, grids)):
        stream = compress_grid(grid, pair, tables=tables, initial_bits=args.initial_bits,
                               seed=[args.seed, i])
        name = f"stream_{i:04d}.drrs"
        blob = serialize_stream(stream)
        with open(os.path.join(args.out, name), "wb") as f:
            f.write(blob)
        source = os.path.basename(path)
        lines.append(f"stream file={name} source={source} "
                     f"top={grid.top.shape[0]},{grid.top.shape[1]} "
                     f"bottom={grid.bottom.shape[0]},{grid.bottom.shape[1]} "
                     f"symbols={stream.symbol_count} version={stream.model_version}")
        net += stream.net_bits
        symbols += stream.symbol_count
        payload += len(blob)
    with open(os.path.join(args.out, "index.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    raw = sum(img.size for img in images)
    print(f"compressed {len(paths)} images, {symbols} codes")
    print(f"net bits/code {net / symbols:.4f} (uncoded grids would use 16)")
    print(f"stream files {payload} bytes = {format_megabytes(payload)} MB; "
          f"raw pixels {raw} bytes = {format_megabytes(raw)} MB")
    return EXIT_OK


def cmd_decompress(args) -> int:
    codec = _load_codec(args.codec)
    pair = _load_pair(args.model)
    index_path = os.path.join(args.in_dir, "index.txt")
    with open(index_path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != STREAM_SET_HEADER:
        raise DataCorruptionError(f"{index_path}: bad stream-set header")
    os.makedirs(args.out, exist_ok=True)
    tables = pair.tables(args.precision)
    count = 0
    for line in lines[1:]:
        entry = dict(p.split("=", 1) for p in line.split()[1:])
        with open(os.path.join(args.in_dir, entry["file"]), "rb") as f:
            stream = deserialize_stream(f.read())
        top_shape = tuple(int(v) for v in entry["top"].split(","))
        bottom_shape = tuple(int(v) for v in entry["bottom"].split(","))
        grid = decompress_grid(stream, pair, top_shape, bottom_shape, tables=tables)
        write_image(os.path.join(args.out, entry["source"]), decode_codes(grid, codec))
        count += 1
    print(f"reconstructed {count} images into {args.out}")
    return EXIT_OK


# -- run-phases / report --------------------------------------------------------------

CONFIG_DEFAULTS = {
    "mode": "drr", "ib_weight": 0.005, "epochs": 80, "lr": 0.05, "batch_size": 32,
    "hidden_dim": 24, "seed": 0,
    "total_classes": 8, "initial_classes": 4, "n_phases": 2, "classes_per_phase": 2,
    "train_per_class": 14, "test_per_class": 8, "side": 16, "channels": 3,
    "data_seed": 123,
    "patch": 4, "pool": 2, "codebook_size": 32, "embed_dim": 8,
    "codec_epochs": 300, "codec_lr": 0.005, "beta": 0.25,
    "alphabets": "6,4", "block_len": 8, "precision": DEFAULT_PRECISION,
    "initial_bits": 256, "fit_iterations": 3,
    "exemplars_per_class": 10,
}


def parse_config_file(path: str) -> dict:
    values = dict(CONFIG_DEFAULTS)
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in values:
                raise InvalidInputError(f"{path}:{lineno}: unknown key {key!r}")
            default = CONFIG_DEFAULTS[key]
            try:
                if isinstance(default, int):
                    values[key] = int(value)
                elif isinstance(default, float):
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad value for {key}") from exc
    return values


def experiment_config_from_values(values: dict) -> ExperimentConfig:
    return ExperimentConfig(
        schedule=PhaseSchedule(total_classes=values["total_classes"],
                               initial_classes=values["initial_classes"],
                               n_phases=values["n_phases"],
                               classes_per_phase=values["classes_per_phase"],
                               seed=values["seed"]),
        codec=CodecConfig(patch=values["patch"], pool=values["pool"],
                          channels=values["channels"],
                          codebook_size=values["codebook_size"],
                          embed_dim=values["embed_dim"], beta=values["beta"],
                          lr=values["codec_lr"], epochs=values["codec_epochs"],
                          seed=values["seed"]),
        train=TrainConfig(mode=values["mode"], ib_weight=values["ib_weight"],
                          epochs=values["epochs"], lr=values["lr"],
                          batch_size=values["batch_size"],
                          hidden_dim=values["hidden_dim"], seed=values["seed"]),
        latent=LatentSpec(alphabets=tuple(int(a) for a in values["alphabets"].split(",")),
                          block_len=values["block_len"],
                          precision=values["precision"],
                          initial_bits=values["initial_bits"],
                          fit_iterations=values["fit_iterations"]),
        exemplars_per_class=values["exemplars_per_class"],
    )


def results_lines(values: dict, result) -> list[str]:
    lines = [RESULTS_HEADER,
             "config " + " ".join(f"{k}={values[k]}" for k in sorted(values))]
    for record in result.records:
        buf = record.buffer_report
        raw_store = record.raw_report.raw_bytes if record.raw_report else 0
        net = sum(r.net_bits for r in record.ingest.values())
        syms = sum(r.symbol_count for r in record.ingest.values())
        lines.append(
            f"phase index={record.phase} classes_seen={record.classes_seen} "
            f"accuracy={record.accuracy!r} model_version={record.model_version} "
            f"stream_bytes={buf.stream_bytes} model_bytes={buf.model_bytes} "
            f"codec_bytes={buf.codec_bytes} total_bytes={buf.total_bytes} "
            f"raw_equiv_bytes={buf.raw_bytes} raw_store_bytes={raw_store} "
            f"ingest_net_bits={net!r} ingest_symbols={syms}")
    average = result.results.average
    lines.append(f"summary phases={len(result.records) - 1} "
                 f"average={'absent' if average is None else repr(average)} "
                 f"last={result.results.last!r}")
    return lines


def cmd_run_phases(args) -> int:
    values = parse_config_file(args.config)
    config = experiment_config_from_values(values)
    train_images, train_labels = make_toy_dataset(
        values["total_classes"], values["train_per_class"], side=values["side"],
        channels=values["channels"], seed=values["data_seed"], salt=0)
    test_images, test_labels = make_toy_dataset(
        values["total_classes"], values["test_per_class"], side=values["side"],
        channels=values["channels"], seed=values["data_seed"], salt=1)
    result = run_experiment(train_images, train_labels, test_images, test_labels, config)
    lines = results_lines(values, result)
    with open(args.out, "w") as f:
        f.write("\n".join(lines) + "\n")
    for line in lines[2:]:
        print(line)
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_results(path: str):
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines:
        raise InvalidInputError(f"{path} is empty")
    if lines[0] != RESULTS_HEADER:
        raise DataCorruptionError(f"{path}: bad results header")
    phases = []
    summary = None
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        entry = dict(p.split("=", 1) for p in rest.split())
        if kind == "phase":
            phases.append(entry)
        elif kind == "summary":
            summary = entry
    if not phases or summary is None:
        raise DataCorruptionError(f"{path}: missing phase or summary records")
    return phases, summary


def cmd_report(args) -> int:
    phases, summary = _parse_results(args.results)
    accuracies = [float(p["accuracy"]) for p in phases]
    print(f"{'phase':>5} {'classes':>8} {'accuracy':>9} {'buffer MB':>10} {'raw-equiv MB':>13}")
    for p in phases:
        print(f"{p['index']:>5} {p['classes_seen']:>8} {float(p['accuracy']):>9.4f} "
              f"{format_megabytes(int(p['total_bytes'])):>10} "
              f"{format_megabytes(int(p['raw_equiv_bytes'])):>13}")
    if len(accuracies) > 1:
        average = float(np.mean(accuracies[1:]))
        stated = summary["average"]
        if stated == "absent" or abs(float(stated) - average) > 1e-12:
            raise DataCorruptionError("summary average disagrees with phase records")
        print(f"average (phases 1..N): {average:.4f}")
    elif summary["average"] != "absent":
        raise DataCorruptionError("summary average should be absent with no phases")
    last = accuracies[-1]
    if abs(float(summary["last"]) - last) > 1e-12:
        raise DataCorruptionError("summary last disagrees with phase records")
    print(f"last phase: {last:.4f}")
    return EXIT_OK


# -- inspect ---------------------------------------------------------------------

def cmd_inspect(args) -> int:
    with open(args.file, "rb") as f:
        data = f.read()
    magic = data[:4]
    if magic == b"DRRC":
        codec = deserialize_codec(data)
        k, d = codec.codebook_bottom.shape
        print(f"codec: patch {codec.patch}, pool {codec.pool}, channels {codec.channels}, "
              f"codebook {k} x {d}, frozen {codec.frozen}")
    elif magic == b"DRRM":
        models = deserialize_models(data)
        print(f"model snapshot: {len(models)} records")
        for i, m in enumerate(models):
            print(f"  [{i}] version {m.version}, levels {m.levels}, "
                  f"alphabet {m.obs_alphabet}, chain {m.alphabets}, block {m.block_len}")
    elif magic == b"DRRS":
        stream = deserialize_stream(data)
        print(f"stream: {stream.symbol_count} symbols, model version "
              f"{stream.model_version}, payload {len(stream.payload)} bytes")
    elif len(data) >= 12:
        h, w, c = struct.unpack("<III", data[:12])
        if len(data) == 12 + h * w * c:
            print(f"raw image: {h} x {w} x {c}")
        else:
            raise InvalidInputError(f"{args.file}: unrecognized format")
    else:
        raise InvalidInputError(f"{args.file}: unrecognized format")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drr", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain-codec", help="train and freeze a patch codec")
    p.add_argument("--data", required=True, help="directory of .img files")
    p.add_argument("--out", required=True, help="output codec file")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--pool", type=int, default=2)
    p.add_argument("--codebook-size", type=int, default=512)
    p.add_argument("--embed-dim", type=int, default=64)
    p.set_defaults(func=cmd_pretrain_codec)

    p = sub.add_parser("compress", help="entropy-code images into stream files")
    p.add_argument("--codec", required=True)
    p.add_argument("--model", required=True,
                   help="model pair file; created and fitted if absent")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="directory of .img files")
    p.add_argument("--out", required=True, help="output stream directory")
    p.add_argument("--precision", type=int, default=DEFAULT_PRECISION)
    p.add_argument("--initial-bits", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alphabets", default="16,8", help="chain alphabets, e.g. 16,8")
    p.add_argument("--block-len", type=int, default=16)
    p.add_argument("--fit-iterations", type=int, default=20)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="rebuild images from stream files")
    p.add_argument("--codec", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_dir", required=True,
                   help="stream directory with index.txt")
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--precision", type=int, default=DEFAULT_PRECISION)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("run-phases", help="run a phased experiment on toy data")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="results file to write")
    p.set_defaults(func=cmd_run_phases)

    p = sub.add_parser("report", help="summarize a results file")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="identify and summarize an artifact file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (InvalidInputError, DegenerateInputError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataCorruptionError as exc:
        print(f"corrupt data: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DrrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
