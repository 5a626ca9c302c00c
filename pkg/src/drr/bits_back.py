"""Lossless coding of discrete code sequences with latent-variable models.

The model is a fully discrete Markov chain: a prior over the deepest latent,
per-level conditional tables downward, and an observation table emitting
code symbols from the first latent.  Blocks of B symbols share one latent
chain.  Inference runs the other way: a posterior table for the first
latent given a block's leading symbol, then per-level transition tables.

Encoding uses the bits-back construction on a stack coder: latents are
*popped* from the message under the inference tables (recovering their cost
later), then the observed block and the latents are pushed under the
generative tables.  The interleaved variant pushes each level before
popping the next, which needs less auxiliary slack up front than popping
the whole chain first.  Net cost per block is, on average, the negative
evidence lower bound of the model, so tighter models pay fewer bits.

All tables are quantized to coder frequencies before any coding, and the
accounting runs on those quantized tables, so measured net bits line up
exactly with the bound computed from the same quantized model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DataCorruptionError,
    ExhaustedStreamError,
    InsufficientInitialBitsError,
    InvalidInputError,
)
from .rans import DEFAULT_PRECISION, AnsCoder, QuantizedPmf, pmf_quantize

MODEL_MAGIC = b"DRRM"
MODEL_FORMAT_VERSION = 1
STREAM_MAGIC = b"DRRS"

DEFAULT_LEVELS = 8
DEFAULT_LATENT_ALPHABET = 64
DEFAULT_BLOCK_LEN = 16
DEFAULT_INITIAL_BITS = 256

LN2 = float(np.log(2.0))


@dataclass
class LatentChainModel:
    """Categorical chain model over blocks of code symbols.

    Table orientations (L levels, observed alphabet K):
      p_obs[a, k]      p(x = k | z_0 = a),            shape (A_0, K)
      p_link[i][b, a]  p(z_i = a | z_{i+1} = b),       shape (A_{i+1}, A_i)
      p_top[a]         p(z_{L-1} = a),                 shape (A_{L-1},)
      q_obs[k, a]      q(z_0 = a | block starts with k), shape (K, A_0)
      q_link[i][a, b]  q(z_{i+1} = b | z_i = a),       shape (A_i, A_{i+1})

    Every row is a PMF.  The posterior of the first latent conditions on a
    block's first symbol only, which keeps every coding distribution a
    plain table row.
    """

    obs_alphabet: int
    alphabets: tuple[int, ...]
    block_len: int
    p_obs: np.ndarray
    p_link: list[np.ndarray]
    p_top: np.ndarray
    q_obs: np.ndarray
    q_link: list[np.ndarray]
    version: int = 0

    @property
    def levels(self) -> int:
        return len(self.alphabets)

    def copy(self) -> "LatentChainModel":
        return replace(
            self,
            p_obs=self.p_obs.copy(),
            p_link=[t.copy() for t in self.p_link],
            p_top=self.p_top.copy(),
            q_obs=self.q_obs.copy(),
            q_link=[t.copy() for t in self.q_link],
        )

    def tables(self):
        """All tables with their names, in serialization order."""
        out = [("p_obs", self.p_obs)]
        out += [(f"p_link[{i}]", t) for i, t in enumerate(self.p_link)]
        out.append(("p_top", self.p_top))
        out.append(("q_obs", self.q_obs))
        out += [(f"q_link[{i}]", t) for i, t in enumerate(self.q_link)]
        return out

    def validate(self, atol: float = 1e-9) -> None:
        k, alphas, levels = self.obs_alphabet, self.alphabets, self.levels
        if levels < 1 or k < 1 or self.block_len < 1 or min(alphas) < 1:
            raise InvalidInputError("levels, alphabets, and block length must be positive")
        shapes = {
            "p_obs": (alphas[0], k),
            "p_top": (alphas[-1],),
            "q_obs": (k, alphas[0]),
        }
        for name, want in shapes.items():
            if getattr(self, name).shape != want:
                raise InvalidInputError(f"{name} must have shape {want}")
        if len(self.p_link) != levels - 1 or len(self.q_link) != levels - 1:
            raise InvalidInputError(f"expected {levels - 1} link tables per direction")
        for i in range(levels - 1):
            if self.p_link[i].shape != (alphas[i + 1], alphas[i]):
                raise InvalidInputError(f"p_link[{i}] must have shape {(alphas[i + 1], alphas[i])}")
            if self.q_link[i].shape != (alphas[i], alphas[i + 1]):
                raise InvalidInputError(f"q_link[{i}] must have shape {(alphas[i], alphas[i + 1])}")
        for name, table in self.tables():
            rows = np.atleast_2d(table)
            if np.any(rows < -atol) or not np.all(np.isfinite(rows)):
                raise InvalidInputError(f"{name} has negative or non-finite entries")
            if not np.allclose(rows.sum(axis=1), 1.0, atol=atol):
                raise InvalidInputError(f"{name} rows must sum to 1")


def random_model(obs_alphabet: int, alphabets, block_len: int = DEFAULT_BLOCK_LEN,
                 seed: int = 0, concentration: float = 2.0,
                 version: int = 0) -> LatentChainModel:
    """Seeded model with Dirichlet rows; a generic starting point for `fit`."""
    alphabets = tuple(int(a) for a in alphabets)
    rng = np.random.default_rng(seed)

    def rows(n, a):
        return rng.dirichlet(np.full(a, concentration), size=n)

    levels = len(alphabets)
    model = LatentChainModel(
        obs_alphabet=obs_alphabet,
        alphabets=alphabets,
        block_len=block_len,
        p_obs=rows(alphabets[0], obs_alphabet),
        p_link=[rows(alphabets[i + 1], alphabets[i]) for i in range(levels - 1)],
        p_top=rng.dirichlet(np.full(alphabets[-1], concentration)),
        q_obs=rows(obs_alphabet, alphabets[0]),
        q_link=[rows(alphabets[i], alphabets[i + 1]) for i in range(levels - 1)],
        version=version,
    )
    model.validate()
    return model


def _sample_from_rows(table: np.ndarray, cond: np.ndarray, rng) -> np.ndarray:
    cdf = np.cumsum(table, axis=1)[cond]
    u = rng.random(len(cond))
    return np.minimum((cdf < u[:, None]).sum(axis=1), table.shape[1] - 1)


def sample_blocks(model: LatentChainModel, n_blocks: int, rng) -> list[np.ndarray]:
    """Ancestral samples of observed blocks, one latent chain per block."""
    z = _sample_from_rows(model.p_top[None, :], np.zeros(n_blocks, dtype=int), rng)
    for i in reversed(range(model.levels - 1)):
        z = _sample_from_rows(model.p_link[i], z, rng)
    cdf = np.cumsum(model.p_obs, axis=1)[z]
    u = rng.random((n_blocks, model.block_len))
    x = np.minimum((cdf[:, None, :] < u[:, :, None]).sum(axis=2), model.obs_alphabet - 1)
    return [x[i].astype(np.int64) for i in range(n_blocks)]


def chunk_symbols(symbols, block_len: int) -> list[np.ndarray]:
    """Split a flat symbol sequence into blocks; the last may be shorter."""
    if block_len < 1:
        raise InvalidInputError("block length must be positive")
    flat = np.asarray(symbols, dtype=np.int64).reshape(-1)
    return [flat[i:i + block_len] for i in range(0, len(flat), block_len)]


# -- exact bound computation -------------------------------------------------

def _block_stats(blocks, obs_alphabet: int):
    x0 = np.array([int(b[0]) for b in blocks])
    hist = np.stack([np.bincount(b, minlength=obs_alphabet) for b in blocks]).astype(np.float64)
    return x0, hist


def elbo_per_block(blocks, model: LatentChainModel) -> np.ndarray:
    """Evidence lower bound of each block in bits (so usually negative).

    Exact: expectations are summed over the chain level by level, never
    sampled.  Blocks containing a symbol the model gives zero mass produce
    -inf.
    """
    if len(blocks) == 0:
        raise InvalidInputError("no blocks given")
    for b in blocks:
        arr = np.asarray(b)
        if arr.size == 0 or arr.min() < 0 or arr.max() >= model.obs_alphabet:
            raise InvalidInputError("block symbols must be nonempty and within the alphabet")
    x0, hist = _block_stats(blocks, model.obs_alphabet)
    with np.errstate(divide="ignore"):
        log_p_obs = np.log(model.p_obs)
        log_q_obs = np.log(model.q_obs)
        log_p_top = np.log(model.p_top)

    # E_q[log p(x | z_0)], with exact -inf where a used symbol has zero mass.
    ll = hist @ np.where(np.isfinite(log_p_obs), log_p_obs, 0.0).T
    impossible = (hist > 0) @ (model.p_obs.T == 0)
    ll[impossible] = -np.inf

    m = model.q_obs[x0]  # (n, A_0) marginal of z_0 under q
    lq = log_q_obs[x0]
    total = _masked_sum(m, ll) - _masked_sum(m, lq)
    for i in range(model.levels - 1):
        q = model.q_link[i]
        with np.errstate(divide="ignore"):
            lp = np.log(model.p_link[i].T)  # [a, b] = log p(z_i=a | z_{i+1}=b)
            lql = np.log(q)
        joint = m[:, :, None] * q[None, :, :]
        total += _masked_sum(joint, (lp - lql)[None, :, :])
        m = m @ q
    total += _masked_sum(m, log_p_top[None, :])
    return total / LN2


def _masked_sum(weights: np.ndarray, logs: np.ndarray) -> np.ndarray:
    """sum(w * log) over trailing axes with the 0 * log(0) = 0 convention."""
    with np.errstate(invalid="ignore"):
        prod = np.where(weights > 0, weights * logs, 0.0)
    axes = tuple(range(1, prod.ndim))
    return prod.sum(axis=axes)


def elbo(block, model: LatentChainModel) -> float:
    return float(elbo_per_block([np.asarray(block)], model)[0])


def mean_elbo(blocks, model: LatentChainModel) -> float:
    return float(elbo_per_block(blocks, model).mean())


# -- quantized coding tables --------------------------------------------------

@dataclass
class CodingTables:
    """Per-row frequency tables for one model at one coder precision.

    `dyadic` is the same model with every row replaced by its quantized
    probabilities; bounds computed from it match coding costs exactly.
    """

    precision: int
    model_version: int
    levels: int
    block_len: int
    q_obs_rows: list[QuantizedPmf]
    q_link_rows: list[list[QuantizedPmf]]
    p_obs_rows: list[QuantizedPmf]
    p_link_rows: list[list[QuantizedPmf]]
    p_top_pmf: QuantizedPmf
    dyadic: LatentChainModel


def build_coding_tables(model: LatentChainModel, precision: int = DEFAULT_PRECISION) -> CodingTables:
    model.validate()

    def quantize_rows(table):
        return [pmf_quantize(row, precision) for row in table]

    q_obs_rows = quantize_rows(model.q_obs)
    q_link_rows = [quantize_rows(t) for t in model.q_link]
    p_obs_rows = quantize_rows(model.p_obs)
    p_link_rows = [quantize_rows(t) for t in model.p_link]
    p_top_pmf = pmf_quantize(model.p_top, precision)

    dyadic = replace(
        model,
        p_obs=np.stack([r.probs() for r in p_obs_rows]),
        p_link=[np.stack([r.probs() for r in rows]) for rows in p_link_rows],
        p_top=p_top_pmf.probs(),
        q_obs=np.stack([r.probs() for r in q_obs_rows]),
        q_link=[np.stack([r.probs() for r in rows]) for rows in q_link_rows],
    )
    return CodingTables(
        precision=precision,
        model_version=model.version,
        levels=model.levels,
        block_len=model.block_len,
        q_obs_rows=q_obs_rows,
        q_link_rows=q_link_rows,
        p_obs_rows=p_obs_rows,
        p_link_rows=p_link_rows,
        p_top_pmf=p_top_pmf,
        dyadic=dyadic,
    )


# -- block coding --------------------------------------------------------------

@dataclass
class BlockTrace:
    """Accounting for one coded block, in ideal bits."""

    pushed: float
    popped: float
    peak_demand: float

    @property
    def net(self) -> float:
        return self.pushed - self.popped


class _Tracker:
    """Watches the coder's information level to find the auxiliary peak."""

    def __init__(self, coder: AnsCoder):
        self.coder = coder
        self.start = coder.potential()
        self.low = self.start

    def note(self):
        level = self.coder.potential()
        if level < self.low:
            self.low = level

    @property
    def peak_demand(self) -> float:
        return self.start - self.low


def _pop_latent(coder: AnsCoder, pmf: QuantizedPmf) -> int:
    try:
        return coder.pop(pmf)
    except ExhaustedStreamError as exc:
        raise InsufficientInitialBitsError(
            "auxiliary bits exhausted while sampling latents; "
            "seed the coder with more initial bits") from exc


def _check_block(x: np.ndarray, tables: CodingTables) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    if x.size == 0:
        raise InvalidInputError("cannot code an empty block")
    if x.min() < 0 or x.max() >= len(tables.q_obs_rows):
        raise InvalidInputError("block symbol outside the observed alphabet")
    return x


def bb_encode_block(coder: AnsCoder, x, tables: CodingTables) -> BlockTrace:
    """Plain bits-back: pop the whole latent chain, then push everything."""
    x = _check_block(x, tables)
    track = _Tracker(coder)
    pushed = popped = 0.0
    levels = tables.levels
    z = [0] * levels

    pmf = tables.q_obs_rows[x[0]]
    z[0] = _pop_latent(coder, pmf)
    popped += pmf.cost_bits(z[0])
    track.note()
    for i in range(levels - 1):
        pmf = tables.q_link_rows[i][z[i]]
        z[i + 1] = _pop_latent(coder, pmf)
        popped += pmf.cost_bits(z[i + 1])
        track.note()

    row = tables.p_obs_rows[z[0]]
    for s in x[::-1]:
        coder.push(int(s), row)
        pushed += row.cost_bits(int(s))
    track.note()
    for i in range(levels - 1):
        link = tables.p_link_rows[i][z[i + 1]]
        coder.push(z[i], link)
        pushed += link.cost_bits(z[i])
    coder.push(z[levels - 1], tables.p_top_pmf)
    pushed += tables.p_top_pmf.cost_bits(z[levels - 1])
    track.note()
    return BlockTrace(pushed=pushed, popped=popped, peak_demand=track.peak_demand)


def bb_decode_block(coder: AnsCoder, block_len: int, tables: CodingTables) -> np.ndarray:
    """Exact inverse of `bb_encode_block`; restores the popped bits."""
    levels = tables.levels
    z = [0] * levels
    z[levels - 1] = coder.pop(tables.p_top_pmf)
    for i in reversed(range(levels - 1)):
        z[i] = coder.pop(tables.p_link_rows[i][z[i + 1]])
    row = tables.p_obs_rows[z[0]]
    x = np.array([coder.pop(row) for _ in range(block_len)], dtype=np.int64)
    for i in reversed(range(levels - 1)):
        coder.push(z[i + 1], tables.q_link_rows[i][z[i]])
    coder.push(z[0], tables.q_obs_rows[x[0]])
    return x


def bitswap_encode_block(coder: AnsCoder, x, tables: CodingTables) -> BlockTrace:
    """Interleaved bits-back: push each level before popping the next.

    Identical to `bb_encode_block` for a single-level chain; for deeper
    chains the pushes replenish the stack between pops, so the auxiliary
    peak never exceeds the plain schedule's.
    """
    x = _check_block(x, tables)
    track = _Tracker(coder)
    pushed = popped = 0.0
    levels = tables.levels
    z = [0] * levels

    pmf = tables.q_obs_rows[x[0]]
    z[0] = _pop_latent(coder, pmf)
    popped += pmf.cost_bits(z[0])
    track.note()
    row = tables.p_obs_rows[z[0]]
    for s in x[::-1]:
        coder.push(int(s), row)
        pushed += row.cost_bits(int(s))
    track.note()
    for i in range(levels - 1):
        pmf = tables.q_link_rows[i][z[i]]
        z[i + 1] = _pop_latent(coder, pmf)
        popped += pmf.cost_bits(z[i + 1])
        track.note()
        link = tables.p_link_rows[i][z[i + 1]]
        coder.push(z[i], link)
        pushed += link.cost_bits(z[i])
        track.note()
    coder.push(z[levels - 1], tables.p_top_pmf)
    pushed += tables.p_top_pmf.cost_bits(z[levels - 1])
    track.note()
    return BlockTrace(pushed=pushed, popped=popped, peak_demand=track.peak_demand)


def bitswap_decode_block(coder: AnsCoder, block_len: int, tables: CodingTables) -> np.ndarray:
    """Exact inverse of `bitswap_encode_block`."""
    levels = tables.levels
    z = [0] * levels
    z[levels - 1] = coder.pop(tables.p_top_pmf)
    for i in reversed(range(levels - 1)):
        z[i] = coder.pop(tables.p_link_rows[i][z[i + 1]])
        coder.push(z[i + 1], tables.q_link_rows[i][z[i]])
    row = tables.p_obs_rows[z[0]]
    x = np.array([coder.pop(row) for _ in range(block_len)], dtype=np.int64)
    coder.push(z[0], tables.q_obs_rows[x[0]])
    return x


_ENCODERS = {"bitswap": bitswap_encode_block, "bb": bb_encode_block}
_DECODERS = {"bitswap": bitswap_decode_block, "bb": bb_decode_block}


@dataclass
class StreamStats:
    gross_bits: float = 0.0
    returned_bits: float = 0.0
    peak_demand_bits: float = 0.0
    block_nets: list[float] = field(default_factory=list)

    @property
    def net_bits(self) -> float:
        return self.gross_bits - self.returned_bits

    def add(self, trace: BlockTrace):
        self.gross_bits += trace.pushed
        self.returned_bits += trace.popped
        self.peak_demand_bits = max(self.peak_demand_bits, trace.peak_demand)
        self.block_nets.append(trace.net)


def encode_blocks(coder: AnsCoder, blocks, tables: CodingTables,
                  method: str = "bitswap") -> StreamStats:
    """Encode blocks in order; decode unwinds them back to front."""
    encode = _ENCODERS[method]
    stats = StreamStats()
    for block in blocks:
        stats.add(encode(coder, block, tables))
    return stats


def decode_blocks(coder: AnsCoder, block_lens, tables: CodingTables,
                  method: str = "bitswap") -> list[np.ndarray]:
    """Decode `len(block_lens)` blocks and return them in encode order."""
    decode = _DECODERS[method]
    out = [decode(coder, n, tables) for n in reversed(list(block_lens))]
    out.reverse()
    return out


# -- compressed streams --------------------------------------------------------

def encode_stream(sections, initial_bits: int = DEFAULT_INITIAL_BITS, seed: int = 0,
                  method: str = "bitswap") -> "CompressedStream":
    """Code sections of blocks (each with its own tables) into one message.

    The payload physically contains the seeded initial bits; the accounting
    fields exclude them, counting only what the blocks pushed minus what
    they recovered.
    """
    sections = list(sections)
    if not sections:
        raise InvalidInputError("need at least one section")
    versions = {tables.model_version for _, tables in sections}
    if len(versions) != 1:
        raise InvalidInputError("all sections in a stream must share a model version")
    coder = AnsCoder.with_random_bits(initial_bits, seed=seed)
    start = coder.potential()
    low = start
    gross = returned = 0.0
    count = 0
    for blocks, tables in sections:
        for block in blocks:
            before = coder.potential()
            trace = _ENCODERS[method](coder, block, tables)
            gross += trace.pushed
            returned += trace.popped
            low = min(low, before - trace.peak_demand)
            count += len(np.atleast_1d(block))
    return CompressedStream(
        payload=coder.serialize(),
        symbol_count=count,
        model_version=versions.pop(),
        initial_bits=initial_bits,
        gross_bits=gross,
        returned_bits=returned,
        net_bits=gross - returned,
        peak_demand_bits=start - low,
    )


def decode_stream(stream: CompressedStream, sections, method: str = "bitswap") -> list[list[np.ndarray]]:
    """Invert `encode_stream`.

    `sections` lists (block_lens, tables) in the order they were encoded;
    the result keeps that order.  The coder must unwind exactly to its
    seeded prefix, anything else means the stream or the tables are wrong.
    """
    sections = [(list(lens), tables) for lens, tables in sections]
    coder = AnsCoder.deserialize(stream.payload)
    for _, tables in sections:
        if tables.model_version != stream.model_version:
            raise DataCorruptionError(
                f"stream was coded with model version {stream.model_version}, "
                f"got tables for version {tables.model_version}")
    try:
        out = [decode_blocks(coder, lens, tables, method=method)
               for lens, tables in reversed(sections)]
    except ExhaustedStreamError as exc:
        raise DataCorruptionError("stream ended mid-decode") from exc
    out.reverse()
    decoded = sum(sum(lens) for lens, _ in sections)
    if decoded != stream.symbol_count:
        raise DataCorruptionError(
            f"decoded {decoded} symbols, stream header says {stream.symbol_count}")
    return out


@dataclass
class CompressedStream:
    """One self-contained coded message plus its accounting.

    Accounting fields are populated when the stream is produced in process;
    a stream read back from bytes carries only what the format stores.
    """

    payload: bytes
    symbol_count: int
    model_version: int
    initial_bits: int = 0
    gross_bits: float | None = None
    returned_bits: float | None = None
    net_bits: float | None = None
    peak_demand_bits: float | None = None

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)


def serialize_stream(stream: CompressedStream) -> bytes:
    head = STREAM_MAGIC + struct.pack("<IQ", stream.model_version, stream.symbol_count)
    return head + stream.payload


def deserialize_stream(data: bytes) -> CompressedStream:
    head_len = 4 + struct.calcsize("<IQ")
    if len(data) < head_len or data[:4] != STREAM_MAGIC:
        raise DataCorruptionError("bad stream magic")
    model_version, symbol_count = struct.unpack("<IQ", data[4:head_len])
    payload = data[head_len:]
    AnsCoder.deserialize(payload)  # validates the nested bitstream
    return CompressedStream(payload=payload, symbol_count=symbol_count,
                            model_version=model_version)


def net_length_report(stream: CompressedStream) -> dict:
    """Bits pushed, bits recovered, and the resulting net cost per code."""
    if stream.gross_bits is None:
        raise InvalidInputError("stream has no accounting (was it deserialized?)")
    net = stream.gross_bits - stream.returned_bits
    return {
        "symbol_count": stream.symbol_count,
        "gross_bits": stream.gross_bits,
        "returned_bits": stream.returned_bits,
        "net_bits": net,
        "bits_per_code": net / stream.symbol_count if stream.symbol_count else 0.0,
        "payload_bytes": stream.payload_bytes,
        "initial_bits": stream.initial_bits,
        "peak_demand_bits": stream.peak_demand_bits,
    }


# -- fitting -------------------------------------------------------------------

@dataclass
class FitConfig:
    iterations: int = 40


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    peak = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - peak)
    return e / e.sum(axis=1, keepdims=True)


def fit(model: LatentChainModel, blocks, config: FitConfig = FitConfig()) -> LatentChainModel:
    """Coordinate ascent on the exact bound.

    Alternates closed-form updates: generative tables from expected counts
    under the current inference tables, then inference tables row by row
    from softmax scores, deepest level first.  Every step maximizes the
    bound over its own block of coordinates, so the bound never decreases.
    Zero iterations returns the model unchanged.
    """
    if len(blocks) == 0:
        raise InvalidInputError("fit needs at least one block")
    model.validate()
    m = model.copy()
    if config.iterations == 0:
        return m
    blocks = [np.asarray(b, dtype=np.int64).reshape(-1) for b in blocks]
    for b in blocks:
        if b.size == 0 or b.min() < 0 or b.max() >= m.obs_alphabet:
            raise InvalidInputError("block symbols must be nonempty and within the alphabet")
    x0, hist = _block_stats(blocks, m.obs_alphabet)
    n = len(blocks)
    levels = m.levels
    x0_counts = np.bincount(x0, minlength=m.obs_alphabet).astype(np.float64)

    for _ in range(config.iterations):
        # expected latent marginals per block under the inference tables
        margs = [m.q_obs[x0]]
        for i in range(levels - 1):
            margs.append(margs[-1] @ m.q_link[i])

        # generative tables from expected counts
        obs_counts = margs[0].T @ hist  # (A_0, K)
        row_mass = obs_counts.sum(axis=1, keepdims=True)
        m.p_obs = np.where(row_mass > 0, obs_counts / np.where(row_mass > 0, row_mass, 1.0), m.p_obs)
        for i in range(levels - 1):
            weights = margs[i].sum(axis=0)  # (A_i,)
            joint = weights[:, None] * m.q_link[i]  # (A_i, A_{i+1})
            col_mass = joint.sum(axis=0)
            new_rows = np.where(col_mass[:, None] > 0,
                                joint.T / np.where(col_mass[:, None] > 0, col_mass[:, None], 1.0),
                                m.p_link[i])
            m.p_link[i] = new_rows
        top_mass = margs[-1].sum(axis=0)
        m.p_top = top_mass / top_mass.sum()

        # inference tables, deepest first so downstream scores are current
        with np.errstate(divide="ignore"):
            psi = np.log(m.p_top)
        for i in reversed(range(levels - 1)):
            with np.errstate(divide="ignore"):
                scores = np.log(m.p_link[i].T) + psi[None, :]
            q = _softmax_rows(scores)
            m.q_link[i] = q
            with np.errstate(divide="ignore"):
                lq = np.log(q)
            psi = np.where(q > 0, q * (scores - lq), 0.0).sum(axis=1)

        with np.errstate(divide="ignore"):
            log_p_obs = np.log(m.p_obs)
        ll = hist @ np.where(np.isfinite(log_p_obs), log_p_obs, 0.0).T
        ll[(hist > 0) @ (m.p_obs.T == 0)] = -np.inf
        sums = np.zeros((m.obs_alphabet, m.alphabets[0]))
        np.add.at(sums, x0, ll)
        seen = x0_counts > 0
        mean_ll = sums[seen] / x0_counts[seen, None]
        m.q_obs[seen] = _softmax_rows(mean_ll + psi[None, :])
    return m


def finetune(model: LatentChainModel, new_blocks, config: FitConfig = FitConfig(),
             buffered_blocks=()) -> LatentChainModel:
    """Warm-started fit on new plus already-stored blocks; bumps the version."""
    union = list(new_blocks) + list(buffered_blocks)
    if config.iterations == 0:
        out = model.copy()
    else:
        out = fit(model, union, config)
    out.version = model.version + 1
    return out


# -- model snapshots -----------------------------------------------------------

def serialize_models(models) -> bytes:
    """Snapshot file holding one or more models (little-endian float64).

    Layout: magic, format version u16, record count u8, then per model a
    header (model version u32, levels u16, obs alphabet u32, block length
    u16, level alphabets u32 each) followed by its tables in a fixed order.
    """
    models = list(models)
    if not 1 <= len(models) <= 255:
        raise InvalidInputError("snapshot must hold between 1 and 255 models")
    out = [MODEL_MAGIC, struct.pack("<HB", MODEL_FORMAT_VERSION, len(models))]
    for model in models:
        model.validate()
        out.append(struct.pack("<IHIH", model.version, model.levels,
                               model.obs_alphabet, model.block_len))
        out.append(struct.pack(f"<{model.levels}I", *model.alphabets))
        for _, table in model.tables():
            out.append(np.ascontiguousarray(table, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_models(data: bytes) -> list[LatentChainModel]:
    if len(data) < 7 or data[:4] != MODEL_MAGIC:
        raise DataCorruptionError("bad model snapshot magic")
    fmt_version, count = struct.unpack("<HB", data[4:7])
    if fmt_version != MODEL_FORMAT_VERSION:
        raise DataCorruptionError(f"unsupported model format version {fmt_version}")
    offset = 7
    models = []
    try:
        for _ in range(count):
            version, levels, k, block_len = struct.unpack_from("<IHIH", data, offset)
            offset += struct.calcsize("<IHIH")
            alphabets = struct.unpack_from(f"<{levels}I", data, offset)
            offset += 4 * levels

            def take(shape):
                nonlocal offset
                n = int(np.prod(shape))
                arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset)
                offset += 8 * n
                return arr.reshape(shape).astype(np.float64)

            model = LatentChainModel(
                obs_alphabet=k,
                alphabets=tuple(alphabets),
                block_len=block_len,
                p_obs=take((alphabets[0], k)),
                p_link=[take((alphabets[i + 1], alphabets[i])) for i in range(levels - 1)],
                p_top=take((alphabets[-1],)),
                q_obs=take((k, alphabets[0])),
                q_link=[take((alphabets[i], alphabets[i + 1])) for i in range(levels - 1)],
                version=version,
            )
            model.validate()
            models.append(model)
    except (struct.error, ValueError, IndexError) as exc:
        raise DataCorruptionError("model snapshot truncated or inconsistent") from exc
    if offset != len(data):
        raise DataCorruptionError("model snapshot has trailing bytes")
    return models
