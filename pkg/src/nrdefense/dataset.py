"""Synthetic I/Q modulation frames, the ``NRS1`` binary format and dataset
statistics.

Every frame is a ``2 x L`` float32 matrix (row 0 = I, row 1 = Q). Signal and
noise are generated separately and each is rescaled to an exact empirical
power, ``snr / (1 + snr)`` for the signal and ``1 / (1 + snr)`` for the noise,
so the realized SNR equals the request and the expected total power per
complex sample is 1 at every SNR.
"""

from __future__ import annotations

import enum
import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import signal as sps

from nrdefense.errors import ArgumentError, ConfigurationError, FormatError

MAGIC = b"NRS1"
_HEADER = struct.Struct("<4sIHB")
DEFAULT_FRAME_LEN = 128
DEFAULT_SNRS = tuple(range(-20, 20, 2))


class Modulation(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    QAM16 = 3
    QAM64 = 4
    CPFSK = 5
    GFSK = 6
    PAM4 = 7
    WBFM = 8
    AM_SSB = 9
    AM_DSB = 10

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, value) -> "Modulation":
        """Accept an integer id, an enum member name or a display name."""
        if isinstance(value, Modulation):
            return value
        if isinstance(value, (int, np.integer)):
            try:
                return cls(int(value))
            except ValueError:
                raise ConfigurationError(f"unsupported modulation id {value}") from None
        key = str(value).upper().replace("-", "_")
        for member in cls:
            if key in (member.name, member.display_name.upper().replace("-", "_")):
                return member
        raise ConfigurationError(f"unsupported modulation {value!r}")


_DISPLAY = {
    Modulation.BPSK: "BPSK",
    Modulation.QPSK: "QPSK",
    Modulation.PSK8: "8PSK",
    Modulation.QAM16: "QAM16",
    Modulation.QAM64: "QAM64",
    Modulation.CPFSK: "CPFSK",
    Modulation.GFSK: "GFSK",
    Modulation.PAM4: "PAM4",
    Modulation.WBFM: "WBFM",
    Modulation.AM_SSB: "AM-SSB",
    Modulation.AM_DSB: "AM-DSB",
}

NUM_CLASSES = len(Modulation)


@dataclass(frozen=True)
class LabeledExample:
    frame: np.ndarray
    label: Modulation
    snr_db: int


class Dataset:
    """Immutable column store of labeled frames.

    Behaves as a sequence of :class:`LabeledExample` but keeps the frames in
    one ``(N, 2, L)`` float32 array so the numerical code can work in bulk.
    """

    def __init__(self, frames, labels, snr_db):
        frames = np.ascontiguousarray(frames, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        snr_db = np.asarray(snr_db, dtype=np.int64)
        if frames.ndim != 3 or frames.shape[1] != 2:
            raise ArgumentError(f"frames must have shape (N, 2, L), got {frames.shape}")
        if not (len(frames) == len(labels) == len(snr_db)):
            raise ArgumentError("frames, labels and snr_db lengths differ")
        for arr in (frames, labels, snr_db):
            arr.setflags(write=False)
        self.frames = frames
        self.labels = labels
        self.snr_db = snr_db

    @classmethod
    def empty(cls, frame_len=DEFAULT_FRAME_LEN) -> "Dataset":
        return cls(np.zeros((0, 2, frame_len), np.float32), [], [])

    @classmethod
    def from_examples(cls, examples: Iterable[LabeledExample]) -> "Dataset":
        examples = list(examples)
        if not examples:
            raise ArgumentError("no examples given")
        return cls(
            np.stack([e.frame for e in examples]),
            [int(e.label) for e in examples],
            [e.snr_db for e in examples],
        )

    @property
    def frame_len(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.frames[i], Modulation(int(self.labels[i])), int(self.snr_db[i]))

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snr_db, other.snr_db)
        )

    def __repr__(self):
        return f"Dataset(n={len(self)}, frame_len={self.frame_len})"

    def take(self, index) -> "Dataset":
        return Dataset(self.frames[index], self.labels[index], self.snr_db[index])

    def at_snr(self, snr_db: int) -> "Dataset":
        return self.take(self.snr_db == snr_db)


@dataclass(frozen=True)
class DatasetSplit:
    train: Dataset
    test: Dataset


@dataclass(frozen=True)
class GenerationConfig:
    schemes: tuple = tuple(Modulation)
    snrs_db: tuple = DEFAULT_SNRS
    per_cell: int = 100
    train_fraction: float = 0.5
    frame_len: int = DEFAULT_FRAME_LEN
    seed: int = 0
    samples_per_symbol: int = 8
    rolloff: float = 0.35

    def __post_init__(self):
        if self.per_cell <= 0:
            raise ConfigurationError("per_cell must be positive")
        if not self.schemes or not self.snrs_db:
            raise ConfigurationError("schemes and snrs_db must be non-empty")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.frame_len < 8:
            raise ConfigurationError("frame_len must be at least 8")
        object.__setattr__(self, "schemes", tuple(Modulation.parse(s) for s in self.schemes))
        object.__setattr__(self, "snrs_db", tuple(int(s) for s in self.snrs_db))


# --- waveform synthesis -----------------------------------------------------

_RRC_SPAN = 8  # symbols
_MESSAGE_TAPS = sps.firwin(65, 0.1)


@functools.lru_cache(maxsize=None)
def rrc_taps(rolloff: float, sps_: int, span: int = _RRC_SPAN) -> np.ndarray:
    """Unit-energy root-raised-cosine impulse response (cached, read-only)."""
    t = np.arange(-span * sps_ // 2, span * sps_ // 2 + 1) / sps_
    b = rolloff
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - b + 4 * b / np.pi
        elif b > 0 and np.isclose(abs(ti), 1 / (4 * b)):
            h[i] = (b / np.sqrt(2)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            num = np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))
            h[i] = num / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    h = h / np.sqrt(np.sum(h**2))
    h.setflags(write=False)
    return h


def _unit_power(points):
    points = np.asarray(points, dtype=complex)
    return points / np.sqrt(np.mean(np.abs(points) ** 2))


def _qam(m):
    side = int(np.sqrt(m))
    levels = np.arange(-side + 1, side, 2)
    return _unit_power([complex(i, q) for i in levels for q in levels])


CONSTELLATIONS = {
    Modulation.BPSK: _unit_power([-1, 1]),
    Modulation.QPSK: _unit_power(np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))),
    Modulation.PSK8: _unit_power(np.exp(1j * np.pi / 4 * np.arange(8))),
    Modulation.QAM16: _qam(16),
    Modulation.QAM64: _qam(64),
    Modulation.PAM4: _unit_power([-3, -1, 1, 3]),
}


def _linear(scheme, n, rng, sps_, rolloff):
    taps = rrc_taps(rolloff, sps_)
    nsym = -(-n // sps_) + _RRC_SPAN + 1
    symbols = rng.choice(CONSTELLATIONS[scheme], size=nsym)
    up = np.zeros(nsym * sps_, dtype=complex)
    up[::sps_] = symbols
    shaped = np.convolve(up, taps)
    delay = (len(taps) - 1) // 2
    # sample k * sps_ of the frame sits on the peak of symbol k
    return shaped[delay : delay + n]


def _fsk(n, rng, sps_, gaussian):
    nsym = -(-n // sps_) + 4
    bits = rng.choice([-1.0, 1.0], size=nsym)
    freq = np.repeat(bits, sps_)
    if gaussian:
        bt = 0.35
        t = np.arange(-2 * sps_, 2 * sps_ + 1) / sps_
        sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
        g = np.exp(-(t**2) / (2 * sigma**2))
        freq = np.convolve(freq, g / g.sum(), mode="same")
    h = 0.5
    phase = np.pi * h * np.cumsum(freq) / sps_ + rng.uniform(0, 2 * np.pi)
    start = 2 * sps_
    return np.exp(1j * phase[start : start + n])


def _message(n, rng):
    pad = len(_MESSAGE_TAPS)
    m = sps.lfilter(_MESSAGE_TAPS, 1.0, rng.standard_normal(n + pad))[pad:]
    return m / np.sqrt(np.mean(m**2))


def _analog(scheme, n, rng):
    m = _message(n, rng)
    if scheme is Modulation.WBFM:
        return np.exp(1j * (2 * np.pi * 0.1 * np.cumsum(m) + rng.uniform(0, 2 * np.pi)))
    if scheme is Modulation.AM_DSB:
        return (1.0 + 0.5 * m / np.max(np.abs(m))).astype(complex)
    return sps.hilbert(m)


def synthesize_components(
    scheme,
    snr_db: float,
    rng_seed: int,
    frame_len: int = DEFAULT_FRAME_LEN,
    samples_per_symbol: int = 8,
    rolloff: float = 0.35,
):
    """Return ``(signal, noise)`` complex arrays before summation.

    Both are already scaled: ``mean|signal|^2 / mean|noise|^2`` equals
    ``10 ** (snr_db / 10)`` up to rounding.
    """
    scheme = Modulation.parse(scheme)
    if frame_len < 8:
        raise ConfigurationError("frame_len must be at least 8")
    rng = np.random.default_rng(rng_seed)
    if scheme in CONSTELLATIONS:
        s = _linear(scheme, frame_len, rng, samples_per_symbol, rolloff)
    elif scheme in (Modulation.CPFSK, Modulation.GFSK):
        s = _fsk(frame_len, rng, samples_per_symbol, scheme is Modulation.GFSK)
    else:
        s = _analog(scheme, frame_len, rng)
    noise = (rng.standard_normal(frame_len) + 1j * rng.standard_normal(frame_len)) / np.sqrt(2)
    snr = 10.0 ** (snr_db / 10.0)
    s = s * np.sqrt(snr / (1.0 + snr) / np.mean(np.abs(s) ** 2))
    noise = noise * np.sqrt(1.0 / (1.0 + snr) / np.mean(np.abs(noise) ** 2))
    return s, noise


def generate_example(scheme, snr_db: int, rng_seed: int, frame_len: int = DEFAULT_FRAME_LEN,
                     samples_per_symbol: int = 8, rolloff: float = 0.35) -> LabeledExample:
    scheme = Modulation.parse(scheme)
    s, noise = synthesize_components(scheme, snr_db, rng_seed, frame_len, samples_per_symbol, rolloff)
    x = s + noise
    frame = np.stack([x.real, x.imag]).astype(np.float32)
    return LabeledExample(frame, scheme, int(snr_db))


def generate_dataset(config: GenerationConfig = GenerationConfig()) -> DatasetSplit:
    rng = np.random.default_rng(config.seed)
    n = config.per_cell
    n_train = min(max(int(np.floor(config.train_fraction * n + 0.5)), 1 if n > 1 else 0), n - 1 if n > 1 else 1)
    train, test = [], []
    for scheme in config.schemes:
        for snr in config.snrs_db:
            seeds = rng.integers(0, 2**63 - 1, size=n)
            cell = [
                generate_example(scheme, snr, int(s), config.frame_len,
                                 config.samples_per_symbol, config.rolloff)
                for s in seeds
            ]
            order = rng.permutation(n)
            train.extend(cell[i] for i in order[:n_train])
            test.extend(cell[i] for i in order[n_train:])
    as_ds = lambda xs: Dataset.from_examples(xs) if xs else Dataset.empty(config.frame_len)
    return DatasetSplit(as_ds(train), as_ds(test))


# --- statistics ---------------------------------------------------------------

def _frames_of(examples) -> np.ndarray:
    if isinstance(examples, Dataset):
        return examples.frames
    if isinstance(examples, np.ndarray):
        return examples
    examples = list(examples)
    if not examples:
        return np.zeros((0, 2, 1))
    return np.stack([e.frame for e in examples])


def average_l2_norm(examples) -> float:
    """Mean Euclidean norm of the flattened frames."""
    frames = _frames_of(examples)
    if len(frames) == 0:
        raise ArgumentError("average_l2_norm needs at least one example")
    flat = np.asarray(frames, dtype=np.float64).reshape(len(frames), -1)
    return float(np.mean(np.linalg.norm(flat, axis=1)))


# --- NRS1 binary format ------------------------------------------------------

def _record_dtype(frame_len):
    return np.dtype([("label", "u1"), ("snr", "<i2"), ("samples", "<f4", (2 * frame_len,))])


def _encode_block(ds: Dataset) -> bytes:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.frame_len))
    rec["label"] = ds.labels
    rec["snr"] = ds.snr_db
    rec["samples"] = ds.frames.reshape(len(ds), -1)
    return _HEADER.pack(MAGIC, len(ds), ds.frame_len, 2) + rec.tobytes()


def _decode_block(buf: bytes, offset: int):
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated header", offset)
    magic, count, frame_len, channels = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset)
    if channels != 2:
        raise FormatError(f"shape mismatch: channel count {channels}, expected 2", offset + 10)
    dtype = _record_dtype(frame_len)
    start = offset + _HEADER.size
    available = (len(buf) - start) // dtype.itemsize
    if available < count:
        raise FormatError(
            f"truncated record {available} of {count}", start + available * dtype.itemsize
        )
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    frames = rec["samples"].reshape(count, 2, frame_len)
    ds = Dataset(frames.copy(), rec["label"].astype(np.int64), rec["snr"].astype(np.int64))
    if count and ds.labels.max() >= NUM_CLASSES:
        raise FormatError(f"label {ds.labels.max()} out of range", start)
    return ds, start + count * dtype.itemsize


def save_dataset(split: DatasetSplit, path) -> None:
    """Write the train block followed by the test block, each a full NRS1 block."""
    if split.train.frame_len != split.test.frame_len:
        raise ArgumentError("train and test frame lengths differ")
    Path(path).write_bytes(_encode_block(split.train) + _encode_block(split.test))


def load_dataset(path) -> DatasetSplit:
    buf = Path(path).read_bytes()
    train, offset = _decode_block(buf, 0)
    if offset == len(buf):
        return DatasetSplit(train, Dataset.empty(train.frame_len))
    test, offset = _decode_block(buf, offset)
    if test.frame_len != train.frame_len:
        raise FormatError("shape mismatch: frame length differs between blocks", offset)
    if offset != len(buf):
        raise FormatError("trailing bytes after test block", offset)
    return DatasetSplit(train, test)
