"""Needle-clip classification tasks.

Each sample has ``N`` clips, of which only ``s`` (at random positions) carry
evidence of the class: ``mu * prototype[label] + N(0, sigma^2)``.  The rest
are background noise ``N(0, sigma_d^2)``.  Averaging all clips dilutes the
evidence by ``s / N`` while mixing in the background noise, which is the gap
a temporal attention model should close.

Two Monte-Carlo Bayes oracles bound what is achievable: one that sees the
true signal clip, and one that only sees the mean over clips.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import derive_rng
from .errors import ConfigError

MAGIC = b"STAMDS1\x00"
_INT_FIELDS = ("num_classes", "clip_count", "feature_dim", "signal_clip_count", "train_size", "test_size")
_FLOAT_FIELDS = ("signal_strength", "noise_std", "distractor_std")
_HEADER = struct.Struct("<8s6qQ3d")


@dataclass(frozen=True)
class NeedleTaskSpec:
    num_classes: int = 4
    clip_count: int = 6
    feature_dim: int = 32
    signal_clip_count: int = 1
    signal_strength: float = 1.0
    noise_std: float = 0.5
    distractor_std: float = 0.5
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.clip_count < 1 or self.feature_dim < 1:
            raise ConfigError("clip_count and feature_dim must be >= 1")
        if not 1 <= self.signal_clip_count <= self.clip_count:
            raise ConfigError(
                f"signal_clip_count must lie in [1, clip_count={self.clip_count}], got {self.signal_clip_count}"
            )
        if min(self.signal_strength, self.noise_std, self.distractor_std) < 0:
            raise ConfigError("signal_strength, noise_std and distractor_std must be >= 0")
        if self.train_size < 0 or self.test_size < 0:
            raise ConfigError("split sizes must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledSample:
    clips: np.ndarray  # [N, D]
    label: int
    signal_mask: np.ndarray  # [N] bool; evaluation only


@dataclass
class NeedleSplit:
    """Column-oriented storage for one split; indexing yields :class:`LabeledSample`."""

    clips: np.ndarray  # [S, N, D]
    labels: np.ndarray  # [S] int64
    signal_masks: np.ndarray  # [S, N] bool

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.clips[i], int(self.labels[i]), self.signal_masks[i])

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))


def make_prototypes(spec: NeedleTaskSpec, max_tries: int = 1000) -> np.ndarray:
    """Unit-norm class prototypes with every pairwise dot product below 0.5."""
    rng = derive_rng(spec.seed, "prototypes")
    for _ in range(max_tries):
        protos = rng.standard_normal((spec.num_classes, spec.feature_dim))
        norms = np.linalg.norm(protos, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        protos = protos / norms
        gram = protos @ protos.T
        np.fill_diagonal(gram, -np.inf)
        if gram.max() < 0.5:
            return protos
    raise ConfigError(
        f"could not place {spec.num_classes} separated prototypes in {spec.feature_dim} dimensions"
    )


def _make_split(spec: NeedleTaskSpec, prototypes: np.ndarray, size: int, stream: str) -> NeedleSplit:
    rng = derive_rng(spec.seed, stream)
    n, dim, s = spec.clip_count, spec.feature_dim, spec.signal_clip_count
    # stratified labels: counts differ by at most one
    labels = rng.permutation(np.arange(size) % spec.num_classes).astype(np.int64)
    ranks = np.argsort(rng.random((size, n)), axis=1).argsort(axis=1)
    masks = ranks < s
    noise = rng.standard_normal((size, n, dim))
    signal = spec.signal_strength * prototypes[labels][:, None, :] + spec.noise_std * noise
    clips = np.where(masks[:, :, None], signal, spec.distractor_std * noise)
    return NeedleSplit(clips, labels, masks)


def generate(spec: NeedleTaskSpec) -> tuple[NeedleSplit, NeedleSplit]:
    """Deterministic (train, test) splits drawn from independent streams."""
    spec.validate()
    prototypes = make_prototypes(spec)
    return (
        _make_split(spec, prototypes, spec.train_size, "train"),
        _make_split(spec, prototypes, spec.test_size, "test"),
    )


# -- Bayes oracles -------------------------------------------------------------------


def _monte_carlo(spec: NeedleTaskSpec, offset: float, scale: float, draws: int, seed: int) -> float:
    """Accuracy of nearest-prototype decoding of ``offset * p_c + scale * z``.

    Prototypes share a norm and the noise is isotropic with equal priors, so
    the Bayes rule is the argmax of the dot product with each prototype.
    """
    spec.validate()
    if offset == 0:
        return 1.0 / spec.num_classes
    prototypes = make_prototypes(spec)
    rng = derive_rng(seed, "oracle")
    correct = 0
    chunk = 50_000
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        labels = rng.integers(0, spec.num_classes, size=m)
        z = rng.standard_normal((m, spec.feature_dim))
        x = offset * prototypes[labels] + scale * z
        correct += int(np.count_nonzero(np.argmax(x @ prototypes.T, axis=1) == labels))
        done += m
    return correct / draws


def oracle_signal_accuracy(spec: NeedleTaskSpec, draws: int = 200_000, seed: int = 0) -> float:
    """Bayes accuracy when the classifier is handed one true signal clip."""
    return _monte_carlo(spec, spec.signal_strength, spec.noise_std, draws, seed)


def oracle_avg_accuracy(spec: NeedleTaskSpec, draws: int = 200_000, seed: int = 0) -> float:
    """Bayes accuracy when only the mean over all clips is observed."""
    n, s = spec.clip_count, spec.signal_clip_count
    offset = spec.signal_strength * s / n
    scale = np.sqrt(s * spec.noise_std**2 + (n - s) * spec.distractor_std**2) / n
    return _monte_carlo(spec, offset, float(scale), draws, seed)


def oracle_std_error(accuracy: float, draws: int) -> float:
    return float(np.sqrt(accuracy * (1.0 - accuracy) / draws))


def calibration(spec: NeedleTaskSpec, draws: int = 200_000, seed: int = 0) -> dict:
    signal = oracle_signal_accuracy(spec, draws, seed)
    avg = oracle_avg_accuracy(spec, draws, seed)
    return {
        "task": spec.to_dict(),
        "draws": draws,
        "oracle_signal_accuracy": signal,
        "oracle_signal_std_error": oracle_std_error(signal, draws),
        "oracle_avg_accuracy": avg,
        "oracle_avg_std_error": oracle_std_error(avg, draws),
        "oracle_gap": signal - avg,
    }


# -- binary serialisation ------------------------------------------------------------


def save_dataset(path: str | Path, spec: NeedleTaskSpec, train: NeedleSplit, test: NeedleSplit) -> None:
    """Write ``STAMDS1`` header, then features, labels and masks of train and test.

    Header fields are little-endian 64-bit: six signed counts, the unsigned
    seed and three doubles.  Features are row-major ``<f8``, labels ``<i8``,
    masks one byte per clip.
    """
    header = _HEADER.pack(
        MAGIC,
        *(getattr(spec, f) for f in _INT_FIELDS),
        spec.seed,
        *(float(getattr(spec, f)) for f in _FLOAT_FIELDS),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for split in (train, test):
            fh.write(np.ascontiguousarray(split.clips, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(split.labels, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(split.signal_masks, dtype=np.uint8).tobytes())


def load_dataset(path: str | Path) -> tuple[NeedleTaskSpec, NeedleSplit, NeedleSplit]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:8] != MAGIC:
        raise ConfigError(f"{path}: not a STAMDS1 dataset file")
    fields = _HEADER.unpack_from(data)
    ints = dict(zip(_INT_FIELDS, fields[1:7]))
    floats = dict(zip(_FLOAT_FIELDS, fields[8:11]))
    spec = NeedleTaskSpec(**ints, **floats, seed=fields[7])
    offset = _HEADER.size
    n, dim = spec.clip_count, spec.feature_dim

    def read(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    splits = []
    for size in (spec.train_size, spec.test_size):
        clips = read(size * n * dim, "<f8").reshape(size, n, dim).astype(np.float64)
        labels = read(size, "<i8").astype(np.int64)
        masks = read(size * n, "u1").reshape(size, n).astype(bool)
        splits.append(NeedleSplit(clips, labels, masks))
    if offset != len(data):
        raise ConfigError(f"{path}: {len(data) - offset} trailing bytes")
    return spec, splits[0], splits[1]
