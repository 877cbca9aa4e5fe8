"""Datasets: CSV and binary loaders, synthetic generation, splits, augmentation."""
import csv
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ContractError, FormatError, InputError, ParseError

logger = logging.getLogger("ComboLabData")

BINARY_MAGIC = b"CLB1"
BINARY_VERSION = 1

Provenance = Literal["csv", "binary", "synthetic"]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class Dataset:
    """N samples of one shape with a finite score each. Arrays are read-only."""

    features: np.ndarray
    scores: np.ndarray
    ids: Tuple[str, ...]
    provenance: Provenance

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if features.ndim < 2 or features.shape[0] != scores.size:
            raise ContractError("features {0} do not hold one sample per score ({1})".format(features.shape, scores.size))
        if len(self.ids) != scores.size:
            raise ContractError("{0} ids for {1} samples".format(len(self.ids), scores.size))
        if not np.isfinite(scores).all():
            raise InputError("scores must be finite (first bad index {0})".format(int(np.flatnonzero(~np.isfinite(scores))[0])))
        features.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.scores[idx], tuple(self.ids[i] for i in idx), self.provenance)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    seed: int

    @property
    def sizes(self) -> List[int]:
        return np.bincount(self.assignments, minlength=self.k).tolist()

    def split(self, fold: int) -> Tuple[np.ndarray, np.ndarray]:
        """(train indices, test indices) for one fold, both sorted."""
        if not 0 <= fold < self.k:
            raise ContractError("fold {0} out of range for k={1}".format(fold, self.k))
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


# -- CSV --------------------------------------------------------------------

def load_csv(path: PathLike) -> Dataset:
    """Read ``id,score,f0,f1,...`` rows; feature width comes from the header."""
    path = Path(path)
    ids: List[str] = []
    scores: List[float] = []
    rows: List[List[float]] = []
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as e:
        raise ParseError("not UTF-8 text ({0})".format(e.reason), str(path), raw.count(b"\n", 0, e.start) + 1)
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", str(path), 1)
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "id" or header[1] != "score":
            raise ParseError("header must be id,score,f0,f1,... got {0}".format(",".join(header)), str(path), 1)
        width = len(header) - 2
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width + 2:
                raise ParseError("expected {0} fields, got {1}".format(width + 2, len(row)), str(path), line)
            try:
                score = float(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as e:
                raise ParseError("non-numeric field ({0})".format(e), str(path), line)
            if not math.isfinite(score):
                raise ParseError("score must be finite, got {0}".format(row[1]), str(path), line)
            ids.append(row[0].strip())
            scores.append(score)
            rows.append(values)
    except csv.Error as e:
        raise ParseError("malformed CSV ({0})".format(e), str(path), reader.line_num)
    if not rows:
        raise ParseError("no data rows after the header", str(path), 2)
    logger.info("Loaded {0} samples of width {1} from {2}".format(len(rows), width, path))
    return Dataset(np.array(rows), np.array(scores), tuple(ids), "csv")


def write_csv(path: PathLike, dataset: Dataset) -> Path:
    if dataset.features.ndim != 2:
        raise ContractError("CSV holds flat samples only; use the binary format for shape {0}".format(dataset.sample_shape))
    path = Path(path)
    width = dataset.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "score"] + ["f{0}".format(j) for j in range(width)])
        for sample_id, score, row in zip(dataset.ids, dataset.scores, dataset.features):
            writer.writerow([sample_id, repr(float(score))] + [repr(float(v)) for v in row])
    return path


# -- binary -----------------------------------------------------------------

def write_binary(path: PathLike, dataset: Dataset) -> Path:
    """magic CLB1, u32 version, u64 N, u64 ndim, u64 dims..., f64 scores, f64 features."""
    path = Path(path)
    shape = dataset.sample_shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IQQ", BINARY_VERSION, len(dataset), len(shape)))
        fh.write(struct.pack("<{0}Q".format(len(shape)), *shape))
        fh.write(np.ascontiguousarray(dataset.scores, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
    return path


def load_binary(path: PathLike) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != BINARY_MAGIC:
        raise FormatError("bad magic {0!r}, expected {1!r}".format(raw[:4], BINARY_MAGIC), offset=0)
    if len(raw) < 24:
        raise FormatError("truncated header", offset=len(raw))
    version, n, ndim = struct.unpack_from("<IQQ", raw, 4)
    if version != BINARY_VERSION:
        raise FormatError("unsupported version {0}".format(version), offset=4)
    if n == 0:
        raise FormatError("dataset holds zero samples", offset=8)
    if ndim == 0:
        raise FormatError("sample shape has no dimensions", offset=16)
    offset = 24
    if offset + 8 * ndim > len(raw):
        raise FormatError("truncated shape dims", offset=len(raw))
    shape = struct.unpack_from("<{0}Q".format(ndim), raw, offset)
    offset += 8 * ndim
    if any(d == 0 for d in shape):
        raise FormatError("sample shape {0} has a zero extent".format(shape), offset=24)

    per_sample = int(np.prod(shape, dtype=np.int64))
    expected = 8 * n * (1 + per_sample)
    if len(raw) - offset != expected:
        raise FormatError("payload holds {0} bytes, shape {1} x {2} samples needs {3}".format(
            len(raw) - offset, shape, n, expected), offset=offset)
    scores = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
    offset += 8 * n
    if not np.isfinite(scores).all():
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise FormatError("non-finite score", offset=offset - 8 * n + 8 * bad)
    features = np.frombuffer(raw, dtype="<f8", count=n * per_sample, offset=offset).astype(np.float64)
    logger.info("Loaded {0} samples of shape {1} from {2}".format(n, shape, path))
    return Dataset(features.reshape((n,) + tuple(shape)), scores, tuple(str(i) for i in range(n)), "binary")


def load_dataset(path: PathLike) -> Dataset:
    """Dispatch on the file's magic bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return load_binary(path)
    return load_csv(path)


# -- synthetic data ---------------------------------------------------------

def synth_latent(features: np.ndarray, projection_seed: int = 0) -> np.ndarray:
    """Unit-norm random projection of each flattened sample."""
    flat = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    direction = np.random.default_rng(projection_seed).standard_normal(flat.shape[1])
    direction /= np.linalg.norm(direction)
    return flat @ direction


def synth_generate(n: int, shape: Sequence[int], noise_sd: float, seed: int,
                   projection_seed: int = 0) -> Dataset:
    """Standard-normal features; score = 3 + 2*tanh(latent) + N(0, noise_sd^2).

    The noiseless score lies in (1, 5). The projection depends only on
    ``projection_seed`` so datasets drawn with different seeds share a task.
    """
    if n < 1:
        raise ContractError("synth_generate needs n >= 1, got {0}".format(n))
    if noise_sd < 0:
        raise ContractError("noise_sd must be non-negative, got {0}".format(noise_sd))
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ContractError("sample shape must have positive extents, got {0}".format(shape))
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n,) + shape)
    scores = 3.0 + 2.0 * np.tanh(synth_latent(features, projection_seed))
    if noise_sd > 0:
        scores = scores + rng.normal(0.0, noise_sd, size=n)
    ids = tuple("synth-{0:06d}".format(i) for i in range(n))
    return Dataset(features, scores, ids, "synthetic")


# -- splits -----------------------------------------------------------------

def kfold(n: int, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then round-robin fold assignment."""
    if k < 1 or k > n:
        raise ContractError("kfold needs 1 <= k <= n, got k={0}, n={1}".format(k, n))
    order = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = np.arange(n) % k
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def split_60_40(n: int, seed: int, train_fraction: float = 0.6) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, test) split with round(train_fraction * n) training samples."""
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ContractError("split of n={0} at {1} leaves an empty side".format(n, train_fraction))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


# -- augmentation -----------------------------------------------------------

class AugmentConfig(BaseModel):
    """Additive Gaussian noise and per-feature multiplicative jitter."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    noise_sd: float = Field(0.0, ge=0.0)
    scale_jitter: float = Field(0.0, ge=0.0, lt=1.0)

    @property
    def enabled(self) -> bool:
        return self.noise_sd > 0.0 or self.scale_jitter > 0.0


def augment(sample: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """x * (1 + j*u) + noise_sd*e with u ~ U[-1, 1], e ~ N(0, 1). Works on batches too.

    A disabled config returns a copy without drawing from ``rng``.
    """
    x = np.array(sample, dtype=np.float64)
    if not cfg.enabled:
        return x
    scale = 1.0 + cfg.scale_jitter * rng.uniform(-1.0, 1.0, size=x.shape)
    return x * scale + cfg.noise_sd * rng.standard_normal(x.shape)
