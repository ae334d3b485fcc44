"""IDX ingestion, dataset splits and noisy observation synthesis."""

from dataclasses import dataclass
import gzip
import os
from pathlib import Path
import struct

import numpy as np

from ..exceptions import InvalidInputError, ParseError

__all__ = [
    "load_idx",
    "default_data_dir",
    "DatasetSpec",
    "Split",
    "make_split",
    "synthesize_observation",
    "DegenerateSignalError",
]

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049

IMAGES_FILE = "images-idx3-ubyte.gz"
LABELS_FILE = "labels-idx1-ubyte.gz"


class DegenerateSignalError(InvalidInputError):
    """Noise relative to a zero signal is undefined."""


def default_data_dir():
    """``$GREEDYPRECOND_DATA`` if set, else the ``data/`` directory of the source tree."""
    env = os.environ.get("GREEDYPRECOND_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[3] / "data"


def _read(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise ParseError(f"{path}: unreadable: {exc}") from exc


def _fields(buf, names, path):
    need = 4 * len(names)
    if len(buf) < need:
        missing = names[len(buf) // 4]
        raise ParseError(f"{path}: truncated header, missing field '{missing}'")
    return struct.unpack(">" + "I" * len(names), buf[:need])


def load_idx(images_path, labels_path):
    """Read an IDX image/label pair.

    Returns
    -------
    images : float64 array ``(count, rows, cols)`` in ``[0, 1]``
    labels : int64 array ``(count,)``
    """
    ib = _read(images_path)
    lb = _read(labels_path)
    magic, count, rows, cols = _fields(ib, ["magic", "count", "rows", "cols"], images_path)
    if magic != IMAGES_MAGIC:
        raise ParseError(f"{images_path}: bad magic {magic}, expected {IMAGES_MAGIC}")
    lmagic, lcount = _fields(lb, ["magic", "count"], labels_path)
    if lmagic != LABELS_MAGIC:
        raise ParseError(f"{labels_path}: bad magic {lmagic}, expected {LABELS_MAGIC}")
    if count != lcount:
        raise ParseError(f"image count {count} does not match label count {lcount}")
    body = ib[16:]
    if len(body) != count * rows * cols:
        raise ParseError(
            f"{images_path}: truncated pixel data, expected {count * rows * cols} bytes, found {len(body)}"
        )
    if len(lb) - 8 != count:
        raise ParseError(f"{labels_path}: truncated label data, expected {count} bytes, found {len(lb) - 8}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols) / 255.0
    labels = np.frombuffer(lb[8:], dtype=np.uint8).astype(np.int64)
    return images, labels


def load_dir(data_dir=None):
    d = Path(data_dir) if data_dir is not None else default_data_dir()
    return load_idx(d / IMAGES_FILE, d / LABELS_FILE)


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data lives and how it is split."""

    data_dir: str = None
    train_ones: int = 1000
    test_ones: int = 100
    test_others: int = 100
    seed: int = 0


@dataclass
class Split:
    """Indices into the loaded dataset for each subset."""

    train_ones: np.ndarray
    test_ones: np.ndarray
    test_others: np.ndarray


def make_split(labels, spec):
    """First-k selection after a seeded shuffle of the ones and of the other digits.

    Raises
    ------
    InvalidInputError
        If the dataset has too few images of either kind.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    ones = np.flatnonzero(labels == 1)
    others = np.flatnonzero(labels != 1)
    ones = ones[rng.permutation(ones.size)]
    others = others[rng.permutation(others.size)]
    need = spec.train_ones + spec.test_ones
    if need > ones.size:
        raise InvalidInputError(
            f"split needs {need} images of digit 1 but the dataset has {ones.size}"
        )
    if spec.test_others > others.size:
        raise InvalidInputError(
            f"split needs {spec.test_others} other digits but the dataset has {others.size}"
        )
    return Split(
        train_ones=ones[: spec.train_ones],
        test_ones=ones[spec.train_ones:need],
        test_others=others[: spec.test_others],
    )


def synthesize_observation(x, blur, noise_level, seed, index=0):
    """``y = A x + e`` with ``e ~ N(0, s^2 I)``, ``s = noise_level ||A x|| / sqrt(n)``.

    The noise stream is seeded by ``(seed, index)`` so each image's noise is
    independent of the order images are processed in.

    Returns
    -------
    y : ndarray
    ratio : float
        Achieved ``||y - A x|| / ||A x||`` (0 when ``noise_level`` is 0).
    """
    if noise_level < 0:
        raise InvalidInputError("noise level must be nonnegative")
    Ax = blur.apply(np.asarray(x, dtype=np.float64))
    if noise_level == 0:
        return Ax, 0.0
    norm = float(np.linalg.norm(Ax))
    if norm == 0:
        raise DegenerateSignalError("blurred image is zero; relative noise is undefined")
    rng = np.random.default_rng([int(seed), int(index)])
    e = rng.standard_normal(Ax.shape) * (noise_level * norm / np.sqrt(Ax.size))
    return Ax + e, float(np.linalg.norm(e) / norm)
