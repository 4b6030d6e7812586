"""IDX image ingestion, stochastic binarization, and minibatch streams.

Supported container: the big-endian IDX format with magic 0x00000803
(unsigned-byte tensor, 3 dimensions). Files are located inside a data
directory as ``{dataset}-{split}-images.idx3-ubyte``; the ``TBVI_DATA_DIR``
environment variable is the fallback when no directory is given.

All randomness here is counter-based (Philox): pixels are re-binarized
fresh each epoch from a stream keyed by (seed, epoch), with each
(image, pixel) pair owning a fixed position in the stream, and batch
shuffling is keyed by (shuffle_seed, epoch). Streams are therefore
stateless, which is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803


class IdxFormatError(ValueError):
    """Bad magic number or malformed header."""


class IdxLengthError(ValueError):
    """Header-declared payload does not match the byte stream."""


@dataclass
class ImageSet:
    """Grayscale images scaled to [0, 1], before binarization."""

    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # (count, rows, cols) float64 in [0, 1]
    source_name: str
    split: str

    def flat(self) -> np.ndarray:
        """Row-major (count, rows*cols) view of the intensities."""
        return self.pixels.reshape(self.count, self.rows * self.cols)


@dataclass
class BinaryBatch:
    """One minibatch of {0,1} pixels, flattened row-major per image."""

    batch_size: int
    data: np.ndarray  # (batch_size, rows*cols) float64 in {0, 1}
    epoch_index: int
    rng_stream_id: tuple[int, int] = field(default=(0, 0))
    indices: np.ndarray | None = None


def parse_idx(raw: bytes, source_name: str = "unknown", split: str = "train") -> ImageSet:
    """Decode an IDX byte stream into an :class:`ImageSet`.

    The header is validated strictly: wrong magic raises
    :class:`IdxFormatError`, and a payload shorter or longer than the
    declared dimensions raises :class:`IdxLengthError`. Raw byte
    intensities are scaled by 1/255.
    """
    if len(raw) < 16:
        raise IdxFormatError("IDX stream shorter than a 3-d header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    expected = count * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        raise IdxLengthError(f"payload holds {len(payload)} bytes, header declares {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageSet(
        count=count,
        rows=rows,
        cols=cols,
        pixels=pixels.reshape(count, rows, cols),
        source_name=source_name,
        split=split,
    )


def write_idx(images: ImageSet) -> bytes:
    """Inverse of :func:`parse_idx`; intensities are rounded to bytes."""
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, images.count, images.rows, images.cols)
    body = np.clip(np.rint(images.pixels * 255.0), 0, 255).astype(np.uint8).tobytes()
    return header + body


def data_dir_path(data_dir: str | os.PathLike | None) -> Path:
    """Resolve the data directory, falling back to TBVI_DATA_DIR."""
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get("TBVI_DATA_DIR")
    if env:
        return Path(env)
    raise FileNotFoundError("no data directory given and TBVI_DATA_DIR is unset")


def load_imageset(data_dir: str | os.PathLike | None, dataset: str, split: str) -> ImageSet:
    path = data_dir_path(data_dir) / f"{dataset}-{split}-images.idx3-ubyte"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    images = parse_idx(path.read_bytes(), source_name=dataset, split=split)
    if dataset in ("mnist", "omniglot") and (images.rows, images.cols) != (28, 28):
        raise IdxFormatError(
            f"{path}: {dataset} images must be 28x28, file holds {images.rows}x{images.cols}"
        )
    return images


def _pixel_stream(seed: int, epoch: int, count: int, n_pixels: int) -> np.ndarray:
    """Uniform(0,1) draws, one per (image, pixel), from a Philox stream.

    The stream is keyed by (seed, epoch); position image*n_pixels + pixel
    addresses the draw for that pixel, so the same (seed, epoch, image,
    pixel) always yields the same variate regardless of batching.
    """
    bits = np.random.Generator(np.random.Philox(key=np.uint64([seed, epoch]), counter=np.uint64([0, 0, 0, 0])))
    return bits.random((count, n_pixels))


def binarize(
    images: ImageSet,
    mode: str = "stochastic",
    seed: int = 0,
    epoch: int = 0,
) -> np.ndarray:
    """Produce {0,1} pixels for every image in the set.

    ``stochastic`` samples pixel ~ Bernoulli(intensity) fresh for the given
    epoch; ``threshold`` maps intensity >= 0.5 to 1 deterministically.
    Returns a (count, rows*cols) float64 array with entries in {0, 1}.
    """
    flat = images.flat()
    if mode == "threshold":
        return (flat >= 0.5).astype(np.float64)
    if mode == "stochastic":
        u = _pixel_stream(seed, epoch, images.count, flat.shape[1])
        return (u < flat).astype(np.float64)
    raise ValueError(f"unknown binarization mode: {mode!r}")


def batch_indices(count: int, batch_size: int, epoch: int, shuffle_seed: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=np.uint64([shuffle_seed, epoch]), counter=np.uint64([0, 0, 0, 1])))
    order = rng.permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def batches(
    images: ImageSet,
    batch_size: int,
    epoch: int,
    shuffle_seed: int,
    mode: str = "stochastic",
    binarize_seed: int | None = None,
) -> list[BinaryBatch]:
    """Binarize then serve shuffled minibatches for one epoch.

    Bit-reproducible given (shuffle_seed, binarize_seed, epoch): the pixel
    stream does not depend on the shuffle, and vice versa.
    """
    bseed = shuffle_seed if binarize_seed is None else binarize_seed
    binary = binarize(images, mode=mode, seed=bseed, epoch=epoch)
    out = []
    for idx in batch_indices(images.count, batch_size, epoch, shuffle_seed):
        out.append(
            BinaryBatch(
                batch_size=len(idx),
                data=binary[idx],
                epoch_index=epoch,
                rng_stream_id=(bseed, epoch),
                indices=idx,
            )
        )
    return out


def synthetic_imageset(
    count: int,
    seed: int,
    source_name: str = "synthetic",
    split: str = "train",
    rows: int = 28,
    cols: int = 28,
) -> ImageSet:
    """Structured random images for demos and desk-scale tests.

    Each image is a soft mixture of 1-3 Gaussian blobs plus a faint stroke,
    loosely imitating the statistics of handwritten glyphs: mostly dark
    with a localized bright region. Deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, count]))
    yy, xx = np.mgrid[0:rows, 0:cols]
    images = np.zeros((count, rows, cols))
    for i in range(count):
        canvas = np.zeros((rows, cols))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(6, rows - 6), rng.uniform(6, cols - 6)
            sy, sx = rng.uniform(1.5, 3.5), rng.uniform(1.5, 3.5)
            canvas += np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        # One straight stroke between two random anchor points.
        y0, y1 = rng.uniform(4, rows - 4, size=2)
        x0, x1 = rng.uniform(4, cols - 4, size=2)
        for t in np.linspace(0, 1, 40):
            py, px = y0 + t * (y1 - y0), x0 + t * (x1 - x0)
            canvas += 0.6 * np.exp(-0.5 * (((yy - py) / 1.0) ** 2 + ((xx - px) / 1.0) ** 2))
        canvas = np.clip(canvas / max(canvas.max(), 1e-9), 0.0, 1.0)
        images[i] = np.where(canvas > 0.25, canvas, 0.0)
    # Round-trip through bytes so synthetic sets behave exactly like files.
    images = np.rint(images * 255.0) / 255.0
    return ImageSet(count=count, rows=rows, cols=cols, pixels=images, source_name=source_name, split=split)


def write_imageset_file(images: ImageSet, data_dir: str | os.PathLike, dataset: str, split: str) -> Path:
    """Serialize an ImageSet into the directory layout load_imageset expects."""
    path = Path(data_dir) / f"{dataset}-{split}-images.idx3-ubyte"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_idx(images))
    return path
