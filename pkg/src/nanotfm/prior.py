"""Synthetic tabular prior, HDF5 prior dumps, and the streaming dump loader.

Dump layout (one homogeneous shape per file)::

    /X   float32  (num_datasets, rows, cols)   chunked along axis 0
    /y   int16    (num_datasets, rows)
    attrs: rows, cols, num_classes, format_version, generator_seed
"""
from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass

import h5py
import numpy as np

from .model import TableBatch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_ATTRS = ("rows", "cols", "num_classes", "format_version", "generator_seed")


class DumpFormatError(ValueError):
    pass


@dataclass
class SyntheticPriorConfig:
    rows: int = 150
    cols: int = 5
    num_classes: int = 2
    latent_dim: int = 4
    hidden_dim: int = 16
    noise_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.rows < 10:
            raise ValueError(f"rows must be >= 10, got {self.rows}")
        if self.cols < 1:
            raise ValueError(f"cols must be >= 1, got {self.cols}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValueError("latent_dim and hidden_dim must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


@dataclass(frozen=True)
class PriorDumpHeader:
    num_datasets: int
    rows: int
    cols: int
    num_classes: int
    format_version: int
    generator_seed: int


def dataset_rng(seed, index):
    """Independent generator for dataset ``index`` of the stream seeded ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(cfg, rng):
    """Draw one classification table ``(x: rows x cols float32, y: rows int64)``.

    Latent Gaussian points go through a random tanh layer and a random linear
    read-out producing ``cols`` feature columns plus one score column.
    Features get Gaussian noise; labels bin the score at its empirical
    quantiles so classes are balanced to within one sample. Each feature
    column is finally rescaled and shifted by random amounts.
    """
    R, C, K = cfg.rows, cfg.cols, cfg.num_classes
    z = rng.standard_normal((R, cfg.latent_dim))
    w1 = rng.standard_normal((cfg.latent_dim, cfg.hidden_dim)) * (
        rng.uniform(0.5, 2.0) / math.sqrt(cfg.latent_dim)
    )
    b1 = 0.5 * rng.standard_normal(cfg.hidden_dim)
    h = np.tanh(z @ w1 + b1)
    w2 = rng.standard_normal((cfg.hidden_dim, C + 1)) / math.sqrt(cfg.hidden_dim)
    out = h @ w2
    out = (out - out.mean(axis=0)) / (out.std(axis=0) + 1e-8)
    x = out[:, :C] + cfg.noise_scale * rng.standard_normal((R, C))
    y = np.empty(R, dtype=np.int64)
    y[np.argsort(out[:, C], kind="stable")] = (np.arange(R) * K) // R
    x = x * np.exp(rng.standard_normal(C)) + rng.standard_normal(C)
    return x.astype(np.float32), y


def default_dump_name(cfg):
    return f"dump_{cfg.rows}x{cfg.cols}_{cfg.num_classes}.h5"


def write_dump(path, cfg, num_datasets, chunk_size=256):
    """Generate ``num_datasets`` tables with ``cfg`` and write them to ``path``.

    Dataset ``i`` is ``generate_dataset(cfg, dataset_rng(cfg.seed, i))``, so
    any single table can be regenerated without the file. Same arguments
    produce byte-identical files.
    """
    if num_datasets < 1:
        raise ValueError("num_datasets must be >= 1")
    R, C = cfg.rows, cfg.cols
    chunk = min(chunk_size, num_datasets)
    try:
        with h5py.File(path, "w", track_order=False) as f:
            X = f.create_dataset("X", (num_datasets, R, C), dtype="<f4", chunks=(chunk, R, C), track_times=False)
            Y = f.create_dataset("y", (num_datasets, R), dtype="<i2", chunks=(chunk, R), track_times=False)
            for name, value in zip(_ATTRS, (R, C, cfg.num_classes, FORMAT_VERSION, cfg.seed)):
                f.attrs[name] = np.int64(value)
            for lo in range(0, num_datasets, chunk):
                hi = min(lo + chunk, num_datasets)
                xb = np.empty((hi - lo, R, C), dtype=np.float32)
                yb = np.empty((hi - lo, R), dtype=np.int16)
                for i in range(lo, hi):
                    xb[i - lo], yb[i - lo] = generate_dataset(cfg, dataset_rng(cfg.seed, i))
                X[lo:hi] = xb
                Y[lo:hi] = yb
    except OSError as exc:
        raise OSError(f"could not write prior dump {path}: {exc}") from exc
    log.info("wrote %d datasets (%dx%d, %d classes) to %s", num_datasets, R, C, cfg.num_classes, path)


class PriorDump:
    """Read-only handle on a dump file; rows are fetched lazily."""

    def __init__(self, path):
        self.path = str(path)
        try:
            self._f = h5py.File(self.path, "r")
        except OSError as exc:
            raise DumpFormatError(f"{self.path}: not a readable HDF5 prior dump ({exc})") from exc
        try:
            self.header = self._read_header()
        except Exception:
            self._f.close()
            raise
        self._lock = threading.Lock()

    def _read_header(self):
        f = self._f
        for name in ("X", "y"):
            if name not in f:
                raise DumpFormatError(f"{self.path}: missing dataset '/{name}'")
        for name in _ATTRS:
            if name not in f.attrs:
                raise DumpFormatError(f"{self.path}: missing root attribute '{name}'")
        h = PriorDumpHeader(
            num_datasets=int(f["X"].shape[0]),
            **{name: int(f.attrs[name]) for name in _ATTRS},
        )
        if h.format_version != FORMAT_VERSION:
            raise DumpFormatError(f"{self.path}: format_version {h.format_version}, expected {FORMAT_VERSION}")
        if f["X"].shape != (h.num_datasets, h.rows, h.cols):
            raise DumpFormatError(f"{self.path}: '/X' shape {f['X'].shape} disagrees with attributes")
        if f["y"].shape != (h.num_datasets, h.rows):
            raise DumpFormatError(f"{self.path}: '/y' shape {f['y'].shape} disagrees with '/X'")
        return h

    def __len__(self):
        return self.header.num_datasets

    def read(self, indices):
        """Tables at ``indices`` (any order, repeats allowed) as (x float32, y int64)."""
        indices = np.asarray(indices, dtype=np.int64)
        uniq, inverse = np.unique(indices, return_inverse=True)
        with self._lock:
            x = self._f["X"][uniq]
            y = self._f["y"][uniq]
        return x[inverse], y[inverse].astype(np.int64)

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_dump(path):
    return PriorDump(path)


class PriorDumpDataLoader:
    """Yields ``num_steps`` :class:`TableBatch` es of ``batch_size`` tables.

    Tables are drawn without replacement within an epoch and reshuffled each
    epoch; the split position of each batch is uniform on
    ``[ceil(0.1 R), floor(0.9 R)]``. Batch ``t`` depends only on ``(seed, t)``,
    so a resumed run sees exactly the batches an uninterrupted one would.
    """

    def __init__(self, path, num_steps, batch_size, seed=0, prefetch=2):
        self.dump = path if isinstance(path, PriorDump) else PriorDump(path)
        self.header = self.dump.header
        if batch_size < 1 or batch_size > self.header.num_datasets:
            raise ValueError(
                f"batch_size={batch_size} must be in [1, num_datasets={self.header.num_datasets}]"
            )
        self.num_steps = int(num_steps)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.prefetch = int(prefetch)
        R = self.header.rows
        self.split_range = (max(2, math.ceil(0.1 * R)), min(R - 1, math.floor(0.9 * R)))
        if self.split_range[0] > self.split_range[1]:
            raise ValueError(f"rows={R} too small for a train/test split")
        self._perm_cache = {}
        self.draws = 0
        if self.num_steps * self.batch_size > self.header.num_datasets:
            log.warning(
                "%d steps x %d tables exceeds the %d tables in %s; the loader will reshuffle and repeat",
                self.num_steps, self.batch_size, self.header.num_datasets, self.dump.path,
            )

    def __len__(self):
        return self.num_steps

    def _epoch_perm(self, epoch):
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, 0, epoch]).permutation(self.header.num_datasets)
            self._perm_cache = {epoch: perm}
        return perm

    def indices_at(self, step):
        n = self.header.num_datasets
        start = step * self.batch_size
        out = np.empty(self.batch_size, dtype=np.int64)
        for j in range(self.batch_size):
            pos = start + j
            out[j] = self._epoch_perm(pos // n)[pos % n]
        return out

    def split_at(self, step):
        lo, hi = self.split_range
        return int(np.random.default_rng([self.seed, 1, step]).integers(lo, hi + 1))

    def batch_at(self, step):
        x, y = self.dump.read(self.indices_at(step))
        return TableBatch(x, y, self.split_at(step))

    def iterate(self, start=0):
        """Batches ``start .. num_steps-1`` in order, prefetched on a worker thread."""
        if self.prefetch <= 0:
            for t in range(start, self.num_steps):
                self.draws += self.batch_size
                yield self.batch_at(t)
            return
        q = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def worker():
            try:
                for t in range(start, self.num_steps):
                    if stop.is_set():
                        return
                    q.put(self.batch_at(t))
                q.put(None)
            except BaseException as exc:  # surface in the consumer
                q.put(exc)

        th = threading.Thread(target=worker, daemon=True)
        th.start()
        try:
            while True:
                item = q.get()
                if item is None:
                    return
                if isinstance(item, BaseException):
                    raise item
                self.draws += self.batch_size
                yield item
        finally:
            stop.set()
            while th.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    th.join(timeout=0.05)

    def __iter__(self):
        return self.iterate(0)

    def close(self):
        self.dump.close()
