"""Rating ingestion, preprocessing and popularity-based dimension assignment.

The pipeline is ``load_ratings -> binarize -> temporal_split ->
filter_min_support``; :func:`prepare` runs all of it. Ratings are held in
columnar NumPy arrays throughout.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")
CACHE_MAGIC = "mdals-dataset"
CACHE_VERSION = 1
MAX_MALFORMED_FRACTION = 0.01
HIST_BIN_WIDTH = 0.1

FORMATS = ("csv_movielens", "csv_generic", "netflix")


class DataError(ValueError):
    """Input data is malformed or the pipeline produced an unusable result."""


@dataclass(frozen=True)
class RawRating:
    user: str
    item: str
    rating: float
    timestamp: int


@dataclass
class RatingLog:
    """Columnar list of raw ratings.

    Behaves as a read-only sequence of :class:`RawRating`. ``binary`` marks
    that ``ratings`` already hold 0/1 labels.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    binary: bool = False
    skipped: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=str)
        self.items = np.asarray(self.items, dtype=str)
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = self.ratings.shape[0]
        if not (self.users.shape == self.items.shape == self.timestamps.shape == (n,)):
            raise ValueError("rating columns must have equal length")

    @classmethod
    def from_records(cls, records: Iterable[RawRating], **kwargs) -> "RatingLog":
        records = list(records)
        return cls(
            np.array([r.user for r in records], dtype=str),
            np.array([r.item for r in records], dtype=str),
            np.array([r.rating for r in records], dtype=np.float64),
            np.array([r.timestamp for r in records], dtype=np.int64),
            **kwargs,
        )

    def __len__(self) -> int:
        return self.ratings.shape[0]

    def __getitem__(self, k: int) -> RawRating:
        return RawRating(
            str(self.users[k]), str(self.items[k]), float(self.ratings[k]), int(self.timestamps[k])
        )

    def __iter__(self) -> Iterator[RawRating]:
        for k in range(len(self)):
            yield self[k]

    def take(self, mask_or_index) -> "RatingLog":
        return RatingLog(
            self.users[mask_or_index],
            self.items[mask_or_index],
            self.ratings[mask_or_index],
            self.timestamps[mask_or_index],
            binary=self.binary,
        )


# --------------------------------------------------------------------------
# loading


_SPLIT_RE = re.compile(r"\s*[,\t;]\s*|\s+")


def _parse_fields(fields: Sequence[str]) -> RawRating | None:
    if len(fields) != 4:
        return None
    user, item, rating, ts = (f.strip() for f in fields)
    if not user or not item:
        return None
    try:
        value = float(rating)
        try:
            stamp = int(ts)
        except ValueError:
            stamp = int(float(ts))
    except (ValueError, OverflowError):
        return None
    if not math.isfinite(value) or not 1.0 <= value <= 5.0 or stamp < 0:
        return None
    return RawRating(user, item, value, stamp)


def _looks_like_header(line: str) -> bool:
    return any(ch.isalpha() for ch in line)


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        try:
            return open(source, "r", encoding="utf-8", newline=""), True
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc}") from exc
    if isinstance(source, (bytes, bytearray)):
        try:
            return io.StringIO(bytes(source).decode("utf-8")), False
        except UnicodeDecodeError as exc:
            raise DataError(f"source is not valid UTF-8: {exc}") from exc
    if isinstance(source, io.TextIOBase):
        return source, False
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8", newline=""), False
    raise DataError(f"unsupported rating source {type(source).__name__}")


def _netflix_timestamp(date: str) -> int:
    dt = datetime.strptime(date.strip(), "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _iter_netflix(lines: Iterable[str]) -> Iterator[RawRating | None]:
    movie = None
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.endswith(":"):
            movie = line[:-1].strip()
            if not movie:
                movie = None
                yield None
            continue
        parts = line.split(",")
        if movie is None or len(parts) != 3:
            yield None
            continue
        try:
            yield _parse_fields([parts[0], movie, parts[1], str(_netflix_timestamp(parts[2]))])
        except ValueError:
            yield None


def _iter_csv(lines: Iterable[str], generic: bool) -> Iterator[RawRating | None]:
    first = True
    for line in lines:
        stripped = line.strip()
        if not stripped:
            continue
        if generic:
            fields = _SPLIT_RE.split(stripped)
        else:
            fields = next(csv.reader([stripped]))
        rec = _parse_fields(fields)
        if first:
            first = False
            if rec is None and _looks_like_header(stripped):
                continue
        yield rec


def load_ratings(source, format: str = "csv_movielens") -> RatingLog:
    """Parse ratings from a path, byte string or stream.

    A header line is detected and skipped. Malformed lines are skipped and
    counted in ``RatingLog.skipped``; more than 1% malformed lines raises
    :class:`DataError`, which usually means the wrong ``format``.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    stream, owned = _open_text(source)
    try:
        if format == "netflix":
            parsed = _iter_netflix(stream)
        else:
            parsed = _iter_csv(stream, generic=(format == "csv_generic"))
        records, skipped = [], 0
        try:
            for rec in parsed:
                if rec is None:
                    skipped += 1
                else:
                    records.append(rec)
        except UnicodeDecodeError as exc:
            raise DataError(f"source is not valid UTF-8: {exc}") from exc
    finally:
        if owned:
            stream.close()
    total = len(records) + skipped
    if total and skipped > MAX_MALFORMED_FRACTION * total:
        raise DataError(
            f"{skipped} of {total} lines are malformed; is {format!r} the right format?"
        )
    if skipped:
        logger.warning("skipped %d malformed rating lines", skipped)
    return RatingLog.from_records(records, skipped=skipped)


# --------------------------------------------------------------------------
# preprocessing


def binarize(log: RatingLog) -> RatingLog:
    """Ratings <= 2 become 0, ratings >= 4 become 1, anything between is dropped."""
    if log.binary:
        return log.take(slice(None))
    low = log.ratings <= 2.0
    high = log.ratings >= 4.0
    out = log.take(low | high)
    out.ratings = np.where(out.ratings >= 4.0, 1.0, 0.0)
    out.binary = True
    return out


def _token_order(tokens: np.ndarray) -> np.ndarray:
    """Distinct tokens sorted numerically when all are integers, else lexicographically."""
    uniq = np.unique(tokens)
    try:
        keys = [(int(t), t) for t in uniq.tolist()]
    except ValueError:
        return uniq
    return np.array([t for _, t in sorted(keys)], dtype=uniq.dtype)


@dataclass
class RatingDataset:
    """Binary-labelled interactions with a train/validation/test tag per row.

    ``users``/``items`` are dense indices into ``user_tokens``/``item_tokens``.
    Rows are kept in temporal order.
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    timestamps: np.ndarray
    user_tokens: np.ndarray
    item_tokens: np.ndarray
    _csr: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_users(self) -> int:
        return int(self.user_tokens.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_tokens.shape[0])

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def split_size(self, name: str) -> int:
        return int(np.count_nonzero(self.split == SPLIT_NAMES.index(name)))

    def pairs(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(users, items, labels) for one split."""
        mask = self.split == SPLIT_NAMES.index(name)
        return self.users[mask], self.items[mask], self.labels[mask]

    def counts(self, side: str) -> np.ndarray:
        """Train-split interaction count per user or item."""
        mask = self.split == TRAIN
        if side == "user":
            return np.bincount(self.users[mask], minlength=self.num_users)
        if side == "item":
            return np.bincount(self.items[mask], minlength=self.num_items)
        raise ValueError(f"side must be 'user' or 'item', got {side!r}")

    def train_matrix(self, side: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR view ``(indptr, indices, targets)`` of the train split keyed by ``side``.

        Neighbours of each entity are ordered by neighbour index.
        """
        if side not in self._csr:
            mask = self.split == TRAIN
            u, i, r = self.users[mask], self.items[mask], self.labels[mask]
            if side == "user":
                rows, cols, n = u, i, self.num_users
            elif side == "item":
                rows, cols, n = i, u, self.num_items
            else:
                raise ValueError(f"side must be 'user' or 'item', got {side!r}")
            order = np.lexsort((cols, rows))
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
            self._csr[side] = (
                indptr,
                np.ascontiguousarray(cols[order], dtype=np.int64),
                np.ascontiguousarray(r[order], dtype=np.float64),
            )
        return self._csr[side]

    def summary(self) -> dict[str, dict[str, int]]:
        out = {}
        for k, name in enumerate(SPLIT_NAMES):
            mask = self.split == k
            out[name] = {
                "users": int(np.unique(self.users[mask]).size),
                "items": int(np.unique(self.items[mask]).size),
                "interactions": int(np.count_nonzero(mask)),
            }
        return out

    def subset(self, mask: np.ndarray, split: np.ndarray | None = None) -> "RatingDataset":
        """Keep rows in ``mask`` (optionally retagging them) and reindex entities densely."""
        users, items = self.users[mask], self.items[mask]
        new_split = self.split[mask] if split is None else np.asarray(split, dtype=np.int8)
        keep_u = np.unique(users)
        keep_i = np.unique(items)
        umap = np.full(self.num_users, -1, dtype=np.int64)
        umap[keep_u] = np.arange(keep_u.size)
        imap = np.full(self.num_items, -1, dtype=np.int64)
        imap[keep_i] = np.arange(keep_i.size)
        return RatingDataset(
            umap[users],
            imap[items],
            self.labels[mask].copy(),
            new_split.copy(),
            self.timestamps[mask].copy(),
            self.user_tokens[keep_u],
            self.item_tokens[keep_i],
        )


def _index(tokens: np.ndarray, vocab: np.ndarray) -> np.ndarray:
    lookup = {t: k for k, t in enumerate(vocab.tolist())}
    return np.fromiter((lookup[t] for t in tokens.tolist()), dtype=np.int64, count=tokens.size)


def _split_sizes(n: int, val_frac: float, test_frac: float) -> tuple[int, int, int]:
    n_val = int(math.floor(n * val_frac + 0.5))
    n_test = int(math.floor(n * test_frac + 0.5))
    return n - n_val - n_test, n_val, n_test


def temporal_split(
    log: RatingLog, val_frac: float = 0.10, test_frac: float = 0.10
) -> RatingDataset:
    """Oldest ratings go to train, the next ``val_frac`` to validation, the newest to test.

    Ties in timestamp are broken by (user, item) token order. Within one
    split, a repeated (user, item) pair keeps only its latest record.
    """
    if not (val_frac > 0 and test_frac > 0 and val_frac + test_frac < 1):
        raise ValueError("need 0 < val_frac, test_frac and val_frac + test_frac < 1")
    if not log.binary:
        raise DataError("ratings must be binarized before splitting")
    n = len(log)
    n_train, n_val, n_test = _split_sizes(n, val_frac, test_frac)
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} ratings are too few to populate train/validation/test")
    user_vocab = _token_order(log.users)
    item_vocab = _token_order(log.items)
    users = _index(log.users, user_vocab)
    items = _index(log.items, item_vocab)
    order = np.lexsort((items, users, log.timestamps))
    split = np.empty(n, dtype=np.int8)
    split[:n_train] = TRAIN
    split[n_train : n_train + n_val] = VALIDATION
    split[n_train + n_val :] = TEST
    users, items = users[order], items[order]
    labels, stamps = log.ratings[order], log.timestamps[order]

    # latest record per (split, user, item): scan from newest to oldest
    key = (split.astype(np.int64) * len(user_vocab) + users) * len(item_vocab) + items
    _, last = np.unique(key[::-1], return_index=True)
    keep = np.zeros(n, dtype=bool)
    keep[n - 1 - last] = True
    dropped = n - int(keep.sum())
    if dropped:
        logger.info("dropped %d duplicate (user, item) rows within splits", dropped)
    return RatingDataset(
        users[keep], items[keep], labels[keep], split[keep], stamps[keep], user_vocab, item_vocab
    )


def filter_min_support(ds: RatingDataset, min_count: int = 5) -> RatingDataset:
    """Single, non-recursive pass of the train-support filter.

    Users and items with fewer than ``min_count`` train ratings are dropped,
    using counts taken before anything is removed. Validation and test rows
    survive only if both their user and item still appear in train.
    """
    train = ds.split == TRAIN
    ucount = ds.counts("user")
    icount = ds.counts("item")
    train_keep = train & (ucount[ds.users] >= min_count) & (icount[ds.items] >= min_count)
    in_train_u = np.zeros(ds.num_users, dtype=bool)
    in_train_u[ds.users[train_keep]] = True
    in_train_i = np.zeros(ds.num_items, dtype=bool)
    in_train_i[ds.items[train_keep]] = True
    held_keep = ~train & in_train_u[ds.users] & in_train_i[ds.items]
    keep = train_keep | held_keep
    if not train_keep.any():
        raise DataError("no train interactions survive the minimum-support filter")
    return ds.subset(keep)


def prepare(
    log: RatingLog, val_frac: float = 0.10, test_frac: float = 0.10, min_count: int = 5
) -> RatingDataset:
    """binarize -> temporal_split -> filter_min_support."""
    labelled = binarize(log)
    if len(labelled) == 0:
        raise DataError("dataset is empty after binarization")
    return filter_min_support(temporal_split(labelled, val_frac, test_frac), min_count)


# --------------------------------------------------------------------------
# popularity and dimensions


def lower_median(values: np.ndarray) -> float:
    values = np.sort(np.asarray(values))
    if values.size == 0:
        raise ValueError("median of empty sequence")
    return float(values[(values.size - 1) // 2])


@dataclass
class PopularityStats:
    user_counts: np.ndarray
    item_counts: np.ndarray
    user_median: float
    item_median: float
    bin_edges: np.ndarray
    user_hist: np.ndarray
    item_hist: np.ndarray

    def histogram_rows(self) -> list[tuple[float, float, int, int]]:
        return [
            (float(self.bin_edges[k]), float(self.bin_edges[k + 1]), int(u), int(i))
            for k, (u, i) in enumerate(zip(self.user_hist, self.item_hist))
        ]


def _log_bins(counts: np.ndarray) -> np.ndarray:
    # +1e-9 keeps exact powers of ten in the bin they start
    return np.floor(np.log10(counts) / HIST_BIN_WIDTH + 1e-9).astype(np.int64)


def popularity_stats(ds: RatingDataset) -> PopularityStats:
    """Train-split popularity, lower medians and a shared log10 histogram."""
    ucounts = ds.counts("user")
    icounts = ds.counts("item")
    ub = _log_bins(ucounts[ucounts > 0])
    ib = _log_bins(icounts[icounts > 0])
    both = np.concatenate([ub, ib])
    lo, hi = (int(both.min()), int(both.max())) if both.size else (0, 0)
    edges = np.round(np.arange(lo, hi + 2) * HIST_BIN_WIDTH, 10)
    return PopularityStats(
        user_counts=ucounts,
        item_counts=icounts,
        user_median=lower_median(ucounts),
        item_median=lower_median(icounts),
        bin_edges=edges,
        user_hist=np.bincount(ub - lo, minlength=hi - lo + 1),
        item_hist=np.bincount(ib - lo, minlength=hi - lo + 1),
    )


@dataclass(frozen=True)
class DimensionScheme:
    allowed_dims: tuple[int, ...]
    user_dims: np.ndarray
    item_dims: np.ndarray
    gamma: float | None = None

    def __post_init__(self):
        allowed = tuple(int(a) for a in self.allowed_dims)
        if not allowed or list(allowed) != sorted(set(allowed)) or allowed[0] < 1:
            raise ValueError("allowed_dims must be a nonempty ascending list of positive ints")
        object.__setattr__(self, "allowed_dims", allowed)
        object.__setattr__(self, "user_dims", np.asarray(self.user_dims, dtype=np.int64))
        object.__setattr__(self, "item_dims", np.asarray(self.item_dims, dtype=np.int64))
        for dims in (self.user_dims, self.item_dims):
            if dims.size and not np.isin(dims, allowed).all():
                raise ValueError("assigned dimension outside allowed_dims")

    @property
    def max_dim(self) -> int:
        return self.allowed_dims[-1]

    @property
    def num_users(self) -> int:
        return int(self.user_dims.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.item_dims.shape[0])


def fixed_scheme(num_users: int, num_items: int, d: int) -> DimensionScheme:
    """Every entity gets dimension ``d`` (the baseline model)."""
    return DimensionScheme(
        (d,), np.full(num_users, d, dtype=np.int64), np.full(num_items, d, dtype=np.int64)
    )


def nearest_allowed(raw: np.ndarray, allowed: Sequence[int]) -> np.ndarray:
    """Closest allowed value to each ``raw``; exact midpoints go to the larger value."""
    allowed = np.asarray(allowed, dtype=np.int64)
    dist = np.abs(np.asarray(raw, dtype=np.float64)[:, None] - allowed[None, :])
    # argmin takes the first minimum, so search the reversed list
    pick = allowed.size - 1 - np.argmin(dist[:, ::-1], axis=1)
    return allowed[pick]


def assign_dimensions(
    stats: PopularityStats, allowed_dims: Sequence[int], gamma: float
) -> DimensionScheme:
    """Dimension ``round(count / (gamma * median))`` snapped to ``allowed_dims``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    allowed = sorted(int(a) for a in allowed_dims)
    user_raw = stats.user_counts / (gamma * stats.user_median)
    item_raw = stats.item_counts / (gamma * stats.item_median)
    return DimensionScheme(
        tuple(allowed), nearest_allowed(user_raw, allowed), nearest_allowed(item_raw, allowed), gamma
    )


# --------------------------------------------------------------------------
# cache


def _check_token(tok: str) -> str:
    if "\t" in tok or "\n" in tok or "\r" in tok:
        raise DataError(f"token {tok!r} cannot be stored in the TSV cache")
    return tok


def dumps_dataset(ds: RatingDataset) -> bytes:
    """Serialize to the versioned TSV cache format (see README)."""
    out = io.StringIO()
    out.write(f"{CACHE_MAGIC}\t{CACHE_VERSION}\n")
    out.write(f"users\t{ds.num_users}\n")
    for tok in ds.user_tokens.tolist():
        out.write(_check_token(tok) + "\n")
    out.write(f"items\t{ds.num_items}\n")
    for tok in ds.item_tokens.tolist():
        out.write(_check_token(tok) + "\n")
    out.write(f"interactions\t{len(ds)}\n")
    for u, i, r, s, t in zip(
        ds.users.tolist(), ds.items.tolist(), ds.labels.tolist(), ds.split.tolist(), ds.timestamps.tolist()
    ):
        out.write(f"{u}\t{i}\t{int(r)}\t{SPLIT_NAMES[s]}\t{t}\n")
    return out.getvalue().encode("utf-8")


def loads_dataset(blob: bytes) -> RatingDataset:
    try:
        lines = blob.decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise DataError("not an mdals dataset cache") from exc
    if lines and lines[-1] == "":
        lines.pop()
    pos = 0

    def section(name: str) -> int:
        nonlocal pos
        head = lines[pos].split("\t") if pos < len(lines) else []
        if len(head) != 2 or head[0] != name or not head[1].isdigit():
            raise DataError(f"cache is corrupt: expected '{name}' section at line {pos + 1}")
        pos += 1
        return int(head[1])

    head = lines[0].split("\t") if lines else []
    if len(head) != 2 or head[0] != CACHE_MAGIC:
        raise DataError("not an mdals dataset cache")
    if head[1] != str(CACHE_VERSION):
        raise DataError(f"unsupported cache version {head[1]!r}")
    pos = 1
    nu = section("users")
    user_tokens = np.array(lines[pos : pos + nu], dtype=str)
    pos += nu
    ni = section("items")
    item_tokens = np.array(lines[pos : pos + ni], dtype=str)
    pos += ni
    n = section("interactions")
    rows = [ln.split("\t") for ln in lines[pos : pos + n]]
    if len(rows) != n or any(len(r) != 5 for r in rows):
        raise DataError("cache is corrupt: truncated interaction table")
    split_code = {name: k for k, name in enumerate(SPLIT_NAMES)}
    try:
        ds = RatingDataset(
            np.array([int(r[0]) for r in rows], dtype=np.int64),
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([float(r[2]) for r in rows], dtype=np.float64),
            np.array([split_code[r[3]] for r in rows], dtype=np.int8),
            np.array([int(r[4]) for r in rows], dtype=np.int64),
            user_tokens.reshape(nu),
            item_tokens.reshape(ni),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"cache is corrupt: bad interaction field {exc}") from exc
    if len(ds) and (
        ds.users.min() < 0 or ds.users.max() >= nu or ds.items.min() < 0 or ds.items.max() >= ni
    ):
        raise DataError("cache is corrupt: entity index out of range")
    return ds


def save_dataset(ds: RatingDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path) -> RatingDataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset cache {path}: {exc}") from exc
    return loads_dataset(blob)


def with_split(ds: RatingDataset, split: np.ndarray) -> RatingDataset:
    """Same interactions, new split tags (entity indexing unchanged)."""
    return replace(ds, split=np.asarray(split, dtype=np.int8), _csr={})
