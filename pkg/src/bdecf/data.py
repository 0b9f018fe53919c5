"""Rating ingestion, preprocessing, leave-one-out splitting and resampling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FORMATS = ("movielens-100k", "movielens-1m", "csv")
DEFAULT_SCALES = {"movielens-100k": (1.0, 5.0), "movielens-1m": (1.0, 5.0)}


class DataError(ValueError):
    """Unreadable, malformed or degenerate rating data."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Explicit-feedback interactions over dense 0-based user and item indices.

    Columns are parallel arrays. ``positions`` is the original file line
    order and serves as a tie-breaker (and as the timestamp when the source
    has none). ``user_labels``/``item_labels`` keep the raw identifiers.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    positions: np.ndarray
    num_users: int
    num_items: int
    scale: tuple[float, float]
    name: str = "dataset"
    user_labels: np.ndarray | None = field(default=None, repr=False)
    item_labels: np.ndarray | None = field(default=None, repr=False)
    has_timestamps: bool = True

    def __post_init__(self):
        n = len(self.users)
        for col in ("items", "ratings", "timestamps", "positions"):
            if len(getattr(self, col)) != n:
                raise DataError(f"column {col} has length {len(getattr(self, col))}, expected {n}")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
            lo, hi = self.scale
            if self.ratings.min() < lo or self.ratings.max() > hi:
                raise DataError(f"rating outside scale [{lo}, {hi}]")

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield Interaction(int(u), int(i), float(r), int(t))

    @property
    def interactions(self):
        return list(self)

    @property
    def density(self):
        return len(self) / (self.num_users * self.num_items)

    def stats(self):
        return {
            "name": self.name,
            "users": int(self.num_users),
            "items": int(self.num_items),
            "ratings": len(self),
            "density": self.density,
            "scale": list(self.scale),
        }

    def take(self, idx, name=None):
        """Rows ``idx`` (repeats allowed) over the same index spaces."""
        idx = np.asarray(idx, dtype=np.int64)
        return RatingDataset(
            self.users[idx], self.items[idx], self.ratings[idx], self.timestamps[idx],
            self.positions[idx], self.num_users, self.num_items, self.scale,
            name or self.name, self.user_labels, self.item_labels, self.has_timestamps,
        )

    @cached_property
    def _user_csr(self):
        # pattern only, used for history lookups
        m = sp.csr_matrix(
            (np.ones(len(self), dtype=np.int8), (self.users, self.items)),
            shape=(self.num_users, self.num_items),
        )
        m.sum_duplicates()
        return m

    def user_items(self, user_id):
        m = self._user_csr
        return m.indices[m.indptr[user_id]:m.indptr[user_id + 1]]

    def user_counts(self):
        return np.bincount(self.users, minlength=self.num_users)

    def item_counts(self):
        return np.bincount(self.items, minlength=self.num_items)

    def rating_matrix(self, normalize=True, dtype=np.float64):
        """users x items CSR of ratings (``r / max_rating`` when ``normalize``).

        Repeated (user, item) pairs, which bootstrap samples contain, keep a
        single entry.
        """
        key = self.users.astype(np.int64) * self.num_items + self.items
        _, first = np.unique(key, return_index=True)
        vals = self.ratings[first] / (self.scale[1] if normalize else 1.0)
        m = sp.csr_matrix(
            (vals.astype(dtype), (self.users[first], self.items[first])),
            shape=(self.num_users, self.num_items),
        )
        m.sort_indices()
        m.indptr = m.indptr.astype(np.int64)
        m.indices = m.indices.astype(np.int64)
        return m

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        for a in (self.users, self.items, self.ratings, self.timestamps):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(f"{self.num_users},{self.num_items},{self.scale}".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SplitPair:
    """Leave-one-out split. ``test`` rows are ``(user_id, held_out_item_id)``."""

    train: RatingDataset
    test: np.ndarray
    test_ratings: np.ndarray
    flagged_users: np.ndarray

    def __len__(self):
        return len(self.test)


# ------------------------------------------------------------------ loading


def _label_sort_key(label):
    return (0, int(label), "") if label.lstrip("-").isdigit() else (1, 0, label)


def _densify(raw):
    labels = sorted(set(raw), key=_label_sort_key)
    lookup = {lab: i for i, lab in enumerate(labels)}
    return np.array([lookup[r] for r in raw], dtype=np.int64), np.array(labels, dtype=object)


def _read_records(path, fmt):
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: no interactions")
            header = [h.strip().lower() for h in header]
            if header[:3] != ["user", "item", "rating"] or len(header) > 4 or (
                len(header) == 4 and header[3] != "timestamp"
            ):
                raise DataError(f"{path}:1: expected header user,item,rating[,timestamp]")
            width = len(header)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != width:
                    raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
                yield lineno, row
        else:
            sep = "::" if fmt == "movielens-1m" else None
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                row = line.split(sep)
                if len(row) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
                yield lineno, row


def load_ratings(path, format="movielens-100k", scale=None, name=None):
    """Parse a rating file into a :class:`RatingDataset` with dense ids.

    ``scale`` defaults to ``[1, 5]`` for the MovieLens formats; for csv it is
    inferred from the observed ratings when not given. Duplicate
    (user, item) records keep the most recent one.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    if scale is None:
        scale = DEFAULT_SCALES.get(format)
    users, items, ratings, stamps = [], [], [], []
    has_ts = True
    for lineno, row in _read_records(path, format):
        try:
            r = float(row[2])
            t = int(float(row[3])) if len(row) > 3 and row[3].strip() != "" else None
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed record {row!r}") from exc
        if not math.isfinite(r):
            raise DataError(f"{path}:{lineno}: non-finite rating")
        if scale is not None and not scale[0] <= r <= scale[1]:
            raise DataError(f"{path}:{lineno}: rating {r} outside scale [{scale[0]}, {scale[1]}]")
        users.append(row[0].strip())
        items.append(row[1].strip())
        ratings.append(r)
        if t is None:
            has_ts = False
        stamps.append(t)
    if not users:
        raise DataError(f"{path}: no interactions")
    positions = np.arange(len(users), dtype=np.int64)
    if has_ts:
        timestamps = np.array(stamps, dtype=np.int64)
    else:
        log.warning("%s: missing timestamps, using file order as a pseudo-timestamp", path)
        timestamps = positions.copy()
    ratings = np.array(ratings, dtype=np.float64)
    if scale is None:
        scale = (float(ratings.min()), float(ratings.max()))
    u, user_labels = _densify(users)
    i, item_labels = _densify(items)
    ds = RatingDataset(
        u, i, ratings, timestamps, positions, len(user_labels), len(item_labels),
        (float(scale[0]), float(scale[1])), name or Path(path).stem, user_labels, item_labels, has_ts,
    )
    return _dedupe(ds)


def _dedupe(ds):
    key = ds.users * ds.num_items + ds.items
    # last record per pair after ordering by (timestamp, position)
    order = np.lexsort((ds.positions, ds.timestamps, key))
    k = key[order]
    last = np.ones(len(k), dtype=bool)
    last[:-1] = k[1:] != k[:-1]
    keep = np.sort(order[last])
    if len(keep) != len(ds):
        log.info("%s: dropped %d duplicate (user, item) records", ds.name, len(ds) - len(keep))
        return ds.take(keep)
    return ds


def _reindex(ds, name=None):
    """Re-densify ids to the users and items still present."""
    uk, u_new = np.unique(ds.users, return_inverse=True)
    ik, i_new = np.unique(ds.items, return_inverse=True)
    return RatingDataset(
        u_new.astype(np.int64), i_new.astype(np.int64), ds.ratings, ds.timestamps,
        ds.positions, len(uk), len(ik), ds.scale, name or ds.name,
        None if ds.user_labels is None else ds.user_labels[uk],
        None if ds.item_labels is None else ds.item_labels[ik],
        ds.has_timestamps,
    )


def preprocess(dataset: RatingDataset, min_item_raters=5, min_user_ratings=20):
    """Drop under-rated items and light users until both thresholds hold."""
    if min_item_raters < 1 or min_user_ratings < 1:
        raise ValueError("thresholds must be >= 1")
    keep = np.arange(len(dataset))
    users, items = dataset.users, dataset.items
    while len(keep):
        ic = np.bincount(items[keep], minlength=dataset.num_items)
        uc = np.bincount(users[keep], minlength=dataset.num_users)
        ok = (ic[items[keep]] >= min_item_raters) & (uc[users[keep]] >= min_user_ratings)
        if ok.all():
            break
        keep = keep[ok]
    if not len(keep):
        raise DataError("preprocessing removed every interaction")
    if len(keep) == len(dataset):
        # nothing dropped, but ids without any rating still have to go
        if (dataset.user_counts() > 0).all() and (dataset.item_counts() > 0).all():
            return dataset
        return _reindex(dataset)
    return _reindex(dataset.take(keep))


def leave_one_out_split(dataset: RatingDataset) -> SplitPair:
    """Hold out each user's most recent interaction.

    Ties on timestamp go to the later file position. Users with a single
    interaction keep it in train and are listed in ``flagged_users``.
    """
    order = np.lexsort((dataset.positions, dataset.timestamps, dataset.users))
    u = dataset.users[order]
    is_last = np.ones(len(u), dtype=bool)
    is_last[:-1] = u[1:] != u[:-1]
    counts = dataset.user_counts()
    last_idx = order[is_last]
    eligible = counts[dataset.users[last_idx]] >= 2
    test_idx = np.sort(last_idx[eligible])
    flagged = np.sort(dataset.users[last_idx[~eligible]])
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    test_idx = test_idx[np.argsort(dataset.users[test_idx], kind="stable")]
    train = dataset.take(np.nonzero(mask)[0], name=f"{dataset.name}-train")
    test = np.stack([dataset.users[test_idx], dataset.items[test_idx]], axis=1)
    return SplitPair(train, test, dataset.ratings[test_idx], flagged)


# ------------------------------------------------------------------ sampling


def sample_negatives(dataset: RatingDataset, user_id, n=100, seed=0, exclude=()):
    """``n`` items the user never interacted with, uniformly without replacement.

    ``exclude`` lists further items to avoid (e.g. the held-out test item).
    When fewer than ``n`` candidates exist all of them are returned.
    """
    if not 0 <= user_id < dataset.num_users:
        raise KeyError(f"unknown user_id {user_id}")
    rng = np.random.default_rng([int(seed), int(user_id)])
    allowed = np.ones(dataset.num_items, dtype=bool)
    allowed[dataset.user_items(user_id)] = False
    allowed[np.asarray(exclude, dtype=np.int64)] = False
    candidates = np.nonzero(allowed)[0]
    if len(candidates) < n:
        log.warning("user %d has only %d negative candidates (wanted %d)", user_id, len(candidates), n)
        return rng.permutation(candidates).tolist()
    return rng.choice(candidates, size=n, replace=False).tolist()


def _sample_size(fraction, n):
    return int(math.ceil(round(fraction * n, 9)))


def bootstrap(dataset: RatingDataset, fraction=0.8, seed=0):
    """``ceil(fraction * N)`` interactions drawn with replacement."""
    if not fraction > 0:
        raise ValueError("fraction must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=_sample_size(fraction, len(dataset)))
    return dataset.take(idx, name=f"{dataset.name}-boot{seed}")


def subset(dataset: RatingDataset, fraction, seed=0):
    """``ceil(fraction * N)`` interactions drawn without replacement, file order kept."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(dataset), size=_sample_size(fraction, len(dataset)), replace=False))
    return dataset.take(idx, name=f"{dataset.name}-{fraction:g}")


def export_csv(dataset: RatingDataset, path):
    """Write the canonical ``user,item,rating,timestamp`` csv with raw labels."""
    ul = dataset.user_labels if dataset.user_labels is not None else np.arange(dataset.num_users)
    il = dataset.item_labels if dataset.item_labels is not None else np.arange(dataset.num_items)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "item", "rating", "timestamp"])
        for u, i, r, t in zip(dataset.users, dataset.items, dataset.ratings, dataset.timestamps):
            w.writerow([ul[u], il[i], f"{r:g}", int(t)])
