"""Dataset ingestion, binary codec, train/test splitting, sharding, and
the synthetic rating generator.

Text format: one `user item rating` triple per line, `#` comments, and an
optional `%%meta m n nnz` header.  Binary format: magic ``NMDB``, u32
version, u64 m/n/nnz, then packed (u32 i, u32 j, f64 value) records,
little-endian throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DimensionMismatchError, FactorMatrix, Partition, ShardedRatings

MAGIC = b"NMDB"
BINARY_VERSION = 1
_RECORD_DTYPE = np.dtype([("i", "<u4"), ("j", "<u4"), ("v", "<f8")])


class DataFormatError(ValueError):
    """Malformed dataset file (text or binary)."""


@dataclass
class DatasetMeta:
    name: str
    m: int
    n: int
    nnz: int
    source_format: str = "text"


class Entries:
    """A flat collection of rating triples with known matrix dimensions."""

    def __init__(self, users, items, values, m: int | None = None, n: int | None = None):
        self.users = np.ascontiguousarray(users, dtype=np.int32)
        self.items = np.ascontiguousarray(items, dtype=np.int32)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise DimensionMismatchError("users/items/values lengths differ")
        if len(self.users):
            if self.users.min() < 0 or self.items.min() < 0:
                raise DataFormatError("negative index")
        self.m = int(m) if m is not None else (int(self.users.max()) + 1 if len(self.users) else 0)
        self.n = int(n) if n is not None else (int(self.items.max()) + 1 if len(self.items) else 0)
        if len(self.users) and (self.users.max() >= self.m or self.items.max() >= self.n):
            raise DimensionMismatchError("declared dimensions do not cover the indices")

    def __len__(self) -> int:
        return len(self.values)

    def key_array(self) -> np.ndarray:
        """(i * n + j) for duplicate detection and set comparisons."""
        return self.users.astype(np.int64) * self.n + self.items

    def subset(self, mask_or_idx) -> "Entries":
        return Entries(
            self.users[mask_or_idx],
            self.items[mask_or_idx],
            self.values[mask_or_idx],
            m=self.m,
            n=self.n,
        )


def _open_text(stream):
    if isinstance(stream, (str, Path)):
        return open(stream, "r"), True
    return stream, False


def parse_text(stream, index_base: int = 0) -> tuple[DatasetMeta, Entries]:
    """Parse whitespace- or comma-delimited `user item rating` lines.

    ``index_base`` 1 shifts indices down by one.  Duplicate (i, j) pairs
    are an error.  A `%%meta m n nnz` header declares the matrix shape
    (otherwise it is inferred from the max indices); declared dimensions
    are echoed in the returned metadata even when the body holds only a
    sample of the full dataset.
    """
    if index_base not in (0, 1):
        raise ValueError(f"index_base must be 0 or 1, got {index_base}")
    fh, owned = _open_text(stream)
    name = getattr(fh, "name", "<stream>")
    users: list[int] = []
    items: list[int] = []
    values: list[float] = []
    seen: dict[tuple[int, int], int] = {}
    declared = None
    try:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("%%meta"):
                fields = line.split()
                if len(fields) != 4:
                    raise DataFormatError(f"line {lineno}: malformed %%meta header")
                try:
                    declared = tuple(int(x.replace(",", "")) for x in fields[1:])
                except ValueError as exc:
                    raise DataFormatError(f"line {lineno}: malformed %%meta header") from exc
                continue
            parts = line.split(",") if "," in line else line.split()
            if len(parts) != 3:
                raise DataFormatError(f"line {lineno}: expected `user item rating`, got {line!r}")
            try:
                i = int(parts[0])
                j = int(parts[1])
                v = float(parts[2])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
            i -= index_base
            j -= index_base
            if i < 0 or j < 0:
                raise DataFormatError(
                    f"line {lineno}: index underflow for base-{index_base} input"
                )
            if (i, j) in seen:
                raise DataFormatError(
                    f"line {lineno}: duplicate pair ({parts[0]}, {parts[1]}) "
                    f"first seen on line {seen[(i, j)]}"
                )
            seen[(i, j)] = lineno
            users.append(i)
            items.append(j)
            values.append(v)
    finally:
        if owned:
            fh.close()
    if declared is not None:
        m, n, nnz = declared
    else:
        m = max(users) + 1 if users else 0
        n = max(items) + 1 if items else 0
        nnz = len(values)
    entries = Entries(users, items, values, m=m, n=n)
    meta = DatasetMeta(name=str(name), m=m, n=n, nnz=nnz, source_format="text")
    return meta, entries


def write_binary(path, entries: Entries, name: str | None = None) -> DatasetMeta:
    """Write entries in the packed little-endian binary layout."""
    rec = np.empty(len(entries), dtype=_RECORD_DTYPE)
    rec["i"] = entries.users
    rec["j"] = entries.items
    rec["v"] = entries.values
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(BINARY_VERSION).tobytes())
        fh.write(np.uint64(entries.m).tobytes())
        fh.write(np.uint64(entries.n).tobytes())
        fh.write(np.uint64(len(entries)).tobytes())
        fh.write(rec.tobytes())
    return DatasetMeta(
        name=name or str(path), m=entries.m, n=entries.n, nnz=len(entries), source_format="binary"
    )


def read_binary(path) -> tuple[DatasetMeta, Entries]:
    """Exact inverse of write_binary."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 32:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}")
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if version != BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    m, n, nnz = (int(x) for x in np.frombuffer(blob, dtype="<u8", count=3, offset=8))
    expected = 32 + nnz * _RECORD_DTYPE.itemsize
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes for nnz={nnz}, found {len(blob)}"
        )
    rec = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=nnz, offset=32)
    entries = Entries(
        rec["i"].astype(np.int32), rec["j"].astype(np.int32), rec["v"], m=m, n=n
    )
    meta = DatasetMeta(name=str(path), m=m, n=n, nnz=nnz, source_format="binary")
    return meta, entries


def split_train_test(entries: Entries, test_fraction: float, seed: int) -> tuple[Entries, Entries]:
    """Uniform random split with a constrained swap pass.

    Every user and item that has ratings keeps at least one in the
    training half when possible; the pass then moves unconstrained
    training entries to test to restore the requested size.
    Deterministic for a given seed.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test fraction must be in [0, 1), got {test_fraction}")
    nnz = len(entries)
    rng = np.random.default_rng((seed, 101))
    in_test = rng.random(nnz) < test_fraction

    users = entries.users
    items = entries.items
    debt = 0
    for axis, idx_arr, count in (("user", users, entries.m), ("item", items, entries.n)):
        train_deg = np.bincount(idx_arr[~in_test], minlength=count)
        total_deg = np.bincount(idx_arr, minlength=count)
        orphans = np.flatnonzero((train_deg == 0) & (total_deg > 0))
        for o in orphans:
            candidates = np.flatnonzero((idx_arr == o) & in_test)
            if len(candidates) == 0:
                continue
            in_test[candidates[0]] = False
            debt += 1

    if debt > 0:
        train_u = np.bincount(users[~in_test], minlength=entries.m)
        train_i = np.bincount(items[~in_test], minlength=entries.n)
        for e in rng.permutation(np.flatnonzero(~in_test)):
            if debt == 0:
                break
            u, it = users[e], items[e]
            if train_u[u] >= 2 and train_i[it] >= 2:
                in_test[e] = True
                train_u[u] -= 1
                train_i[it] -= 1
                debt -= 1

    return entries.subset(~in_test), entries.subset(in_test)


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic low-rank-plus-noise rating matrix.

    Per-user and per-item rating counts come either from empirical
    degree-histogram files (`degree count` lines) or from a power-law
    model targeting ``nnz`` total ratings.
    """

    n_users: int
    n_items: int
    k_true: int
    noise_sd: float = 0.1
    nnz: int | None = None
    exponent: float = 1.8
    user_degree_file: str | None = None
    item_degree_file: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("n_users and n_items must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        if self.nnz is None and self.user_degree_file is None:
            raise ValueError("either nnz (parametric) or degree files must be given")
        if self.exponent <= 1.0:
            raise ValueError("power-law exponent must be > 1")


def read_degree_histogram(path) -> tuple[np.ndarray, np.ndarray]:
    """Read `degree count` lines; returns (degrees, counts)."""
    degrees: list[int] = []
    counts: list[int] = []
    fh, owned = _open_text(path)
    try:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataFormatError(f"line {lineno}: expected `degree count`")
            degrees.append(int(parts[0]))
            counts.append(int(parts[1]))
    finally:
        if owned:
            fh.close()
    if not degrees:
        raise DataFormatError("empty degree histogram")
    return np.asarray(degrees, dtype=np.int64), np.asarray(counts, dtype=np.int64)


def _reconcile_degrees(deg: np.ndarray, total: int, cap: int, rng) -> np.ndarray:
    """Nudge rounded degrees so they sum to ``total`` while staying in [1, cap]."""
    deg = np.clip(deg, 1, cap).astype(np.int64)
    if deg.sum() < len(deg):  # cannot happen given clip, kept for clarity
        raise ValueError("infeasible degree sequence")
    if total > len(deg) * cap or total < len(deg):
        raise ValueError(
            f"target nnz {total} infeasible for {len(deg)} rows with cap {cap}"
        )
    diff = total - int(deg.sum())
    while diff != 0:
        if diff > 0:
            room = np.flatnonzero(deg < cap)
            chosen = rng.choice(room, size=min(diff, len(room)), replace=False)
            deg[chosen] += 1
            diff -= len(chosen)
        else:
            room = np.flatnonzero(deg > 1)
            chosen = rng.choice(room, size=min(-diff, len(room)), replace=False)
            deg[chosen] -= 1
            diff += len(chosen)
    return deg


def _sample_degrees(count, cap, mean_target, spec: SyntheticSpec, hist_path, rng) -> np.ndarray:
    if hist_path is not None:
        degrees, weights = read_degree_histogram(hist_path)
        raw = rng.choice(degrees, size=count, p=weights / weights.sum()).astype(np.float64)
    else:
        raw = 1.0 + rng.pareto(spec.exponent, size=count)
        raw *= mean_target / raw.mean()
    return np.clip(np.rint(raw), 1, cap).astype(np.int64)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Entries, FactorMatrix, FactorMatrix]:
    """Sample a rating matrix with skewed degrees and planted low-rank structure.

    Nonzero locations realize the sampled degree sequences by stub
    matching with duplicate-breaking swaps; surplus stubs that still
    collide after the swap rounds are trimmed.  Ratings are
    <w*_i, h*_j> plus Gaussian noise.
    """
    rng_deg = np.random.default_rng((spec.seed, 0))
    rng_loc = np.random.default_rng((spec.seed, 1))
    rng_fac = np.random.default_rng((spec.seed, 2))
    rng_noise = np.random.default_rng((spec.seed, 3))

    max_nnz = spec.n_users * spec.n_items
    target = spec.nnz if spec.nnz is not None else None
    mean_user = (target / spec.n_users) if target else 0.0

    udeg = _sample_degrees(spec.n_users, spec.n_items, mean_user, spec, spec.user_degree_file, rng_deg)
    if target is not None:
        if not spec.n_users <= target <= max_nnz:
            raise ValueError(f"target nnz {target} infeasible for {spec.n_users}x{spec.n_items}")
        udeg = _reconcile_degrees(udeg, target, spec.n_items, rng_deg)
    total = int(udeg.sum())
    mean_item = total / spec.n_items
    ideg = _sample_degrees(spec.n_items, spec.n_users, mean_item, spec, spec.item_degree_file, rng_deg)
    ideg = _reconcile_degrees(ideg, total, spec.n_users, rng_deg)

    user_stubs = np.repeat(np.arange(spec.n_users, dtype=np.int64), udeg)
    item_stubs = np.repeat(np.arange(spec.n_items, dtype=np.int64), ideg)
    rng_loc.shuffle(item_stubs)

    # duplicate repair: swap a colliding pair with a clean partner pair
    # whenever the swap leaves both pairs duplicate-free; stubs that still
    # collide after the attempt budget are trimmed
    item_sets: list[set[int]] = [set() for _ in range(spec.n_users)]
    total = len(user_stubs)
    clean = np.ones(total, dtype=bool)
    dup_positions = []
    for pos in range(total):
        u = user_stubs[pos]
        x = item_stubs[pos]
        if x in item_sets[u]:
            clean[pos] = False
            dup_positions.append(pos)
        else:
            item_sets[u].add(x)
    keep = np.ones(total, dtype=bool)
    if dup_positions:
        partners = rng_loc.integers(0, total, size=200 * len(dup_positions))
        cursor = 0
        for e in dup_positions:
            u, x = int(user_stubs[e]), int(item_stubs[e])
            fixed = False
            for _ in range(200):
                f = int(partners[cursor % len(partners)])
                cursor += 1
                if not clean[f]:
                    continue
                u2, y = int(user_stubs[f]), int(item_stubs[f])
                if u2 == u or y == x or y in item_sets[u] or x in item_sets[u2]:
                    continue
                item_stubs[e], item_stubs[f] = y, x
                item_sets[u].add(y)
                item_sets[u2].discard(y)
                item_sets[u2].add(x)
                clean[e] = True
                fixed = True
                break
            if not fixed:
                keep[e] = False
        user_stubs = user_stubs[keep]
        item_stubs = item_stubs[keep]

    W_true = FactorMatrix(rng_fac.standard_normal((spec.n_users, spec.k_true)))
    H_true = FactorMatrix(rng_fac.standard_normal((spec.n_items, spec.k_true)))
    values = np.einsum("ij,ij->i", W_true.data[user_stubs], H_true.data[item_stubs])
    if spec.noise_sd > 0:
        values = values + spec.noise_sd * rng_noise.standard_normal(len(values))
    entries = Entries(user_stubs, item_stubs, values, m=spec.n_users, n=spec.n_items)
    return entries, W_true, H_true


MODEL_MAGIC = b"NMDM"


def save_model(path, W, H) -> None:
    """Write a factor pair: magic `NMDM`, u32 version, u64 m, u64 n,
    u32 k, then W and H as packed little-endian f64 row-major blocks."""
    Wd = np.ascontiguousarray(FactorMatrix(np.asarray(W)).data if not isinstance(W, FactorMatrix) else W.data)
    Hd = np.ascontiguousarray(FactorMatrix(np.asarray(H)).data if not isinstance(H, FactorMatrix) else H.data)
    if Wd.shape[1] != Hd.shape[1]:
        raise DimensionMismatchError("factor matrices disagree on k")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(np.uint32(BINARY_VERSION).tobytes())
        fh.write(np.uint64(Wd.shape[0]).tobytes())
        fh.write(np.uint64(Hd.shape[0]).tobytes())
        fh.write(np.uint32(Wd.shape[1]).tobytes())
        fh.write(Wd.astype("<f8", copy=False).tobytes())
        fh.write(Hd.astype("<f8", copy=False).tobytes())


def load_model(path) -> tuple[FactorMatrix, FactorMatrix]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 28 or blob[:4] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model file")
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    if version != BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported model version {version}")
    m, n = (int(x) for x in np.frombuffer(blob, dtype="<u8", count=2, offset=8))
    k = int(np.frombuffer(blob, dtype="<u4", count=1, offset=24)[0])
    expected = 28 + 8 * (m + n) * k
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    W = np.frombuffer(blob, dtype="<f8", count=m * k, offset=28).reshape(m, k)
    H = np.frombuffer(blob, dtype="<f8", count=n * k, offset=28 + 8 * m * k).reshape(n, k)
    return FactorMatrix(W.copy()), FactorMatrix(H.copy())


def shard(entries: Entries, partition: Partition, p: int | None = None) -> ShardedRatings:
    """Group each worker's entries by item (users ascending within item)."""
    if p is not None and p != partition.p:
        raise DimensionMismatchError(f"p={p} but partition has {partition.p} blocks")
    if partition.m != entries.m:
        raise DimensionMismatchError(
            f"partition covers {partition.m} rows, entries declare m={entries.m}"
        )
    return ShardedRatings(
        m=entries.m,
        n=entries.n,
        users=entries.users,
        items=entries.items,
        values=entries.values,
        partition=partition,
    )
