"""Interaction logs: loading, per-user seeded splitting, history dropout.

The on-disk format is line-oriented text, one ``user<TAB>item`` pair per line.
Trailing fields are ignored and ``#`` starts a comment line.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from giffcf.binfmt import format_kv, parse_kv
from giffcf.seeding import derive_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DataFormatError(ValueError):
    """Raised for malformed or empty interaction files."""


@dataclass
class RawInteractions:
    """Deduplicated pairs in dense index space plus the raw-id maps."""

    users: np.ndarray
    items: np.ndarray
    user_ids: list
    item_ids: list

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)


def load_interactions(path) -> RawInteractions:
    """Read a ``user<TAB>item`` file into deduplicated dense-index pairs.

    Users and items are re-indexed in order of first appearance.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read interactions file {path}: {exc.strerror or exc}") from exc

    user_index: dict = {}
    item_index: dict = {}
    seen = set()
    users, items = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
            raise DataFormatError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
        u = user_index.setdefault(fields[0].strip(), len(user_index))
        i = item_index.setdefault(fields[1].strip(), len(item_index))
        if (u, i) in seen:
            continue
        seen.add((u, i))
        users.append(u)
        items.append(i)
    if not users:
        raise DataFormatError(f"{path}: no interactions")
    return RawInteractions(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        user_ids=list(user_index),
        item_ids=list(item_index),
    )


def _binary_csr(users, items, shape) -> sp.csr_matrix:
    mat = sp.csr_matrix(
        (np.ones(len(users), dtype=np.float64), (np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))),
        shape=shape,
    )
    mat.sum_duplicates()
    mat.data[:] = 1.0
    mat.sort_indices()
    return mat


def _transpose(mat: sp.csr_matrix) -> sp.csr_matrix:
    out = mat.T.tocsr()
    out.sort_indices()
    return out


@dataclass
class InteractionDataset:
    """Binary user-item matrices for the three splits.

    Degrees are always computed on ``train``; ``*_t`` hold the cached
    transposes (item-major CSR).
    """

    n_users: int
    n_items: int
    train: sp.csr_matrix
    val: sp.csr_matrix
    test: sp.csr_matrix
    split_seed: int = 0
    ratios: tuple = DEFAULT_RATIOS
    excluded_users: int = 0
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def __post_init__(self):
        shape = (self.n_users, self.n_items)
        for name in SPLITS:
            mat = getattr(self, name)
            if mat.shape != shape:
                raise ValueError(f"{name} has shape {mat.shape}, expected {shape}")
        self.train_t = _transpose(self.train)
        self.val_t = _transpose(self.val)
        self.test_t = _transpose(self.test)
        self.user_degrees = np.diff(self.train.indptr).astype(np.int64)
        self.item_degrees = np.diff(self.train_t.indptr).astype(np.int64)
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.n_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.n_items)]

    @classmethod
    def from_pairs(cls, n_users, n_items, train, val=(), test=(), **kw) -> "InteractionDataset":
        """Build from lists of ``(user, item)`` index pairs."""

        def mat(pairs):
            arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
            return _binary_csr(arr[:, 0], arr[:, 1], (n_users, n_items))

        return cls(n_users, n_items, mat(train), mat(val), mat(test), **kw)

    def split(self, name: str) -> sp.csr_matrix:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def history(self, user: int) -> np.ndarray:
        """Dense train-history vector of one user."""
        out = np.zeros(self.n_items)
        out[self.train.indices[self.train.indptr[user]:self.train.indptr[user + 1]]] = 1.0
        return out

    def rows(self, users, split: str = "train") -> np.ndarray:
        """Dense ``len(users) x n_items`` block of a split."""
        return self.split(split)[np.asarray(users)].toarray()

    # -- persistence -------------------------------------------------------

    def save(self, out_dir) -> None:
        """Write split files, id maps and the manifest into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in SPLITS:
            mat = getattr(self, name).tocoo()
            order = np.lexsort((mat.col, mat.row))
            lines = [f"{u}\t{i}\n" for u, i in zip(mat.row[order], mat.col[order])]
            (out_dir / f"{name}.tsv").write_text("".join(lines), encoding="utf-8")
        (out_dir / "user_map.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in enumerate(self.user_ids)), encoding="utf-8")
        (out_dir / "item_map.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in enumerate(self.item_ids)), encoding="utf-8")
        manifest = {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "seed": self.split_seed,
            "ratios": list(self.ratios),
            "excluded_users": self.excluded_users,
        }
        (out_dir / "manifest.txt").write_text(format_kv(manifest), encoding="utf-8")

    @classmethod
    def load(cls, data_dir) -> "InteractionDataset":
        data_dir = Path(data_dir)
        try:
            manifest = parse_kv((data_dir / "manifest.txt").read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read manifest in {data_dir}: {exc.strerror or exc}") from exc
        n_users, n_items = int(manifest["n_users"]), int(manifest["n_items"])
        mats = {}
        for name in SPLITS:
            pairs = _read_index_pairs(data_dir / f"{name}.tsv")
            mats[name] = _binary_csr(pairs[:, 0], pairs[:, 1], (n_users, n_items))
        return cls(
            n_users,
            n_items,
            mats["train"],
            mats["val"],
            mats["test"],
            split_seed=int(manifest["seed"]),
            ratios=tuple(float(r) for r in manifest["ratios"].split(",")),
            excluded_users=int(manifest.get("excluded_users", 0)),
            user_ids=_read_map(data_dir / "user_map.tsv", n_users),
            item_ids=_read_map(data_dir / "item_map.tsv", n_items),
        )


def _read_index_pairs(path) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read split file {path}: {exc.strerror or exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        try:
            rows.append((int(f[0]), int(f[1])))
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path}:{lineno}: expected integer 'user<TAB>item'") from exc
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _read_map(path, n) -> list:
    path = Path(path)
    if not path.exists():
        return [str(k) for k in range(n)]
    ids = [line.split("\t", 1)[1] for line in path.read_text(encoding="utf-8").splitlines() if line]
    if len(ids) != n:
        raise DataFormatError(f"{path}: expected {n} entries, found {len(ids)}")
    return ids


def split_counts(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    """Per-user (train, val, test) sizes: nearest rounding, train floor of one.

    Train and validation sizes are rounded half-up; test takes the remainder.
    """
    if n <= 0:
        return 0, 0, 0
    n_train = max(1, min(n, math.floor(ratios[0] * n + 0.5 + 1e-9)))
    n_val = min(n - n_train, math.floor(ratios[1] * n + 0.5 + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(raw: RawInteractions, ratios=DEFAULT_RATIOS, seed: int = 0) -> InteractionDataset:
    """Shuffle each user's items with a ``(seed, user)`` generator and cut by ``ratios``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")

    order = np.lexsort((raw.items, raw.users))
    users, items = raw.users[order], raw.items[order]
    bounds = np.searchsorted(users, np.arange(raw.n_users + 1))
    parts = {name: ([], []) for name in SPLITS}
    excluded = 0
    for u in range(raw.n_users):
        mine = items[bounds[u]:bounds[u + 1]].copy()
        if len(mine) == 0:
            excluded += 1
            continue
        derive_rng(seed, "split", u).shuffle(mine)
        n_tr, n_va, _ = split_counts(len(mine), ratios)
        cuts = {"train": mine[:n_tr], "val": mine[n_tr:n_tr + n_va], "test": mine[n_tr + n_va:]}
        for name, chunk in cuts.items():
            parts[name][0].extend([u] * len(chunk))
            parts[name][1].extend(chunk.tolist())
    if excluded:
        log.warning("excluded %d users with no interactions", excluded)

    shape = (raw.n_users, raw.n_items)
    mats = {name: _binary_csr(us, its, shape) for name, (us, its) in parts.items()}
    return InteractionDataset(
        raw.n_users,
        raw.n_items,
        mats["train"],
        mats["val"],
        mats["test"],
        split_seed=seed,
        ratios=ratios,
        excluded_users=excluded,
        user_ids=list(raw.user_ids),
        item_ids=list(raw.item_ids),
    )


def dropout_history(x: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each entry independently with probability ``rate``; survivors are not rescaled.

    Works on a single vector or a ``(batch, n_items)`` block. A uniform draw is
    consumed for every entry, so the result depends only on ``(x.shape, rate, rng)``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if rate == 0.0:
        return x.copy()
    keep = rng.random(x.shape) >= rate
    return np.where(keep, x, 0.0)
