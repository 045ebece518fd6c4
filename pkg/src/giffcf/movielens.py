"""MovieLens-1M preparation: ratings >= 4 as positives, iterative 10-core filter.

The full ML-1M rating log is not downloadable from GroupLens in every
environment, but the ``recbole_cdr`` wheel on PyPI ships it as an atomic
``.inter`` file. :func:`fetch_ml1m_inter` pulls that wheel with ``pip
download`` and extracts the file.
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import zipfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

WHEEL_SPEC = "recbole_cdr==0.1.0"
INTER_MEMBER = "recbole_cdr/dataset_example/ml-1m/ml-1m.inter"
EXPECTED = {"interactions": 571_531, "users": 5_949, "items": 2_810}


def default_cache() -> Path:
    return Path(os.environ.get("GIFFCF_CACHE", Path.home() / ".cache" / "giffcf"))


def fetch_ml1m_inter(cache_dir=None) -> Path:
    """Return the path of ``ml-1m.inter``, downloading the carrier wheel if needed."""
    cache_dir = Path(cache_dir or default_cache())
    target = cache_dir / "ml-1m.inter"
    if target.exists():
        return target
    cache_dir.mkdir(parents=True, exist_ok=True)
    wheels = sorted(cache_dir.glob("recbole_cdr-*.whl"))
    if not wheels:
        cmd = [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:", "-d", str(cache_dir), WHEEL_SPEC]
        log.info("downloading %s", WHEEL_SPEC)
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise OSError(f"pip download {WHEEL_SPEC} failed: {proc.stderr.strip()[-500:]}")
        wheels = sorted(cache_dir.glob("recbole_cdr-*.whl"))
    with zipfile.ZipFile(wheels[-1]) as zf, zf.open(INTER_MEMBER) as src:
        target.write_bytes(src.read())
    return target


def read_ratings(path):
    """Parse the atomic file into ``(users, items, ratings, timestamps)`` arrays."""
    users, items, ratings, stamps = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            u, i, r, ts = line.rstrip("\n").split("\t")
            users.append(u)
            items.append(i)
            ratings.append(float(r))
            stamps.append(int(float(ts)))
    return np.array(users), np.array(items), np.array(ratings), np.array(stamps, dtype=np.int64)


def k_core(users, items, k: int = 10):
    """Boolean mask of interactions surviving iterative ``k``-core filtering."""
    keep = np.ones(len(users), dtype=bool)
    _, uinv = np.unique(users, return_inverse=True)
    _, iinv = np.unique(items, return_inverse=True)
    while True:
        ucount = np.bincount(uinv[keep], minlength=uinv.max() + 1)
        icount = np.bincount(iinv[keep], minlength=iinv.max() + 1)
        new = keep & (ucount[uinv] >= k) & (icount[iinv] >= k)
        if new.sum() == keep.sum():
            return new
        keep = new


def prepare_ml1m(out_path, cache_dir=None, min_rating: float = 4.0, core: int = 10) -> dict:
    """Write the filtered log as ``user<TAB>item<TAB>timestamp`` lines.

    Rows are ordered by user, then timestamp. Returns summary counts.
    """
    users, items, ratings, stamps = read_ratings(fetch_ml1m_inter(cache_dir))
    pos = ratings >= min_rating
    users, items, stamps = users[pos], items[pos], stamps[pos]
    keep = k_core(users, items, core)
    users, items, stamps = users[keep], items[keep], stamps[keep]
    uid = np.array([int(u.split("_", 1)[-1]) for u in users])
    order = np.lexsort((items, stamps, uid))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("# MovieLens-1M, rating >= 4, 10-core; user<TAB>item<TAB>timestamp\n")
        for j in order:
            fh.write(f"{uid[j]}\t{items[j]}\t{stamps[j]}\n")
    return {"interactions": int(keep.sum()), "users": len(set(uid.tolist())), "items": len(set(items.tolist()))}
