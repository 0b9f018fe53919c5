"""Locate or fetch the MovieLens 100k ratings file (``u.data``).

Lookup order: ``$BDECF_ML100K``; ``<root>/ml-100k/u.data``; the GroupLens
zip; and finally the copy of the same ratings bundled in the ``recbole``
wheel, fetched with ``pip download``. ``<root>`` defaults to ``./data`` or
``$BDECF_DATA``.
"""

from __future__ import annotations

import io
import logging
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

log = logging.getLogger(__name__)

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_SPEC = "recbole==1.2.1"
WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def data_root():
    return Path(os.environ.get("BDECF_DATA", "data"))


def _from_grouplens(target: Path):
    with urllib.request.urlopen(GROUPLENS_URL, timeout=20) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as z:
        target.write_bytes(z.read("ml-100k/u.data"))


def _from_wheel(target: Path):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps", "-q", "-d", tmp],
            check=True, capture_output=True, timeout=300,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            lines = z.read(WHEEL_MEMBER).decode("latin-1").splitlines()
    # drop the typed header; the remaining rows are u.data verbatim
    target.write_text("\n".join(lines[1:]) + "\n", encoding="latin-1")


def movielens_100k(root=None, download=True):
    """Path to ``u.data``, fetching it if needed. Returns ``None`` when unavailable."""
    env = os.environ.get("BDECF_ML100K")
    if env and Path(env).is_file():
        return Path(env)
    target = Path(root or data_root()) / "ml-100k" / "u.data"
    if target.is_file():
        return target
    if not download:
        return None
    target.parent.mkdir(parents=True, exist_ok=True)
    for fetch in (_from_grouplens, _from_wheel):
        try:
            fetch(target)
        except Exception as exc:  # network or pip failure, try the next source
            log.info("%s failed: %s", fetch.__name__, exc)
            target.unlink(missing_ok=True)
            continue
        return target
    return None
