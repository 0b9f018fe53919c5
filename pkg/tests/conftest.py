import os

import numpy as np
import pytest

from bdecf.data import RatingDataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BDECF_SLOW", "") not in ("", "0"):
        return
    skip = pytest.mark.skip(reason="slow reproduction target; set BDECF_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_dataset(users, items, ratings, timestamps=None, num_users=None, num_items=None,
                 scale=(1.0, 5.0)):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = len(users)
    ts = np.arange(n, dtype=np.int64) if timestamps is None else np.asarray(timestamps, dtype=np.int64)
    return RatingDataset(
        users, items, np.asarray(ratings, dtype=np.float64), ts, np.arange(n, dtype=np.int64),
        int(num_users if num_users is not None else users.max() + 1),
        int(num_items if num_items is not None else items.max() + 1), scale,
    )


def random_dataset(num_users=12, num_items=15, per_user=6, seed=0):
    """Every user rates ``per_user`` distinct items with random timestamps."""
    rng = np.random.default_rng(seed)
    u, i = [], []
    for user in range(num_users):
        picks = rng.choice(num_items, size=per_user, replace=False)
        u.extend([user] * per_user)
        i.extend(picks)
    n = len(u)
    return make_dataset(u, i, rng.integers(1, 6, n), rng.permutation(n), num_users, num_items)


@pytest.fixture
def toy():
    return random_dataset()


@pytest.fixture(scope="session")
def ml100k_path():
    from bdecf.datasets import movielens_100k

    path = movielens_100k(download=os.environ.get("BDECF_NO_DOWNLOAD", "") in ("", "0"))
    if path is None:
        pytest.skip("MovieLens 100k not available")
    return path


@pytest.fixture(autouse=True)
def _criterion_label(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        record_property("criterion", marker.args)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            n, title = props["criterion"]
            # the call phase decides, unless setup or teardown broke
            if rep.when == "call" or outcome != "passed":
                if n not in rows or rows[n][1] == "passed":
                    rows[n] = (title, outcome, rep.duration)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(rows):
        title, outcome, secs = rows[n]
        label = {"passed": "PASS", "failed": "FAIL", "error": "FAIL"}.get(outcome, "SKIP")
        terminalreporter.write_line(f"{label}  {n:>2}. {title} ({secs:.1f}s)")
