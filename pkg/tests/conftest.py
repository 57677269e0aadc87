import numpy as np
import pytest

from capsprune.backbone import BackboneSpec, StageSpec
from capsprune.data import Dataset, write_idx
from capsprune.network import build_network

MNIST_DIR = "/root/data/mnist"


def tiny_spec(bottleneck=16, batchnorm=True):
    """8x8 single-channel input -> 4x4 -> 2x2 with S channels."""
    return BackboneSpec(
        (StageSpec(6, 4, 2, 1, batchnorm), StageSpec(bottleneck, 4, 2, 1, batchnorm)), (1, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    net = build_network(tiny_spec(), num_classes=3, D1=4, D2=5, r=3, seed=7, dtype=np.float64)
    # non-trivial BN running statistics so eval mode is exercised meaningfully
    r = np.random.default_rng(3)
    for st in net.backbone.stages:
        st.running_mean[:] = r.normal(0, 0.3, st.running_mean.shape)
        st.running_var[:] = r.uniform(0.5, 2.0, st.running_var.shape)
        st.gamma.data[:] = r.uniform(0.5, 1.5, st.gamma.shape)
        st.beta.data[:] = r.normal(0, 0.2, st.beta.shape)
    return net


def synthetic_digits(n, seed=0, size=8, classes=3):
    """Class k is a bright k-th horizontal band plus noise: trivially learnable."""
    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = r.integers(0, 40, size=(n, 1, size, size)).astype(np.float64)
    band = size // classes
    for i, k in enumerate(labels):
        images[i, 0, k * band:(k + 1) * band, :] = 255
    return Dataset(np.rint(images) / 255.0, labels.astype(np.int64), classes)


@pytest.fixture
def idx_dataset_dir(tmp_path):
    """Train/test IDX files of an easily separable 8x8, 3-class problem."""
    root = tmp_path / "data"
    root.mkdir()
    write_idx(synthetic_digits(96, seed=1), root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    write_idx(synthetic_digits(30, seed=2), root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    return root


def naive_conv(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for a in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for q in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, q, i * stride + u, j * stride + v] * w[o, q, u, v]
                    out[a, o, i, j] = acc
    return out


# -- acceptance reporting -------------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one PASS/FAIL line per criterion,
# printed at the end of the session.  ``record_property("detail", ...)`` adds measurements.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "outcomes": [], "details": []})
    entry["outcomes"].append("skipped" if rep.skipped else rep.outcome)
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        if "failed" in e["outcomes"]:
            verdict = "FAIL"
        elif all(o == "skipped" for o in e["outcomes"]):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n}: {verdict}  {e['title']}" + (f"  [{detail}]" if detail else ""))
