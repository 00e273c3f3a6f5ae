import numpy as np
import pytest

from pdstage.data import SENSOR_COUNT


def conv1d_loop(x, w, b, stride=1):
    """Independent nested-loop convolution: y[i] = sum_c sum_j x[c, i*stride + j] * w[c, j] + b.

    x: (batch, C, L), w: (O, C, K), b: (O,). Pure-Python float arithmetic,
    summed over channels first, then taps.
    """
    batch, C, L = x.shape
    O, _, K = w.shape
    out_len = (L - K) // stride + 1
    y = np.empty((batch, O, out_len))
    for n in range(batch):
        for o in range(O):
            for i in range(out_len):
                acc = 0.0
                for c in range(C):
                    for j in range(K):
                        acc += float(x[n, c, i * stride + j]) * float(w[o, c, j])
                y[n, o, i] = acc + float(b[o])
    return y


def write_walk(path, length, rng, offset=0.0, nan_cells=()):
    data = np.column_stack([
        np.arange(length) * 0.01,
        rng.normal(offset, 1.0, size=(length, SENSOR_COUNT)) * 100 + 500,
    ])
    for r, c in nan_cells:
        data[r, c] = np.nan
    lines = ["\t".join("NaN" if np.isnan(v) else f"{v:.6f}" for v in row) for row in data]
    path.write_text("\n".join(lines) + "\n")


def make_roster(directory, n_control=3, n_pd=3, length=260, seed=0, stages=(2, 2.5, 3)):
    """Toy Physionet-style roster: walk files plus a demographics table.
    Class-dependent offsets make the classes separable."""
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["ID\tStudy\tGroup\tHoehnYahr"]
    offsets = {0: 0.0, 2: 1.0, 2.5: 2.0, 3: 3.0}
    for i in range(1, n_control + 1):
        sid = f"GaCo{i:02d}"
        rows.append(f"{sid}\tGa\tCO\t")
        write_walk(directory / f"{sid}_01.txt", length, rng, 0.0)
    for i in range(1, n_pd + 1):
        sid = f"GaPt{i:02d}"
        hy = stages[(i - 1) % len(stages)]
        rows.append(f"{sid}\tGa\tPD\t{hy}")
        write_walk(directory / f"{sid}_01.txt", length, rng, offsets[hy])
    demo = directory / "demographics.txt"
    demo.write_text("\n".join(rows) + "\n")
    return directory, demo


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
