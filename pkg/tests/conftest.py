import numpy as np
import pytest

from dataset import CorpusSpec, generate_corpus

FD_STEP = 1e-4


def relative_error(analytic, numeric) -> float:
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def central_difference(fn, array: np.ndarray, indices, step: float = FD_STEP) -> np.ndarray:
    """d fn / d array[index] for each index, by central differences on a copy of array"""
    work = np.array(array, dtype=np.float64, copy=True)
    out = []
    for index in indices:
        original = work[index]
        work[index] = original + step
        plus = fn(work)
        work[index] = original - step
        minus = fn(work)
        work[index] = original
        out.append((plus - minus) / (2.0 * step))
    return np.array(out)


def sample_indices(rng: np.random.Generator, shape, count: int):
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A few images per split with every noise mode present"""
    spec = CorpusSpec(n_mask=4, n_box=20, test_sets={"synth-standard": 3, "synth-lowcontrast": 2},
                      blur=0.1, no_polyp=0.1, wrong_label=0.2, imprecise_box=0.2, seed=11)
    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(spec, root), root
