import numpy as np
import pytest

from sproad import cnn, features, pipeline, superpixel, synthetic

SMALL = superpixel.SlicParams(rows=4, cols=12, compactness=35.0, kmeans_iters=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return synthetic.road_scene(64, 192, seed=7)


@pytest.fixture(scope="session")
def small_model():
    """A CNN fitted to a handful of 64x192 scenes on a 4x12 lattice."""
    data = [pipeline.training_example(img, gt, SMALL) for img, gt in synthetic.scenes(4, 64, 192, seed=3)]
    return cnn.train(data, cnn.TrainParams(lr=0.01, epochs=40, seed=0))


@pytest.fixture(scope="session")
def small_prediction(small_scene, small_model):
    """(segmentation, per-id labels, per-id probabilities) for ``small_scene``."""
    img, _ = small_scene
    seg = superpixel.segment(img, SMALL)
    classes = cnn.forward(small_model, features.build_descriptor(img, seg))
    return seg, superpixel.from_lattice(classes.labels, seg), superpixel.from_lattice(classes.probs, seg)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
