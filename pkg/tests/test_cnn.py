import math
import struct

import numpy as np
import pytest

from sproad import cnn, pipeline, superpixel, synthetic
from sproad.errors import DataError, FormatError


def tiny_model(seed=0, n_in=5, widths=(3, 4, 3), dropout=0.0):
    model = cnn.CnnModel.init(n_in=n_in, widths=widths, seed=seed, dropout=dropout)
    rng = np.random.default_rng(seed + 100)
    for k, v in model.params.items():
        if k.endswith(".b"):
            v[:] = rng.normal(0, 0.1, v.shape)
    return model


def naive_logits(model, x):
    """Direct nested-loop evaluation of the network in inference mode."""
    p = model.params
    r, c, _ = x.shape

    def conv(a, w, b):
        out = np.zeros((r, c, w.shape[3]))
        for i in range(r):
            for j in range(c):
                for o in range(w.shape[3]):
                    s = b[o]
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < r and 0 <= jj < c:
                                s += float(a[ii, jj] @ w[di, dj, :, o])
                    out[i, j, o] = s
        return out

    a1 = np.maximum(conv(x, p["conv1.w"], p["conv1.b"]), 0)
    a2 = np.maximum(conv(a1, p["conv2.w"], p["conv2.b"]), 0)
    a3 = np.maximum(a2 @ p["fc1.w"] + p["fc1.b"], 0)
    return a3 @ p["fc2.w"] + p["fc2.b"]


def test_zero_model_uniform():
    model = cnn.CnnModel.zeros_like(cnn.CnnModel.init())
    probs = cnn.forward(model, np.random.default_rng(0).random((3, 4, 69))).probs
    assert np.allclose(probs, 1 / 3, atol=0, rtol=1e-15)


def test_forward_matches_naive(rng):
    model = tiny_model()
    x = rng.normal(size=(3, 4, 5))
    logits = naive_logits(model, x)
    ref = np.exp(logits - logits.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    assert np.allclose(cnn.forward(model, x).probs, ref, atol=1e-12)


def test_single_node_hand_kernel():
    # on a 1x1 lattice only the kernel center sees data
    model = cnn.CnnModel.zeros_like(tiny_model(n_in=2, widths=(1, 1, 1)))
    p = model.params
    p["conv1.w"][:] = 5.0
    p["conv1.w"][1, 1, :, 0] = (2.0, -1.0)
    p["conv1.b"][:] = 0.5
    p["conv2.w"][1, 1, 0, 0] = 3.0
    p["fc1.w"][0, 0] = 1.0
    p["fc2.w"][0] = (1.0, 0.0, -1.0)
    x = np.array([[[1.5, 0.25]]])
    z = 3.0 * (2.0 * 1.5 - 0.25 + 0.5)  # 9.75
    logits = np.array([z, 0.0, -z])
    expected = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    assert np.allclose(cnn.forward(model, x).probs[0, 0], expected, atol=1e-15)
    assert np.allclose(naive_logits(model, x)[0, 0], logits)


def test_dropout_zero_is_identity(rng):
    model = tiny_model(dropout=0.0)
    x = rng.normal(size=(4, 4, 5))
    a = cnn.forward(model, x, training=True, seed=3).probs
    assert np.array_equal(a, cnn.forward(model, x).probs)


def test_dropout_active_in_training_only(rng):
    model = tiny_model(dropout=0.5)
    x = rng.normal(size=(4, 4, 5))
    assert not np.array_equal(cnn.forward(model, x, training=True, seed=3).probs, cnn.forward(model, x).probs)


def test_shape_mismatch():
    with pytest.raises(DataError):
        cnn.forward(tiny_model(), np.zeros((2, 2, 6)))


def test_loss_values(rng):
    uniform = cnn.ClassLattice(np.full((2, 3, 3), 1 / 3))
    assert cnn.loss(uniform, np.zeros((2, 3), dtype=int)) == pytest.approx(math.log(3), abs=1e-12)
    t = rng.integers(0, 3, (2, 3))
    assert cnn.loss(cnn.ClassLattice(np.eye(3)[t]), t) < 1e-11
    probs = rng.dirichlet(np.ones(3), size=(2, 3))
    t[0, 0] = cnn.IGNORE
    ref = np.mean([-math.log(probs[i, j, t[i, j]]) for i in range(2) for j in range(3) if t[i, j] != cnn.IGNORE])
    assert cnn.loss(cnn.ClassLattice(probs), t) == pytest.approx(ref, rel=1e-14)


def test_zero_input_gradient_structure():
    model = cnn.CnnModel.zeros_like(cnn.CnnModel.init())
    grads = cnn.backward(model, np.zeros((3, 3, 69)), np.zeros((3, 3), dtype=int))
    assert (grads["conv1.w"] == 0).all()
    # softmax residual (1/3 - onehot) reaches the output bias
    assert np.allclose(grads["fc2.b"], (1 / 3 - 1, 1 / 3, 1 / 3))


def fd_gradient(model, x, t, h=1e-5):
    out = {}
    for name, v in model.params.items():
        g = np.zeros_like(v)
        for i in range(v.size):
            old = v.flat[i]
            v.flat[i] = old + h
            up = cnn.loss(cnn.forward(model, x), t)
            v.flat[i] = old - h
            down = cnn.loss(cnn.forward(model, x), t)
            v.flat[i] = old
            g.flat[i] = (up - down) / (2 * h)
        out[name] = g
    return out


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed)
    x = rng.normal(size=(4, 4, 5))
    t = rng.integers(0, 3, (4, 4))
    t[0, 1] = cnn.IGNORE
    analytic = cnn.backward(model, x, t)
    numeric = fd_gradient(model, x, t)
    for name in cnn.PARAM_ORDER:
        err = cnn.relative_error(analytic[name], numeric[name])
        assert err.max() < 1e-4, name


def test_gradcheck_full_size():
    res = cnn.gradcheck(0)
    assert res.passed and res.max_rel_error < 1e-4
    assert set(res.per_param) == set(cnn.PARAM_ORDER)


def test_gradcheck_detects_corruption():
    def bad(model, x, t):
        g = cnn.backward(model, x, t)
        g["fc1.w"] = g["fc1.w"] * 1.01
        return g

    assert not cnn.gradcheck(1, 3, 3, backward_fn=bad).passed


def test_overfit_single_example():
    img, gt = synthetic.road_scene(88, 288, seed=5)
    x, t = pipeline.training_example(img, gt, superpixel.SlicParams())
    model = cnn.train([(x, t)], cnn.TrainParams(lr=0.01, epochs=500, seed=0))
    assert cnn.loss(cnn.forward(model, x), t) < 0.05


def test_zero_learning_rate_keeps_parameters(rng):
    x = rng.normal(size=(3, 3, 5))
    t = rng.integers(0, 3, (3, 3))
    start = tiny_model(dropout=0.5)
    model = cnn.train([(x, t)], cnn.TrainParams(lr=0.0, epochs=7), model=start)
    for k in cnn.PARAM_ORDER:
        assert np.array_equal(model.params[k], start.params[k])


def test_training_deterministic(rng):
    data = [(rng.normal(size=(3, 4, 5)), rng.integers(0, 3, (3, 4))) for _ in range(3)]
    runs = []
    for _ in range(2):
        hist = []
        cnn.train(data, cnn.TrainParams(epochs=5, seed=9), model=tiny_model(), history=hist)
        runs.append(hist)
    assert runs[0] == runs[1]


def test_empty_dataset():
    with pytest.raises(DataError):
        cnn.train([])


def test_model_round_trip(tmp_path):
    model = cnn.CnnModel.init(seed=4)
    path = tmp_path / "m.bin"
    cnn.save_model(model, path)
    assert path.read_bytes().startswith(b"SPCNN1")
    back = cnn.load_model(path)
    for k in cnn.PARAM_ORDER:
        assert back.params[k].tobytes() == model.params[k].tobytes()


def test_model_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "m.bin"
    cnn.save_model(tiny_model(), path)
    data = path.read_bytes()
    (tmp_path / "a.bin").write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(FormatError, match="magic"):
        cnn.load_model(tmp_path / "a.bin")
    (tmp_path / "b.bin").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        cnn.load_model(tmp_path / "b.bin")


def test_model_permuted_tensor(tmp_path):
    model = tiny_model()
    order = list(cnn.PARAM_ORDER)
    order[0], order[2] = order[2], order[0]
    # the tensors in the wrong order, otherwise well formed
    out = bytearray(cnn.MAGIC)
    for name in order:
        arr = model.params[name]
        out += struct.pack("<B", len(name)) + name.encode()
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f8").tobytes()
    path = tmp_path / "p.bin"
    path.write_bytes(bytes(out))
    with pytest.raises(FormatError, match="conv2.w"):
        cnn.load_model(path)
