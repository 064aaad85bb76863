import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zorl.errors import DataFormatError, DimensionMismatchError
from zorl.numerics import RngStream
from zorl.objectives import (
    AttackInstance,
    Dataset,
    LabeledImages,
    Objective,
    QuadraticFamily,
    attack_loss,
    least_squares_loss,
    least_squares_objective,
    load_idx_images,
    load_libsvm,
    quadratic_objective,
    save_idx_images,
    save_libsvm,
    synthetic_quadratic,
    train_victim,
)


class FixedScores:
    def __init__(self, scores):
        self.s = np.asarray(scores, dtype=float)

    def scores(self, x):
        return self.s


# ----------------------------------------------------------- least squares


def test_lsq_zero_weights_positive_label():
    data = Dataset(np.array([[2.0, -1.0]]), np.array([1.0]))
    assert least_squares_loss(np.zeros(2), data) == 0.25


def test_lsq_zero_weights_negative_label():
    data = Dataset(np.array([[2.0, -1.0]]), np.array([-1.0]))
    assert least_squares_loss(np.zeros(2), data) == 2.25


def test_lsq_two_sample_fixture():
    data = Dataset(np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))
    assert abs(least_squares_loss(np.array([math.log(3.0)]), data) - 0.3125) < 1e-12


def test_lsq_errors():
    data = Dataset(np.array([[1.0, 2.0]]), np.array([1.0]))
    with pytest.raises(DimensionMismatchError):
        least_squares_loss(np.zeros(3), data)
    with pytest.raises(DataFormatError):
        least_squares_loss(np.zeros(2), Dataset(np.zeros((0, 2)), np.zeros(0)))


@given(
    arrays(np.float64, (6, 3), elements=st.floats(-5, 5)),
    arrays(np.float64, 6, elements=st.sampled_from([-1.0, 1.0])),
    arrays(np.float64, 3, elements=st.floats(-5, 5)),
)
def test_lsq_range(X, y, w):
    v = least_squares_loss(w, Dataset(X, y))
    assert 0.0 <= v <= 4.0


def test_lsq_objective_counts_queries_and_gradient():
    rng = RngStream(2)
    data = Dataset(rng.normal((20, 4)), np.where(rng.normal(20) > 0, 1.0, -1.0))
    obj = least_squares_objective(data)
    w = rng.normal(4)
    for _ in range(3):
        obj(w)
    assert obj.query_count == 3
    h = 1e-6
    fd = np.array([(obj.evaluate_uncounted(w + h * e) - obj.evaluate_uncounted(w - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(fd, obj.gradient(w), rtol=1e-6, atol=1e-9)
    assert obj.query_count == 3


# ---------------------------------------------------------------- attack


def test_attack_loss_fixture_at_x0():
    inst = AttackInstance(np.full(4, 0.5), 0)
    assert abs(attack_loss(inst.x0, FixedScores([0.7, 0.2, 0.1]), inst) - 0.5) < 1e-12


def test_attack_loss_already_misclassified():
    inst = AttackInstance(np.full(4, 0.5), 2)
    assert attack_loss(inst.x0, FixedScores([0.7, 0.2, 0.1]), inst) == 0.0


def test_attack_loss_with_distortion():
    inst = AttackInstance(np.full(4, 0.5), 0, c=0.1, p=1)
    x = inst.x0 + np.array([0.1, 0, 0, 0])
    assert abs(attack_loss(x, FixedScores([0.7, 0.2, 0.1]), inst) - 0.51) < 1e-12


def test_attack_loss_bad_label():
    inst = AttackInstance(np.full(2, 0.5), 5)
    with pytest.raises(IndexError):
        attack_loss(inst.x0, FixedScores([0.7, 0.3]), inst)


def test_attack_instance_validation():
    with pytest.raises(DataFormatError):
        AttackInstance(np.array([1.5]), 0)
    with pytest.raises(ValueError):
        AttackInstance(np.array([0.5]), 0, c=0.0)


@given(
    arrays(np.float64, 3, elements=st.floats(0, 1)),
    arrays(np.float64, 3, elements=st.floats(-2, 2)),
    st.integers(0, 2),
)
def test_attack_loss_nonnegative(scores, shift, t0):
    inst = AttackInstance(np.full(3, 0.5), t0)
    assert attack_loss(inst.x0 + shift, FixedScores(scores), inst) >= 0.0
    # zero distortion at x0: the loss is just the hinge
    s = scores
    hinge = max(s[t0] - np.delete(s, t0).max(), 0.0)
    assert attack_loss(inst.x0, FixedScores(s), inst) == hinge


# ---------------------------------------------------------------- libsvm


def test_libsvm_single_line(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("-1 3:0.5\n+1 1:2\n")
    data = load_libsvm(p)
    assert data.y.tolist() == [-1.0, 1.0]
    assert data.X[0].tolist() == [0.0, 0.0, 0.5]


def test_libsvm_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    with pytest.raises(DataFormatError, match="no samples"):
        load_libsvm(p)


def test_libsvm_duplicate_index(tmp_path):
    p = tmp_path / "dup.txt"
    p.write_text("+1 1:1 1:2\n")
    with pytest.raises(DataFormatError, match="duplicate feature index 1"):
        load_libsvm(p)


def test_libsvm_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("+1 1:1\n-1 2:abc\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_libsvm(p)
    p.write_text("+1 1:1\n-1 2\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_libsvm(p)


def test_libsvm_label_mapping(tmp_path):
    p = tmp_path / "l.txt"
    p.write_text("0 1:1\n2 1:2\r\n0 1:3\n")
    assert load_libsvm(p).y.tolist() == [-1.0, 1.0, -1.0]
    p.write_text("0 1:1\n1 1:2\n2 1:3\n")
    with pytest.raises(DataFormatError, match="two classes"):
        load_libsvm(p)


def test_libsvm_dimension_cap(tmp_path):
    p = tmp_path / "big.txt"
    p.write_text("+1 100001:1\n")
    with pytest.raises(DataFormatError, match="exceeds cap"):
        load_libsvm(p)


@given(
    st.integers(1, 6).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (n, 4), elements=st.sampled_from([0.0, 0.5, -1.25, 3.0, 1e-7])),
            arrays(np.float64, n, elements=st.sampled_from([-1.0, 1.0])),
        )
    )
)
def test_libsvm_round_trip(tmp_path_factory, Xy):
    X, y = Xy
    path = tmp_path_factory.mktemp("rt") / "d.txt"
    save_libsvm(Dataset(X, y), path)
    back = load_libsvm(path)
    assert np.array_equal(back.X, X) and np.array_equal(back.y, y)


# ------------------------------------------------------------------- IDX


def _write_idx(tmp_path, n_img, n_lab, pixels=None, magic=0x803):
    pix = np.zeros((n_img, 2, 2), np.uint8) if pixels is None else pixels
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", magic, n_img, 2, 2) + pix.tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, n_lab) + bytes(n_lab))
    return ip, lp


def test_idx_scaling(tmp_path):
    pix = np.array([[[255, 0], [51, 102]]], np.uint8)
    data = load_idx_images(*_write_idx(tmp_path, 1, 1, pix))
    assert data.images[0].tolist() == [1.0, 0.0, 0.2, 0.4]


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(DataFormatError, match="count mismatch"):
        load_idx_images(*_write_idx(tmp_path, 50, 49))


def test_idx_bad_magic(tmp_path):
    with pytest.raises(DataFormatError, match="bad magic"):
        load_idx_images(*_write_idx(tmp_path, 1, 1, magic=0x1234))


def test_idx_truncated(tmp_path):
    ip, lp = _write_idx(tmp_path, 3, 3)
    ip.write_bytes(ip.read_bytes()[:-2])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx_images(ip, lp)


def test_idx_round_trip(tmp_path):
    imgs = np.round(RngStream(1).uniform(size=(5, 6)) * 255) / 255
    data = LabeledImages(imgs, np.arange(5), (2, 3))
    save_idx_images(data, tmp_path / "i", tmp_path / "l")
    back = load_idx_images(tmp_path / "i", tmp_path / "l")
    assert np.allclose(back.images, imgs, atol=1e-12) and back.labels.tolist() == [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- victim


def _separable(n=200, seed=0):
    rng = RngStream(seed)
    X = rng.uniform(size=(n, 4))
    y = (X[:, 0] > 0.5).astype(np.int64)
    keep = np.abs(X[:, 0] - 0.5) > 0.15  # margin
    return LabeledImages(X[keep], y[keep], (2, 2))


def test_victim_single_class_error():
    data = LabeledImages(np.full((10, 4), 0.5), np.zeros(10, np.int64), (2, 2))
    with pytest.raises(DataFormatError):
        train_victim(data, 1, RngStream(0))


def test_victim_separable_perfect_accuracy():
    v = train_victim(_separable(), 60, RngStream(3), accuracy_floor=0.0)
    assert v.heldout_accuracy == 1.0


def test_victim_deterministic():
    a = train_victim(_separable(), 3, RngStream(4), accuracy_floor=0.0)
    b = train_victim(_separable(), 3, RngStream(4), accuracy_floor=0.0)
    assert a.params.equal(b.params)
    assert a.scores(np.full(4, 0.5)).size == 2


# ------------------------------------------------------------- quadratic


def test_quadratic_examples():
    f = quadratic_objective(np.eye(2), np.zeros(2))
    assert f(np.array([3.0, 4.0])) == 12.5
    g = synthetic_quadratic(6, RngStream(5))
    x_star = np.linalg.solve(g.A, -g.gradient(np.zeros(6)))
    assert abs(g(x_star)) < 1e-12


def test_quadratic_spectrum_and_gradient():
    f = synthetic_quadratic(7, RngStream(6))
    lam = np.linalg.eigvalsh(f.A)
    assert lam.min() >= 0.1 - 1e-9 and lam.max() <= 10 + 1e-9
    assert np.allclose(f.A, f.A.T)
    x = RngStream(7).normal(7)
    h = 1e-5
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(7)])
    g = f.gradient(x)
    assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-6


def test_quadratic_family_dimensions():
    dims = {QuadraticFamily().sample(RngStream(0, (i,))).dim for i in range(60)}
    assert dims <= set(range(2, 21)) and len(dims) > 5


def test_objective_counter_atomic():
    obj = Objective(1, lambda x: 0.0)
    threads = [threading.Thread(target=lambda: [obj(np.zeros(1)) for _ in range(500)]) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert obj.query_count == 2000
