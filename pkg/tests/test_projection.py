import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comlab.autodiff import Tape, backward, finite_diff_check
from comlab.projection import assemble_A, householder_qr, project_sdot, projected_sdot


def _qr(A):
    qr = householder_qr(Tape(), A)
    return qr.Q.value, qr.R.value


def _projector_oracle(G, sdot0):
    """(I - P) sdot0 with P the orthogonal projector onto the rows of G."""
    if len(G) == 0:
        return sdot0
    P = G.T @ np.linalg.solve(G @ G.T, G)
    return sdot0 - P @ sdot0


def test_assemble_nc_zero():
    A = assemble_A(Tape(), np.zeros((0, 3)), np.array([1.0, 2.0, 3.0])).value
    np.testing.assert_array_equal(A, [[1.0], [2.0], [3.0]])


def test_assemble_rejects_nc_equal_ns():
    with pytest.raises(ValueError, match="n_c < n_s"):
        assemble_A(Tape(), np.eye(2), np.array([2.0, 3.0]))


def test_assemble_column_order():
    A = assemble_A(Tape(), np.array([[1.0, 0.0, 0.0]]), np.array([4.0, 5.0, 6.0])).value
    np.testing.assert_array_equal(A, [[1, 4], [0, 5], [0, 6]])


def test_qr_of_orthonormal_columns():
    Q, R = _qr(np.eye(3)[:, :2])
    np.testing.assert_allclose(np.abs(Q), np.eye(3)[:, :2], atol=1e-15)
    np.testing.assert_allclose(np.abs(np.diag(R)), [1.0, 1.0])
    assert R[0, 1] == 0.0 and R[1, 0] == 0.0


def test_qr_hand_gram_schmidt():
    Q, R = _qr(np.array([[1.0, 0.3], [0.0, 0.7]]))
    assert abs(R[1, 1]) == pytest.approx(0.7, abs=1e-14)
    np.testing.assert_allclose(np.abs(Q[:, 1]), [0.0, 1.0], atol=1e-14)


def test_qr_random_6x4(rng):
    A = rng.normal(size=(6, 4))
    Q, R = _qr(A)
    assert np.linalg.norm(Q @ R - A) <= 1e-10
    assert np.linalg.norm(Q.T @ Q - np.eye(4)) <= 1e-10
    assert np.all(np.tril(R, -1) == 0.0)


def test_project_nc_zero_is_identity():
    sdot0 = np.array([0.3, -0.7, 1.1])
    tape = Tape()
    out = projected_sdot(tape, tape.constant(np.zeros((1, 0, 3))), tape.constant(sdot0[None]))
    assert out.value.tobytes() == sdot0[None].tobytes()


def test_project_hand_example():
    tape = Tape()
    A = assemble_A(tape, np.array([[1.0, 0.0]]), np.array([0.3, 0.7]))
    sdot = project_sdot(tape, householder_qr(tape, A), 1).value
    np.testing.assert_allclose(sdot, [0.0, 0.7], atol=1e-15)


def test_project_fixed_point():
    tape = Tape()
    sdot0 = np.array([0.0, 2.0, -1.0])
    A = assemble_A(tape, np.array([[1.0, 0.0, 0.0]]), sdot0)
    sdot = project_sdot(tape, householder_qr(tape, A), 1).value
    assert np.linalg.norm(sdot - sdot0) <= 1e-10


def test_degenerate_column_stays_finite():
    tape = Tape()
    J = tape.leaf(np.zeros((1, 1, 3)))
    s0 = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
    out = projected_sdot(tape, J, s0)
    g = backward(tape, tape.apply("sqnorm", [out]))
    assert np.all(np.isfinite(out.value))
    assert all(np.all(np.isfinite(v)) for v in g.values())


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.data())
def test_projection_properties(seed, n_s, data):
    n_c = data.draw(st.integers(0, n_s - 1))
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(n_c, n_s))
    sdot0 = rng.normal(size=n_s)
    tape = Tape()
    A = assemble_A(tape, G, sdot0)
    qr = householder_qr(tape, A)
    Q, R = qr.Q.value, qr.R.value
    assert np.linalg.norm(Q.T @ Q - np.eye(n_c + 1)) <= 1e-10
    assert np.linalg.norm(Q @ R - A.value) <= 1e-10
    sdot = project_sdot(tape, qr, n_c).value
    for g in G:
        assert abs(g @ sdot) <= 1e-9 * np.linalg.norm(g) * np.linalg.norm(sdot0)
    assert np.linalg.norm(sdot - _projector_oracle(G, sdot0)) <= 1e-9


def test_projection_gradient_matches_fd(rng):
    A0 = rng.normal(size=(4, 3))
    w = rng.normal(size=4)

    def f(tape, A):
        sdot = project_sdot(tape, householder_qr(tape, A), 2)
        return tape.apply("dot", [tape.apply("silu", [sdot]), tape.constant(w)])

    assert finite_diff_check(f, A0) <= 1e-5


def test_batched_matches_single(rng):
    G = rng.normal(size=(5, 2, 4))
    s0 = rng.normal(size=(5, 4))
    tape = Tape()
    batched = projected_sdot(tape, tape.constant(G), tape.constant(s0)).value
    for i in range(5):
        tape = Tape()
        single = project_sdot(tape, householder_qr(tape, assemble_A(tape, G[i], s0[i])), 2).value
        np.testing.assert_allclose(batched[i], single, atol=1e-14)
