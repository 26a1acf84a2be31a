import numpy as np
import pytest

from vapo import potential as P
from vapo.verify import fd_input, fd_theta, random_model, rel_err


def linear_like(w, b=0.0):
    """A one-hidden-layer net whose output weights are zero except a bias: Phi == b."""
    sizes = [len(w), 3, 1]
    theta = np.zeros(P.num_params(sizes))
    (_, (b0, b1)) = P.PotentialModel(sizes, theta).layout()[-1]
    theta[b0] = b
    return P.PotentialModel(sizes, theta, "tanh")


def test_theta_length_and_layout():
    sizes = [3, 5, 4, 1]
    m = P.init(sizes, 0)
    assert len(m.theta) == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 1 + 1
    layers = m.weights()
    assert [W.shape for W, _ in layers] == [(5, 3), (4, 5), (1, 4)]


def test_zero_final_layer_gives_constant():
    m = linear_like([1.0, 2.0], b=0.7)
    rec = P.forward(m, np.array([3.0, 4.0]))
    assert rec.value == pytest.approx(0.7)
    np.testing.assert_array_equal(rec.input_grad, 0.0)
    np.testing.assert_array_equal(P.grad_theta_gradnormsq(m, np.array([3.0, 4.0])), 0.0)


def test_output_bias_derivative_is_one():
    rng = np.random.default_rng(1)
    m = random_model(rng)
    g = P.grad_theta_value(m, rng.standard_normal(m.dim))
    (_, (b0, _)) = m.layout()[-1]
    assert g[b0] == 1.0


def test_tanh_near_linear_regime():
    # tanh(z) ~ z for tiny weights, so Phi ~ w2 . (W1 x) and grad_x ~ W1^T w2
    sizes = [2, 2, 1]
    W1 = np.eye(2) * 1e-4
    w2 = np.array([1.0, 2.0]) * 1e4
    theta = np.concatenate([W1.ravel(), np.zeros(2), w2, [0.5]])
    m = P.PotentialModel(sizes, theta, "tanh")
    rec = P.forward(m, np.array([3.0, 4.0]))
    assert rec.value == pytest.approx(11.5, rel=1e-6)
    np.testing.assert_allclose(rec.input_grad, [1.0, 2.0], rtol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    x = rng.standard_normal(m.dim)
    assert rel_err(fd_input(lambda z: P.forward(m, z).value, x), P.forward(m, x).input_grad) < 1e-5
    assert rel_err(fd_theta(lambda th: P.forward(m.copy(th), x).value, m.theta),
                   P.grad_theta_value(m, x)) < 1e-5
    gn = fd_theta(lambda th: float(np.sum(P.forward(m.copy(th), x).input_grad ** 2)), m.theta)
    assert rel_err(gn, P.grad_theta_gradnormsq(m, x)) < 1e-4


def test_batched_vjp_is_weighted_sum():
    rng = np.random.default_rng(3)
    m = random_model(rng)
    X = rng.standard_normal((5, m.dim))
    cv, cg = rng.standard_normal(5), rng.standard_normal(5)
    expected = sum(cv[i] * P.grad_theta_value(m, X[i]) + cg[i] * P.grad_theta_gradnormsq(m, X[i])
                   for i in range(5))
    np.testing.assert_allclose(P.vjp_theta(m, X, cv, cg), expected, rtol=1e-10, atol=1e-12)


def test_batch_forward_matches_single():
    rng = np.random.default_rng(4)
    m = random_model(rng)
    X = rng.standard_normal((7, m.dim))
    rec = P.forward(m, X)
    for i in range(7):
        r = P.forward(m, X[i])
        assert rec.value[i] == pytest.approx(r.value, rel=1e-13)
        np.testing.assert_allclose(rec.input_grad[i], r.input_grad, rtol=1e-12)


def test_dimension_mismatch():
    m = P.init([3, 4, 1], 0)
    with pytest.raises(ValueError):
        P.forward(m, np.zeros(2))


class TestInit:
    def test_deterministic(self):
        a = P.init([2, 32, 32, 1], 123)
        b = P.init([2, 32, 32, 1], 123)
        assert a.theta.tobytes() == b.theta.tobytes()

    def test_small_at_origin(self):
        vals = [abs(P.forward(P.init([16, 256, 256, 1], s), np.zeros(16)).value) for s in range(100)]
        assert max(vals) < 1.0

    @pytest.mark.parametrize("sizes", [[2, 1], [2, 0, 1], [2, 3, 2]])
    def test_rejects_bad_sizes(self, sizes):
        with pytest.raises(ValueError):
            P.init(sizes, 0)

    def test_biases_zero(self):
        m = P.init([3, 8, 1], 0)
        for _, b in m.weights():
            np.testing.assert_array_equal(b, 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = P.init([3, 7, 5, 1], 9, "tanh")
        P.save_checkpoint(m, tmp_path / "m.vapo")
        back = P.load_checkpoint(tmp_path / "m.vapo")
        assert back.layer_sizes == m.layer_sizes
        assert back.activation == "tanh"
        assert back.theta.tobytes() == m.theta.tobytes()

    def test_header_layout(self, tmp_path):
        m = P.init([2, 4, 1], 0)
        P.save_checkpoint(m, tmp_path / "m.vapo")
        data = (tmp_path / "m.vapo").read_bytes()
        assert data[:4] == b"VAPO"
        header = np.frombuffer(data[4:4 + 4 * 7], dtype="<u4").tolist()
        assert header == [1, 2, 3, 2, 4, 1, 0]
        assert len(data) == 4 + 4 * 7 + 8 * len(m.theta) + 4

    def test_corruption_detected(self, tmp_path):
        m = P.init([2, 4, 1], 0)
        path = tmp_path / "m.vapo"
        P.save_checkpoint(m, path)
        data = bytearray(path.read_bytes())
        data[40] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(P.CheckpointError, match="CRC"):
            P.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        m = P.init([2, 4, 1], 0)
        path = tmp_path / "m.vapo"
        P.save_checkpoint(m, path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(P.CheckpointError, match="truncated"):
            P.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.vapo"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(P.CheckpointError, match="magic"):
            P.load_checkpoint(path)
