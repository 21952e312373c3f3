import numpy as np
import pytest

from wsiscreen.dataset import Bag, SyntheticSpec, generate_synthetic
from wsiscreen.errors import ConfigError, DataError, ShapeError
from wsiscreen.metrics import auc
from wsiscreen.mil import (
    AttentionParams,
    MilConfig,
    MilHead,
    bag_embedding,
    gated_attention_forward,
    head_loss_and_grad,
    max_pool_head_forward,
    mean_pool_head_forward,
    predict,
    train_mil,
)
from wsiscreen.nn import LinearParams, bce_loss, grad_check


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def direct_gated(p: AttentionParams, Z):
    """Row-by-row evaluation, independent of the vectorised forward."""
    e = []
    for z in Z:
        h = [np.tanh(p.V[l] @ z) * _sig(p.U[l] @ z) for l in range(p.V.shape[0])]
        e.append(sum(wl * hl for wl, hl in zip(p.w, h)))
    e = np.array(e)
    a = np.exp(e - e.max())
    a = a / a.sum()
    m = sum(ai * z for ai, z in zip(a, Z))
    return _sig(p.classifier.weight[0] @ m + p.classifier.bias[0]), a


def random_head(kind, dim, rng, hidden=6):
    if kind == "gated_attention":
        s = 1 / np.sqrt(dim)
        return MilHead(
            kind,
            AttentionParams(
                rng.uniform(-s, s, (hidden, dim)),
                rng.uniform(-s, s, (hidden, dim)),
                rng.standard_normal(hidden),
                LinearParams.init(dim, 1, rng),
            ),
        )
    return MilHead(kind, LinearParams.init(dim, 1, rng))


KINDS = ["mean_pool", "max_pool", "gated_attention"]


class TestForward:
    def test_mean_pool_identical_rows(self, rng):
        head = random_head("mean_pool", 4, rng)
        z = rng.standard_normal(4)
        assert mean_pool_head_forward(head, np.tile(z, (5, 1))) == pytest.approx(
            mean_pool_head_forward(head, z[None, :]), abs=1e-15
        )

    def test_zero_classifier(self, rng):
        head = MilHead("mean_pool", LinearParams.zeros(4, 1))
        assert mean_pool_head_forward(head, rng.standard_normal((3, 4))) == 0.5

    def test_mean_pool_oracle(self, rng):
        head = random_head("mean_pool", 8, rng)
        Z = rng.standard_normal((5, 8))
        want = _sig(sum(head.params.weight[0][j] * Z[:, j].sum() / 5 for j in range(8)) + head.params.bias[0])
        assert mean_pool_head_forward(head, Z) == pytest.approx(want, abs=1e-6)

    def test_max_pool_single_instance_equals_mean(self, rng):
        head = random_head("max_pool", 4, rng)
        z = rng.standard_normal((1, 4))
        assert max_pool_head_forward(head, z) == mean_pool_head_forward(MilHead("mean_pool", head.params), z)

    def test_max_pool_duplicate_row(self, rng):
        head = random_head("max_pool", 4, rng)
        Z = rng.standard_normal((3, 4))
        assert max_pool_head_forward(head, np.vstack([Z, Z[1]])) == max_pool_head_forward(head, Z)

    def test_max_pool_oracle(self, rng):
        head = random_head("max_pool", 8, rng)
        Z = rng.standard_normal((5, 8))
        m = [max(Z[i, j] for i in range(5)) for j in range(8)]
        want = _sig(sum(w * v for w, v in zip(head.params.weight[0], m)) + head.params.bias[0])
        assert max_pool_head_forward(head, Z) == pytest.approx(want, abs=1e-6)

    def test_gated_single_instance(self, rng):
        _, a = gated_attention_forward(random_head("gated_attention", 4, rng).params, rng.standard_normal((1, 4)))
        np.testing.assert_array_equal(a, [1.0])

    def test_gated_identical_instances(self, rng):
        z = rng.standard_normal((1, 4))
        _, a = gated_attention_forward(random_head("gated_attention", 4, rng).params, np.vstack([z, z]))
        np.testing.assert_allclose(a, [0.5, 0.5], atol=1e-15)

    def test_gated_oracle(self, rng):
        head = random_head("gated_attention", 8, rng)
        Z = rng.standard_normal((4, 8))
        p, a = gated_attention_forward(head.params, Z)
        p_ref, a_ref = direct_gated(head.params, Z)
        assert p == pytest.approx(p_ref, abs=1e-6)
        np.testing.assert_allclose(a, a_ref, atol=1e-6)

    def test_zero_attention_params_is_mean_pooling(self, rng):
        head = random_head("gated_attention", 6, rng)
        head.params.V[:] = 0
        head.params.U[:] = 0
        head.params.w[:] = 0
        Z = rng.standard_normal((7, 6))
        np.testing.assert_allclose(bag_embedding(head, Z), Z.mean(axis=0), atol=1e-15)

    @pytest.mark.parametrize("kind", KINDS)
    def test_predict_matches_forward(self, kind, rng):
        head = random_head(kind, 5, rng)
        Z = rng.standard_normal((6, 5))
        fwd = {
            "mean_pool": lambda: mean_pool_head_forward(head, Z),
            "max_pool": lambda: max_pool_head_forward(head, Z),
            "gated_attention": lambda: gated_attention_forward(head.params, Z)[0],
        }[kind]()
        assert predict(head, Z)[0] == fwd

    @pytest.mark.parametrize("kind", KINDS)
    def test_permutation_invariance(self, kind, rng):
        head = random_head(kind, 5, rng)
        Z = rng.standard_normal((9, 5))
        p = predict(head, Z)[0]
        for _ in range(20):
            assert abs(predict(head, Z[rng.permutation(9)])[0] - p) <= 1e-9

    def test_attention_is_distribution(self, rng):
        head = random_head("gated_attention", 5, rng)
        for n in (1, 3, 40):
            _, a = predict(head, 3 * rng.standard_normal((n, 5)))
            assert np.all(a >= 0) and abs(a.sum() - 1) <= 1e-6

    @pytest.mark.parametrize("kind", KINDS)
    def test_empty_bag_and_dim_mismatch(self, kind, rng):
        head = random_head(kind, 5, rng)
        with pytest.raises(DataError):
            predict(head, np.zeros((0, 5)))
        with pytest.raises(ShapeError):
            predict(head, np.zeros((3, 4)))


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("label", [0, 1])
    def test_gradcheck(self, kind, label, rng):
        head = random_head(kind, 5, rng)
        Z = rng.standard_normal((6, 5))
        if kind == "max_pool":
            Z += np.arange(6)[:, None] * 0.3  # separate the column maxima from runner-up values

        def loss(d):
            h = head.with_dict(d)
            return bce_loss(predict(h, Z)[0], label)[0]

        _, _, grads = head_loss_and_grad(head, Z, label)
        assert grad_check(loss, head.to_dict(), grads).ok(1e-4)


@pytest.fixture(scope="module")
def mil_data(tmp_path_factory):
    spec = SyntheticSpec(n_bags=40, instances_per_bag=(8, 12), dim=6, planted_per_positive=(3, 5), separation=4.0, seed=8)
    m = generate_synthetic(spec, tmp_path_factory.mktemp("mil"))
    return m.load_bags()


class TestTraining:
    def test_zero_epochs_returns_init(self, mil_data):
        res = train_mil(mil_data, MilConfig(epochs=0, hidden=8, seed=3))
        init = MilHead.init("gated_attention", 6, np.random.default_rng(3), hidden=8)
        for k, v in init.to_dict().items():
            np.testing.assert_array_equal(res.head.to_dict()[k], v)
        assert res.log == []

    def test_gated_separable_train_auc(self, mil_data):
        res = train_mil(mil_data, MilConfig(epochs=30, lr=2e-3, hidden=16, seed=0))
        scores = [predict(res.head, b.embeddings)[0] for b in mil_data]
        assert auc(scores, [b.label for b in mil_data]) >= 0.99

    def test_deterministic_checkpoints(self, mil_data, tmp_path):
        cfg = MilConfig(epochs=3, hidden=8, seed=5)
        train_mil(mil_data, cfg).head.save(tmp_path / "a.prm")
        train_mil(mil_data, cfg).head.save(tmp_path / "b.prm")
        assert (tmp_path / "a.prm").read_bytes() == (tmp_path / "b.prm").read_bytes()

    def test_log_per_epoch(self, mil_data):
        res = train_mil(mil_data, MilConfig(head="mean_pool", epochs=4, seed=1))
        assert [e for e, _, _ in res.log] == [1, 2, 3, 4]
        assert res.log[0][2] == 2e-4

    def test_single_class_rejected(self, rng):
        with pytest.raises(ConfigError):
            train_mil([Bag("a", rng.standard_normal((3, 2)), 0)] * 3, MilConfig(epochs=1))

    @pytest.mark.parametrize("kind", KINDS)
    def test_checkpoint_round_trip(self, kind, rng, tmp_path):
        head = random_head(kind, 4, rng)
        back = MilHead.load(head.save(tmp_path / "h.prm"))
        assert back.kind == kind
        Z = rng.standard_normal((3, 4))
        assert predict(back, Z)[0] == pytest.approx(predict(head, Z)[0], abs=1e-6)
