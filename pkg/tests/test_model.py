import math

import numpy as np
import pytest

from fedncf.model import (
    AdamState,
    DenseLayer,
    GlobalModel,
    ModelConfig,
    UserVector,
    adam_step,
    backward,
    batch_loss,
    bce_loss,
    forward,
    init_model,
    init_user,
    load_parameters,
    predict_scores,
    save_parameters,
)

KINDS = ["gmf", "mlp", "neumf"]


def fd_gradient(f, arr, index, eps=1e-5):
    """Central finite difference of scalar f() w.r.t. arr[index] (mutated in place)."""
    old = arr[index]
    arr[index] = old + eps
    up = f()
    arr[index] = old - eps
    down = f()
    arr[index] = old
    return (up - down) / (2 * eps)


def random_case(kind, rng, scale=0.5):
    D = int(rng.integers(1, 6))
    hidden = None if kind == "gmf" else tuple(int(h) for h in rng.integers(1, 7, size=rng.integers(1, 4)))
    N = int(rng.integers(3, 12))
    cfg = ModelConfig(kind, D, hidden, N)
    model = init_model(cfg, rng)
    # move away from the tiny init so every path carries signal
    for arr in model.parameters().values():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    user = UserVector(
        rng.normal(0, scale, D) if cfg.has_gmf else None,
        rng.normal(0, scale, D) if cfg.has_mlp else None,
    )
    B = int(rng.integers(1, 9))
    items = rng.integers(0, N, size=B)
    labels = rng.integers(0, 2, size=B).astype(float)
    return model, user, items, labels


class TestConfig:
    def test_defaults(self):
        assert ModelConfig("mlp", num_items=5).hidden_layers == (48, 24, 12, 6)
        assert ModelConfig("gmf", num_items=5).hidden_layers == ()

    @pytest.mark.parametrize(
        "kwargs", [dict(kind="gmf", hidden_layers=(4,)), dict(kind="mlp", hidden_layers=()), dict(kind="svd")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(num_items=5, **kwargs)


class TestInit:
    def test_gmf_xavier_bound(self):
        model = init_model(ModelConfig("gmf", 12, num_items=1000), np.random.default_rng(0))
        assert np.all(np.abs(model.output.weights) <= math.sqrt(6 / 13))
        assert np.all(model.output.biases == 0)

    def test_xavier_bounds_all_layers(self):
        model = init_model(ModelConfig("neumf", 12, num_items=50), np.random.default_rng(1))
        for layer in [*model.tower, model.output]:
            out_dim, in_dim = layer.weights.shape
            assert np.all(np.abs(layer.weights) <= math.sqrt(6 / (in_dim + out_dim)))
            assert np.all(layer.biases == 0)

    def test_neumf_has_both_embeddings(self):
        model = init_model(ModelConfig("neumf", 12, num_items=1000), np.random.default_rng(0))
        assert model.item_gmf.shape == model.item_mlp.shape == (1000, 12)

    def test_deterministic(self):
        cfg = ModelConfig("neumf", 8, num_items=30)
        a = init_model(cfg, np.random.default_rng(4)).parameters()
        b = init_model(cfg, np.random.default_rng(4)).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_embedding_scale(self):
        model = init_model(ModelConfig("gmf", 12, num_items=5000), np.random.default_rng(0))
        assert abs(model.item_gmf.std() - 0.01) < 5e-4


class TestForward:
    def test_zero_output_layer_gives_half(self):
        model = init_model(ModelConfig("gmf", 4, num_items=10), np.random.default_rng(0))
        model.output.weights[:] = 0
        pred, _ = forward(model, init_user(model.config, np.random.default_rng(1)), np.arange(10))
        np.testing.assert_array_equal(pred, 0.5)

    def test_closed_form_gmf(self):
        cfg = ModelConfig("gmf", 1, num_items=1)
        model = GlobalModel(cfg, np.array([[3.0]]), None, [], DenseLayer(np.array([[1.0]]), np.array([0.0])))
        pred, _ = forward(model, UserVector(gmf=np.array([2.0])), [0])
        assert pred[0] == pytest.approx(1 / (1 + math.exp(-6)), abs=1e-12)
        assert pred[0] == pytest.approx(0.99753, abs=1e-5)

    def test_neumf_prediction_width(self):
        model = init_model(ModelConfig("neumf", 12, num_items=20), np.random.default_rng(0))
        _, cache = forward(model, init_user(model.config, np.random.default_rng(0)), [1, 2, 3])
        assert cache.features.shape == (3, 18)

    def test_item_out_of_range(self):
        model = init_model(ModelConfig("gmf", 4, num_items=10), np.random.default_rng(0))
        with pytest.raises(IndexError):
            forward(model, init_user(model.config, np.random.default_rng(0)), [10])

    @pytest.mark.parametrize("kind", KINDS)
    def test_outputs_in_open_interval(self, kind):
        rng = np.random.default_rng(3)
        model, user, items, labels = random_case(kind, rng, scale=2.0)
        pred, _ = forward(model, user, items)
        assert np.all((pred > 0) & (pred < 1))
        assert np.isfinite(batch_loss(model, user, items, labels))


class TestBCE:
    def test_values(self):
        assert bce_loss(0.5, 1) == pytest.approx(math.log(2))
        assert bce_loss(0.5, 0) == pytest.approx(math.log(2))
        assert bce_loss(1.0, 1) == pytest.approx(1e-7, rel=1e-3)
        assert bce_loss(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-3)

    def test_clamped_is_finite(self):
        assert np.isfinite(bce_loss(0.0, 1)) and bce_loss(0.0, 1) == pytest.approx(-math.log(1e-7))


class TestBackward:
    def test_gmf_bias_gradient_single_instance(self):
        cfg = ModelConfig("gmf", 1, num_items=1)
        model = GlobalModel(cfg, np.array([[1.0]]), None, [], DenseLayer(np.array([[1.0]]), np.array([0.0])))
        user = UserVector(gmf=np.array([1.0]))
        _, cache = forward(model, user, [0])
        grads = backward(model, user, [0], [1.0], cache)
        oracle = fd_gradient(lambda: batch_loss(model, user, [0], [1.0]), model.output.biases, 0)
        assert grads.dense["output.bias"][0] == pytest.approx(oracle, abs=1e-6)
        assert grads.dense["output.bias"][0] == pytest.approx(-0.2689414, abs=1e-6)

    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_gradient_at_exact_predictions(self, kind):
        model, user, items, _ = random_case(kind, np.random.default_rng(0))
        model.output.weights[:] = 0.0
        model.output.biases[:] = 60.0
        labels = np.ones(len(items))
        _, cache = forward(model, user, items)
        grads = backward(model, user, items, labels, cache)
        for g in [*grads.dense.values(), *grads.user.values(), *(r for _, r in grads.items.values())]:
            assert np.max(np.abs(g)) < 1e-6

    def test_sparsity(self):
        model = init_model(ModelConfig("neumf", 4, num_items=20), np.random.default_rng(0))
        user = init_user(model.config, np.random.default_rng(1))
        items = np.array([3, 7, 3, 11])
        _, cache = forward(model, user, items)
        grads = backward(model, user, items, np.array([1.0, 0, 1, 0]), cache)
        for ids, rows in grads.items.values():
            assert ids.tolist() == [3, 7, 11]
            assert rows.shape == (3, 4)

    def test_cache_mismatch(self):
        model = init_model(ModelConfig("gmf", 4, num_items=20), np.random.default_rng(0))
        user = init_user(model.config, np.random.default_rng(1))
        _, cache = forward(model, user, [1, 2])
        with pytest.raises(ValueError):
            backward(model, user, [1, 3], [1, 0], cache)

    @pytest.mark.parametrize("kind", KINDS)
    def test_per_row_users_match_shared_vector(self, kind):
        rng = np.random.default_rng(7)
        model, user, items, labels = random_case(kind, rng)
        _, cache = forward(model, user, items)
        shared = backward(model, user, items, labels, cache)
        rows = UserVector(
            None if user.gmf is None else np.tile(user.gmf, (len(items), 1)),
            None if user.mlp is None else np.tile(user.mlp, (len(items), 1)),
        )
        _, cache = forward(model, rows, items)
        per_row = backward(model, rows, items, labels, cache)
        for name, g in shared.user.items():
            np.testing.assert_allclose(per_row.user[name].sum(axis=0), g, atol=1e-14)

    @pytest.mark.parametrize("kind", KINDS)
    def test_finite_differences(self, kind):
        rng = np.random.default_rng(11)
        for _ in range(5):
            model, user, items, labels = random_case(kind, rng)
            check_gradients(model, user, items, labels)


def check_gradients(model, user, items, labels, eps=1e-5, rtol=1e-4, floor=1e-6):
    """Compare every analytic gradient entry against central differences.

    The relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    vanishing gradients (dead ReLU units) from dividing by zero. Returns the
    worst error per parameter class and raises AssertionError on failure.
    """
    loss = lambda: batch_loss(model, user, items, labels)
    _, cache = forward(model, user, items)
    grads = backward(model, user, items, labels, cache)
    worst = {}

    def compare(cls, analytic, numeric, where):
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst[cls] = max(worst.get(cls, 0.0), err)
        assert err < rtol, f"{where}: analytic {analytic} vs numeric {numeric}"

    for name, g in grads.dense.items():
        arr = model.dense_parameters()[name]
        cls = "bias" if name.endswith("bias") else "weight"
        for idx in np.ndindex(arr.shape):
            compare(cls, g[idx], fd_gradient(loss, arr, idx, eps), f"{name}{idx}")
    for name, (ids, rows) in grads.items.items():
        arr = model.item_matrices()[name]
        for r, item in enumerate(ids):
            for d in range(arr.shape[1]):
                compare("item", rows[r, d], fd_gradient(loss, arr, (item, d), eps), f"{name}[{item},{d}]")
        untouched = sorted(set(range(arr.shape[0])) - set(ids.tolist()))
        for item in untouched[:2]:
            assert fd_gradient(loss, arr, (item, 0), eps) == 0.0
    for name, g in grads.user.items():
        arr = user.parameters()[name]
        for idx in np.ndindex(arr.shape):
            compare("user", g[idx], fd_gradient(loss, arr, idx, eps), f"{name}{idx}")
    return worst


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.array([1.0, -2.0]), "e": np.ones((4, 2))}
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState()
        adam_step(state, params, {"w": np.zeros(2), "e": (np.array([1, 3]), np.zeros((2, 2)))}, 1e-3)
        assert state.t == 1
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_first_step_magnitude(self):
        # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        params = {"x": np.array([0.0])}
        adam_step(AdamState(), params, {"x": np.array([1.0])}, 1e-3)
        assert params["x"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
        assert abs(params["x"][0]) == pytest.approx(0.00099999999, rel=1e-9)

    def test_sparse_rows_only(self):
        params = {"e": np.arange(12.0).reshape(6, 2)}
        before = params["e"].copy()
        state = AdamState()
        rng = np.random.default_rng(0)
        for _ in range(3):
            adam_step(state, params, {"e": (np.array([0, 4]), rng.normal(size=(2, 2)))}, 0.1)
        untouched = [1, 2, 3, 5]
        np.testing.assert_array_equal(params["e"][untouched], before[untouched])
        assert not np.allclose(params["e"][[0, 4]], before[[0, 4]])

    def test_sparse_matches_dense_when_all_rows_present(self):
        rng = np.random.default_rng(1)
        a = {"e": rng.normal(size=(3, 2))}
        b = {"e": a["e"].copy()}
        sa, sb = AdamState(), AdamState()
        for _ in range(4):
            g = rng.normal(size=(3, 2))
            adam_step(sa, a, {"e": g}, 0.01)
            adam_step(sb, b, {"e": (np.arange(3), g)}, 0.01)
        np.testing.assert_allclose(a["e"], b["e"], rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), {"x": np.zeros(3)}, {"x": np.zeros(4)})

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(2)
            params = {"x": rng.normal(size=5)}
            state = AdamState()
            for _ in range(2):
                adam_step(state, params, {"x": rng.normal(size=5)}, 1e-3)
            return params["x"]

        assert run().tobytes() == run().tobytes()


class TestPredictScores:
    def setup_method(self):
        self.model = init_model(ModelConfig("neumf", 6, num_items=30), np.random.default_rng(0))
        self.user = init_user(self.model.config, np.random.default_rng(1))

    def test_single_matches_forward(self):
        pred, _ = forward(self.model, self.user, [5])
        assert predict_scores(self.model, self.user, [5])[0] == pred[0]

    def test_empty(self):
        assert predict_scores(self.model, self.user, []).tolist() == []

    def test_permutation(self):
        items = np.array([4, 9, 1, 22])
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_array_equal(
            predict_scores(self.model, self.user, items)[perm],
            predict_scores(self.model, self.user, items[perm]),
        )

    def test_no_mutation(self):
        before = {k: v.copy() for k, v in self.model.parameters().items()}
        predict_scores(self.model, self.user, [1, 2])
        for k, v in self.model.parameters().items():
            np.testing.assert_array_equal(v, before[k])


def test_parameter_dump_round_trip(tmp_path):
    model = init_model(ModelConfig("neumf", 3, (4, 2), 5), np.random.default_rng(0))
    save_parameters(model, tmp_path / "params.txt")
    loaded = load_parameters(tmp_path / "params.txt")
    assert list(loaded) == list(model.parameters())
    for name, arr in model.parameters().items():
        np.testing.assert_array_equal(loaded[name], arr)
