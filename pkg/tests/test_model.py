import numpy as np
import pytest

from csa_ts import tensor as T
from csa_ts.errors import ContractError, ShapeError, UnseenClassError, UnsupportedVariantError
from csa_ts.model import (
    ClassSpecificHead,
    FcnModel,
    ModelConfig,
    Variant,
    argmax_first,
    backbone_forward,
    csa_features,
    dense_param_count,
    head_forward,
)
from csa_ts.nn import Dense, cross_entropy_loss
from csa_ts.tensor import Tensor

TINY = dict(n_vars=2, n_steps=8, n_classes=2, filters=(8, 16, 8), attn_features=4)


def tiny_model(variant="csa", seed=0, **overrides):
    return FcnModel(ModelConfig(variant=Variant(variant), **{**TINY, **overrides}), seed=seed)


def tiny_batch(seed=0, n=4):
    rng = np.random.default_rng(seed)
    labels = np.array([0, 1] * (n // 2))
    return rng.normal(size=(n, 2, 8)), labels


class TestBackbone:
    def test_default_widths(self):
        with T.precision("float32"):
            model = FcnModel(ModelConfig(Variant.BASELINE, n_vars=3, n_steps=12, n_classes=2))
        l = backbone_forward(model.backbone, Tensor(np.ones((2, 3, 12), dtype=np.float32)), training=False)
        assert l.shape == (2, 12, 128)
        shapes = [(name, p.shape) for name, p in model.backbone.named_parameters() if name.endswith("kernel")]
        assert [s for _, s in shapes] == [(128, 3, 8), (256, 128, 5), (128, 256, 3)]

    @pytest.mark.parametrize("t", [1, 5, 17])
    def test_time_extent_preserved(self, t):
        with T.precision("float64"):
            model = tiny_model("baseline", n_steps=t)
            l = backbone_forward(model.backbone, Tensor(np.ones((2, 2, t))), training=True)
        assert l.shape == (2, t, 8)

    def test_eval_calls_agree_bitwise(self):
        with T.precision("float64"):
            model = tiny_model("baseline")
            x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 8)))
            a = backbone_forward(model.backbone, x, training=False).data
            b = backbone_forward(model.backbone, x, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_variable_count(self):
        with T.precision("float64"):
            model = tiny_model("baseline")
            with pytest.raises(ShapeError):
                backbone_forward(model.backbone, Tensor(np.ones((1, 3, 8))), training=False)


@pytest.fixture
def float64():
    with T.precision("float64"):
        yield


@pytest.mark.usefixtures("float64")
class TestHead:
    def head(self, c=2, f=2):
        return ClassSpecificHead(c, f, np.random.default_rng(0))

    def test_dot_product_by_hand(self):
        head = self.head()
        head.omega.data = np.ones((2, 2, 1))
        logits = head_forward(head, Tensor([[[1.0, 2.0], [0.0, 0.0]]]))
        assert logits.data[0, 0] == 3.0

    def test_zero_weights_give_biases(self):
        head = self.head(c=3)
        head.omega.data[:] = 0
        head.beta.data = np.array([0.5, -1.0, 2.0])
        logits = head_forward(head, Tensor(np.random.default_rng(1).normal(size=(4, 3, 2))))
        np.testing.assert_array_equal(logits.data, np.tile([0.5, -1.0, 2.0], (4, 1)))

    def test_class_slice_isolation(self):
        head = self.head(c=3, f=4)
        g = np.random.default_rng(2).normal(size=(2, 3, 4))
        base = head_forward(head, Tensor(g)).data
        g2 = g.copy()
        g2[:, 1] += 5.0
        moved = head_forward(head, Tensor(g2)).data
        np.testing.assert_array_equal(moved[:, [0, 2]], base[:, [0, 2]])
        # and through autodiff: d logit[n, 0] / d G[n, c'] vanishes for c' != 0
        gt = Tensor(g, requires_grad=True)
        pick = np.zeros((2, 3))
        pick[:, 0] = 1
        (head_forward(head, gt) * Tensor(pick)).sum().backward()
        assert not gt.grad[:, 1:].any()
        assert gt.grad[:, 0].any()

    def test_parameter_parity_with_dense(self):
        for c, f in [(2, 128), (5, 64), (26, 128)]:
            head = ClassSpecificHead(c, f, np.random.default_rng(0))
            dense = Dense(f, c, np.random.default_rng(0))
            n_head = sum(p.data.size for p in head.parameters())
            assert n_head == sum(p.data.size for p in dense.parameters()) == dense_param_count(f, c) == c * (f + 1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            head_forward(self.head(), Tensor(np.ones((1, 3, 2))))


@pytest.mark.usefixtures("float64")
class TestModelForward:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_logit_shape(self, variant):
        model = tiny_model(variant)
        x, y = tiny_batch()
        assert model.forward(x, y, training=True).shape == (4, 2)
        assert model.forward(x, training=False).shape == (4, 2)

    def test_backbones_share_parameter_shapes(self):
        shapes = {v: [p.shape for _, p in tiny_model(v).backbone.named_parameters()] for v in Variant}
        assert shapes[Variant.BASELINE] == shapes[Variant.CSA] == shapes[Variant.CSA_NOCD]

    def test_csa_training_needs_labels(self):
        with pytest.raises(ContractError):
            tiny_model().forward(tiny_batch()[0], training=True)

    def test_duplicates_get_equal_logits_at_init(self):
        model = tiny_model()
        x, y = tiny_batch()
        model.forward(x, y, training=True)
        dup = np.stack([x[0], x[0], x[0]])
        logits = model.forward(dup, training=False).data
        np.testing.assert_array_equal(logits[0], logits[1])
        np.testing.assert_array_equal(logits[0], logits[2])

    @pytest.mark.parametrize("variant", list(Variant))
    def test_end_to_end_gradients(self, variant):
        model = tiny_model(variant)
        if model.csa is not None:
            model.csa.sigma.data = np.array(0.7)
        x, y = tiny_batch(seed=3)
        buffers = {name: np.array(b, copy=True) for name, b in model.named_buffers()}

        def loss():
            # running statistics and stored attention must not drift between evaluations
            for name, b in buffers.items():
                model._set_buffer(name, b.copy())
            return cross_entropy_loss(model.forward(x, y, training=True), y)

        T.grad_check(loss, dict(model.named_parameters())).raise_if_failed()

    def test_nocd_equals_csa_when_class_slices_agree(self):
        csa_model, nocd_model = tiny_model("csa", seed=5), tiny_model("csa-nocd", seed=5)
        for m in (csa_model, nocd_model):
            m.csa.sigma.data = np.array(0.9)
        x = np.random.default_rng(4).normal(size=(1, 2, 8))
        x = np.concatenate([x, x])  # same series once per class: every S slice is identical
        y = np.array([0, 1])
        a = csa_model.forward(x, y, training=True).data
        b = nocd_model.forward(x, y, training=True).data
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(csa_model.csa.global_attention, nocd_model.csa.global_attention)


class TestPredict:
    @pytest.mark.parametrize("logits,expected", [
        ([[0.1, 0.9]], [1]),
        ([[0.5, 0.5]], [0]),
        ([[0.2, 0.7, 0.7]], [1]),
    ])
    def test_argmax_ties_to_smallest(self, logits, expected):
        assert argmax_first(np.array(logits)).tolist() == expected

    def test_shift_invariance(self):
        logits = np.random.default_rng(0).normal(size=(6, 4))
        np.testing.assert_array_equal(argmax_first(logits), argmax_first(logits + 3.0))

    def test_unseen_class_refused(self):
        with T.precision("float64"):
            model = tiny_model()
            x, _ = tiny_batch()
            model.forward(x, np.zeros(4, dtype=int), training=True)
            with pytest.raises(UnseenClassError):
                model.predict(x)

    def test_permuting_inputs_permutes_predictions(self):
        with T.precision("float64"):
            model = tiny_model()
            model.csa.sigma.data = np.array(1.5)
            x, y = tiny_batch(n=8)
            model.forward(x, y, training=True)
            perm = np.random.default_rng(0).permutation(8)
            np.testing.assert_array_equal(model.predict(x)[perm], model.predict(x[perm]))


class TestCheckpoint:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_round_trip(self, tmp_path, variant):
        with T.precision("float64"):
            model = tiny_model(variant, class_names=["a", "b"])
            x, y = tiny_batch()
            model.forward(x, y, training=True)
            model.save(tmp_path / "m.npz")
            loaded = FcnModel.load(tmp_path / "m.npz")
            assert loaded.config == model.config
            np.testing.assert_array_equal(loaded.forward(x).data, model.forward(x).data)
            if model.csa is not None:
                np.testing.assert_array_equal(loaded.csa.global_attention, model.csa.global_attention)
                assert loaded.csa.class_seen.all()


@pytest.mark.usefixtures("float64")
class TestCsaFeatures:
    def test_zero_sigma_slices_equal_backbone(self):
        model = tiny_model()
        x, y = tiny_batch()
        model.forward(x, y, training=True)
        l, o = csa_features(model, x)
        for c in range(2):
            np.testing.assert_array_equal(o.data[:, c], l.data)

    def test_with_labels_uses_batch_attention_and_leaves_state(self):
        model = tiny_model()
        model.csa.sigma.data = np.array(1.0)
        x, y = tiny_batch()
        model.forward(x, y, training=True)
        before = model.csa.global_attention.copy()
        _, with_labels = csa_features(model, x, y)
        _, without = csa_features(model, x)
        np.testing.assert_array_equal(model.csa.global_attention, before)
        assert with_labels.shape == without.shape == (4, 2, 8, 8)

    def test_baseline_rejected(self):
        with pytest.raises(UnsupportedVariantError):
            csa_features(tiny_model("baseline"), tiny_batch()[0])
