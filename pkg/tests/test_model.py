"""Encoder shapes, head wiring, attention transforms, and end-to-end gradients."""

import numpy as np
import pytest

import hikfs.autodiff as ad
from hikfs.autodiff import Tensor
from hikfs.hierarchy import ClassHierarchy, hierarchical_nll
from hikfs.memory import build_meta_memory, bank_slot_list
from hikfs.model import (
    EncoderConfig,
    ModelParams,
    combine_logits,
    forward_full,
    head_plan,
    norm_groups,
)

from helpers import check_param_grads


class TestEncoderConfig:
    def test_conv4_output_dim_28(self):
        cfg = EncoderConfig.conv4(image_size=28, channels=(8, 8, 8, 8))
        assert cfg.feature_dim == 8  # 28 -> 14 -> 7 -> 3 -> 1

    def test_conv4_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            EncoderConfig.conv4(image_size=8)

    def test_norm_groups_divides(self):
        assert norm_groups(16) == 8
        assert norm_groups(8) == 8
        assert norm_groups(12) == 6
        assert norm_groups(7) == 7
        assert norm_groups(5) == 5
        assert norm_groups(3) == 3


class TestEncode:
    def test_identity_single_layer_is_relu(self):
        cfg = EncoderConfig.mlp(3, hidden=(), out_dim=3)
        params = ModelParams(cfg, 4, 2, rng=np.random.default_rng(0))
        params.tensors["encoder.W0"].data = np.eye(3)
        x = np.array([[1.0, -2.0, 0.5], [-1.0, 3.0, -0.1]])
        out = params.encode(x).data
        np.testing.assert_array_equal(out, np.maximum(x, 0.0))

    def test_batch_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        params = ModelParams(EncoderConfig.mlp(5, (7,), 6), 4, 2, rng=rng)
        x = rng.normal(size=(10, 5))
        perm = rng.permutation(10)
        f = params.encode(x).data
        fp = params.encode(x[perm]).data
        np.testing.assert_allclose(fp, f[perm], atol=1e-12)

    def test_conv4_shape_28x28(self):
        params = ModelParams(EncoderConfig.conv4(), 4, 2,
                             rng=np.random.default_rng(2))
        x = np.random.default_rng(3).random((2, 1, 28, 28))
        assert params.encode(x).shape == (2, 8)

    def test_wrong_input_shape_rejected(self):
        params = ModelParams(EncoderConfig.mlp(5, (), 4), 4, 2,
                             rng=np.random.default_rng(4))
        with pytest.raises(ValueError, match="expected"):
            params.encode(np.ones((3, 6)))


class TestHeads:
    def test_mlp_logits_affine(self):
        params = ModelParams(EncoderConfig.mlp(3, (), 3), 4, 2,
                             rng=np.random.default_rng(5))
        params.tensors["fine_mlp.W"].data = np.eye(3, 4)
        params.tensors["fine_mlp.b"].data = np.array([0.0, 0.0, 0.0, 1.0])
        f = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(params.mlp_logits("fine", f).data,
                                   [[1.0, 2.0, 3.0, 1.0]], atol=1e-15)

    def test_combine_is_elementwise_sum(self):
        a = Tensor(np.array([[1.0, 2.0]]))
        b = Tensor(np.array([[10.0, 20.0]]))
        np.testing.assert_array_equal(combine_logits([a, b]).data, [[11.0, 22.0]])
        with pytest.raises(ValueError, match="combine"):
            combine_logits([a, Tensor(np.ones((1, 3)))])

    def test_default_wiring_table(self):
        sup = head_plan("supervised")
        assert sup.fine_parts == ("mlp", "knn")
        assert sup.coarse_parts == ("mlp",)
        meta = head_plan("meta")
        assert meta.fine_parts == ("knn",)
        assert meta.coarse_parts == ("mlp", "knn")

    def test_ablation_fallbacks(self):
        assert head_plan("meta", use_knn=False).fine_parts == ("mlp",)
        assert head_plan("meta", use_mlp=False).coarse_parts == ("knn",)
        assert head_plan("supervised", use_knn=False).fine_parts == ("mlp",)
        with pytest.raises(ValueError):
            head_plan("supervised", use_mlp=False, use_knn=False)


class TestAttentionTransforms:
    def test_identity_at_init(self):
        rng = np.random.default_rng(6)
        params = ModelParams(EncoderConfig.mlp(4, (), 4), 4, 2, rng=rng)
        f = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_array_equal(params.transform_query(f).data, f.data)
        np.testing.assert_array_equal(params.transform_slots(f).data, f.data)

    def test_attention_off_is_identity_without_params(self):
        params = ModelParams(EncoderConfig.mlp(4, (), 4), 4, 2, attention=False,
                             rng=np.random.default_rng(7))
        assert not any(n.startswith("attn") for n in params.tensors)
        f = Tensor(np.ones((2, 4)))
        assert params.transform_query(f) is f

    def test_transform_differentiable_after_perturbation(self):
        rng = np.random.default_rng(8)
        params = ModelParams(EncoderConfig.mlp(4, (), 4), 4, 2, rng=rng)
        params.tensors["attn_g.W2"].data = rng.normal(size=(4, 4)) * 0.3
        f = rng.normal(size=(6, 4))
        check_param_grads(
            lambda: ad.mean(ad.mul(params.transform_query(Tensor(f)),
                                   rng.normal(size=(6, 4)) * 0 + 1.5)),
            params.named_tensors(["attn_g."]))


class TestForwardFull:
    def _setup(self):
        # positive inputs through an identity first layer keep encoded
        # features away from the zero vector, which cosine scoring rejects
        rng = np.random.default_rng(9)
        hier = ClassHierarchy([0, 0, 1, 1])
        params = ModelParams(EncoderConfig.mlp(6, (), 6), 4, 2,
                             rng=rng)
        params.tensors["encoder.W0"].data = np.eye(6)
        sup = [rng.random((3, 6)) + 0.05 for _ in range(4)]
        bank = build_meta_memory(sup, "mem2", metric="dot_cosine", k=1)
        return rng, hier, params, bank

    def test_supervised_composition_matches_manual(self):
        rng, hier, params, bank = self._setup()
        x = rng.random((5, 6)) + 0.05
        plan = head_plan("supervised")
        a, b = forward_full(params, x, plan=plan,
                            fine_slots=bank_slot_list(bank), k=1,
                            metric="dot_cosine")
        f = params.encode(x)
        from hikfs.memory import knn_logits
        manual_a = ad.add(params.mlp_logits("fine", f),
                          knn_logits(f, bank_slot_list(bank),
                                     params.transform_query,
                                     params.transform_slots, "dot_cosine", 1))
        manual_b = params.mlp_logits("coarse", f)
        np.testing.assert_allclose(a.data, manual_a.data, atol=1e-12)
        np.testing.assert_allclose(b.data, manual_b.data, atol=1e-12)

    def test_knn_ablation_equals_mlp_alone(self):
        rng, hier, params, bank = self._setup()
        x = rng.normal(size=(5, 6))
        plan = head_plan("supervised", use_knn=False)
        a, b = forward_full(params, x, plan=plan)
        f = params.encode(x)
        np.testing.assert_allclose(a.data, params.mlp_logits("fine", f).data,
                                   atol=1e-12)

    def test_missing_memory_rejected(self):
        rng, hier, params, bank = self._setup()
        with pytest.raises(ValueError, match="fine_slots"):
            forward_full(params, rng.normal(size=(2, 6)),
                         plan=head_plan("supervised"))

    def test_column_restriction(self):
        rng, hier, params, bank = self._setup()
        x = rng.normal(size=(3, 6))
        plan = head_plan("supervised", use_knn=False)
        a_full, b_full = forward_full(params, x, plan=plan)
        ids = np.array([2, 0])
        a_sub, b_sub = forward_full(params, x, plan=plan, fine_ids=ids,
                                    coarse_ids=np.array([1]))
        np.testing.assert_array_equal(a_sub.data, a_full.data[:, ids])
        np.testing.assert_array_equal(b_sub.data, b_full.data[:, [1]])

    def test_end_to_end_gradients_supervised(self):
        # toy scale: d = 6, four fine classes over two coarse classes
        rng, hier, params, bank = self._setup()
        x = rng.random((4, 6)) + 0.05
        y = np.array([0, 1, 2, 3])
        plan = head_plan("supervised")

        def loss():
            a, b = forward_full(params, x, plan=plan,
                                fine_slots=bank_slot_list(bank), k=1,
                                metric="dot_cosine")
            return hierarchical_nll(a, b, y, hier)

        check_param_grads(loss, params.named_tensors())

    def test_end_to_end_gradients_meta(self):
        rng = np.random.default_rng(10)
        hier = ClassHierarchy([0, 0, 1])
        params = ModelParams(EncoderConfig.mlp(5, (), 5), 3, 2, setting="meta",
                             rng=rng)
        sup = [rng.normal(size=(2, 5)) for _ in range(3)]
        bank = build_meta_memory(sup, "mem1", metric="neg_euclidean", k=1)
        coarse_bank = build_meta_memory(
            [np.concatenate([sup[0], sup[1]]), sup[2]], "mem2",
            metric="neg_euclidean", k=1)
        x = rng.normal(size=(4, 5))
        y = np.array([0, 1, 2, 0])
        plan = head_plan("meta")

        def loss():
            a, b = forward_full(params, x, plan=plan,
                                fine_slots=bank_slot_list(bank),
                                coarse_slots=bank_slot_list(coarse_bank),
                                k=1, metric="neg_euclidean")
            return hierarchical_nll(a, b, y, hier)

        # the fine head is scoring-only here, so its linear map stays unused
        named = {n: t for n, t in params.named_tensors().items()
                 if not n.startswith("fine_mlp.")}
        check_param_grads(loss, named)


class TestStateRoundTrip:
    def test_save_load_bitwise(self, tmp_path):
        from hikfs.checkpoint import load_arrays, save_arrays
        rng = np.random.default_rng(11)
        params = ModelParams(EncoderConfig.mlp(5, (7,), 6), 4, 2, rng=rng)
        path = tmp_path / "params.ckpt"
        save_arrays(path, params.state_arrays())
        clone = ModelParams(EncoderConfig.mlp(5, (7,), 6), 4, 2,
                            rng=np.random.default_rng(999))
        clone.load_state(load_arrays(path))
        for name, t in params.tensors.items():
            assert np.array_equal(clone.tensors[name].data, t.data)

    def test_init_deterministic_from_stream(self):
        a = ModelParams(EncoderConfig.mlp(5, (7,), 6), 4, 2,
                        rng=np.random.default_rng(42))
        b = ModelParams(EncoderConfig.mlp(5, (7,), 6), 4, 2,
                        rng=np.random.default_rng(42))
        for name in a.tensors:
            assert np.array_equal(a.tensors[name].data, b.tensors[name].data)
