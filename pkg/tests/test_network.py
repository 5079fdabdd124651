import pytest
import torch

from amtnet.errors import CacheFormatError, InvalidInput, NumericalError, ShapeError, UnsupportedOperation
from amtnet.network import (
    BasicBlock,
    branch_forward,
    embed,
    init_params,
    load_checkpoint,
    parameter_count,
    partition_parameters,
    predict_heads,
    predict_recognition,
    prune_aux,
    save_checkpoint,
    shared_forward,
)

SMALL = 1.0 / 8.0


@pytest.fixture
def small_model():
    model = init_params(12, 3, seed=0, width=SMALL)
    model.eval()
    return model


class TestInitParams:
    def test_same_seed_same_parameters(self):
        a = init_params(12, 3, seed=5, width=SMALL).state_dict()
        b = init_params(12, 3, seed=5, width=SMALL).state_dict()
        assert a.keys() == b.keys()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_head_dimensions(self):
        model = init_params(12, 3, seed=0)
        assert (model.fc.in_features, model.fc.out_features) == (512, 12)
        assert (model.dis.in_features, model.dis.out_features) == (512, 3)

    def test_branches_drawn_independently(self, small_model):
        assert not torch.equal(small_model.main.layer1[0].conv1.weight, small_model.aux.layer1[0].conv1.weight)

    def test_global_rng_untouched(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        init_params(12, 2, seed=9, width=SMALL)
        assert torch.equal(torch.rand(3), expected)

    def test_invalid_arguments(self):
        with pytest.raises(InvalidInput):
            init_params(12, 4, seed=0)
        with pytest.raises(InvalidInput):
            init_params(1, 2, seed=0)


class TestSharedForward:
    def test_full_length_segment(self):
        model = init_params(12, 3, seed=0).eval()
        with torch.no_grad():
            assert tuple(shared_forward(model, torch.randn(1, 1200, 399)).shape) == (64, 300, 100)
            assert tuple(shared_forward(model, torch.randn(1, 600, 399)).shape) == (64, 150, 100)

    def test_zero_input_gives_zero_output(self, small_model):
        with torch.no_grad():
            r = shared_forward(small_model, torch.zeros(1, 40, 40))
        assert torch.equal(r, torch.zeros_like(r))

    def test_non_finite_input_rejected(self, small_model):
        x = torch.zeros(1, 40, 40)
        x[0, 3, 3] = float("nan")
        with pytest.raises(NumericalError):
            shared_forward(small_model, x)


class TestBranchForward:
    def test_stage_shapes(self, small_model):
        with torch.no_grad():
            maps = small_model.main.feature_map(torch.randn(1, 8, 300, 100))
            pooled = branch_forward(small_model.main, torch.randn(8, 300, 100))
        assert tuple(maps.shape) == (1, 64, 38, 13)
        assert tuple(pooled.shape) == (64,)

    @pytest.mark.slow
    def test_full_width_stage_shapes(self):
        model = init_params(12, 3, seed=0).eval()
        with torch.no_grad():
            maps = model.main.feature_map(torch.randn(1, 64, 300, 100))
        assert tuple(maps.shape) == (1, 512, 38, 13)

    def test_channel_mismatch_rejected(self, small_model):
        with pytest.raises(ShapeError):
            branch_forward(small_model.main, torch.randn(5, 30, 30))

    def test_zeroed_block_is_relu(self):
        block = BasicBlock(4, 4).eval()
        with torch.no_grad():
            block.conv1.weight.zero_()
            block.conv2.weight.zero_()
            x = torch.randn(2, 4, 6, 6)
            assert torch.equal(block(x), torch.relu(x))

    def test_projection_when_shape_changes(self):
        block = BasicBlock(4, 8, stride=2)
        assert block.downsample is not None
        assert tuple(block(torch.randn(2, 4, 6, 6)).shape) == (2, 8, 3, 3)


class TestPredictHeads:
    def test_probabilities_sum_to_one(self, small_model):
        with torch.no_grad():
            p, p_aux = predict_heads(small_model, torch.randn(3, 1, 40, 40))
        torch.testing.assert_close(p.sum(dim=1), torch.ones(3))
        torch.testing.assert_close(p_aux.sum(dim=1), torch.ones(3))
        assert tuple(p.shape) == (3, 12) and tuple(p_aux.shape) == (3, 3)

    def test_equal_logits_give_uniform(self, small_model):
        with torch.no_grad():
            small_model.fc.weight.zero_()
            small_model.fc.bias.zero_()
            p = predict_recognition(small_model, torch.randn(1, 40, 40))
        torch.testing.assert_close(p, torch.full((12,), 1.0 / 12.0))

    def test_shift_invariance(self, small_model):
        x = torch.randn(2, 1, 40, 40)
        with torch.no_grad():
            before = predict_recognition(small_model, x)
            small_model.fc.bias.add_(3.0)
            after = predict_recognition(small_model, x)
        torch.testing.assert_close(before, after)

    def test_embedding_width(self, small_model):
        with torch.no_grad():
            assert tuple(embed(small_model, torch.randn(2, 1, 40, 40)).shape) == (2, 64)


class TestPruning:
    def test_recognition_unchanged(self, small_model):
        x = torch.randn(4, 1, 40, 40)
        pruned = prune_aux(small_model)
        with torch.no_grad():
            assert torch.equal(predict_recognition(small_model, x), predict_recognition(pruned, x))
        assert not small_model.pruned and pruned.pruned

    def test_roughly_halves_parameters(self, small_model):
        assert parameter_count(prune_aux(small_model)) / parameter_count(small_model) <= 0.55

    def test_auxiliary_head_gone(self, small_model):
        with pytest.raises(UnsupportedOperation):
            predict_heads(prune_aux(small_model), torch.randn(1, 40, 40))


class TestPartitions:
    def test_every_parameter_assigned_once(self, small_model):
        parts = partition_parameters(small_model)
        names = [name for group in parts.values() for name, _ in group]
        assert sorted(names) == sorted(name for name, _ in small_model.named_parameters())
        assert all(name.startswith(("main.", "fc.")) for name, _ in parts["recognition"])
        assert all(name.startswith(("aux.", "dis.")) for name, _ in parts["auxiliary"])


class TestCheckpoint:
    def test_reload_predicts_identically(self, tmp_path, small_model):
        path = save_checkpoint(tmp_path / "m.pt", small_model, {"seed": 1}, "depth")
        model, meta = load_checkpoint(path)
        x = torch.randn(2, 1, 40, 40)
        with torch.no_grad():
            assert torch.equal(predict_recognition(small_model, x), predict_recognition(model, x))
        assert meta["factor"] == "depth"
        assert meta["config"] == {"seed": 1}
        assert meta["n_class"] == 12 and not meta["pruned"]

    def test_pruned_checkpoint(self, tmp_path, small_model):
        model, meta = load_checkpoint(save_checkpoint(tmp_path / "p.pt", prune_aux(small_model)))
        assert model.pruned and meta["pruned"]

    def test_foreign_file_rejected(self, tmp_path):
        path = tmp_path / "x.pt"
        torch.save({"weights": torch.zeros(2)}, path)
        with pytest.raises(CacheFormatError):
            load_checkpoint(path)


class TestSoftmaxHeads:
    def test_random_inputs_give_distributions(self, small_model):
        generator = torch.Generator().manual_seed(0)
        scales = 10.0 ** (4.0 * torch.rand(100, 1, 1, 1, generator=generator) - 2.0)
        x = scales * torch.randn(100, 1, 40, 40, generator=generator)
        with torch.no_grad():
            logits, aux_logits = small_model(x)
            p, p_aux = predict_heads(small_model, x)
        for probs, raw in ((p, logits), (p_aux, aux_logits)):
            assert torch.all(probs >= 0) and torch.all(probs <= 1)
            torch.testing.assert_close(probs.sum(dim=1), torch.ones(100), atol=1e-5, rtol=0)
            assert torch.equal(probs.argmax(dim=1), raw.argmax(dim=1))
