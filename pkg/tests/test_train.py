import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradient_error, kappa_from_pairs, param
from mgrnet import tensor as T
from mgrnet.data import SplitSpec, apply_pca, extract_patches, fit_pca, make_synthetic_scene, stratified_split
from mgrnet.errors import ConfigurationError, StructuralError, UsageError
from mgrnet.model import AblationVariant, MgrnetModel, ModelConfig, build_variant
from mgrnet.tensor import Tape, Tensor
from mgrnet.train import (
    Adam,
    EvalReport,
    TrainConfig,
    confusion_matrix,
    cross_entropy_loss,
    evaluate,
    train,
    trace_lines,
)

SMALL = dict(conv_channels=4, graph_channels=6, residual_channels=5)


def synthetic_patches(patch_size=11, seed=0):
    cube, labels = make_synthetic_scene(seed=seed)
    pca = fit_pca(cube)
    return extract_patches(apply_pca(cube, pca), labels, patch_size)


class TestLoss:
    def test_certain_prediction(self):
        loss = cross_entropy_loss(Tensor([0.0, 1.0, 0.0]), 1)
        assert abs(loss.item()) < 1e-11

    def test_uniform(self):
        loss = cross_entropy_loss(Tensor(np.full((2, 4), 0.25)), [0, 3])
        assert loss.item() == pytest.approx(-math.log(0.25 + 1e-12), abs=1e-14)

    def test_gradient_is_probs_minus_onehot(self):
        logits = param(np.random.default_rng(0).standard_normal(5))
        with Tape():
            T.backward(cross_entropy_loss(T.softmax(logits), 2))
        probs = np.exp(logits.data) / np.exp(logits.data).sum()
        np.testing.assert_allclose(logits.grad, probs - np.eye(5)[2], atol=1e-10)
        assert gradient_error(lambda: cross_entropy_loss(T.softmax(logits), 2), [logits]) < 1e-4

    @pytest.mark.parametrize("n,c", [(1, 2), (4, 3), (7, 5)])
    def test_batch_gradients(self, n, c):
        rng = np.random.default_rng(n)
        logits = param(rng.standard_normal((n, c)))
        targets = rng.integers(0, c, n)
        assert gradient_error(lambda: cross_entropy_loss(T.softmax(logits), targets), [logits]) < 1e-4

    def test_target_out_of_range(self):
        with pytest.raises(UsageError):
            cross_entropy_loss(Tensor([0.5, 0.5]), 2)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = param([1.0, -2.0])
        opt = Adam([p])
        opt.step([np.zeros(2)])
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        np.testing.assert_array_equal(opt.m[0], 0)
        assert opt.step_count == 1

    def test_first_step_formula(self):
        g = np.array([0.5, -3.0, 1e-3])
        p = param([1.0, 1.0, 1.0])
        Adam([p], lr=1e-2).step([g])
        # bias-corrected moments on step 1 are g and g**2
        expected = 1.0 - 1e-2 * g / (np.sqrt(g * g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_two_steps_by_hand(self):
        g1, g2 = 0.4, -0.1
        p = param([0.0])
        opt = Adam([p], lr=0.1)
        opt.step([np.array([g1])])
        opt.step([np.array([g2])])
        m1, v1 = 0.1 * g1, 0.001 * g1**2
        x1 = -0.1 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
        m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2**2
        x2 = x1 - 0.1 * (m2 / (1 - 0.81)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
        assert p.data[0] == pytest.approx(x2, rel=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal(4) for _ in range(5)]
        results = []
        for _ in range(2):
            p = param(np.ones(4))
            opt = Adam([p])
            for g in grads:
                opt.step([g])
            results.append(p.data.tobytes())
        assert results[0] == results[1]

    def test_shape_mismatch(self):
        with pytest.raises(StructuralError):
            Adam([param([1.0, 2.0])]).step([np.zeros(3)])


class TestMetrics:
    def test_perfect(self):
        r = EvalReport.from_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert (r.oa, r.aa, r.kappa) == (1.0, 1.0, 1.0)

    def test_chance(self):
        r = EvalReport.from_confusion([[25, 25], [25, 25]])
        assert r.oa == 0.5 and r.kappa == 0.0

    def test_hand_kappa(self):
        r = EvalReport.from_confusion([[40, 10], [20, 30]])
        assert r.oa == pytest.approx(0.70, abs=1e-15)
        assert r.kappa == pytest.approx(0.40, abs=1e-15)
        assert r.aa == pytest.approx((0.8 + 0.6) / 2, abs=1e-15)

    def test_class_without_support_excluded(self):
        r = EvalReport.from_confusion([[3, 1, 0], [0, 0, 0], [0, 1, 1]])
        assert r.aa == pytest.approx((0.75 + 0.5) / 2)
        assert np.isnan(r.recalls[1])

    def test_confusion_orientation(self):
        cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
        np.testing.assert_array_equal(cm, [[0, 2], [0, 1]])

    def test_random_matrices_against_recount(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = int(rng.integers(2, 7))
            cm = rng.integers(0, 20, (c, c))
            cm[rng.integers(0, c), rng.integers(0, c)] += 1
            true = [i for i in range(c) for j in range(c) for _ in range(cm[i, j])]
            pred = [j for i in range(c) for j in range(c) for _ in range(cm[i, j])]
            r = EvalReport.from_confusion(cm)
            oa, aa, kappa = kappa_from_pairs(true, pred, c)
            assert abs(r.oa - oa) < 1e-12 and abs(r.aa - aa) < 1e-12 and abs(r.kappa - kappa) < 1e-12
            assert r.confusion.sum() == len(true)

    @settings(max_examples=100)
    @given(st.integers(2, 6).flatmap(lambda c: st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=80).map(lambda p: (c, p))))
    def test_kappa_invariants(self, case):
        c, pairs = case
        true, pred = zip(*pairs)
        r = EvalReport.from_predictions(true, pred, c)
        assert -1 - 1e-12 <= r.kappa <= 1 + 1e-12
        diagonal = np.count_nonzero(r.confusion - np.diag(np.diag(r.confusion))) == 0
        assert (r.kappa == pytest.approx(1.0)) == diagonal
        assert r.oa == pytest.approx(np.trace(r.confusion) / len(pairs))

    def test_report_text(self):
        text = EvalReport.from_confusion([[40, 10], [20, 30]]).to_text()
        assert "OA\t0.700000" in text and "Kappa\t0.400000" in text and "40\t10" in text

    def test_empty(self):
        with pytest.raises(UsageError):
            EvalReport.from_confusion(np.zeros((2, 2), dtype=int))


def small_config(variant="FULL", **kw):
    return ModelConfig(in_channels=3, num_classes=4, variant=variant, **{**SMALL, **kw})


class TestVariants:
    def test_full_vs_g36_names(self):
        full = set(build_variant("FULL", small_config()).named_parameters())
        g36 = set(build_variant("G36", small_config()).named_parameters())
        diff = full ^ g36
        assert diff == {f"msgraph.k{k}.{p}" for k in (16, 64) for p in ("weight", "bias")}

    def test_nc_has_no_conv(self):
        names = build_variant(AblationVariant.NC, small_config()).named_parameters()
        assert not any(n.startswith("msconv.") for n in names)

    def test_ng_has_no_graph(self):
        names = build_variant("NG", small_config()).named_parameters()
        assert not any(n.startswith("msgraph.") for n in names)

    def test_nr_has_no_projection(self):
        names = build_variant("NR", small_config()).named_parameters()
        assert not any("proj" in n for n in names)
        assert "fuse.res1.conv.weight" in names

    @pytest.mark.parametrize("variant", [v.value for v in AblationVariant])
    def test_valid_probabilities(self, variant):
        model = build_variant(variant, small_config())
        x = np.random.default_rng(0).standard_normal((2, 3, 11, 11)).astype(np.float32)
        probs = model(Tensor(x)).data
        assert probs.shape == (2, 4)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
        single = model(Tensor(x[0])).data
        np.testing.assert_allclose(single, probs[0], atol=1e-5)

    @pytest.mark.parametrize("variant", [v.value for v in AblationVariant])
    def test_gradients_reach_every_parameter(self, variant):
        model = build_variant(variant, small_config(seed=1))
        x = np.random.default_rng(1).standard_normal((8, 3, 11, 11)).astype(np.float32)
        with Tape():
            T.backward(cross_entropy_loss(model(Tensor(x)), np.arange(8) % 4))
        for name, p in model.named_parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            build_variant("XX", small_config())

    def test_bad_patch(self):
        with pytest.raises(StructuralError):
            build_variant("FULL", small_config())(Tensor(np.ones((3, 9, 9), np.float32)))

    def test_graph_scale_must_fit(self):
        with pytest.raises(ConfigurationError):
            build_variant("G64", small_config(patch_size=7))

    def test_end_to_end_finite_differences(self):
        model = MgrnetModel(small_config(dtype="float64", seed=3))
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 3, 11, 11)))
        targets = np.array([1, 3])
        params = model.named_parameters()
        names = sorted(params)
        chosen = [names[i] for i in rng.choice(len(names), 6, replace=False)]
        err = gradient_error(lambda: cross_entropy_loss(model(x), targets), [params[n] for n in chosen],
                             max_entries=3, rng=rng)
        assert err < 1e-4

    def test_state_dict_round_trip(self):
        a = MgrnetModel(small_config(seed=0))
        b = MgrnetModel(small_config(seed=1))
        b.load_state_dict(a.state_dict())
        for name, p in b.named_parameters().items():
            np.testing.assert_array_equal(p.data, a.named_parameters()[name].data)

    def test_state_dict_mismatch(self):
        with pytest.raises(StructuralError):
            MgrnetModel(small_config()).load_state_dict(MgrnetModel(small_config(variant="NC")).state_dict())


class TestTrain:
    def test_one_epoch_full_batch_is_one_step(self):
        ps = synthetic_patches().subset(np.arange(16))
        model = MgrnetModel(ModelConfig(in_channels=ps.dims, num_classes=3, **SMALL))
        result = train(model, ps, TrainConfig(epochs=1, batch_size=len(ps)))
        assert result.steps == 1 and len(result.trace) == 1

    def test_loss_decreases_on_fixed_batch(self):
        ps = synthetic_patches()
        model = MgrnetModel(ModelConfig(in_channels=ps.dims, num_classes=3))
        batch = np.arange(0, 200, 4)
        x, y = ps.batch(batch), ps.targets[batch]
        opt = Adam(model.parameters(), lr=1e-3)
        losses = []
        for _ in range(6):
            with Tape():
                loss = cross_entropy_loss(model(Tensor(x)), y)
                T.backward(loss)
            losses.append(loss.item())
            opt.step()
            opt.zero_grad()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_same_seed_same_trace(self):
        ps = synthetic_patches().subset(np.arange(0, 200, 5))
        traces = []
        for _ in range(2):
            model = MgrnetModel(ModelConfig(in_channels=ps.dims, num_classes=3, seed=2, **SMALL))
            result = train(model, ps, TrainConfig(epochs=3, batch_size=8, rng_seed=5))
            traces.append([r.loss for r in result.trace])
        assert traces[0] == traces[1]

    def test_eval_cadence_and_trace_format(self):
        ps = synthetic_patches()
        train_set, test_set = stratified_split(ps, SplitSpec(0.1, 0))
        model = MgrnetModel(ModelConfig(in_channels=ps.dims, num_classes=3, **SMALL))
        result = train(model, train_set, TrainConfig(epochs=5, eval_every=2), test_set=test_set)
        assert [r.epoch for r in result.evaluations] == [2, 4, 5]
        lines = trace_lines(result.trace)
        assert len(lines) == 3
        fields = lines[0].split("\t")
        assert fields[0] == "2" and all(len(f.split(".")[1]) == 6 for f in fields[1:])

    def test_empty_set(self):
        ps = synthetic_patches().subset(np.array([], dtype=int))
        model = MgrnetModel(ModelConfig(in_channels=ps.dims, num_classes=3, **SMALL))
        with pytest.raises(UsageError):
            train(model, ps, TrainConfig(epochs=1))
        with pytest.raises(UsageError):
            evaluate(model, ps)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=0)
