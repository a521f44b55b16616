import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunebench import pruning as P
from prunebench.data import split_validation, synth_blobs
from prunebench.pruning import PruneAction
from prunebench.seeds import SeedLineage
from prunebench.models import build
from prunebench.training import OptimizerCfg, init_weights

from conftest import random_model


def ones(*shapes):
    return {f"layer{i + 1}": np.ones(s, dtype=np.uint8) for i, s in enumerate(shapes)}


FIXTURE = {"layer1": np.array([1.0, 0.5]), "layer2": np.array([0.4, 0.01])}


def brute_force_global(scores, k):
    """The unique k-subset whose every member precedes every non-member in (score, layer, index) order."""
    flat = [(float(v), li, j) for li, n in enumerate(scores) for j, v in enumerate(scores[n])]
    for subset in itertools.combinations(range(len(flat)), k):
        inside = [flat[i] for i in subset]
        outside = [flat[i] for i in range(len(flat)) if i not in subset]
        if all(a < b for a in inside for b in outside):
            return {(f[1], f[2]) for f in inside}
    raise AssertionError("no consistent subset")


class TestScoring:
    def test_magnitude(self):
        model = random_model(input_shape=(1, 1, 3))
        p = model.named_params()["fc1.weight"]
        p.weights.data[:, 0] = [0.1, -0.5, 0.3]
        assert P.score_magnitude([p])["fc1.weight"][:, 0].tolist() == [0.1, 0.5, 0.3]

    def test_all_zero_layer(self):
        model = random_model(input_shape=(1, 1, 3))
        p = model.named_params()["fc2.weight"]
        p.weights.data[:] = 0
        assert (P.score_magnitude([p])["fc2.weight"] == 0).all()

    def test_masked_positions_score_minus_inf(self):
        model = random_model(input_shape=(1, 1, 3))
        p = model.named_params()["fc1.weight"]
        p.mask[0, 0] = 0
        assert P.score_magnitude([p])["fc1.weight"][0, 0] == -np.inf

    def test_gradient_score_is_abs_w_times_g(self):
        # one-weight network: logits = [w*x, 0]; dL/dw = x*(softmax0 - [y==0])
        from prunebench.models import Dense, ModelGraph
        model = ModelGraph("t", [Dense("d", 1, 2, dtype=np.float64)], (1,), 2, "bits64")
        w = model.named_params()["d.weight"]
        w.weights.data[:] = [[2.0, 0.0]]
        x = np.array([[1.0]])
        s = P.score_gradient_magnitude(model, x, np.array([0]), [w])["d.weight"]
        p0 = np.exp(2.0) / (np.exp(2.0) + 1.0)
        assert s[0, 0] == pytest.approx(abs(2.0 * (p0 - 1.0)), rel=1e-12)
        assert s[0, 1] == 0.0

    def test_gradient_score_arithmetic_example(self):
        w, g = 2.0, -3.0
        assert abs(w * g) == 6.0

    def test_gradient_scores_deterministic(self, rng):
        model = random_model("lenet_conv", seed=3)
        x = rng.random((8, 1, 28, 28))
        y = rng.integers(0, 10, 8)
        a = P.score_gradient_magnitude(model, x, y)
        b = P.score_gradient_magnitude(model.clone(), x, y)
        for n in a:
            assert a[n].tobytes() == b[n].tobytes()

    def test_dead_region_scores_zero_and_goes_first(self):
        scores = {"l": np.array([0.0, 0.0, 0.7, 0.2])}
        out = P.select_global(scores, {"l": np.ones(4, np.uint8)}, 0.5)
        assert out["l"].tolist() == [0, 0, 1, 1]


class TestSelection:
    def test_global_fixture(self):
        out = P.select_global(FIXTURE, ones(2, 2), 0.5)
        assert out["layer1"].tolist() == [1, 1] and out["layer2"].tolist() == [0, 0]

    def test_global_fixture_matches_brute_force(self):
        assert brute_force_global(FIXTURE, 2) == {(1, 0), (1, 1)}

    def test_layerwise_fixture_differs_from_global(self):
        lw = P.select_layerwise(FIXTURE, ones(2, 2), 0.5)
        gl = P.select_global(FIXTURE, ones(2, 2), 0.5)
        assert lw["layer1"].tolist() == [1, 0] and lw["layer2"].tolist() == [1, 0]
        assert any((lw[n] != gl[n]).any() for n in lw)

    def test_zero_fraction_unchanged(self):
        masks = ones(2, 2)
        masks["layer2"][0] = 0
        out = P.select_global(FIXTURE, masks, 0.0)
        assert out["layer1"].tolist() == [1, 1] and out["layer2"].tolist() == [0, 1]

    def test_equal_scores_keep_last_half(self):
        scores = {"layer1": np.ones(3), "layer2": np.ones(3)}
        out = P.select_global(scores, ones(3, 3), 0.5)
        assert out["layer1"].tolist() == [0, 0, 0] and out["layer2"].tolist() == [1, 1, 1]

    def test_single_layer_scopes_agree(self, rng):
        scores = {"only": rng.random(50)}
        masks = {"only": np.ones(50, np.uint8)}
        assert (P.select_global(scores, masks, 0.3)["only"] == P.select_layerwise(scores, masks, 0.3)["only"]).all()

    def test_round_half_to_even(self):
        assert P.round_half_even(1.5) == 2
        assert P.round_half_even(2.5) == 2
        out = P.select_layerwise({"l": np.array([3.0, 1.0, 2.0])}, {"l": np.ones(3, np.uint8)}, 0.5)
        assert out["l"].tolist() == [1, 0, 0]

    def test_infeasible(self):
        with pytest.raises(ValueError):
            P.select_global(FIXTURE, ones(2, 2), 1.5)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_exact_nnz_global(self, sizes, f, seed):
        rng = np.random.default_rng(seed)
        scores = {f"t{i}": rng.random(n) for i, n in enumerate(sizes)}
        masks = {k: np.ones(len(v), np.uint8) for k, v in scores.items()}
        out = P.select_global(scores, masks, f)
        total = sum(sizes)
        assert sum(int(m.sum()) for m in out.values()) == total - round(f * total)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_exact_nnz_layerwise(self, sizes, f, seed):
        rng = np.random.default_rng(seed)
        scores = {f"t{i}": rng.random(n) for i, n in enumerate(sizes)}
        masks = {k: np.ones(len(v), np.uint8) for k, v in scores.items()}
        out = P.select_layerwise(scores, masks, f)
        for k, n in zip(scores, sizes):
            assert int(out[k].sum()) == n - round(f * n)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(0, 1))
    def test_global_magnitude_scale_equivariant(self, seed, c, f):
        model = random_model(seed=seed % 1000, input_shape=(1, 1, 6))
        tensors = P.prunable_tensors(model)
        masks = P.current_masks(tensors)
        before = P.select_global(P.score_magnitude(tensors), masks, f)
        for p in tensors:
            p.weights.data = p.weights.data * c
        after = P.select_global(P.score_magnitude(tensors), masks, f)
        for n in before:
            assert (before[n] == after[n]).all()

    def test_global_agrees_with_brute_force_on_small_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            scores = {"layer1": rng.integers(0, 3, 3).astype(float), "layer2": rng.integers(0, 3, 3).astype(float)}
            k = int(rng.integers(0, 7))
            out = P.select_global(scores, ones(3, 3), k / 6)
            pruned = {(li, j) for li, n in enumerate(scores) for j in range(3) if out[n][j] == 0}
            assert pruned == brute_force_global(scores, k)


class TestRandom:
    def test_zero_probability(self, rng):
        masks = ones(100)
        assert (P.select_random(masks, 0.0, rng)["layer1"] == 1).all()

    def test_binomial_bound(self):
        out = P.select_random(ones(10_000), 0.75, np.random.default_rng(5))
        pruned = 10_000 - int(out["layer1"].sum())
        sigma = np.sqrt(10_000 * 0.75 * 0.25)
        assert abs(pruned - 7500) < 4 * sigma

    def test_same_stream_same_mask(self):
        lin = SeedLineage(3, 1)
        a = P.select_random(ones(500), 0.4, lin.rng("random_prune"))
        b = P.select_random(ones(500), 0.4, lin.rng("random_prune"))
        assert (a["layer1"] == b["layer1"]).all()

    def test_never_revives(self, rng):
        masks = {"l": (rng.random(1000) > 0.5).astype(np.uint8)}
        out = P.select_random(masks, 0.3, rng)
        assert not ((out["l"] == 1) & (masks["l"] == 0)).any()


class TestApply:
    def test_revival_refused(self):
        model = random_model(input_shape=(1, 1, 4))
        p = model.named_params()["fc1.weight"]
        p.mask[0, 0] = 0
        with pytest.raises(ValueError, match="revive"):
            P.apply_masks([p], {p.name: np.ones(p.shape, np.uint8)})


class TestSchedule:
    def test_geometric_n5_c32(self):
        s = P.keep_schedule(32, 5)
        assert s == pytest.approx([0.5, 0.25, 0.125, 0.0625, 0.03125], rel=1e-12)
        assert s[-1] == 1 / 32

    def test_one_shot(self):
        assert P.keep_schedule(2, 1) == [0.5]

    def test_eligible_fraction_hits_overall_target(self):
        total, eligible = 1000, 900
        f = P.eligible_fraction(0.25, total, eligible)
        assert (total - f * eligible) / total == pytest.approx(0.25)

    def test_action_validation(self):
        with pytest.raises(ValueError):
            PruneAction("global_magnitude", 1.0)
        with pytest.raises(ValueError):
            PruneAction("nope", 2.0)


@pytest.fixture(scope="module")
def blobs():
    train, val = split_validation(synth_blobs(4, 60, 12, seed=2))
    test = synth_blobs(4, 20, 12, seed=3, split="test")
    return train, val, test


FAST = OptimizerCfg(lr=1e-3, batch_size=32, max_epochs=2, early_stop_patience=1)


def small_mlp(seed=0, precision="bits32"):
    return init_weights(build("mlp_300_100", 4, precision, input_shape=(1, 1, 12)), np.random.default_rng(seed))


def run(blobs, strategy, compression, iterations=1, seed=0):
    model = small_mlp(seed)
    action = PruneAction(strategy, compression, iterations)
    return model, P.prune_and_finetune(model, action, *blobs, FAST, SeedLineage(0, seed))


class TestDriver:
    @pytest.mark.parametrize("strategy", P.STRATEGIES)
    def test_runs_and_reports(self, blobs, strategy):
        _, rec = run(blobs, strategy, 4)
        assert rec.status == "ok"
        assert len(rec.history) == 1
        if strategy != "random":
            assert rec.achieved_compression == pytest.approx(4, rel=1e-3)
        assert 0 <= rec.top1_after <= 1

    def test_classifier_mask_untouched(self, blobs):
        model, _ = run(blobs, "global_magnitude", 8)
        assert (model.named_params()["fc3.weight"].mask == 1).all()

    def test_iterative_masks_monotone(self, blobs, monkeypatch):
        seen = []
        orig = P.apply_masks

        def spy(tensors, masks):
            seen.append({n: m.copy() for n, m in masks.items()})
            orig(tensors, masks)

        monkeypatch.setattr(P, "apply_masks", spy)
        _, rec = run(blobs, "layerwise_magnitude", 8, iterations=3)
        assert len(seen) == 3 and rec.iterations == 3
        for a, b in zip(seen, seen[1:]):
            for n in a:
                assert not ((b[n] == 1) & (a[n] == 0)).any()
        assert [h.achieved_compression for h in rec.history] == pytest.approx([2, 4, 8], rel=1e-3)

    def test_infeasible_compression_is_a_failed_record(self, blobs):
        # the excluded classifier keeps 400 of 34,000 weights, capping compression at 85
        _, rec = run(blobs, "global_magnitude", 100)
        assert rec.status == "failed" and "Infeasible" in rec.failure_cause
        assert np.isnan(rec.top1_after)

    def test_deterministic(self, blobs):
        _, a = run(blobs, "global_gradient", 4, seed=1)
        _, b = run(blobs, "global_gradient", 4, seed=1)
        assert a.top1_after == b.top1_after and a.achieved_compression == b.achieved_compression

    def test_score_batch_seed_changes_gradient_mask(self, blobs):
        train = blobs[0]
        model = small_mlp(0, "bits64")
        tensors = P.prunable_tensors(model)
        masks = []
        for seed in (0, 1):
            idx = np.random.default_rng(seed).choice(len(train), 16, replace=False)
            scores = P.score_gradient_magnitude(model, train.images[idx].astype(np.float64), train.labels[idx], tensors)
            masks.append(P.select_global(scores, P.current_masks(tensors), 1 - 1 / 16))
        assert any((masks[0][n] != masks[1][n]).any() for n in masks[0])
