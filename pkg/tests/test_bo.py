import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pacoh_lab.bnn_prior import BnnModel
from pacoh_lab.bo import BoHistory, EmptyPool, run_bo, ts_select, ucb_select
from pacoh_lab.environments import BanditPool
from pacoh_lab.numerics import RngStream
from pacoh_lab.pacoh_meta import TargetTrainConfig, vanilla_approx

FAST = TargetTrainConfig(n_particles=2, steps=8, step_size=1e-2)


@pytest.fixture
def small_pool():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 3))
    return BanditPool(X, np.stack([X @ np.array([1.0, -0.5, 0.2]), -X[:, 0]]))


@pytest.fixture
def small_approx():
    return vanilla_approx(BnnModel(input_dim=3, hidden=(8,)), normalize=False)


class TestUcb:
    def test_single_particle_is_argmax(self):
        assert ucb_select([[0.1, 0.9, 0.3]]) == 1

    def test_two_particle_hand_case(self):
        # arm 1: mean 1, population std 1 -> 1 + 2*1 = 3 > 0
        assert ucb_select([[0.0, 0.0], [0.0, 2.0]], beta_ucb=2.0) == 1

    def test_ties_go_to_lowest_index(self):
        assert ucb_select(np.ones((3, 5))) == 0

    def test_beta_zero_is_mean(self):
        preds = np.array([[1.0, 0.0], [1.0, 1.8]])
        assert ucb_select(preds, 0.0) == 0
        assert ucb_select(preds, 2.0) == 1

    @pytest.mark.parametrize("preds", [np.zeros((0, 3)), np.zeros((2, 0))])
    def test_empty(self, preds):
        with pytest.raises(EmptyPool):
            ucb_select(preds)

    @given(arrays(float, (3, 6), elements=st.floats(-5, 5)))
    def test_valid_index(self, preds):
        assert 0 <= ucb_select(preds) < 6


class TestThompson:
    def test_single_particle_deterministic(self, rng):
        assert ts_select([[3.0, 1.0, 4.0]], rng) == 2

    def test_fixed_seed_reproducible(self):
        preds = np.random.default_rng(1).normal(size=(4, 7))
        a = [ts_select(preds, RngStream(5).fork(i)) for i in range(20)]
        b = [ts_select(preds, RngStream(5).fork(i)) for i in range(20)]
        assert a == b

    def test_selection_frequencies_match_enumeration(self):
        # particles' argmaxes: 0, 2, 2, 1 -> probabilities 1/4, 1/4, 1/2
        preds = np.array([[5.0, 0, 0], [0, 0, 1.0], [0, 1, 3.0], [0, 2.0, 1]])
        expected = np.array([0.25, 0.25, 0.5])
        n = 10_000
        rng = RngStream(0)
        counts = np.bincount([ts_select(preds, rng) for _ in range(n)], minlength=3)
        sigma = np.sqrt(n * expected * (1 - expected))
        assert np.all(np.abs(counts - n * expected) <= 3 * sigma)

    def test_empty(self, rng):
        with pytest.raises(EmptyPool):
            ts_select(np.zeros((1, 0)), rng)


class TestRunBo:
    def test_single_round_is_random_action(self, small_pool, small_approx):
        firsts = {run_bo(small_pool, 0, small_approx, 1, "ucb", FAST, RngStream(s)).actions[0]
                  for s in range(30)}
        assert len(firsts) > 3
        h = run_bo(small_pool, 0, small_approx, 1, "ts", FAST, RngStream(0))
        assert len(h) == 1

    @pytest.mark.parametrize("algorithm", ["ucb", "ts"])
    def test_deterministic_and_valid(self, small_pool, small_approx, algorithm):
        a = run_bo(small_pool, 0, small_approx, 5, algorithm, FAST, RngStream(3))
        b = run_bo(small_pool, 0, small_approx, 5, algorithm, FAST, RngStream(3))
        assert a.actions == b.actions and a.summary_hashes == b.summary_hashes
        assert len(a) == 5 and all(0 <= x < small_pool.size for x in a.actions)
        np.testing.assert_array_equal(a.rewards, small_pool.rewards[0, a.actions])

    def test_cold_start_differs_only_in_training(self, small_pool, small_approx):
        h = run_bo(small_pool, 1, small_approx, 3, "ucb", FAST, RngStream(0), warm_start=False)
        assert len(h) == 3

    def test_flat_rewards_give_zero_regret(self, small_approx):
        pool = BanditPool(np.random.default_rng(0).normal(size=(6, 3)), np.full((1, 6), 0.7))
        h = run_bo(pool, 0, small_approx, 4, "ts", FAST, RngStream(0))
        avg, simple = h.regret(0.7)
        np.testing.assert_array_equal(avg, 0.0)
        np.testing.assert_array_equal(simple, 0.0)

    def test_rows_schema(self, small_pool, small_approx):
        h = run_bo(small_pool, 0, small_approx, 3, "ucb", FAST, RngStream(0))
        rows = h.rows(float(small_pool.rewards[0].max()))
        assert [r[0] for r in rows] == [1, 2, 3]
        assert all(len(r) == 5 for r in rows)
        assert rows[-1][4] <= rows[0][4]

    def test_errors(self, small_pool, small_approx):
        with pytest.raises(ValueError):
            run_bo(small_pool, 0, small_approx, 0, "ucb")
        with pytest.raises(ValueError):
            run_bo(small_pool, 0, small_approx, 2, "ei")
        with pytest.raises(EmptyPool):
            run_bo(BanditPool(np.zeros((0, 3)), np.zeros((1, 0))), 0, small_approx, 2, "ucb")

    def test_empty_history(self):
        assert len(BoHistory()) == 0
