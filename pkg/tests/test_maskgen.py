import math
import unittest

import numpy as np

from tests.helpers import canned, random_instance
from ucmask import maskgen
from ucmask.instance import DailySchedule, HistoryBank, HistoryDay, HistoryError
from ucmask.mask import FreezeMask, MaskEntry
from ucmask.maskgen import heuristics, llm
from ucmask.maskgen.base import EmptyMaskGenerator, MaskFeedback, consensus_mask, nearest_days

NEAR_A = [[1] * 6, [0, 0, 1, 1, 1, 0], [0] * 6]
NEAR_B = [[1] * 6, [0, 0, 1, 1, 0, 0], [0] * 6]
FAR = [[0] * 6, [1] * 6, [1] * 6]


def _day(profile, u) -> HistoryDay:
    u = np.array(u)
    return HistoryDay(profile=np.asarray(profile, dtype=float), schedule=DailySchedule(u=u, p=u * 10.0))


def _bank(inst) -> HistoryBank:
    target = inst.total_demand()
    return HistoryBank(
        (
            _day(target * 3.0, FAR),
            _day(target + 1.0, NEAR_B),
            _day(target, NEAR_A),
        )
    )


class NearestDaysTest(unittest.TestCase):
    def test_orders_by_load_distance(self):
        inst = canned("small")
        np.testing.assert_array_equal(nearest_days(inst, _bank(inst), 3), [2, 1, 0])

    def test_ties_keep_history_order(self):
        inst = canned("small")
        target = inst.total_demand()
        bank = HistoryBank((_day(target + 2.0, NEAR_A), _day(target - 2.0, NEAR_B)))
        np.testing.assert_array_equal(nearest_days(inst, bank, 2), [0, 1])


class StabilityMaskTest(unittest.TestCase):
    def test_largest_units_first_under_cap(self):
        inst = canned("small")
        mask = heuristics.stability_mask(inst, _bank(inst), H=2, k_cap=1)
        self.assertEqual(mask.entries, tuple(MaskEntry(t, "g1", 1) for t in range(1, 7)))
        self.assertEqual(mask.provenance, "stability")

    def test_skips_disagreeing_units(self):
        inst = canned("small")
        mask = heuristics.stability_mask(inst, _bank(inst), H=2, k_cap=2)
        fixed = mask.as_dict()
        self.assertNotIn((5, "g2"), fixed)
        self.assertEqual(fixed[(5, "g3")], 0)
        self.assertEqual(fixed[(3, "g2")], 1)
        self.assertEqual(fixed[(1, "g2")], 0)
        self.assertTrue(all(count == 2 for count in mask.hours().values()))

    def test_wider_window_shrinks_agreement(self):
        inst = canned("small")
        mask = heuristics.stability_mask(inst, _bank(inst), H=3, k_cap=2)
        self.assertEqual(mask.entries, (MaskEntry(3, "g2", 1), MaskEntry(4, "g2", 1)))

    def test_one_day_window_equals_nearest_neighbour(self):
        inst = canned("small")
        bank = _bank(inst)
        for cap in (0, 1, 2, 3):
            stable = heuristics.stability_mask(inst, bank, H=1, k_cap=cap)
            nearest = heuristics.knn_mask(inst, bank, k_neighbors=1, k_cap=cap)
            self.assertEqual((stable.entries, stable.k_cap), (nearest.entries, nearest.k_cap))

    def test_zero_cap_gives_empty_mask(self):
        inst = canned("small")
        self.assertEqual(len(heuristics.stability_mask(inst, _bank(inst), H=2, k_cap=0)), 0)

    def test_requires_history(self):
        with self.assertRaises(HistoryError):
            heuristics.stability_mask(canned("small"), HistoryBank(), H=3, k_cap=1)

    def test_rejects_history_of_another_shape(self):
        inst = canned("small")
        bank = HistoryBank((_day(np.ones(6), [[1] * 6, [0] * 6]),))
        with self.assertRaises(HistoryError):
            heuristics.stability_mask(inst, bank, H=1, k_cap=1)


class KnnMaskTest(unittest.TestCase):
    def test_needs_enough_neighbours(self):
        inst = canned("small")
        with self.assertRaises(HistoryError):
            heuristics.knn_mask(inst, _bank(inst), k_neighbors=5, k_cap=1)

    def test_consensus_of_neighbours(self):
        inst = canned("small")
        mask = heuristics.knn_mask(inst, _bank(inst), k_neighbors=2, k_cap=3)
        self.assertEqual(mask.provenance, "knn")
        self.assertEqual(len(mask), 3 * 6 - 1)


class KMeansMaskTest(unittest.TestCase):
    def _clustered_bank(self, inst):
        target = inst.total_demand()
        low = [_day(target * 0.4 + offset, FAR) for offset in (0.0, 0.5, 1.0)]
        high = [_day(target + offset, NEAR_A) for offset in (-1.0, 0.5, 1.5)]
        return HistoryBank(tuple(low + high))

    def test_target_joins_the_similar_cluster(self):
        inst = canned("small")
        bank = self._clustered_bank(inst)
        mask = heuristics.kmeans_mask(inst, bank, n_clusters=2, k_cap=3, seed=0)
        expected = tuple(
            MaskEntry(t + 1, gen, NEAR_A[g][t]) for g, gen in enumerate(("g1", "g2", "g3")) for t in range(6)
        )
        self.assertEqual(mask.entries, tuple(sorted(expected)))
        self.assertEqual(mask.provenance, "kmeans")

    def test_is_deterministic_for_a_seed(self):
        inst = canned("small")
        bank = self._clustered_bank(inst)
        first = heuristics.kmeans_mask(inst, bank, n_clusters=2, k_cap=1, seed=7)
        second = heuristics.kmeans_mask(inst, bank, n_clusters=2, k_cap=1, seed=7)
        self.assertEqual(first, second)

    def test_default_cluster_count(self):
        self.assertEqual(heuristics.default_clusters(1), 1)
        self.assertEqual(heuristics.default_clusters(9), 3)
        self.assertEqual(heuristics.default_clusters(10), 4)

    def test_more_clusters_than_days(self):
        inst = canned("small")
        with self.assertRaises(HistoryError):
            heuristics.kmeans_mask(inst, _bank(inst), n_clusters=4, k_cap=1, seed=0)


class RandomMaskTest(unittest.TestCase):
    def test_count_and_cap(self):
        inst = canned("small")
        mask = heuristics.random_mask(inst, 0.5, seed=3)
        self.assertEqual(len(mask), 9)
        self.assertEqual(mask.k_cap, 2)
        self.assertLessEqual(max(mask.hours().values()), 2)
        self.assertEqual(mask.provenance, "random")

    def test_positions_and_states_are_uniform(self):
        inst = random_instance(0, n_gens=5, horizon=4)
        draws = 10000
        cells = np.zeros((5, 4))
        switched_on = 0
        for seed in range(draws):
            mask = heuristics.random_mask(inst, 0.25, seed)
            self.assertEqual(len(mask), 5)
            for entry in mask:
                cells[inst.generator_index(entry.g), entry.t - 1] += 1
                switched_on += entry.u
        p = 0.25
        sigma = math.sqrt(draws * p * (1 - p))
        # 20 cells tested at once
        self.assertLessEqual(float(np.abs(cells - draws * p).max()), 4 * sigma)
        total = cells.sum()
        self.assertLessEqual(abs(switched_on - total / 2), 3 * math.sqrt(total) / 2)

    def test_same_seed_same_mask(self):
        inst = canned("small")
        self.assertEqual(heuristics.random_mask(inst, 0.3, 11), heuristics.random_mask(inst, 0.3, 11))

    def test_ratio_bounds(self):
        inst = canned("small")
        self.assertEqual(len(heuristics.random_mask(inst, 0.0, 1)), 0)
        self.assertEqual(len(heuristics.random_mask(inst, 1.0, 1)), 18)
        with self.assertRaises(ValueError):
            heuristics.random_mask(inst, 1.5, 1)


class OptimumMaskTest(unittest.TestCase):
    def test_states_follow_the_baseline(self):
        inst = canned("small")
        u = np.array(NEAR_A)
        baseline = DailySchedule(u=u, p=u * 20.0)
        mask = heuristics.optimum_mask(inst, baseline, 0.5, seed=2)
        self.assertEqual(len(mask), 9)
        for entry in mask:
            self.assertEqual(entry.u, NEAR_A[inst.generator_index(entry.g)][entry.t - 1])
        self.assertEqual(mask.provenance, "fix-at-optimum")

    def test_positions_match_random_mask(self):
        inst = canned("small")
        u = np.array(NEAR_A)
        positions = {(e.t, e.g) for e in heuristics.optimum_mask(inst, DailySchedule(u=u, p=u * 1.0), 0.4, 5)}
        self.assertEqual(positions, {(e.t, e.g) for e in heuristics.random_mask(inst, 0.4, 5)})

    def test_rejects_mismatched_baseline(self):
        inst = canned("small")
        u = np.ones((2, 6), dtype=int)
        with self.assertRaises(ValueError):
            heuristics.optimum_mask(inst, DailySchedule(u=u, p=u * 1.0), 0.1, 0)

    def test_generator_requires_baseline(self):
        with self.assertRaises(ValueError):
            heuristics.OptimumMaskGenerator().generate(canned("small"), HistoryBank())


class GeneratorTest(unittest.TestCase):
    def test_build_by_name(self):
        self.assertIsInstance(maskgen.build_generator("milp"), EmptyMaskGenerator)
        self.assertIsInstance(maskgen.build_generator("stability", H=4), heuristics.StabilityMaskGenerator)
        self.assertIsInstance(maskgen.build_generator("knn"), heuristics.KnnMaskGenerator)
        self.assertIsInstance(maskgen.build_generator("kmeans", seed=3), heuristics.KMeansMaskGenerator)
        self.assertIsInstance(maskgen.build_generator("random"), heuristics.RandomMaskGenerator)
        self.assertIsInstance(maskgen.build_generator("fix-at-optimum"), heuristics.OptimumMaskGenerator)

    def test_unknown_method(self):
        with self.assertRaises(ValueError):
            maskgen.build_generator("genetic")

    def test_llm_needs_endpoint(self):
        with self.assertRaises(llm.ConfigError):
            maskgen.build_generator("llm")

    def test_default_cap_is_ten_percent_rounded_up(self):
        inst = canned("medium")
        generator = maskgen.build_generator("stability")
        self.assertEqual(generator.cap_for(inst), 2)
        self.assertEqual(maskgen.build_generator("stability", k_cap=5).cap_for(inst), 5)

    def test_empty_generator(self):
        mask = EmptyMaskGenerator().generate(canned("tiny"), HistoryBank())
        self.assertEqual(len(mask), 0)

    def test_dropping_revision(self):
        inst = canned("small")
        previous = FreezeMask.from_tuples([(1, "g1", 1), (2, "g1", 1)], k_cap=1, provenance="stability")
        revised = heuristics.StabilityMaskGenerator().revise(inst, previous, MaskFeedback("x", ((2, "g1"),)))
        self.assertEqual(revised.entries, (MaskEntry(1, "g1", 1),))
        self.assertEqual(revised.provenance, "stability-revised")

    def test_consensus_of_nothing_is_empty(self):
        mask = consensus_mask(canned("small"), (), 2, "knn")
        self.assertEqual((len(mask), mask.k_cap, mask.provenance), (0, 2, "knn"))


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
