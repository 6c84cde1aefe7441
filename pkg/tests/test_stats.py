"""统计量回归测试。"""

import sys
import unittest
from pathlib import Path


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from utils.errors import DegenerateVariance, InvalidCounts, PreconditionError
from utils.stats import PairedSamples, cohens_d, paired_t_test, two_proportion_z


class StatsTests(unittest.TestCase):
    def test_two_proportion_z_hand_value(self):
        self.assertAlmostEqual(two_proportion_z(30, 100, 10, 100), 3.5355, delta=1e-3)

    def test_two_proportion_z_is_antisymmetric(self):
        self.assertEqual(two_proportion_z(10, 100, 30, 100), -two_proportion_z(30, 100, 10, 100))

    def test_two_proportion_z_degenerate_pooled_rate(self):
        self.assertEqual(two_proportion_z(0, 50, 0, 50), 0.0)
        self.assertEqual(two_proportion_z(50, 50, 50, 50), 0.0)

    def test_two_proportion_z_rejects_invalid_counts(self):
        for args in ((1, 0, 1, 10), (11, 10, 1, 10), (-1, 10, 1, 10)):
            with self.assertRaises(InvalidCounts):
                two_proportion_z(*args)

    def test_paired_t_hand_value(self):
        result = paired_t_test(PairedSamples.of([1, 2, 3], [0, 0, 0]))
        self.assertAlmostEqual(result.t, 3.4641, delta=1e-3)
        self.assertEqual(result.df, 2)
        self.assertGreater(result.p, 0.0)
        self.assertLess(result.p, 0.1)

    def test_paired_t_rejects_zero_variance(self):
        with self.assertRaises(DegenerateVariance):
            paired_t_test(PairedSamples.of([1, 1, 1], [0, 0, 0]))

    def test_paired_samples_validate_shape(self):
        with self.assertRaises(PreconditionError):
            PairedSamples.of([1, 2], [1])
        with self.assertRaises(PreconditionError):
            PairedSamples.of([1], [1])

    def test_cohens_d_hand_value(self):
        self.assertAlmostEqual(cohens_d([0, 2], [1, 3]), -0.7071, delta=1e-4)
        with self.assertRaises(DegenerateVariance):
            cohens_d([1, 1], [1, 1])


if __name__ == "__main__":
    unittest.main()
