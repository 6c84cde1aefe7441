"""反向传播、训练循环与有限差分梯度校验测试。"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from model.config import ModelConfig
from model.transformer import TransformerWeights, init_weights
from model.vocab import BOS_ID, EOS_ID, PAD_ID, default_vocab
from training.backprop import loss_and_grads
from training.corpus import make_batch
from training.trainer import (
    ACTION_POSITIONS, ALL_POSITIONS, Hyperparams, LossCurve, action_accuracy, batch_loss, finite_diff_check,
    mask_function, train_stage,
)
from utils.errors import EmptyBatch, EmptyMask, PreconditionError


GRAD_CONFIG = ModelConfig(n_layers=1, d_model=8, d_ffn=8, n_heads=2, max_seq=16)
SEQUENCES = [[BOS_ID, 40, 50, 60, EOS_ID], [BOS_ID, 70, 80, EOS_ID]]


class BatchTests(unittest.TestCase):
    def test_make_batch_pads_on_the_right_and_masks_padding(self):
        batch = make_batch(SEQUENCES)
        self.assertEqual(batch.tokens.shape, (2, 4))
        np.testing.assert_array_equal(batch.tokens[1], [BOS_ID, 70, 80, PAD_ID])
        np.testing.assert_array_equal(batch.targets[1], [70, 80, EOS_ID, PAD_ID])
        np.testing.assert_array_equal(batch.mask[1], [1, 1, 1, 0])

    def test_action_mask_selects_only_action_targets(self):
        action = default_vocab().action_range[0]
        batch = make_batch([[BOS_ID, 140, 40, action]], mask_function(GRAD_CONFIG, ACTION_POSITIONS))
        np.testing.assert_array_equal(batch.mask[0], [0, 0, 1])

    def test_make_batch_validation(self):
        with self.assertRaises(EmptyBatch):
            make_batch([])
        with self.assertRaises(EmptyBatch):
            make_batch([[BOS_ID]])
        with self.assertRaises(PreconditionError):
            mask_function(GRAD_CONFIG, "odd-positions")


class GradientTests(unittest.TestCase):
    def test_gradients_match_central_differences(self):
        weights = init_weights(GRAD_CONFIG, seed=0, std=0.1)
        error = finite_diff_check(weights, make_batch(SEQUENCES), epsilon=1e-3)
        self.assertLess(error, 1e-4)

    def test_zero_weights_give_uniform_loss(self):
        template = init_weights(GRAD_CONFIG, seed=0)
        zero = TransformerWeights(GRAD_CONFIG, {name: np.zeros_like(value) for name, value in template.items()})
        self.assertAlmostEqual(batch_loss(zero, make_batch(SEQUENCES)), math.log(GRAD_CONFIG.vocab_size), places=12)

    def test_attention_free_model_matches_differences_closely(self):
        cfg = ModelConfig(n_layers=1, d_model=8, d_ffn=8, n_heads=2, max_seq=16, use_attention=False)
        weights = init_weights(cfg, seed=0, std=0.1)
        self.assertLess(finite_diff_check(weights, make_batch(SEQUENCES), epsilon=1e-4), 1e-6)

    def test_masked_positions_do_not_contribute(self):
        weights = init_weights(GRAD_CONFIG, seed=1, std=0.1)
        batch = make_batch(SEQUENCES)
        mask = batch.mask.copy()
        mask[1] = 0.0
        loss, _grads = loss_and_grads(weights, batch, mask)
        alone = make_batch(SEQUENCES[:1])
        self.assertAlmostEqual(loss, batch_loss(weights, alone), places=10)

    def test_empty_mask_is_rejected(self):
        weights = init_weights(GRAD_CONFIG, seed=1)
        batch = make_batch(SEQUENCES)
        with self.assertRaises(EmptyMask):
            loss_and_grads(weights, batch, np.zeros_like(batch.mask))

    def test_epsilon_range(self):
        weights = init_weights(GRAD_CONFIG, seed=1)
        with self.assertRaises(PreconditionError):
            finite_diff_check(weights, make_batch(SEQUENCES), epsilon=0.5)


class TrainStageTests(unittest.TestCase):
    def setUp(self):
        self.weights = init_weights(GRAD_CONFIG, seed=2, std=0.1)
        self.hp = Hyperparams(lr=1e-2, batch_size=2, steps=30, seed=2, stage="pretrain")

    def test_training_reduces_loss_and_records_curve(self):
        curve = LossCurve()
        trained = train_stage(self.weights, SEQUENCES, self.hp, ALL_POSITIONS, curve)
        batch = make_batch(SEQUENCES)
        self.assertLess(batch_loss(trained, batch), batch_loss(self.weights, batch))
        self.assertEqual(len(curve.points), 30)
        self.assertEqual(trained.precision, "float32")
        self.assertTrue(np.isfinite(curve.final_loss()))

    def test_single_example_loss_strictly_decreases(self):
        curve = LossCurve()
        hp = Hyperparams(lr=3e-4, batch_size=1, steps=50, seed=0, stage="pretrain")
        train_stage(self.weights, SEQUENCES[:1], hp, ALL_POSITIONS, curve)
        losses = [loss for _step, loss in curve.points]
        self.assertEqual(len(losses), 50)
        self.assertTrue(all(later < earlier for earlier, later in zip(losses, losses[1:])))

    def test_training_is_deterministic(self):
        first = train_stage(self.weights, SEQUENCES, self.hp, ALL_POSITIONS)
        second = train_stage(self.weights, SEQUENCES, self.hp, ALL_POSITIONS)
        for name in first.names:
            np.testing.assert_array_equal(first.param(name), second.param(name))

    def test_zero_steps_returns_input(self):
        hp = Hyperparams(steps=0)
        self.assertIs(train_stage(self.weights, SEQUENCES, hp, ALL_POSITIONS), self.weights)

    def test_action_policy_requires_action_targets(self):
        with self.assertRaises(EmptyMask):
            train_stage(self.weights, SEQUENCES, self.hp, ACTION_POSITIONS)
        with self.assertRaises(EmptyMask):
            action_accuracy(self.weights, SEQUENCES)
        with self.assertRaises(EmptyBatch):
            train_stage(self.weights, [], self.hp, ALL_POSITIONS)

    def test_hyperparams_validation_and_dict_form(self):
        with self.assertRaises(PreconditionError):
            Hyperparams(lr=0.0)
        with self.assertRaises(PreconditionError):
            Hyperparams(batch_size=0)
        with self.assertRaises(PreconditionError):
            Hyperparams(beta1=1.0)
        self.assertEqual(Hyperparams.from_dict(self.hp.to_dict()), self.hp)


if __name__ == "__main__":
    unittest.main()
