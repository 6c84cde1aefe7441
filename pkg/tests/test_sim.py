"""拾取放置环境与脚本专家测试。"""

import sys
import unittest
from dataclasses import replace
from pathlib import Path


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from model.vocab import default_vocab, encode_action
from sim.environment import (
    HEIGHT_TASK_PROMPT, HEIGHTS, OBJECT_POSITION, PROMPT_GOALS, SPEED_TASK_PROMPTS, SPEEDS, TOLERANCE,
    EnvState, TaskSpec, env_step, expert_action, make_task, task_success,
)
from sim.rollout import expert_rollout, max_height, step_displacements
from utils.errors import PreconditionError


def state_at(x, y, carrying=False):
    return EnvState(x=x, y=y, carrying=carrying, object_x=0.3, object_y=0.2, goal_x=0.8, goal_y=0.2)


class EnvStepTests(unittest.TestCase):
    def setUp(self):
        self.vocab = default_vocab()

    def test_step_moves_by_decoded_action(self):
        state = env_step(state_at(0.5, 0.5), encode_action(0.15, -0.05), self.vocab)
        self.assertAlmostEqual(state.x, 0.65)
        self.assertAlmostEqual(state.y, 0.45)
        self.assertEqual(state.step, 1)

    def test_position_is_clamped_to_unit_box(self):
        state = env_step(state_at(0.9, 0.05), encode_action(0.35, -0.35), self.vocab)
        self.assertEqual(state.position, (1.0, 0.0))

    def test_object_is_picked_up_within_tolerance(self):
        state = env_step(state_at(0.2, 0.2), encode_action(0.05, 0.05), self.vocab)
        self.assertTrue(state.carrying)
        self.assertEqual((state.object_x, state.object_y), state.position)

    def test_delivery_completes_and_freezes_the_arm(self):
        state = env_step(state_at(0.7, 0.2, carrying=True), encode_action(0.05, 0.05), self.vocab)
        self.assertTrue(state.delivered)
        self.assertTrue(task_success(state))
        frozen = env_step(state, encode_action(0.35, 0.35), self.vocab)
        self.assertEqual(frozen.position, state.position)
        self.assertEqual(frozen.step, state.step + 1)

    def test_carrying_inside_goal_drops_without_moving(self):
        start = state_at(0.78, 0.22, carrying=True)
        state = env_step(start, encode_action(0.35, 0.35), self.vocab)
        self.assertTrue(state.delivered)
        self.assertEqual(state.position, start.position)


class TaskTests(unittest.TestCase):
    def test_placement_is_seeded_and_bounded(self):
        task = make_task(SPEED_TASK_PROMPTS[0], 11)
        self.assertEqual(task, make_task(SPEED_TASK_PROMPTS[0], 11))
        self.assertNotEqual(task, make_task(SPEED_TASK_PROMPTS[0], 12))
        goal = PROMPT_GOALS[SPEED_TASK_PROMPTS[0]]
        for actual, base in ((task.goal, goal), (task.object_position, OBJECT_POSITION)):
            self.assertLessEqual(abs(actual[0] - base[0]), TOLERANCE)
            self.assertLessEqual(abs(actual[1] - base[1]), TOLERANCE)

    def test_plate_color_changes_goal(self):
        blue = make_task(SPEED_TASK_PROMPTS[0], 0)
        white = make_task(SPEED_TASK_PROMPTS[1], 0)
        self.assertGreater(blue.goal[0], white.goal[0])

    def test_task_validation(self):
        with self.assertRaises(PreconditionError):
            make_task("place seal quickly", 0)
        with self.assertRaises(PreconditionError):
            make_task(HEIGHT_TASK_PROMPT, 0, speed="warp")
        task = make_task(HEIGHT_TASK_PROMPT, 0)
        with self.assertRaises(PreconditionError):
            replace(task, horizon=0)
        self.assertIsInstance(task, TaskSpec)


class ExpertTests(unittest.TestCase):
    def test_expert_completes_every_style(self):
        for speed in SPEEDS:
            for height in HEIGHTS:
                task = make_task(HEIGHT_TASK_PROMPT, 3, speed, height)
                trace = expert_rollout(task)
                self.assertTrue(trace.success, (speed, height))

    def test_height_style_controls_peak(self):
        peaks = {
            height: max_height(expert_rollout(make_task(HEIGHT_TASK_PROMPT, 3, "medium", height)))
            for height in HEIGHTS
        }
        self.assertLess(peaks["low"], peaks["medium"])
        self.assertLess(peaks["medium"], peaks["high"])

    def test_speed_style_controls_step_length(self):
        means = {
            speed: step_displacements(expert_rollout(make_task(SPEED_TASK_PROMPTS[0], 3, speed, "medium"))).mean
            for speed in SPEEDS
        }
        self.assertLess(means["slow"], means["fast"])

    def test_mean_step_stays_within_one_bin_of_nominal(self):
        for speed, nominal in SPEEDS.items():
            steps = [
                step
                for prompt in PROMPT_GOALS
                for height in HEIGHTS
                for seed in range(10)
                for step in step_displacements(expert_rollout(make_task(prompt, seed, speed, height))).per_step
            ]
            self.assertLess(abs(sum(steps) / len(steps) - nominal), 0.1, speed)

    def test_expert_heads_for_object_first(self):
        task = make_task(SPEED_TASK_PROMPTS[0], 0)
        dx, _dy = default_vocab().decode_action(expert_action(task.initial_state(), task))
        self.assertGreater(dx, 0.0)


if __name__ == "__main__":
    unittest.main()
