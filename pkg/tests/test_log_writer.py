"""LogWriter 后台写入：损失曲线 CSV、运行日志与失败回传。"""

import sys
import tempfile
import time
import unittest
from pathlib import Path
from unittest.mock import patch


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from utils.log_writer import LogWriter


OPEN_TARGET = "utils.log_writer.Path.open"


class FakeFile:
    def __init__(self, fail_on=None):
        self.text = []
        self.fail_on = fail_on

    def write(self, text):
        if self.fail_on == "write":
            raise OSError("No space left on device")
        self.text.append(text)

    def flush(self):
        if self.fail_on == "flush":
            raise OSError("Input/output error")

    def close(self):
        pass

    @property
    def content(self):
        return "".join(self.text)


def poll_errors(writer, generation=None, seconds=1.0):
    deadline = time.monotonic() + seconds
    while time.monotonic() < deadline:
        errors = writer.take_errors(generation)
        if errors:
            return errors
        time.sleep(0.01)
    return []


class LossCurveOutputTests(unittest.TestCase):
    def test_header_then_rows_in_order(self):
        sink = FakeFile()
        writer = LogWriter()
        with patch(OPEN_TARGET, return_value=sink):
            writer.open("pretrain_loss.csv", 2, header=("step", "loss"))
            for step, loss in enumerate((0.5, 0.25)):
                writer.write_row((step, loss), 2)
            self.assertTrue(writer.stop())
        self.assertEqual(sink.content, "step,loss\n0,0.5\n1,0.25\n")

    def test_rows_from_previous_stage_are_discarded(self):
        sink = FakeFile()
        writer = LogWriter()
        with patch(OPEN_TARGET, return_value=sink):
            writer.open("finetune_loss.csv", 3)
            writer.write("pretrain\n", 2)
            writer.write("finetune\n", 3)
            self.assertTrue(writer.stop())
        self.assertEqual(sink.content, "finetune\n")

    def test_float_cells_keep_full_precision(self):
        sink = FakeFile()
        writer = LogWriter()
        with patch(OPEN_TARGET, return_value=sink):
            writer.open("loss.csv")
            writer.write_row((7, 1 / 3))
            self.assertTrue(writer.stop())
        self.assertEqual(sink.content, f"7,{1 / 3!r}\n")


class RunLogTests(unittest.TestCase):
    def test_append_mode_keeps_existing_lines(self):
        with tempfile.TemporaryDirectory() as directory:
            log_path = Path(directory) / "run.log"
            log_path.write_text("sweep 已开始\n", encoding="utf-8")
            writer = LogWriter()
            writer.open(log_path, 1, append=True)
            writer.log("单元 fast/6/10 完成", 1)
            self.assertTrue(writer.stop())
            first, second = log_path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(first, "sweep 已开始")
        self.assertRegex(second, r"^\[\d{4}-\d\d-\d\d \d\d:\d\d:\d\d\] 单元 fast/6/10 完成$")

    def test_over_budget_text_is_counted_as_dropped(self):
        writer = LogWriter(max_pending_bytes=0)
        try:
            self.assertFalse(writer.write("推演"))
            self.assertEqual(writer.take_dropped_bytes(), 6)
            self.assertEqual(writer.take_dropped_bytes(), 0)
        finally:
            writer.stop()

    def test_stopped_writer_refuses_everything(self):
        writer = LogWriter()
        self.assertTrue(writer.stop())
        self.assertFalse(writer.open("late.log"))
        self.assertFalse(writer.log("太晚了"))
        self.assertFalse(writer.close())


class FailureReportingTests(unittest.TestCase):
    def test_open_failure(self):
        writer = LogWriter()
        try:
            with patch(OPEN_TARGET, side_effect=PermissionError("read-only")):
                writer.open("/readonly/run.log")
                errors = poll_errors(writer)
        finally:
            writer.stop()
        self.assertEqual(len(errors), 1)
        self.assertIn("无法打开输出文件", errors[0])

    def test_write_failure_is_tagged_with_generation(self):
        writer = LogWriter()
        try:
            with patch(OPEN_TARGET, return_value=FakeFile(fail_on="write")):
                writer.open("run.log", 5)
                writer.log("评估完成", 5)
                errors = poll_errors(writer, 5)
        finally:
            writer.stop()
        self.assertEqual(len(errors), 1)
        self.assertIn("写入输出文件失败", errors[0])

    def test_close_failure(self):
        writer = LogWriter()
        try:
            with patch(OPEN_TARGET, return_value=FakeFile(fail_on="flush")):
                writer.open("run.log")
                writer.close()
                errors = poll_errors(writer)
        finally:
            writer.stop()
        self.assertEqual(len(errors), 1)
        self.assertIn("关闭输出文件失败", errors[0])

    def test_take_errors_filters_by_generation(self):
        writer = LogWriter()
        try:
            writer._record_error("pretrain 失败", 1)
            writer._record_error("finetune 失败", 2)
            self.assertEqual(writer.take_errors(2), ["finetune 失败"])
            self.assertEqual(writer.take_errors(), ["pretrain 失败"])
            self.assertEqual(writer.take_errors(), [])
        finally:
            writer.stop()


if __name__ == "__main__":
    unittest.main()
