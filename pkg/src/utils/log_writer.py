"""运行日志与 CSV 序列的后台写入器。

训练循环与命令行会话只负责把文本排队，真正的文件操作在一个守护线程里完成，
因此磁盘慢或文件被占用时不会拖慢前向/反向计算。
"""

import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Optional


@dataclass(frozen=True)
class _Job:
    kind: str
    payload: Any = None
    generation: Optional[int] = None
    size: int = 0


@dataclass(frozen=True)
class _OpenTarget:
    path: str
    header: Optional[tuple] = None
    append: bool = False


class _Sink:
    """后台线程持有的当前输出文件及其代次。"""

    def __init__(self):
        self.stream = None
        self.generation = None

    def accepts(self, generation):
        return self.stream is not None and generation == self.generation

    def detach(self):
        stream, generation = self.stream, self.generation
        self.stream = None
        self.generation = None
        return stream, generation


class LogWriter:
    """有界队列 + 单写线程的日志/CSV 写入器。

    每次 open 带一个代次号（预训练、微调各用一个），代次对不上的写入直接丢弃，
    失败信息也按代次分开取回。待写字节超过 max_pending_bytes 时新内容被丢弃并计数。
    """

    def __init__(self, max_pending_bytes=4 * 1024 * 1024):
        self._jobs = deque()
        self._lock = threading.Condition()
        self._budget = max_pending_bytes
        self._queued_bytes = 0
        self._dropped = 0
        self._failures = []
        self._closed_for_input = False
        self._sink = _Sink()
        self._handlers = {
            "open": self._handle_open,
            "text": self._handle_text,
            "close": self._handle_close,
        }
        self._worker = threading.Thread(target=self._drain, name="vsteer-log-writer", daemon=True)
        self._worker.start()

    # ---- 生产者侧 ----

    def _enqueue(self, job):
        with self._lock:
            if self._closed_for_input:
                return False
            if job.size and self._queued_bytes + job.size > self._budget:
                self._dropped += job.size
                return False
            self._jobs.append(job)
            self._queued_bytes += job.size
            self._lock.notify()
        return True

    def open(self, path, generation=None, header=None, append=False):
        """切换到新的输出文件；给出 header 时先写一行 CSV 列名。"""
        target = _OpenTarget(str(path), tuple(header) if header else None, append)
        return self._enqueue(_Job("open", target, generation))

    def write(self, text, generation=None):
        return self._enqueue(_Job("text", text, generation, len(text.encode("utf-8"))))

    def write_row(self, values, generation=None):
        return self.write(_csv_line(values), generation)

    def log(self, message, generation=None):
        stamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        return self.write(f"[{stamp}] {message}\n", generation)

    def close(self, generation=None):
        return self._enqueue(_Job("close", generation=generation))

    def stop(self, timeout=5.0):
        """不再接收新内容，写完队列后等待线程退出；超时返回 False。"""
        with self._lock:
            if not self._closed_for_input:
                self._closed_for_input = True
                self._jobs.append(_Job("stop"))
                self._lock.notify()
        self._worker.join(timeout)
        return not self._worker.is_alive()

    def take_dropped_bytes(self):
        with self._lock:
            dropped = self._dropped
            self._dropped = 0
        return dropped

    def take_errors(self, generation=None):
        """取出并清空失败信息；generation 为 None 时取全部。"""
        with self._lock:
            if generation is None:
                taken, self._failures = self._failures, []
            else:
                taken = [item for item in self._failures if item[0] == generation]
                self._failures = [item for item in self._failures if item[0] != generation]
        return [message for _generation, message in taken]

    def _record_error(self, message, generation=None):
        with self._lock:
            self._failures.append((generation, message))

    # ---- 写线程侧 ----

    def _drain(self):
        while True:
            with self._lock:
                while not self._jobs:
                    self._lock.wait()
                job = self._jobs.popleft()
                self._queued_bytes -= job.size
            if job.kind == "stop":
                self._release_sink()
                return
            self._handlers[job.kind](job)

    def _release_sink(self):
        stream, generation = self._sink.detach()
        if stream is None:
            return
        try:
            stream.flush()
            stream.close()
        except OSError as error:
            self._record_error(f"关闭输出文件失败: {error}", generation)

    def _handle_open(self, job):
        self._release_sink()
        target = job.payload
        try:
            stream = Path(target.path).open("a" if target.append else "w", encoding="utf-8", newline="\n")
            if target.header:
                stream.write(",".join(target.header) + "\n")
        except OSError as error:
            self._record_error(f"无法打开输出文件 {target.path}: {error}", job.generation)
            return
        self._sink.stream = stream
        self._sink.generation = job.generation

    def _handle_text(self, job):
        if not self._sink.accepts(job.generation):
            return
        try:
            self._sink.stream.write(job.payload)
        except OSError as error:
            generation = self._sink.generation
            self._release_sink()
            self._record_error(f"写入输出文件失败: {error}", generation)

    def _handle_close(self, job):
        if self._sink.stream is None:
            return
        if job.generation is None or job.generation == self._sink.generation:
            self._release_sink()


def _csv_line(values):
    # float 用 repr 保留完整精度
    return ",".join(repr(value) if isinstance(value, float) else str(value) for value in values) + "\n"
