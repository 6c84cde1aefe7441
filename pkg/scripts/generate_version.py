"""根据根目录 VERSION 生成打包用的 version.py。"""

import re
import sys
from datetime import datetime
from pathlib import Path


ROOT_DIR = Path(__file__).resolve().parent.parent
VERSION_FILE = ROOT_DIR / "VERSION"
OUTPUT_FILE = ROOT_DIR / "version.py"
# 稳定版 / -snapshot 开发版 / -rc.N 测试候选版
VERSION_PATTERN = re.compile(r"\d+\.\d+\.\d+(-snapshot|-rc\.\d+)?")

TEMPLATE = '''"""VSteer 版本信息（打包时生成）。"""

VERSION = {version!r}
BUILD_TIME = {build_time!r}
'''


def load_version(path=VERSION_FILE):
    text = path.read_text(encoding="utf-8").strip() if path.exists() else None
    if text is None:
        raise RuntimeError(f"缺少版本号文件 {path}")
    if not VERSION_PATTERN.fullmatch(text):
        raise RuntimeError(f"版本号格式无效：{text!r}（应为 X.Y.Z、X.Y.Z-snapshot 或 X.Y.Z-rc.N）")
    return text


def render_version_module(version, build_time):
    return TEMPLATE.format(version=version, build_time=build_time)


def generate_version_file(output=OUTPUT_FILE):
    version = load_version()
    build_time = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    output.write_text(render_version_module(version, build_time), encoding="utf-8")
    print(f"已写入 {output.name}：VSteer {version}（{build_time}）")
    return version


if __name__ == "__main__":
    try:
        generate_version_file()
    except RuntimeError as error:
        print(error)
        sys.exit(1)
