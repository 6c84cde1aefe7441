"""构建命令行单文件程序并创建包含可执行文件与许可证说明的 ZIP 发布包。"""

import sys
from pathlib import Path
from zipfile import ZIP_DEFLATED, ZipFile

from generate_version import generate_version_file, load_version


ROOT_DIR = Path(__file__).resolve().parent.parent
DIST_DIR = ROOT_DIR / "dist"
ENTRY_FILE = ROOT_DIR / "src" / "main" / "app_cli.py"
EXE_NAME = "vsteer"
EXE_FILE = DIST_DIR / (EXE_NAME + (".exe" if sys.platform == "win32" else ""))
VERSION_FILE = ROOT_DIR / "VERSION"
LICENSES_DIR = ROOT_DIR / "licenses"
VERSION = load_version()
ARCHIVE_FILE = DIST_DIR / f"VSteer_v{VERSION}.zip"


def build_executable() -> None:
    """使用 PyInstaller 将命令行入口打包为单文件程序。"""
    import PyInstaller.__main__

    generate_version_file()
    PyInstaller.__main__.run([
        str(ENTRY_FILE),
        "--onefile",
        "--name", EXE_NAME,
        "--paths", str(ROOT_DIR / "src"),
        "--paths", str(ROOT_DIR),
        "--hidden-import", "version",
        "--distpath", str(DIST_DIR),
        "--noconfirm",
    ])


def package_release() -> None:
    """将发布所需的可执行文件、版本号与许可证说明压缩为 ZIP 文件。"""
    required_paths = (EXE_FILE, VERSION_FILE, LICENSES_DIR)
    missing_paths = [str(path) for path in required_paths if not path.exists()]
    if missing_paths:
        raise FileNotFoundError("缺少发布文件：" + "、".join(missing_paths))

    with ZipFile(ARCHIVE_FILE, "w", ZIP_DEFLATED) as archive:
        archive.write(EXE_FILE, EXE_FILE.name)
        archive.write(VERSION_FILE, VERSION_FILE.name)
        for license_file in LICENSES_DIR.rglob("*"):
            if license_file.is_file():
                archive.write(license_file, license_file.relative_to(ROOT_DIR).as_posix())

    print(f"发布包已生成：{ARCHIVE_FILE}")


if __name__ == "__main__":
    if "--skip-build" not in sys.argv:
        build_executable()
    package_release()
