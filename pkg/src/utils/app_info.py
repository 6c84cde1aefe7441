"""
应用信息工具类
"""

import os
import sys

from .file_utils import get_base_path


class AppInfo:
    """应用信息管理类"""

    APP_NAME = "VSteer"
    APP_FULL_NAME = "Value-vector Steering Toolkit"
    DESCRIPTION = "面向玩具 Transformer 策略的 FFN 价值向量解读与转向实验平台"

    @classmethod
    def _get_version_info(cls):
        """
        获取版本信息

        优先读取打包时生成的 version.py，开发环境回退到根目录 VERSION 文件。

        Returns:
            tuple: (version, build_time)
        """
        sys.path.insert(0, get_base_path())
        try:
            import version
            return version.VERSION, version.BUILD_TIME
        except ImportError:
            pass
        finally:
            sys.path.pop(0)
        try:
            with open(os.path.join(get_base_path(), "VERSION"), "r", encoding="utf-8") as stream:
                return stream.read().strip() or "0.0.0", "未知"
        except OSError:
            return "0.0.0", "未知"

    @classmethod
    def get_version(cls):
        return cls._get_version_info()[0]

    @classmethod
    def get_about_text(cls):
        """命令行 --version 输出的文本。"""
        version, build_time = cls._get_version_info()
        return f"""{cls.APP_NAME} ({cls.APP_FULL_NAME})

版本: {version}
构建时间: {build_time}

{cls.DESCRIPTION}"""
