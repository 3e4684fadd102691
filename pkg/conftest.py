"""
pytest 共通設定

slow マーカーの付いたテスト（細かい格子での受け入れ検証）は --runslow を付けたときだけ実行する。
"""

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="slow マーカーのテストも実行する")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 細かい格子を使う時間のかかる受け入れテスト")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="--runslow を付けると実行します")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
