import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BLOCKOPS_RUN_LONG") == "1":
        return
    skip_long = pytest.mark.skip(reason="full-scale run; set BLOCKOPS_RUN_LONG=1 to enable")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip_long)
