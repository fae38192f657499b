"""
Command-line round trips: two consecutive runs with the same seed must write byte-identical
prediction grids.

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from io import StringIO

from src.cli import main
from src.config import CONF
from src.data_loader import file_digest

CONFIG = """
seed: 7
grid_height: 12
grid_width: 12
grid_time_steps: 16
scene_sensors: 24
train_max_epochs: 5
pretrain_epochs: 5
logging_modes: [""]
"""


class DeterminismTest(unittest.TestCase):

    def setUp(self):
        self.saved = dict(CONF._borg_shared_state)
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = os.path.join(self.tmp.name, "config.yaml")
        with open(self.config, "w") as f:
            f.write(CONFIG)

    def tearDown(self):
        CONF._borg_shared_state.clear()
        CONF._borg_shared_state.update(self.saved)

    def round_trip(self, name: str) -> str:
        work = os.path.join(self.tmp.name, name)
        commands = [
            ["generate", "-o", f"{work}/data"],
            ["train", "-d", f"{work}/data", "-o", f"{work}/run"],
            ["predict", "-d", f"{work}/data", "--checkpoint", f"{work}/run/checkpoint",
             "-o", f"{work}/model"],
        ]
        for argv in commands:
            with redirect_stdout(StringIO()):
                self.assertEqual(main(argv + ["-c", self.config]), 0)
        return f"{work}/model.latg"

    def test_identical_predictions(self):
        first = self.round_trip("first")
        second = self.round_trip("second")
        self.assertEqual(file_digest(first), file_digest(second))
        with open(first, "rb") as f, open(second, "rb") as g:
            self.assertEqual(f.read(), g.read())


if __name__ == '__main__':
    unittest.main()
