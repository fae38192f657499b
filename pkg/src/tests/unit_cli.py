"""
Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import json
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from io import StringIO

import numpy as np
import pandas as pd

from src.cli import main, parse_time_range
from src.config import CONF, ConfigError
from src.data_loader import load_dataset, read_prediction, read_split, read_manifest, \
    write_latg, file_digest

SMALL_CONFIG = """
seed: 1
grid_height: 8
grid_width: 8
grid_time_steps: 6
scene_dynamic_features: 2
scene_static_features: 3
scene_relevant_features: 2
scene_sensors: 20
scene_sensor_placement: uniform
model_latent_dim: 4
model_ae_hidden: 6
model_hidden: 3
model_kernels: [1, 3]
model_head_hidden: 4
model_window: 3
train_max_epochs: 2
train_patience: 5
pretrain_epochs: 1
pretrain_batch: 128
variogram_max_points: 300
logging_modes: [""]
"""


class CliTestCase(unittest.TestCase):

    def setUp(self):
        self.saved = dict(CONF._borg_shared_state)
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.config = self.path("config.yaml")
        with open(self.config, "w") as f:
            f.write(SMALL_CONFIG)

    def tearDown(self):
        CONF._borg_shared_state.clear()
        CONF._borg_shared_state.update(self.saved)

    def path(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def latte(self, *argv: str) -> int:
        with redirect_stdout(StringIO()):
            return main(list(argv) + ["-c", self.config])

    def exit_code(self, *argv: str) -> int:
        with self.assertRaises(SystemExit) as ctx:
            self.latte(*argv)
        return ctx.exception.code


class TimeRangeTest(unittest.TestCase):

    def test_parse(self):
        self.assertEqual(parse_time_range(None, 4), [0, 1, 2, 3])
        self.assertEqual(parse_time_range("1:3", 4), [1, 2])
        self.assertEqual(parse_time_range(":2", 4), [0, 1])
        self.assertEqual(parse_time_range("2:", 4), [2, 3])
        self.assertEqual(parse_time_range("2", 4), [2])

    def test_invalid(self):
        for text in ("3:1", "a:b", "0:5", "-1:2", "4"):
            with self.subTest(text=text):
                with self.assertRaises(ConfigError):
                    parse_time_range(text, 4)


class PipelineTest(CliTestCase):

    def test_generate_train_predict_evaluate(self):
        data, run = self.path("data"), self.path("run")
        self.assertEqual(self.latte("generate", "-o", data), 0)
        self.assertEqual(read_manifest(os.path.join(data, "run_manifest.json")).command,
                         "generate")

        self.assertEqual(self.latte("train", "-d", data, "-o", run), 0)
        for name in ("checkpoint/params.json", "split.json", "history.csv",
                     "selected_features.json", "run_manifest.json"):
            self.assertTrue(os.path.exists(os.path.join(run, name)), name)
        history = pd.read_csv(os.path.join(run, "history.csv"))
        self.assertIn(len(history), (1, 2))
        manifest = read_manifest(os.path.join(run, "run_manifest.json"))
        self.assertEqual(manifest.seed, 1)
        self.assertIn(self.config, manifest.inputs)

        prediction = self.path("pred/model")
        self.assertEqual(self.latte("predict", "-d", data, "--checkpoint",
                                    os.path.join(run, "checkpoint"), "--time-range", "2:6",
                                    "--export-csv", "-o", prediction), 0)
        values, times, sidecar = read_prediction(prediction)
        self.assertEqual(values.shape, (4, 8, 8))
        self.assertEqual(times, [2, 3, 4, 5])
        self.assertEqual(sidecar["method"], "model")
        self.assertEqual(len(pd.read_csv(prediction + ".csv")), 4 * 64)

        split = os.path.join(run, "split.json")
        report = self.path("eval.json")
        self.assertEqual(self.latte("evaluate", "-p", prediction, "-d", data, "--split", split,
                                    "-o", report), 0)
        with open(report) as f:
            metrics = json.load(f)
        for role in ("all", "train", "val", "test", "full_field"):
            self.assertIn(role, metrics)
        self.assertEqual(metrics["full_field"]["count"], 4 * 64)
        self.assertTrue(np.isfinite(metrics["all"]["rmse"]))

    def test_baseline_sees_only_training_cells(self):
        data = self.path("data")
        self.latte("generate", "-o", data)
        split_path = self.path("split.json")
        dataset = load_dataset(data)
        train_cells = sorted(dataset.labels.labeled_cells())[:6]
        with open(split_path, "w") as f:
            json.dump({"train": [list(c) for c in train_cells], "val": [], "test": []}, f)

        prediction = self.path("idw")
        self.assertEqual(self.latte("predict", "-d", data, "--method", "idw", "--split",
                                    split_path, "-o", prediction), 0)
        values, times, _ = read_prediction(prediction)
        self.assertEqual(times, list(range(6)))
        for r, c in train_cells:
            for t in range(6):
                if dataset.labels.mask[t, r, c]:
                    self.assertEqual(values[t, r, c], dataset.labels.values[t, r, c])
        self.assertEqual(read_split(split_path).train, frozenset(train_cells))

    def test_variogram(self):
        data = self.path("data")
        self.latte("generate", "-o", data)
        self.assertEqual(self.latte("variogram", "-d", data, "-o", self.path("vario.json")), 0)
        with open(self.path("vario.json")) as f:
            report = json.load(f)
        self.assertEqual(report["space"], "coordinates")
        self.assertEqual(len(report["bins"]), 10)
        self.assertIn("range", report["fitted"])
        curve = pd.read_csv(self.path("vario.csv"))
        self.assertEqual(list(curve.columns), ["lag_center", "gamma", "fitted"])

    def test_generate_is_deterministic(self):
        self.latte("generate", "-o", self.path("a"))
        self.latte("generate", "-o", self.path("b"))
        for name in ("dynamic.latg", "static.latg", "truth.latg", "sensors.csv"):
            self.assertEqual(file_digest(os.path.join(self.path("a"), name)),
                             file_digest(os.path.join(self.path("b"), name)), name)
        self.latte("generate", "--seed", "2", "-o", self.path("c"))
        self.assertNotEqual(file_digest(self.path("a/truth.latg")),
                            file_digest(self.path("c/truth.latg")))


class IngestTest(CliTestCase):

    def setUp(self):
        super().setUp()
        with open(self.config, "a") as f:
            f.write("grid_height: 4\ngrid_width: 4\ngrid_cell_size: 100.0\ngrid_time_steps: 2\n")

    def test_ingest(self):
        sensors = self.path("sensors.csv")
        with open(sensors, "w") as f:
            f.write("sensor_id,easting_m,northing_m,time_index,value\n"
                    "A,50,50,0,1.0\nB,350,350,1,2.0\nC,-10,50,0,3.0\nD,50,50,7,4.0\n")
        roads = self.path("roads.json")
        with open(roads, "w") as f:
            json.dump([{"kind": "polyline", "coords": [[0, 50], [400, 50]]}], f)
        write_latg(self.path("elevation.latg"), np.full((5, 5), 12.0))
        coarse = self.path("elevation.json")
        with open(coarse, "w") as f:
            json.dump({"name": "elevation", "file": "elevation.latg",
                       "grid": {"origin_easting": 0, "origin_northing": 0, "cell_size": 100,
                                "height": 5, "width": 5}}, f)

        out = self.path("data")
        self.assertEqual(self.latte("ingest", "--sensors", sensors, "--layer",
                                    f"roads:sum_length:{roads}", "--coarse", coarse,
                                    "--with-coordinates", "--with-time-features", "-o", out), 0)
        data = load_dataset(out)
        names = data.features.feature_names
        self.assertEqual(data.features.n_dynamic, 3)
        for name in ("roads", "elevation", "easting", "northing", "hour_of_day"):
            self.assertIn(name, names)
        static = data.features.static[..., names.index("elevation") - data.features.n_dynamic]
        np.testing.assert_allclose(static, 12.0)
        self.assertEqual(len(data.readings), 2)
        self.assertEqual(int(data.labels.mask.sum()), 2)

    def test_errors(self):
        sensors = self.path("sensors.csv")
        with open(sensors, "w") as f:
            f.write("sensor_id,easting_m,northing_m,time_index,value\nA,50,50,0,x\n")
        self.assertEqual(self.exit_code("ingest", "--sensors", sensors, "--with-coordinates",
                                        "-o", self.path("data")), 2)
        self.assertEqual(self.exit_code("ingest", "--sensors", self.path("missing.csv"),
                                        "-o", self.path("data")), 2)


class ErrorTest(CliTestCase):

    def test_exit_codes(self):
        self.assertEqual(self.exit_code("predict", "-d", self.path("nothing"), "--method", "idw",
                                        "-o", self.path("p")), 2)
        self.latte("generate", "-o", self.path("data"))
        self.assertEqual(self.exit_code("predict", "-d", self.path("data"), "--method", "idw",
                                        "--checkpoint", self.path("ckpt"), "-o",
                                        self.path("p")), 2)
        self.assertEqual(self.exit_code("predict", "-d", self.path("data"), "--method", "ok",
                                        "--time-range", "5:2", "-o", self.path("p")), 2)

    def test_bad_config(self):
        with open(self.config, "a") as f:
            f.write("train_lr: -1.0\n")
        self.assertEqual(self.exit_code("generate", "-o", self.path("data")), 2)


if __name__ == '__main__':
    unittest.main()
