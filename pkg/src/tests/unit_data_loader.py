"""
Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import json
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from src.interfaces import GridSpec, SensorReading, LocationSplit, ModelConfig, RunManifest, \
    SceneConfig
from src.grid_data import split_locations
from src.network import LatteModel
from src.synthetic import generate_scene
from src.training import fit_scalers
from src.data_loader import write_latg, read_latg, read_sensors_csv, write_sensors_csv, \
    read_primitives_json, save_dataset, load_dataset, write_split, read_split, save_checkpoint, \
    load_checkpoint, write_prediction, read_prediction, file_digest, write_manifest, \
    read_manifest, ensure_exists, write_json, read_json
from src.util import ParseError


class LoaderTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name: str) -> str:
        return os.path.join(self.tmp.name, name)

    def write_text(self, name: str, text: str) -> str:
        with open(self.path(name), "w", encoding="utf-8") as f:
            f.write(text)
        return self.path(name)


class LatgTest(LoaderTestCase):

    def test_round_trip(self):
        for shape in [(5,), (3, 4), (2, 3, 4)]:
            array = np.random.default_rng(0).normal(size=shape)
            write_latg(self.path("a.latg"), array)
            loaded = read_latg(self.path("a.latg"))
            self.assertEqual(loaded.shape, shape)
            np.testing.assert_array_equal(loaded, array)

    def test_layout(self):
        write_latg(self.path("a.latg"), np.array([[1.0, 2.0]]))
        with open(self.path("a.latg"), "rb") as f:
            raw = f.read()
        self.assertEqual(raw[:4], b"LATG")
        self.assertEqual(len(raw), 4 + 4 * 4 + 2 * 8)
        self.assertEqual(np.frombuffer(raw, dtype="<u4", count=4, offset=4).tolist(),
                         [1, 2, 1, 2])

    def test_corrupt_files(self):
        write_latg(self.path("a.latg"), np.ones((2, 2)))
        with open(self.path("a.latg"), "rb") as f:
            raw = f.read()

        corrupt = {
            "magic.latg": b"GTAL" + raw[4:],
            "version.latg": raw[:4] + np.array([7], dtype="<u4").tobytes() + raw[8:],
            "short.latg": raw[:-8],
            "header.latg": raw[:6],
        }
        for name, content in corrupt.items():
            with open(self.path(name), "wb") as f:
                f.write(content)
            with self.subTest(name=name):
                with self.assertRaises(ParseError):
                    read_latg(self.path(name))


class SensorCsvTest(LoaderTestCase):

    HEADER = "sensor_id,easting_m,northing_m,time_index,value\n"

    def test_round_trip(self):
        readings = [SensorReading("S001", 250.0, 750.0, 0, 12.5),
                    SensorReading("S002", 1250.0, 250.0, 3, -1.25)]
        write_sensors_csv(self.path("s.csv"), readings)
        self.assertEqual(read_sensors_csv(self.path("s.csv")), readings)

    def test_missing_column(self):
        path = self.write_text("s.csv", "sensor_id,easting_m,northing_m,time_index\nA,1,2,0\n")
        with self.assertRaises(ParseError) as ctx:
            read_sensors_csv(path)
        self.assertEqual(ctx.exception.line, 1)
        self.assertEqual(ctx.exception.field, "value")

    def test_bad_value(self):
        path = self.write_text("s.csv", self.HEADER + "A,1,2,0,3.5\nB,1,2,0,abc\n")
        with self.assertRaises(ParseError) as ctx:
            read_sensors_csv(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertEqual(ctx.exception.field, "value")
        self.assertIn("line 3", str(ctx.exception))

        path = self.write_text("s.csv", self.HEADER + "A,inf,2,0,3.5\n")
        with self.assertRaises(ParseError) as ctx:
            read_sensors_csv(path)
        self.assertEqual(ctx.exception.field, "easting_m")

    def test_fractional_time(self):
        path = self.write_text("s.csv", self.HEADER + "A,1,2,0.5,3.5\n")
        with self.assertRaises(ParseError) as ctx:
            read_sensors_csv(path)
        self.assertEqual(ctx.exception.field, "time_index")


class PrimitivesJsonTest(LoaderTestCase):

    def test_read(self):
        path = self.write_text("p.json", json.dumps([
            {"kind": "point", "coords": [[1, 2]], "attribute": 3},
            {"kind": "polyline", "coords": [[0, 0], [10, 0]]},
        ]))
        points, line = read_primitives_json(path)
        self.assertEqual(points.kind, "point")
        self.assertEqual(points.coordinates, [(1.0, 2.0)])
        self.assertEqual(points.attribute, 3.0)
        self.assertEqual(line.attribute, 1.0)

    def test_errors(self):
        cases = {
            "[1].kind": [{"kind": "point", "coords": [[0, 0]]}, {"kind": "circle", "coords": []}],
            "[0].coords": [{"kind": "point", "coords": [[0, 0, 0]]}],
            "[0].attribute": [{"kind": "point", "coords": [[0, 0]], "attribute": "high"}],
        }
        for field, content in cases.items():
            path = self.write_text("p.json", json.dumps(content))
            with self.subTest(field=field):
                with self.assertRaises(ParseError) as ctx:
                    read_primitives_json(path)
                self.assertEqual(ctx.exception.field, field)

        with self.assertRaises(ParseError):
            read_primitives_json(self.write_text("p.json", '{"kind": "point"}'))
        with self.assertRaises(ParseError) as ctx:
            read_primitives_json(self.write_text("p.json", '[\n{"kind": \n'))
        self.assertIsNotNone(ctx.exception.line)


class DatasetTest(LoaderTestCase):

    SCENE = SceneConfig(height=6, width=5, time_steps=4, dynamic_features=2, static_features=2,
                        n_relevant=2, n_sensors=8, placement="uniform", seed=2)

    def test_round_trip(self):
        scene = generate_scene(self.SCENE)
        outputs = save_dataset(self.path("data"), scene)
        self.assertEqual(len(outputs), 5)
        loaded = load_dataset(self.path("data"))

        self.assertEqual(loaded.spec, scene.spec)
        self.assertEqual(loaded.features.feature_names, scene.features.feature_names)
        np.testing.assert_array_equal(loaded.features.dynamic, scene.features.dynamic)
        np.testing.assert_array_equal(loaded.features.static, scene.features.static)
        np.testing.assert_array_equal(loaded.truth, scene.truth)
        np.testing.assert_array_equal(loaded.labels.mask, scene.labels.mask)
        mask = scene.labels.mask
        np.testing.assert_allclose(loaded.labels.values[mask], scene.labels.values[mask],
                                   rtol=1e-12)
        self.assertEqual(loaded.relevant_feature_ids, scene.relevant_feature_ids)

    def test_inconsistent_time_steps(self):
        save_dataset(self.path("data"), generate_scene(self.SCENE))
        manifest_path = self.path(os.path.join("data", "manifest.json"))
        with open(manifest_path) as f:
            manifest = json.load(f)
        manifest["time_steps"] = 5
        with open(manifest_path, "w") as f:
            json.dump(manifest, f)
        with self.assertRaises(ParseError) as ctx:
            load_dataset(self.path("data"))
        self.assertEqual(ctx.exception.field, "time_steps")

    def test_split(self):
        split = LocationSplit(frozenset({(0, 1), (2, 2)}), frozenset({(1, 1)}), frozenset())
        write_split(self.path("split.json"), split)
        self.assertEqual(read_split(self.path("split.json")), split)
        with self.assertRaises(ParseError):
            read_split(self.write_text("bad.json", '{"train": [[1, 2, 3]]}'))


class CheckpointTest(LoaderTestCase):

    def test_round_trip(self):
        scene = generate_scene(DatasetTest.SCENE)
        split = split_locations(scene.labels.labeled_cells(), scene.spec, 0)
        model = LatteModel(ModelConfig(n_features=4, latent_dim=3, ae_hidden=5, hidden=2,
                                       kernels=(1, 3), head_hidden=3, window=2, seed=1))
        fit_scalers(model, scene, split.train)
        prior = LocationSplit(split.train, frozenset(), frozenset())
        save_checkpoint(self.path("ckpt"), model, split, [prior])

        loaded, loaded_split, priors = load_checkpoint(self.path("ckpt"))
        self.assertEqual(loaded.config, model.config)
        self.assertEqual(loaded_split, split)
        self.assertEqual(priors, [prior])
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(loaded.state_dict()[name], value)
        np.testing.assert_array_equal(loaded.predict_grid(scene.features),
                                      model.predict_grid(scene.features))

    def test_shape_mismatch(self):
        model = LatteModel(ModelConfig(n_features=2, latent_dim=2, ae_hidden=3, hidden=2,
                                       kernels=(1,), head_hidden=2, window=2))
        save_checkpoint(self.path("ckpt"), model, LocationSplit(frozenset(), frozenset(),
                                                                 frozenset()))
        write_latg(self.path(os.path.join("ckpt", "sparse.weights.latg")), np.ones(3))
        with self.assertRaises(ParseError) as ctx:
            load_checkpoint(self.path("ckpt"))
        self.assertEqual(ctx.exception.field, "sparse.weights")


class PredictionTest(LoaderTestCase):

    def test_round_trip_and_csv(self):
        spec = GridSpec(0.0, 0.0, 10.0, 2, 3)
        prediction = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
        outputs = write_prediction(self.path("pred/out"), prediction, spec, [4, 5], "idw",
                                   export_csv=True)
        self.assertEqual([os.path.basename(p) for p in outputs],
                         ["out.latg", "out.json", "out.csv"])

        loaded, times, sidecar = read_prediction(self.path("pred/out.latg"))
        np.testing.assert_array_equal(loaded, prediction)
        self.assertEqual(times, [4, 5])
        self.assertEqual(sidecar["method"], "idw")

        table = pd.read_csv(self.path("pred/out.csv"))
        self.assertEqual(list(table.columns), ["time", "row", "col", "value"])
        self.assertEqual(len(table), 12)
        last = table.iloc[-1]
        self.assertEqual((last["time"], last["row"], last["col"], last["value"]),
                         (5, 1, 2, 11.0))

    def test_mismatched_sidecar(self):
        spec = GridSpec(0.0, 0.0, 10.0, 2, 2)
        write_prediction(self.path("out"), np.zeros((1, 2, 2)), spec, [0], "ok")
        with open(self.path("out.json"), "w") as f:
            json.dump({"times": [0, 1]}, f)
        with self.assertRaises(ParseError):
            read_prediction(self.path("out"))


class ManifestTest(LoaderTestCase):

    def test_file_digest(self):
        first = self.write_text("a.txt", "abc")
        self.assertEqual(file_digest(first),
                         "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        os.makedirs(self.path("dir"))
        self.write_text("dir/x.txt", "1")
        before = file_digest(self.path("dir"))
        self.assertEqual(before, file_digest(self.path("dir")))
        self.write_text("dir/x.txt", "2")
        self.assertNotEqual(before, file_digest(self.path("dir")))

    def test_round_trip(self):
        manifest = RunManifest("train", "ab" * 32, 3, {"data": "cd" * 32}, ["out/split.json"],
                               1.5)
        write_manifest(self.path("m.json"), manifest)
        self.assertEqual(read_manifest(self.path("m.json")), manifest)

    def test_json_with_numpy_values(self):
        write_json(self.path("r.json"), {"index": np.int64(3), "rmse": np.float32(0.5),
                                         "weights": np.arange(2.0)})
        self.assertEqual(read_json(self.path("r.json")),
                         {"index": 3, "rmse": 0.5, "weights": [0.0, 1.0]})
        with self.assertRaises(TypeError):
            write_json(self.path("bad.json"), {"x": object()})

    def test_missing_file(self):
        with self.assertRaises(ParseError):
            ensure_exists(self.path("nothing"), "checkpoint")


if __name__ == '__main__':
    unittest.main()
