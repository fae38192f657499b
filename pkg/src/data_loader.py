"""
File: Reading and writing of grid files, sensor tables, primitives, datasets, checkpoints,
predictions and run manifests

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
import hashlib
import json
import os
from typing import List, Dict, Tuple, Optional, Any, Sequence

import numpy as np
import pandas as pd

from .interfaces import GridSpec, GeoPrimitive, SensorReading, GridDataset, FeatureGrid, \
    LocationSplit, ModelConfig, RunManifest, TrainHistory
from .grid_data import map_sensors_to_labels
from .network import LatteModel
from .util import Logger, ParseError

LATG_MAGIC = b"LATG"
LATG_VERSION = 1
SENSOR_COLUMNS = ["sensor_id", "easting_m", "northing_m", "time_index", "value"]
PRIMITIVE_KINDS = ["point", "polyline", "polygon"]


# ==================================================================================================
# LATG grid files
# ==================================================================================================
def write_latg(path: str, array: np.ndarray) -> None:
    """ magic, u32 version, u32 number of dims, u32 dims..., float64 values (row-major) """
    array = np.ascontiguousarray(array, dtype="<f8")
    header = np.array([LATG_VERSION, array.ndim] + list(array.shape), dtype="<u4")
    with open(path, "wb") as f:
        f.write(LATG_MAGIC)
        f.write(header.tobytes())
        f.write(array.tobytes(order="C"))


def read_latg(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != LATG_MAGIC:
        raise ParseError(path, "not a LATG file (bad magic)")
    if len(raw) < 12:
        raise ParseError(path, "truncated header")
    version, ndim = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
    if version != LATG_VERSION:
        raise ParseError(path, f"unsupported LATG version {version}")
    header_end = 12 + 4 * int(ndim)
    if len(raw) < header_end:
        raise ParseError(path, "truncated header")
    dims = [int(d) for d in np.frombuffer(raw, dtype="<u4", count=int(ndim), offset=12)]
    expected = 8 * int(np.prod(dims, dtype=np.int64))
    if len(raw) - header_end != expected:
        raise ParseError(path, f"payload has {len(raw) - header_end} bytes, dims {dims} need "
                         f"{expected}")
    return np.frombuffer(raw, dtype="<f8", offset=header_end).reshape(dims).astype(np.float64)


# ==================================================================================================
# Sensors and primitives
# ==================================================================================================
def read_sensors_csv(path: str) -> List[SensorReading]:
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(path, f"malformed CSV: {e}")
    for column in SENSOR_COLUMNS:
        if column not in table.columns:
            raise ParseError(path, "missing column", line=1, field=column)

    numeric = {}
    for column in SENSOR_COLUMNS[1:]:
        converted = pd.to_numeric(table[column], errors="coerce")
        bad = np.flatnonzero(converted.isna().to_numpy() | ~np.isfinite(converted.to_numpy()))
        if len(bad):
            row = int(bad[0])
            raise ParseError(path, f"not a finite number: '{table[column].iloc[row]}'",
                             line=row + 2, field=column)
        numeric[column] = converted.to_numpy(dtype=np.float64)
    fractional = np.flatnonzero(numeric["time_index"] != np.floor(numeric["time_index"]))
    if len(fractional):
        raise ParseError(path, "time index must be an integer", line=int(fractional[0]) + 2,
                         field="time_index")

    return [
        SensorReading(str(sid), float(e), float(n), int(t), float(v))
        for sid, e, n, t, v in zip(table["sensor_id"], numeric["easting_m"],
                                   numeric["northing_m"], numeric["time_index"], numeric["value"])
    ]


def write_sensors_csv(path: str, readings: Sequence[SensorReading]) -> None:
    table = pd.DataFrame([tuple(r) for r in readings], columns=SENSOR_COLUMNS)
    table.to_csv(path, index=False, lineterminator="\n")


def read_primitives_json(path: str) -> List[GeoPrimitive]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(path, f"invalid JSON: {e.msg}", line=e.lineno)
    if not isinstance(data, list):
        raise ParseError(path, "expected an array of primitives")

    primitives = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ParseError(path, "expected an object", field=f"[{i}]")
        kind = item.get("kind")
        if kind not in PRIMITIVE_KINDS:
            raise ParseError(path, f"kind must be one of {PRIMITIVE_KINDS}", field=f"[{i}].kind")
        coords = item.get("coords")
        try:
            points = [(float(x), float(y)) for x, y in coords]
        except (TypeError, ValueError):
            raise ParseError(path, "coords must be a list of [x, y] pairs", field=f"[{i}].coords")
        try:
            attribute = float(item.get("attribute", 1.0))
        except (TypeError, ValueError):
            raise ParseError(path, "attribute must be a number", field=f"[{i}].attribute")
        primitives.append(GeoPrimitive(kind, points, attribute))
    return primitives


# ==================================================================================================
# JSON helpers
# ==================================================================================================
def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: str, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(path, f"invalid JSON: {e.msg}", line=e.lineno)


def _require(path: str, data: Dict, key: str) -> Any:
    if key not in data:
        raise ParseError(path, "missing key", field=key)
    return data[key]


def grid_spec_from_dict(path: str, data: Dict) -> GridSpec:
    try:
        return GridSpec(float(data["origin_easting"]), float(data["origin_northing"]),
                        float(data["cell_size"]), int(data["height"]),
                        int(data["width"])).validated()
    except KeyError as e:
        raise ParseError(path, "missing grid key", field=str(e.args[0]))
    except (TypeError, ValueError):
        raise ParseError(path, "invalid grid specification", field="grid")


# ==================================================================================================
# Dataset directories
# ==================================================================================================
def save_dataset(directory: str, data: GridDataset) -> List[str]:
    """ manifest.json, dynamic.latg, static.latg, sensors.csv and truth.latg when known """
    os.makedirs(directory, exist_ok=True)
    features = data.features
    manifest = {
        "grid": data.spec.to_dict(),
        "time_steps": features.time_steps,
        "dynamic_features": features.feature_names[:features.n_dynamic],
        "static_features": features.feature_names[features.n_dynamic:],
        "relevant_feature_ids": data.relevant_feature_ids,
    }
    paths = [os.path.join(directory, name) for name in
             ("manifest.json", "dynamic.latg", "static.latg", "sensors.csv")]
    write_json(paths[0], manifest)
    write_latg(paths[1], features.dynamic)
    write_latg(paths[2], features.static)
    write_sensors_csv(paths[3], data.readings)
    if data.truth is not None:
        paths.append(os.path.join(directory, "truth.latg"))
        write_latg(paths[-1], data.truth)
    return paths


def load_dataset(directory: str) -> GridDataset:
    manifest_path = os.path.join(directory, "manifest.json")
    manifest = read_json(manifest_path)
    spec = grid_spec_from_dict(manifest_path, _require(manifest_path, manifest, "grid"))
    time_steps = int(_require(manifest_path, manifest, "time_steps"))
    names = list(_require(manifest_path, manifest, "dynamic_features")) + \
        list(_require(manifest_path, manifest, "static_features"))

    dynamic = read_latg(os.path.join(directory, "dynamic.latg"))
    static = read_latg(os.path.join(directory, "static.latg"))
    features = FeatureGrid(spec, dynamic, static, names)
    if features.time_steps != time_steps:
        raise ParseError(manifest_path, f"time_steps is {time_steps}, dynamic.latg has "
                         f"{features.time_steps}", field="time_steps")

    readings = read_sensors_csv(os.path.join(directory, "sensors.csv"))
    labels, rejected = map_sensors_to_labels(readings, spec, time_steps)
    if rejected:
        Logger().warning("data", f"{len(rejected)} sensor readings fall outside the grid or the "
                         f"time range and were ignored")

    truth = None
    truth_path = os.path.join(directory, "truth.latg")
    if os.path.exists(truth_path):
        truth = read_latg(truth_path)
    relevant = manifest.get("relevant_feature_ids")
    return GridDataset(features, labels, readings, truth, relevant)


# ==================================================================================================
# Splits, checkpoints, histories
# ==================================================================================================
def write_split(path: str, split: LocationSplit) -> None:
    write_json(path, split.to_dict())


def read_split(path: str) -> LocationSplit:
    data = read_json(path)
    if not isinstance(data, dict):
        raise ParseError(path, "expected an object with train/val/test cell lists")
    try:
        return LocationSplit.from_dict(data)
    except (TypeError, ValueError):
        raise ParseError(path, "cells must be [row, col] pairs")


def save_checkpoint(directory: str, model: LatteModel, split: LocationSplit,
                    prior_splits: Sequence[LocationSplit] = ()) -> List[str]:
    """ params.json (names, shapes, model config, scalers, splits) plus one LATG blob each """
    os.makedirs(directory, exist_ok=True)
    params = {}
    paths = []
    for name, value in model.state_dict().items():
        blob = f"{name}.latg"
        write_latg(os.path.join(directory, blob), value)
        params[name] = {"shape": list(value.shape), "file": blob}
        paths.append(os.path.join(directory, blob))
    config = model.config._asdict()
    config["kernels"] = list(config["kernels"])
    index = {
        "parameters": params,
        "model_config": config,
        "scalers": model.scaler_state(),
        "split": split.to_dict(),
        "prior_splits": [s.to_dict() for s in prior_splits],
    }
    index_path = os.path.join(directory, "params.json")
    write_json(index_path, index)
    return [index_path] + paths


def load_checkpoint(directory: str) -> Tuple[LatteModel, LocationSplit, List[LocationSplit]]:
    index_path = os.path.join(directory, "params.json")
    index = read_json(index_path)
    raw_config = dict(_require(index_path, index, "model_config"))
    raw_config["kernels"] = tuple(raw_config.get("kernels", (1, 3, 5)))
    try:
        config = ModelConfig(**raw_config)
    except TypeError as e:
        raise ParseError(index_path, f"invalid model configuration: {e}", field="model_config")
    model = LatteModel(config)

    state = {}
    for name, entry in _require(index_path, index, "parameters").items():
        value = read_latg(os.path.join(directory, entry["file"]))
        if list(value.shape) != list(entry["shape"]):
            raise ParseError(index_path, f"blob shape {list(value.shape)} differs from the "
                             f"index", field=name)
        state[name] = value
    model.load_state_dict(state)
    model.load_scaler_state(_require(index_path, index, "scalers"))
    split = LocationSplit.from_dict(_require(index_path, index, "split"))
    priors = [LocationSplit.from_dict(s) for s in index.get("prior_splits", [])]
    return model, split, priors


def write_history_csv(path: str, history: TrainHistory) -> None:
    columns = ["epoch", "pred", "sp", "ae", "stc", "ac", "total", "val_rmse", "best_val_rmse",
               "nugget", "sill", "range", "selected"]
    pd.DataFrame(history.rows(), columns=columns).to_csv(path, index=False, lineterminator="\n")


# ==================================================================================================
# Predictions
# ==================================================================================================
def prediction_paths(out: str) -> Tuple[str, str, str]:
    base = out[:-5] if out.endswith(".latg") else out
    return base + ".latg", base + ".json", base + ".csv"


def write_prediction(out: str, prediction: np.ndarray, spec: GridSpec, times: Sequence[int],
                     method: str, export_csv: bool = False) -> List[str]:
    grid_path, sidecar_path, csv_path = prediction_paths(out)
    directory = os.path.dirname(grid_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_latg(grid_path, prediction)
    write_json(sidecar_path, {"grid": spec.to_dict(), "times": [int(t) for t in times],
                              "method": method})
    paths = [grid_path, sidecar_path]
    if export_csv:
        t_idx, rows, cols = np.meshgrid(np.asarray(times), np.arange(spec.height),
                                        np.arange(spec.width), indexing="ij")
        pd.DataFrame({
            "time": t_idx.reshape(-1), "row": rows.reshape(-1), "col": cols.reshape(-1),
            "value": prediction.reshape(-1),
        }).to_csv(csv_path, index=False, lineterminator="\n")
        paths.append(csv_path)
    return paths


def read_prediction(path: str) -> Tuple[np.ndarray, List[int], Dict]:
    grid_path, sidecar_path, _ = prediction_paths(path)
    prediction = read_latg(grid_path)
    sidecar = read_json(sidecar_path)
    times = [int(t) for t in _require(sidecar_path, sidecar, "times")]
    if prediction.ndim != 3 or prediction.shape[0] != len(times):
        raise ParseError(grid_path, f"prediction shape {list(prediction.shape)} does not match "
                         f"{len(times)} time steps")
    return prediction, times, sidecar


# ==================================================================================================
# Run manifests
# ==================================================================================================
def file_digest(path: str) -> str:
    """ SHA-256 of a file, or of the sorted member files of a directory """
    digest = hashlib.sha256()
    if os.path.isdir(path):
        for root, _, files in sorted(os.walk(path)):
            for name in sorted(files):
                member = os.path.join(root, name)
                digest.update(os.path.relpath(member, path).encode())
                digest.update(bytes.fromhex(file_digest(member)))
        return digest.hexdigest()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(path: str, manifest: RunManifest) -> None:
    write_json(path, manifest._asdict())


def read_manifest(path: str) -> RunManifest:
    data = read_json(path)
    try:
        return RunManifest(**data)
    except TypeError as e:
        raise ParseError(path, f"invalid run manifest: {e}")


def ensure_exists(path: str, what: Optional[str] = None) -> None:
    if not os.path.exists(path):
        raise ParseError(path, f"{what or 'file'} does not exist")
