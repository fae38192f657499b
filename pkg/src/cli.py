"""
File: Function definitions for using DeepLATTE as command-line tool
(Note: the actual CLI is accessed via latte.py)

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""

import os
import time
from argparse import ArgumentParser
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .config import CONF, ConfigError, LatteException
from .interfaces import GridSpec, GridDataset, LocationSplit, RunManifest, TrainHistory, \
    cell_mask
from .grid_data import rasterize_features, upscale_cubic, map_sensors_to_labels, \
    split_locations, carry_split, coordinate_features, time_features, build_feature_grid, \
    cell_centers
from .synthetic import generate_scene
from .training import Trainer, fine_tune, evaluate, proximity_profile, selected_feature_report
from .variogram import fit_autocorrelation, variogram_report, variogram_curve_rows
from .factory import get_predictor, get_model, get_train_config, get_scene_config, ABLATIONS, \
    PREDICTORS
from .data_loader import read_sensors_csv, read_primitives_json, read_json, read_latg, \
    write_json, save_dataset, load_dataset, write_split, read_split, save_checkpoint, \
    load_checkpoint, write_history_csv, write_prediction, read_prediction, file_digest, \
    write_manifest, grid_spec_from_dict, ensure_exists
from .util import Logger, STAT, ParseError, InsufficientObservations, format_duration

MANIFEST = "run_manifest.json"


# ==================================================================================================
# Helpers
# ==================================================================================================
def parse_time_range(text: Optional[str], time_steps: int) -> List[int]:
    """ 'a:b' selects the half-open range [a, b); 'a' selects one step; None selects all """
    if not text:
        return list(range(time_steps))
    try:
        if ":" in text:
            start_text, end_text = text.split(":", 1)
            start = int(start_text) if start_text else 0
            end = int(end_text) if end_text else time_steps
        else:
            start = int(text)
            end = start + 1
    except ValueError:
        raise ConfigError(f"ERROR: --time-range expects 'a:b', got '{text}'")
    if not 0 <= start < end <= time_steps:
        raise ConfigError(f"ERROR: --time-range {text} is outside [0, {time_steps})")
    return list(range(start, end))


def _manifest(path: str, command: str, inputs: Sequence[str], outputs: Sequence[str],
              start: float) -> None:
    digests: Dict[str, str] = {p: file_digest(p) for p in inputs if p}
    if CONF.config_path:
        digests[CONF.config_path] = file_digest(CONF.config_path)
    write_manifest(path, RunManifest(command, CONF.digest(), CONF.seed, digests,
                                     sorted(outputs), round(time.time() - start, 3)))


def _single_file_manifest(out: str) -> str:
    base, ext = os.path.splitext(out)
    return (base if ext in (".latg", ".json") else out) + ".manifest.json"


def _load_split(path: Optional[str], data: GridDataset) -> LocationSplit:
    if path:
        ensure_exists(path, "split file")
        return read_split(path)
    return split_locations(data.labels.labeled_cells(), data.spec, CONF.seed)


def _write_training(out: str, model, split: LocationSplit, history: TrainHistory,
                    prior_splits: Sequence[LocationSplit] = ()) -> List[str]:
    outputs = save_checkpoint(os.path.join(out, "checkpoint"), model, split, prior_splits)

    split_path = os.path.join(out, "split.json")
    write_split(split_path, split)
    history_path = os.path.join(out, "history.csv")
    write_history_csv(history_path, history)
    features_path = os.path.join(out, "selected_features.json")
    write_json(features_path, selected_feature_report(model))
    outputs += [split_path, history_path, features_path]

    variogram_dir = os.path.join(out, "variogram")
    os.makedirs(variogram_dir, exist_ok=True)
    for report in history.variogram_reports:
        path = os.path.join(variogram_dir, f"epoch_{report['epoch']:03d}.json")
        write_json(path, report)
        outputs.append(path)
    return outputs


def _metrics_by_role(prediction: np.ndarray, times: List[int], data: GridDataset,
                     split: Optional[LocationSplit]) -> Dict:
    labels = data.labels.values[times]
    observed = data.labels.mask[times]
    shape = observed.shape[1:]
    roles = {"all": observed}
    if split is not None:
        for role, cells in split._asdict().items():
            roles[role] = observed & cell_mask(cells, shape)[None]

    metrics: Dict = {}
    for role, mask in roles.items():
        metrics[role] = evaluate(prediction, labels, mask).to_dict() if mask.any() else None
    if data.truth is not None:
        full = np.ones_like(observed)
        metrics["full_field"] = evaluate(prediction, data.truth[times], full).to_dict()
    return metrics


# ==================================================================================================
# Commands
# ==================================================================================================
def cmd_generate(out: str, period: int = 0) -> List[str]:
    start = time.time()
    scene = generate_scene(get_scene_config(), period)
    outputs = save_dataset(out, scene)
    Logger().inform("generate", f"{scene.spec.height}x{scene.spec.width} grid, "
                    f"{scene.time_steps} steps, relevant features {scene.relevant_feature_ids}")
    _manifest(os.path.join(out, MANIFEST), "generate", [], outputs, start)
    return outputs


def cmd_ingest(sensors: str, out: str, layers: Sequence[str] = (), coarse: Sequence[str] = (),
               with_coordinates: bool = False, with_time_features: bool = False,
               start_hour: int = 0) -> List[str]:
    start = time.time()
    LOG = Logger()
    spec = GridSpec.from_conf().validated()
    time_steps = CONF.grid_time_steps
    inputs = [sensors]
    ensure_exists(sensors, "sensors file")
    readings = read_sensors_csv(sensors)

    static: Dict[str, np.ndarray] = {}
    dynamic: Dict[str, np.ndarray] = {}
    for layer in layers:
        parts = layer.split(":", 2)
        if len(parts) != 3:
            raise ConfigError(f"ERROR: --layer expects NAME:AGGREGATOR:FILE, got '{layer}'")
        name, aggregator, path = parts
        ensure_exists(path, "primitives file")
        static[name] = rasterize_features(read_primitives_json(path), spec, aggregator)
        inputs.append(path)

    for path in coarse:
        ensure_exists(path, "coarse raster description")
        description = read_json(path)
        if not isinstance(description, dict) or "name" not in description \
                or "file" not in description:
            raise ParseError(path, "expected an object with name, grid and file")
        coarse_spec = grid_spec_from_dict(path, description.get("grid", {}))
        raster_path = os.path.join(os.path.dirname(path), description["file"])
        raster = read_latg(raster_path)
        if raster.ndim == 2:
            static[description["name"]] = upscale_cubic(raster, coarse_spec, spec)
        elif raster.ndim == 3 and len(raster) == time_steps:
            dynamic[description["name"]] = np.stack([upscale_cubic(frame, coarse_spec, spec)
                                                     for frame in raster])
        else:
            raise ParseError(raster_path, f"expected [H, W] or [{time_steps}, H, W], got "
                             f"{list(raster.shape)}")
        inputs += [path, raster_path]

    if with_coordinates:
        static.update(coordinate_features(spec))
    if with_time_features:
        dynamic.update(time_features(spec, time_steps, start_hour))
    if not static and not dynamic:
        raise ConfigError("ERROR: ingest needs at least one feature layer")
    features = build_feature_grid(spec, time_steps, dynamic, static)

    labels, rejected = map_sensors_to_labels(readings, spec, time_steps)
    if rejected:
        LOG.warning("ingest", f"{len(rejected)} of {len(readings)} readings fall outside the "
                    f"grid or the time range and were dropped")
    dropped = set(rejected)
    kept = [r for r in readings if r not in dropped]
    outputs = save_dataset(out, GridDataset(features, labels, kept))
    LOG.inform("ingest", f"{features.n_features} features, {len(labels.labeled_cells())} "
               f"labeled cells")
    _manifest(os.path.join(out, MANIFEST), "ingest", inputs, outputs, start)
    return outputs


def cmd_train(data_dir: str, out: str, split_path: Optional[str] = None,
              drop: Optional[str] = None) -> List[str]:
    start = time.time()
    data = load_dataset(data_dir)
    split = _load_split(split_path, data)
    model = get_model(data.features.n_features)
    model, history = Trainer(model, get_train_config(drop)).train(data, split)
    outputs = _write_training(out, model, split, history)
    Logger().inform("train", f"best validation RMSE {history.best_val_rmse:.4f} at epoch "
                    f"{history.best_epoch}, {format_duration(time.time() - start)}")
    _manifest(os.path.join(out, MANIFEST), "train", [data_dir, split_path or ""], outputs, start)
    return outputs


def cmd_fine_tune(checkpoint: str, data_dir: str, out: str) -> List[str]:
    start = time.time()
    ensure_exists(checkpoint, "checkpoint")
    model, prior, earlier = load_checkpoint(checkpoint)
    data = load_dataset(data_dir)
    split = carry_split(prior, data.labels.labeled_cells(), data.spec, CONF.seed)
    priors = list(earlier) + [prior]
    model, history = fine_tune(model, data, split, get_train_config(), priors)
    outputs = _write_training(out, model, split, history, priors)
    _manifest(os.path.join(out, MANIFEST), "fine_tune", [checkpoint, data_dir], outputs, start)
    return outputs


def cmd_predict(data_dir: str, out: str, checkpoint: Optional[str] = None,
                method: Optional[str] = None, time_range: Optional[str] = None,
                split_path: Optional[str] = None, export_csv: bool = False) -> List[str]:
    """ Predict every cell with a trained model or with a baseline fed by the training cells """
    start = time.time()
    if (checkpoint is None) == (method is None):
        raise ConfigError("ERROR: predict needs exactly one of --checkpoint and --method")
    data = load_dataset(data_dir)
    times = parse_time_range(time_range, data.time_steps)
    inputs = [data_dir, split_path or ""]

    if checkpoint is not None:
        ensure_exists(checkpoint, "checkpoint")
        model, _, _ = load_checkpoint(checkpoint)
        prediction = model.predict_grid(data.features, times)
        label = "model"
        inputs.append(checkpoint)
    else:
        assert method is not None
        cells = read_split(split_path).train if split_path else None
        prediction = get_predictor(method, data, cells).predict_range(times)
        label = method

    outputs = write_prediction(out, prediction, data.spec, times, label, export_csv)
    _manifest(_single_file_manifest(out), "predict", inputs, outputs, start)
    return outputs


def cmd_evaluate(prediction_path: str, data_dir: str, out: str, split_path: Optional[str] = None,
                 proximity_feature: Optional[str] = None) -> Dict:
    start = time.time()
    prediction, times, _ = read_prediction(prediction_path)
    data = load_dataset(data_dir)
    if prediction.shape[1:] != (data.spec.height, data.spec.width) or \
            max(times) >= data.time_steps:
        raise ParseError(prediction_path, "prediction does not match the dataset grid")
    split = read_split(split_path) if split_path else None
    result = _metrics_by_role(prediction, times, data, split)

    if proximity_feature is not None:
        names = data.features.feature_names
        if proximity_feature not in names:
            raise ConfigError(f"ERROR: unknown feature '{proximity_feature}'")
        index = names.index(proximity_feature)
        if index < data.features.n_dynamic:
            raise ConfigError("ERROR: proximity profiles need a static feature")
        layer = data.features.static[..., index - data.features.n_dynamic]
        result["proximity"] = proximity_profile(prediction, layer, data.spec)

    write_json(out, result)
    _manifest(_single_file_manifest(out), "evaluate", [prediction_path, data_dir,
                                                        split_path or ""], [out], start)
    return result


def cmd_variogram(data_dir: str, out: str, checkpoint: Optional[str] = None,
                  lag_size: Optional[float] = None, time_range: Optional[str] = None) -> Dict:
    """
    Semivariogram of the labels, either between cell centers (labels averaged over the time
    range) or between the embeddings of a trained model.
    """
    start = time.time()
    data = load_dataset(data_dir)
    times = parse_time_range(time_range, data.time_steps)
    lag_size = lag_size or CONF.variogram_lag_size
    observed = data.labels.mask[times]
    inputs = [data_dir]

    if checkpoint is not None:
        ensure_exists(checkpoint, "checkpoint")
        model, _, _ = load_checkpoint(checkpoint)
        _, embeddings = model.infer(data.features, times)
        points = embeddings[observed]
        values = data.labels.values[times][observed]
        space = "embedding"
        inputs.append(checkpoint)
    else:
        counts = observed.sum(axis=0)
        cells = counts > 0
        points = cell_centers(data.spec)[cells]
        values = data.labels.values[times].sum(axis=0)[cells] / counts[cells]
        space = "coordinates"
    if len(values) < 2:
        raise InsufficientObservations("A semivariogram needs at least two labeled points")

    state = fit_autocorrelation(points, values, lag_size, CONF.variogram_min_pairs,
                                np.random.default_rng([CONF.seed, 3]), CONF.variogram_max_points,
                                CONF.variogram_max_pairs, seed=CONF.seed)
    report = variogram_report(state.bins, state.model, state.label_bins)
    report["space"] = space
    report["lag_scale"] = state.lag_scale

    base = out[:-5] if out.endswith(".json") else out
    directory = os.path.dirname(base)
    if directory:
        os.makedirs(directory, exist_ok=True)
    write_json(base + ".json", report)
    pd.DataFrame(variogram_curve_rows(state.bins, state.model),
                 columns=["lag_center", "gamma", "fitted"]) \
        .to_csv(base + ".csv", index=False, lineterminator="\n")
    _manifest(base + ".manifest.json", "variogram", inputs, [base + ".json", base + ".csv"],
              start)
    return report


def cmd_ablate(data_dir: str, out: str, drop: str) -> Dict:
    """ Train the full model and the model without one component on the same split """
    start = time.time()
    if drop not in ABLATIONS:
        raise ConfigError(f"ERROR: unknown value {drop} of --drop. "
                          f"Possible options: {sorted(ABLATIONS)}")
    LOG = Logger()
    data = load_dataset(data_dir)
    split = split_locations(data.labels.labeled_cells(), data.spec, CONF.seed)
    times = list(range(data.time_steps))
    os.makedirs(out, exist_ok=True)

    runs: Dict[str, Dict] = {}
    outputs = []
    for name, dropped in (("full", None), ("ablated", drop)):
        LOG.inform("ablate", f"training the {name} model")
        model, history = Trainer(get_model(data.features.n_features),
                                 get_train_config(dropped)).train(data, split)
        prediction = model.predict_grid(data.features, times)
        runs[name] = {
            "metrics": _metrics_by_role(prediction, times, data, split),
            "best_epoch": history.best_epoch,
            "selected_features": [f["name"] for f in selected_feature_report(model)],
        }
        history_path = os.path.join(out, f"history_{name}.csv")
        write_history_csv(history_path, history)
        outputs.append(history_path)

    key = "full_field" if data.truth is not None else "test"
    full = runs["full"]["metrics"].get(key)
    ablated = runs["ablated"]["metrics"].get(key)
    comparison = {"drop": drop, "compared_on": key, "full": runs["full"],
                  "ablated": runs["ablated"], "rmse_increase_pct": None}
    if full is not None and ablated is not None and full["rmse"] > 0:
        comparison["rmse_increase_pct"] = 100.0 * (ablated["rmse"] - full["rmse"]) / full["rmse"]
    if data.relevant_feature_ids is not None:
        comparison["relevant_features"] = [data.features.feature_names[i]
                                           for i in data.relevant_feature_ids]

    comparison_path = os.path.join(out, "comparison.json")
    write_json(comparison_path, comparison)
    outputs.append(comparison_path)
    _manifest(os.path.join(out, MANIFEST), "ablate", [data_dir], outputs, start)
    return comparison


# ==================================================================================================
# Argument parsing
# ==================================================================================================
def _parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "-c", "--config",
        type=str,
        required=False,
        help="YAML or JSON file with configuration options",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Overrides the `seed` configuration option",
    )

    parser = ArgumentParser(description='', add_help=False)
    subparsers = parser.add_subparsers(dest='subparser_name')
    subparsers.required = True

    # ==============================================================================================
    # Data
    parser_generate = subparsers.add_parser('generate', parents=[common])
    parser_generate.add_argument(
        '-o', '--out',
        type=str,
        required=True,
        help="Output data directory",
    )
    parser_generate.add_argument(
        '--period',
        type=int,
        default=0,
        help="Period of the scene: periods share sites and static features",
    )

    parser_ingest = subparsers.add_parser('ingest', parents=[common])
    parser_ingest.add_argument(
        '--sensors',
        type=str,
        required=True,
    )
    parser_ingest.add_argument(
        '--layer',
        type=str,
        action='append',
        default=[],
        help="Static layer from primitives: NAME:AGGREGATOR:FILE.json",
    )
    parser_ingest.add_argument(
        '--coarse',
        type=str,
        action='append',
        default=[],
        help="JSON description of a coarse raster to upscale",
    )
    parser_ingest.add_argument(
        '--with-coordinates',
        action='store_true',
    )
    parser_ingest.add_argument(
        '--with-time-features',
        action='store_true',
    )
    parser_ingest.add_argument(
        '--start-hour',
        type=int,
        default=0,
        help="Hour of the first time step, counted from January 1st 00:00",
    )
    parser_ingest.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )

    # ==============================================================================================
    # Training
    parser_train = subparsers.add_parser('train', parents=[common])
    parser_train.add_argument(
        '-d', '--data',
        type=str,
        required=True,
    )
    parser_train.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )
    parser_train.add_argument(
        '--split',
        type=str,
        default=None,
        help="Reuse an existing split instead of drawing one",
    )

    parser_fine_tune = subparsers.add_parser('fine_tune', parents=[common])
    parser_fine_tune.add_argument(
        '--checkpoint',
        type=str,
        required=True,
    )
    parser_fine_tune.add_argument(
        '-d', '--data',
        type=str,
        required=True,
    )
    parser_fine_tune.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )

    parser_ablate = subparsers.add_parser('ablate', parents=[common])
    parser_ablate.add_argument(
        '-d', '--data',
        type=str,
        required=True,
    )
    parser_ablate.add_argument(
        '--drop',
        type=str,
        required=True,
        choices=sorted(ABLATIONS),
    )
    parser_ablate.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )

    # ==============================================================================================
    # Prediction and analysis
    parser_predict = subparsers.add_parser('predict', parents=[common])
    parser_predict.add_argument(
        '-d', '--data',
        type=str,
        required=True,
    )
    parser_predict.add_argument(
        '--checkpoint',
        type=str,
        default=None,
    )
    parser_predict.add_argument(
        '--method',
        type=str,
        default=None,
        choices=sorted(PREDICTORS),
        help="Baseline interpolator instead of a trained model",
    )
    parser_predict.add_argument(
        '--split',
        type=str,
        default=None,
        help="Baselines only see the training cells of this split",
    )
    parser_predict.add_argument(
        '--time-range',
        type=str,
        default=None,
        help="Time steps a:b (b excluded); all steps by default",
    )
    parser_predict.add_argument(
        '--export-csv',
        action='store_true',
    )
    parser_predict.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )

    parser_evaluate = subparsers.add_parser('evaluate', parents=[common])
    parser_evaluate.add_argument(
        '-p', '--prediction',
        type=str,
        required=True,
    )
    parser_evaluate.add_argument(
        '-d', '--data',
        type=str,
        required=True,
        help="Data directory holding the labels",
    )
    parser_evaluate.add_argument(
        '--split',
        type=str,
        default=None,
    )
    parser_evaluate.add_argument(
        '--proximity',
        type=str,
        default=None,
        help="Static feature around which prediction means are reported",
    )
    parser_evaluate.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )

    parser_variogram = subparsers.add_parser('variogram', parents=[common])
    parser_variogram.add_argument(
        '-d', '--data',
        type=str,
        required=True,
    )
    parser_variogram.add_argument(
        '--checkpoint',
        type=str,
        default=None,
        help="Compute lags between the model embeddings instead of the cell centers",
    )
    parser_variogram.add_argument(
        '--lag-size',
        type=float,
        default=None,
    )
    parser_variogram.add_argument(
        '--time-range',
        type=str,
        default=None,
    )
    parser_variogram.add_argument(
        '-o', '--out',
        type=str,
        required=True,
    )
    return parser


def _update_config(args) -> None:
    if getattr(args, 'config', None):
        ensure_exists(args.config, "configuration file")
        try:
            CONF.load(args.config)
        except yaml.YAMLError as e:
            raise ConfigError(f"ERROR: {args.config} is not valid YAML/JSON: {e}")
    if getattr(args, 'seed', None) is not None:
        CONF.seed = args.seed


def run(args) -> int:
    _update_config(args)
    STAT.reset()

    if args.subparser_name == 'generate':
        cmd_generate(args.out, args.period)
        return 0

    if args.subparser_name == 'ingest':
        cmd_ingest(args.sensors, args.out, args.layer, args.coarse, args.with_coordinates,
                   args.with_time_features, args.start_hour)
        return 0

    if args.subparser_name == 'train':
        cmd_train(args.data, args.out, args.split)
        return 0

    if args.subparser_name == 'fine_tune':
        cmd_fine_tune(args.checkpoint, args.data, args.out)
        return 0

    if args.subparser_name == 'ablate':
        cmd_ablate(args.data, args.out, args.drop)
        return 0

    if args.subparser_name == 'predict':
        cmd_predict(args.data, args.out, args.checkpoint, args.method, args.time_range,
                    args.split, args.export_csv)
        return 0

    if args.subparser_name == 'evaluate':
        cmd_evaluate(args.prediction, args.data, args.out, args.split, args.proximity)
        return 0

    if args.subparser_name == 'variogram':
        cmd_variogram(args.data, args.out, args.checkpoint, args.lag_size, args.time_range)
        return 0

    raise Exception("Unreachable")


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return run(args)
    except LatteException as e:
        Logger().error(str(e).removeprefix("ERROR: "), exit_code=e.exit_code)
    except OSError as e:
        Logger().error(f"{e.filename or ''}: {e.strerror or e}", exit_code=2)


if __name__ == '__main__':
    print("[ERROR]", "This file is not meant to be run directly. Use `latte.py` instead.")
    exit(1)
