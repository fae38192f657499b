"""
File: Raster representation of the target area: feature layers, coarse-field upscaling,
sensor-to-cell mapping and location splits

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""
from typing import List, Dict, Tuple, Optional, Iterable, Set

import numpy as np
import shapely

from .interfaces import GridSpec, GeoPrimitive, SensorReading, FeatureGrid, LabelGrid, \
    LocationSplit, Cell
from .util import ShapeError, InvalidAggregator, InsufficientSamples, ExtentError, EmptyLabelSet

AGGREGATORS = ["sum_length", "sum_area", "count", "mean_attribute"]
_REQUIRED_KIND = {"sum_length": "polyline", "sum_area": "polygon"}


# ==================================================================================================
# Cell geometry
# ==================================================================================================
def cell_of(spec: GridSpec, easting: float, northing: float) -> Optional[Cell]:
    """ Cell containing the point, with half-open cells [x0, x0 + s) x [y0, y0 + s) """
    col = int(np.floor((easting - spec.origin_easting) / spec.cell_size))
    row = int(np.floor((northing - spec.origin_northing) / spec.cell_size))
    if 0 <= row < spec.height and 0 <= col < spec.width:
        return row, col
    return None


def cell_center(spec: GridSpec, row: int, col: int) -> Tuple[float, float]:
    return (spec.origin_easting + (col + 0.5) * spec.cell_size,
            spec.origin_northing + (row + 0.5) * spec.cell_size)


def cell_centers(spec: GridSpec) -> np.ndarray:
    """ [H, W, 2] array of (easting, northing) of every cell center """
    eastings = spec.origin_easting + (np.arange(spec.width) + 0.5) * spec.cell_size
    northings = spec.origin_northing + (np.arange(spec.height) + 0.5) * spec.cell_size
    ee, nn = np.meshgrid(eastings, northings)
    return np.stack([ee, nn], axis=-1)


def _cell_boxes(spec: GridSpec) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(spec.width), np.arange(spec.height))
    x0 = spec.origin_easting + cols * spec.cell_size
    y0 = spec.origin_northing + rows * spec.cell_size
    return shapely.box(x0, y0, x0 + spec.cell_size, y0 + spec.cell_size)


def _foreign_edges(spec: GridSpec) -> np.ndarray:
    """ Top and right edge of every cell as one line; they belong to the neighbouring cells """
    cols, rows = np.meshgrid(np.arange(spec.width), np.arange(spec.height))
    x0 = spec.origin_easting + cols * spec.cell_size
    y0 = spec.origin_northing + rows * spec.cell_size
    x1, y1 = x0 + spec.cell_size, y0 + spec.cell_size
    coords = np.stack([np.stack([x0, y1], -1), np.stack([x1, y1], -1), np.stack([x1, y0], -1)],
                      axis=-2)
    lines = shapely.linestrings(coords.reshape(-1, 3, 2))
    return np.asarray(lines).reshape(spec.height, spec.width)


# ==================================================================================================
# Rasterization
# ==================================================================================================
def _to_geometry(primitive: GeoPrimitive):
    coords = [tuple(map(float, p)) for p in primitive.coordinates]
    if primitive.kind == "point":
        if len(coords) != 1:
            raise ShapeError(f"A point has exactly one coordinate pair, got {len(coords)}")
        return shapely.Point(coords[0])
    if primitive.kind == "polyline":
        if len(coords) < 2:
            raise ShapeError("A polyline needs at least two vertices")
        return shapely.LineString(coords)
    if primitive.kind == "polygon":
        if len(coords) < 3:
            raise ShapeError("A polygon needs at least three vertices")
        if coords[0] != coords[-1]:
            raise ShapeError("A polygon must be closed (first vertex == last vertex)")
        return shapely.Polygon(coords)
    raise ShapeError(f"Unknown primitive kind '{primitive.kind}'")


def rasterize_features(primitives: List[GeoPrimitive], spec: GridSpec,
                       aggregator: str) -> np.ndarray:
    """
    Aggregate the portions of the primitives that fall into each cell.
    sum_length: total length of polyline pieces; sum_area: total overlap area of polygons;
    count: number of primitives touching a cell with a non-degenerate portion;
    mean_attribute: mean attribute of those primitives. Empty cells get zero.
    """
    if aggregator not in AGGREGATORS:
        raise InvalidAggregator(f"Unknown aggregator '{aggregator}'. Options: {AGGREGATORS}")
    field = np.zeros((spec.height, spec.width))
    if not primitives:
        return field
    required = _REQUIRED_KIND.get(aggregator)
    for p in primitives:
        if required and p.kind != required:
            raise InvalidAggregator(f"Aggregator {aggregator} expects {required} primitives, "
                                    f"got a {p.kind}")

    boxes = _cell_boxes(spec)
    edges = _foreign_edges(spec)
    counts = np.zeros_like(field)
    for primitive in primitives:
        geometry = _to_geometry(primitive)
        if primitive.kind == "point":
            cell = cell_of(spec, geometry.x, geometry.y)
            if cell is not None:
                field[cell] += primitive.attribute if aggregator == "mean_attribute" else 1.0
                counts[cell] += 1
            continue

        # candidate cells from the bounding box
        x0, y0, x1, y1 = geometry.bounds
        c0 = max(int(np.floor((x0 - spec.origin_easting) / spec.cell_size)), 0)
        c1 = min(int(np.floor((x1 - spec.origin_easting) / spec.cell_size)), spec.width - 1)
        r0 = max(int(np.floor((y0 - spec.origin_northing) / spec.cell_size)), 0)
        r1 = min(int(np.floor((y1 - spec.origin_northing) / spec.cell_size)), spec.height - 1)
        if c0 > c1 or r0 > r1:
            continue
        candidates = boxes[r0:r1 + 1, c0:c1 + 1]
        pieces = shapely.intersection(geometry, candidates)
        if primitive.kind == "polyline":
            # pieces running along a shared edge are owned by one cell only, as in cell_of
            on_edge = shapely.intersection(pieces, edges[r0:r1 + 1, c0:c1 + 1])
            measure = shapely.length(pieces) - shapely.length(on_edge)
            measure[measure < 1e-12 * spec.cell_size] = 0.0
        else:
            measure = shapely.area(pieces)

        window = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        touched = measure > 0
        if aggregator in ("sum_length", "sum_area"):
            field[window] += measure
        elif aggregator == "count":
            field[window] += touched
        else:
            field[window] += touched * primitive.attribute
        counts[window] += touched

    if aggregator == "mean_attribute":
        field = np.divide(field, counts, out=np.zeros_like(field), where=counts > 0)
    return field


# ==================================================================================================
# Upscaling
# ==================================================================================================
def _keys_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """ Weights of the samples at offsets -1, 0, 1, 2 for fractional positions t in [0, 1) """
    def kernel(x):
        x = np.abs(x)
        near = ((a + 2) * x - (a + 3)) * x * x + 1
        far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
        return np.where(x <= 1, near, np.where(x < 2, far, 0.0))

    return np.stack([kernel(t + 1), kernel(t), kernel(1 - t), kernel(2 - t)], axis=-1)


def _pad_linear(values: np.ndarray, axis: int) -> np.ndarray:
    """ Two ghost samples on each side: f(-1) = 3 f(0) - 3 f(1) + f(2), applied twice """
    v = np.moveaxis(values, axis, 0)
    lo1 = 3 * v[0] - 3 * v[1] + v[2]
    lo2 = 3 * lo1 - 3 * v[0] + v[1]
    hi1 = 3 * v[-1] - 3 * v[-2] + v[-3]
    hi2 = 3 * hi1 - 3 * v[-1] + v[-2]
    padded = np.concatenate([lo2[None], lo1[None], v, hi1[None], hi2[None]], axis=0)
    return np.moveaxis(padded, 0, axis)


def _interpolation_matrix(positions: np.ndarray, n_samples: int) -> np.ndarray:
    """ Rows map the padded samples (n + 4) to the values at fractional sample positions """
    positions = np.clip(positions, -0.5, n_samples - 0.5)
    base = np.floor(positions).astype(int)
    weights = _keys_weights(positions - base)
    matrix = np.zeros((len(positions), n_samples + 4))
    for offset in range(4):
        # padded index of sample (base - 1 + offset)
        np.add.at(matrix, (np.arange(len(positions)), base + 1 + offset), weights[:, offset])
    return matrix


def upscale_cubic(coarse: np.ndarray, coarse_spec: GridSpec, target: GridSpec) -> np.ndarray:
    """
    Bicubic (Keys, a = -0.5) interpolation of a coarse field sampled at its cell centers,
    evaluated at the target cell centers.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.shape != (coarse_spec.height, coarse_spec.width):
        raise ShapeError(f"Coarse field {list(coarse.shape)} does not match its grid "
                         f"{coarse_spec.height}x{coarse_spec.width}")
    if coarse_spec.height < 4 or coarse_spec.width < 4:
        raise InsufficientSamples(f"Cubic upscaling needs at least 4x4 coarse samples, got "
                                  f"{coarse_spec.height}x{coarse_spec.width}")
    if not np.all(np.isfinite(coarse)):
        raise ShapeError("Coarse field contains non-finite values")

    ce0, cn0, ce1, cn1 = coarse_spec.extent
    te0, tn0, te1, tn1 = target.extent
    slack = 1e-9 * max(coarse_spec.cell_size, target.cell_size)
    if te0 < ce0 - slack or tn0 < cn0 - slack or te1 > ce1 + slack or tn1 > cn1 + slack:
        raise ExtentError(f"Coarse grid {coarse_spec.extent} does not cover the target "
                          f"{target.extent}")

    centers = cell_centers(target)
    u = (centers[0, :, 0] - coarse_spec.origin_easting) / coarse_spec.cell_size - 0.5
    v = (centers[:, 0, 1] - coarse_spec.origin_northing) / coarse_spec.cell_size - 0.5

    padded = _pad_linear(_pad_linear(coarse, axis=0), axis=1)
    rows = _interpolation_matrix(v, coarse_spec.height)
    cols = _interpolation_matrix(u, coarse_spec.width)
    return rows @ padded @ cols.T


# ==================================================================================================
# Labels
# ==================================================================================================
def map_sensors_to_labels(readings: Iterable[SensorReading], spec: GridSpec,
                          time_steps: int) -> Tuple[LabelGrid, List[SensorReading]]:
    """
    Average co-located readings per (time, cell). Readings outside the grid extent or the time
    range are returned in the rejected list.
    """
    sums = np.zeros((time_steps, spec.height, spec.width))
    counts = np.zeros_like(sums)
    rejected: List[SensorReading] = []
    for reading in readings:
        cell = cell_of(spec, reading.easting, reading.northing)
        if cell is None or not 0 <= reading.time_index < time_steps \
                or not np.isfinite(reading.value):
            rejected.append(reading)
            continue
        sums[reading.time_index, cell[0], cell[1]] += reading.value
        counts[reading.time_index, cell[0], cell[1]] += 1

    mask = counts > 0
    values = np.divide(sums, counts, out=np.zeros_like(sums), where=mask)
    return LabelGrid(values, mask), rejected


# ==================================================================================================
# Splits
# ==================================================================================================
def quadrant_of(spec: GridSpec, cell: Cell) -> int:
    row, col = cell
    return 2 * int(row * 2 >= spec.height) + int(col * 2 >= spec.width)


def split_locations(label_cells: Iterable[Cell], spec: GridSpec, seed: int) -> LocationSplit:
    """
    Per quadrant, a seeded shuffle assigns floor(0.6 n) cells to train, floor(0.2 n) to
    validation and the rest to test.
    """
    cells = sorted(set((int(r), int(c)) for r, c in label_cells))
    if not cells:
        raise EmptyLabelSet("No labeled cells to split")
    for r, c in cells:
        if not (0 <= r < spec.height and 0 <= c < spec.width):
            raise ShapeError(f"Cell {(r, c)} is outside the {spec.height}x{spec.width} grid")

    rng = np.random.default_rng(seed)
    train: Set[Cell] = set()
    val: Set[Cell] = set()
    test: Set[Cell] = set()
    for quadrant in range(4):
        members = [cell for cell in cells if quadrant_of(spec, cell) == quadrant]
        n = len(members)
        if n == 0:
            continue
        order = rng.permutation(n)
        n_train = n * 3 // 5
        n_val = n // 5
        train.update(members[i] for i in order[:n_train])
        val.update(members[i] for i in order[n_train:n_train + n_val])
        test.update(members[i] for i in order[n_train + n_val:])
    return LocationSplit(frozenset(train), frozenset(val), frozenset(test))


def carry_split(prior: LocationSplit, label_cells: Iterable[Cell], spec: GridSpec,
                seed: int) -> LocationSplit:
    """
    Split for a new period: cells seen in a prior period keep their role, only the new cells
    are assigned with the 60/20/20 rule
    """
    cells = set((int(r), int(c)) for r, c in label_cells)
    known = prior.all_cells()
    kept = LocationSplit(prior.train & cells, prior.val & cells, prior.test & cells)
    new_cells = cells - known
    if not new_cells:
        if not cells:
            raise EmptyLabelSet("No labeled cells to split")
        return kept
    fresh = split_locations(new_cells, spec, seed)
    return LocationSplit(kept.train | fresh.train, kept.val | fresh.val, kept.test | fresh.test)


# ==================================================================================================
# Feature layers
# ==================================================================================================
def coordinate_features(spec: GridSpec) -> Dict[str, np.ndarray]:
    """ Static layers holding the easting and northing of each cell center """
    centers = cell_centers(spec)
    return {"easting": centers[..., 0], "northing": centers[..., 1]}


def time_features(spec: GridSpec, time_steps: int, start_hour: int = 0) -> Dict[str, np.ndarray]:
    """ Dynamic layers for hourly steps: hour of day, day of week and day of year in [0, 1) """
    hours = start_hour + np.arange(time_steps)
    days = hours // 24
    layers = {
        "hour_of_day": (hours % 24) / 24.0,
        "day_of_week": (days % 7) / 7.0,
        "day_of_year": (days % 365) / 365.0,
    }
    shape = (time_steps, spec.height, spec.width)
    return {name: np.broadcast_to(v[:, None, None], shape).copy() for name, v in layers.items()}


def build_feature_grid(spec: GridSpec, time_steps: int, dynamic: Dict[str, np.ndarray],
                       static: Dict[str, np.ndarray]) -> FeatureGrid:
    """ Stack named layers ([T, H, W] dynamic, [H, W] static) into a feature grid """
    names = list(dynamic) + list(static)
    for name, layer in dynamic.items():
        if np.shape(layer) != (time_steps, spec.height, spec.width):
            raise ShapeError(f"Dynamic layer '{name}' has shape {list(np.shape(layer))}, "
                             f"expected {[time_steps, spec.height, spec.width]}")
    for name, layer in static.items():
        if np.shape(layer) != (spec.height, spec.width):
            raise ShapeError(f"Static layer '{name}' has shape {list(np.shape(layer))}, "
                             f"expected {[spec.height, spec.width]}")

    if dynamic:
        dyn = np.stack([np.asarray(v, dtype=np.float64) for v in dynamic.values()], axis=-1)
    else:
        dyn = np.zeros((time_steps, spec.height, spec.width, 0))
    if static:
        sta = np.stack([np.asarray(v, dtype=np.float64) for v in static.values()], axis=-1)
    else:
        sta = np.zeros((spec.height, spec.width, 0))
    return FeatureGrid(spec, dyn, sta, names)


def standardize(grid: FeatureGrid, mean: Optional[np.ndarray] = None,
                std: Optional[np.ndarray] = None) -> Tuple[FeatureGrid, np.ndarray, np.ndarray]:
    """
    Zero-mean, unit-variance features. Statistics are computed from the grid unless given;
    the std of a constant feature is taken as 1.
    """
    if mean is None or std is None:
        mean = np.concatenate([grid.dynamic.mean(axis=(0, 1, 2)), grid.static.mean(axis=(0, 1))])
        std = np.concatenate([grid.dynamic.std(axis=(0, 1, 2)), grid.static.std(axis=(0, 1))])
        std = np.where(std > 1e-12, std, 1.0)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (grid.n_features,) or std.shape != (grid.n_features,):
        raise ShapeError(f"Scaler has {mean.shape} entries for {grid.n_features} features")

    d = grid.n_dynamic
    dynamic = (grid.dynamic - mean[:d]) / std[:d]
    static = (grid.static - mean[d:]) / std[d:]
    return FeatureGrid(grid.spec, dynamic, static, grid.feature_names), mean, std
