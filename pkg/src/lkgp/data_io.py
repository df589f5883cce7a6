"""Learning-curve CSV ingestion, grid/mask construction, synthetic data and
model (de)serialization.

Curves CSV (long format, one observation per row)::

    config_id,hp_1,...,hp_d,step,value
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import ProductKernelParams
from .model import LkgpModel, TrainingData
from .structured_linalg import CgConfig
from .transforms import InputScaler, OutputScaler, ProgressionScaler, Scalers

MODEL_FORMAT = "lkgp-model"
MODEL_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ModelFormatError(DataError):
    pass


@dataclass(frozen=True)
class CurveRecord:
    config_id: str
    hyperparams: tuple
    step: float
    value: float


class Dataset:
    """Observations of partially observed learning curves.

    Stored per config (ids and hyperparameters) plus one row per observation.
    Configs are kept sorted by id and observations by (config, step), so two
    datasets with the same content compare equal regardless of input order.
    """

    def __init__(self, config_ids, X, obs_config, obs_step, obs_value):
        config_ids = [str(c) for c in config_ids]
        X = np.asarray(X, dtype=float).reshape(len(config_ids), -1)
        obs_config = np.asarray(obs_config, dtype=int)
        obs_step = np.asarray(obs_step, dtype=float)
        obs_value = np.asarray(obs_value, dtype=float)
        if len(set(config_ids)) != len(config_ids):
            raise DataError("duplicate config ids")

        order = sorted(range(len(config_ids)), key=config_ids.__getitem__)
        rank = np.empty(len(order), dtype=int)
        rank[order] = np.arange(len(order))
        self.config_ids = [config_ids[i] for i in order]
        self.X = X[order]
        obs_config = rank[obs_config] if obs_config.size else obs_config
        obs_order = np.lexsort((obs_step, obs_config))
        self.obs_config = obs_config[obs_order]
        self.obs_step = obs_step[obs_order]
        self.obs_value = obs_value[obs_order]

        dup = (np.diff(self.obs_config) == 0) & (np.diff(self.obs_step) == 0)
        if np.any(dup):
            k = int(np.flatnonzero(dup)[0])
            raise DataError(
                f"duplicate observation for config {self.config_ids[self.obs_config[k]]!r} "
                f"at step {self.obs_step[k]!r}"
            )

    @property
    def n(self):
        return len(self.config_ids)

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def grid(self):
        return np.unique(self.obs_step)

    def __len__(self):
        return self.obs_value.size

    def grid_arrays(self):
        """``(Y, mask)`` on the configs x grid layout; Y is NaN where unobserved."""
        grid = self.grid
        cols = np.searchsorted(grid, self.obs_step)
        Y = np.full((self.n, grid.size), np.nan)
        Y[self.obs_config, cols] = self.obs_value
        return Y, ~np.isnan(Y)

    def records(self):
        for c, s, v in zip(self.obs_config, self.obs_step, self.obs_value):
            yield CurveRecord(self.config_ids[c], tuple(self.X[c]), float(s), float(v))

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.config_ids == other.config_ids
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.obs_config, other.obs_config)
            and np.array_equal(self.obs_step, other.obs_step)
            and np.array_equal(self.obs_value, other.obs_value)
        )

    __hash__ = None

    @classmethod
    def from_records(cls, records):
        ids, X, index = [], [], {}
        oc, os_, ov = [], [], []
        for rec in records:
            if rec.config_id not in index:
                index[rec.config_id] = len(ids)
                ids.append(rec.config_id)
                X.append(rec.hyperparams)
            elif tuple(X[index[rec.config_id]]) != tuple(rec.hyperparams):
                raise DataError(f"inconsistent hyperparameters for config {rec.config_id!r}")
            oc.append(index[rec.config_id])
            os_.append(rec.step)
            ov.append(rec.value)
        if not ids:
            raise DataError("dataset is empty")
        return cls(ids, np.array(X, dtype=float), oc, os_, ov)


def _parse_float(text, what, lineno):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse {what} {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {lineno}: {what} must be finite, got {text!r}")
    return value


def _open_csv(path):
    try:
        return open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_csv(path):
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        d = len(header) - 3
        expected = ["config_id"] + [f"hp_{k}" for k in range(1, d + 1)] + ["step", "value"]
        if d < 1 or header != expected:
            raise DataError(f"{path}: header must be config_id,hp_1,...,hp_d,step,value")

        ids, X, index = [], [], {}
        oc, os_, ov = [], [], []
        seen = {}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            cid = row[0].strip()
            hp = tuple(_parse_float(v, f"hp_{k + 1}", lineno) for k, v in enumerate(row[1 : 1 + d]))
            step = _parse_float(row[-2], "step", lineno)
            value = _parse_float(row[-1], "value", lineno)
            if step <= 0:
                raise DataError(f"{path}: line {lineno}: step must be positive")
            if (cid, step) in seen:
                raise DataError(
                    f"{path}: line {lineno}: duplicate (config_id, step) = ({cid}, {row[-2].strip()}), "
                    f"first seen on line {seen[cid, step]}"
                )
            seen[cid, step] = lineno
            if cid not in index:
                index[cid] = len(ids)
                ids.append(cid)
                X.append(hp)
            elif X[index[cid]] != hp:
                raise DataError(f"{path}: line {lineno}: inconsistent hyperparameters for config {cid!r}")
            oc.append(index[cid])
            os_.append(step)
            ov.append(value)
    if not ids:
        raise DataError(f"{path}: dataset is empty")
    return Dataset(ids, np.array(X, dtype=float), oc, os_, ov)


def write_csv(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config_id"] + [f"hp_{k}" for k in range(1, ds.d + 1)] + ["step", "value"])
        for c, s, v in zip(ds.obs_config, ds.obs_step, ds.obs_value):
            writer.writerow([ds.config_ids[c], *map(repr, map(float, ds.X[c])), repr(float(s)), repr(float(v))])


def fit_scalers(ds):
    Y, mask = ds.grid_arrays()
    return Scalers(
        InputScaler.fit(ds.X),
        ProgressionScaler.fit(ds.grid),
        OutputScaler.fit(Y, mask),
    )


def to_training_data(ds, scalers=None):
    """Fit (or reuse) the three scalers and produce transformed training data."""
    scalers = scalers or fit_scalers(ds)
    Y, mask = ds.grid_arrays()
    grid = ds.grid
    data = TrainingData.from_grid(
        scalers.inputs.transform(ds.X),
        scalers.progression.transform(grid),
        scalers.outputs.transform(Y),
        mask,
        config_ids=tuple(ds.config_ids),
        steps=grid,
    )
    return data, scalers


def _config_ids(n):
    width = max(len(str(n - 1)), 1)
    return [f"c{i:0{width}d}" for i in range(n)]


def synth_benchmark(n, m, d, seed=0):
    """Scaling-benchmark data: uniform X, i.i.d. standard normal Y, full mask.

    The step grid is ``{1, ..., m} / m``: linearly spaced on the unit
    interval but strictly positive, as the log transform requires.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    Y = rng.standard_normal((n, m))
    steps = np.arange(1, m + 1) / m
    cfg, col = np.divmod(np.arange(n * m), m)
    return Dataset(_config_ids(n), X, cfg, steps[col], Y.ravel())


def synth_curves(n, m, d, noise=0.01, missing_fraction=0.5, seed=0):
    """Power-law learning curves ``a - b * t^-c`` with early-stopped suffixes.

    ``(a, b, c)`` vary smoothly with the hyperparameters, so configs close in
    hyperparameter space have similar curves. Each config hides a contiguous
    suffix of ``round(missing_fraction * m)`` steps, jittered by at most one
    step, and always keeps at least one observation. Returns the dataset and
    a dict of hidden final values (noisy, as they would have been observed).
    """
    if not 0 <= missing_fraction < 1:
        raise ValueError("missing_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    W = rng.normal(0.0, 1.0, size=(3, d)) / np.sqrt(d)
    h = 1.0 / (1.0 + np.exp(-3.0 * (X - 0.5) @ W.T))
    a = 0.55 + 0.4 * h[:, 0]
    b = 0.2 + 0.4 * h[:, 1]
    c = 0.3 + 1.5 * h[:, 2]
    steps = np.arange(1, m + 1, dtype=float)
    curves = a[:, None] - b[:, None] * steps[None, :] ** (-c[:, None])
    curves = curves + noise * rng.standard_normal((n, m))

    base = round(missing_fraction * m)
    hidden = np.zeros(n, dtype=int)
    if base > 0:
        hidden = np.clip(base + rng.integers(-1, 2, size=n), 0, m - 1)
    ids = _config_ids(n)
    obs_cfg, obs_col = [], []
    for i in range(n):
        keep = m - hidden[i]
        obs_cfg.extend([i] * keep)
        obs_col.extend(range(keep))
    obs_cfg, obs_col = np.array(obs_cfg), np.array(obs_col)
    ds = Dataset(ids, X, obs_cfg, steps[obs_col], curves[obs_cfg, obs_col])
    truth = dict(zip(ids, curves[:, -1].tolist()))
    return ds, truth


# -- model files ---------------------------------------------------------------


def _nan_to_none(a):
    return [[None if math.isnan(v) else v for v in row] for row in np.asarray(a).tolist()]


def model_to_dict(model):
    p, data = model.params, model.data
    out = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": {
            "rbf_log_lengthscales": p.rbf_log_lengthscales.tolist(),
            "matern_log_lengthscale": p.matern_log_lengthscale,
            "matern_log_outputscale": p.matern_log_outputscale,
            "log_noise": p.log_noise,
        },
        "scalers": None,
        "data": {
            "X": data.X.tolist(),
            "t": data.t.tolist(),
            "Y": _nan_to_none(data.Y),
            "mask": data.mask.observed.astype(int).tolist(),
            "config_ids": None if data.config_ids is None else list(data.config_ids),
            "steps": None if data.steps is None else data.steps.tolist(),
        },
        "backend": model.backend,
        "cg": {"rel_tolerance": model.cg.rel_tolerance, "max_iters": model.cg.max_iters},
        "seed": model.seed,
        "dense_cap": model.dense_cap,
        "fit_report": model.fit_report,
    }
    if model.scalers is not None:
        s = model.scalers
        out["scalers"] = {
            "inputs": {"minimum": s.inputs.minimum.tolist(), "span": s.inputs.span.tolist()},
            "progression": {"log_t1": s.progression.log_t1, "log_span": s.progression.log_span},
            "outputs": {"y_max": s.outputs.y_max, "y_std": s.outputs.y_std},
        }
    return out


def _require(doc, key, kind):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"model file is missing field {key!r}")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise ModelFormatError(f"model field {key!r} has wrong type {type(value).__name__}")
    return value


def _float_array(value, key, ndim):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ModelFormatError(f"model field {key!r} holds non-numeric entries") from None
    if arr.ndim != ndim:
        raise ModelFormatError(f"model field {key!r} must be {ndim}-dimensional")
    return arr


def model_from_dict(doc):
    if _require(doc, "format", str) != MODEL_FORMAT:
        raise ModelFormatError(f"not an {MODEL_FORMAT} file")
    version = _require(doc, "version", int)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} (expected {MODEL_VERSION})")

    pd = _require(doc, "params", dict)
    params = ProductKernelParams(
        _float_array(_require(pd, "rbf_log_lengthscales", list), "rbf_log_lengthscales", 1),
        float(_require(pd, "matern_log_lengthscale", (int, float))),
        float(_require(pd, "matern_log_outputscale", (int, float))),
        float(_require(pd, "log_noise", (int, float))),
    )

    dd = _require(doc, "data", dict)
    mask = _float_array(_require(dd, "mask", list), "mask", 2).astype(bool)
    Y = np.array(
        [[np.nan if v is None else v for v in row] for row in _require(dd, "Y", list)], dtype=float
    )
    steps = dd.get("steps")
    ids = dd.get("config_ids")
    try:
        data = TrainingData.from_grid(
            _float_array(_require(dd, "X", list), "X", 2),
            _float_array(_require(dd, "t", list), "t", 1),
            Y, mask,
            config_ids=None if ids is None else tuple(ids),
            steps=None if steps is None else _float_array(steps, "steps", 1),
        )
    except ValueError as exc:
        raise ModelFormatError(f"invalid training data in model file: {exc}") from exc

    scalers = None
    sd = _require(doc, "scalers", (dict, type(None)))
    if sd is not None:
        inp, prog, outp = (_require(sd, k, dict) for k in ("inputs", "progression", "outputs"))
        scalers = Scalers(
            InputScaler(_float_array(inp["minimum"], "minimum", 1), _float_array(inp["span"], "span", 1)),
            ProgressionScaler(float(prog["log_t1"]), float(prog["log_span"])),
            OutputScaler(float(outp["y_max"]), float(outp["y_std"])),
        )
    cg = _require(doc, "cg", dict)
    return LkgpModel(
        params, data, scalers,
        backend=_require(doc, "backend", str),
        cg=CgConfig(float(cg["rel_tolerance"]), int(cg["max_iters"])),
        seed=_require(doc, "seed", int),
        fit_report=doc.get("fit_report") or {},
        dense_cap=int(doc.get("dense_cap", 8192)),
    )


def save_model(model, path):
    text = json.dumps(model_to_dict(model), allow_nan=False, indent=1)
    Path(path).write_text(text, encoding="utf-8")


def load_model(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupted model file: {exc}") from exc
    return model_from_dict(doc)


# -- prediction targets, predictions and truth files -------------------------


def read_targets(path):
    """Targets CSV: ``config_id,hp_1,...,hp_d[,step]``.

    Returns ``(ids, X, steps_by_id)``; ``steps_by_id`` is None when no step
    column is present (meaning: the full training grid).
    """
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        has_step = bool(header) and header[-1] == "step"
        d = len(header) - 1 - int(has_step)
        if d < 1 or header[0] != "config_id" or header[1 : 1 + d] != [f"hp_{k}" for k in range(1, d + 1)]:
            raise DataError(f"{path}: header must be config_id,hp_1,...,hp_d[,step]")
        ids, X, steps = [], {}, {}
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields")
            cid = row[0].strip()
            hp = tuple(_parse_float(v, "hyperparameter", lineno) for v in row[1 : 1 + d])
            if cid not in X:
                ids.append(cid)
                X[cid] = hp
                steps[cid] = []
            elif X[cid] != hp:
                raise DataError(f"{path}: line {lineno}: inconsistent hyperparameters for {cid!r}")
            if has_step:
                steps[cid].append(_parse_float(row[-1], "step", lineno))
    if not ids:
        raise DataError(f"{path}: no targets")
    return ids, np.array([X[c] for c in ids]), (steps if has_step else None)


PREDICTION_COLUMNS = ["config_id", "step", "mean", "variance"]


def write_predictions(path, rows, samples=None):
    """``rows``: iterable of (config_id, step, mean, variance); optional per-row sample lists."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(PREDICTION_COLUMNS)
        if samples is not None:
            header += [f"s{k}" for k in range(len(samples[0]))]
        writer.writerow(header)
        for r, (cid, step, mean, var) in enumerate(rows):
            line = [cid, repr(float(step)), repr(float(mean)), repr(float(var))]
            if samples is not None:
                line += [repr(float(v)) for v in samples[r]]
            writer.writerow(line)


def read_predictions(path):
    """Returns a list of (config_id, step, mean, variance) tuples."""
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:4] != PREDICTION_COLUMNS:
            raise DataError(f"{path}: header must start with {','.join(PREDICTION_COLUMNS)}")
        out = []
        for row in reader:
            if not row:
                continue
            lineno = reader.line_num
            out.append((
                row[0].strip(),
                _parse_float(row[1], "step", lineno),
                _parse_float(row[2], "mean", lineno),
                _parse_float(row[3], "variance", lineno),
            ))
    return out


def read_truth(path):
    """Truth CSV: ``config_id,value`` or ``config_id,step,value``."""
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header not in (["config_id", "value"], ["config_id", "step", "value"]):
            raise DataError(f"{path}: header must be config_id,value or config_id,step,value")
        has_step = len(header) == 3
        out = []
        for row in reader:
            if not row:
                continue
            lineno = reader.line_num
            if len(row) != len(header):
                raise DataError(f"{path}: line {lineno}: expected {len(header)} fields")
            step = _parse_float(row[1], "step", lineno) if has_step else None
            out.append((row[0].strip(), step, _parse_float(row[-1], "value", lineno)))
    return out


def write_truth(path, truth):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config_id", "value"])
        for cid, value in truth.items():
            writer.writerow([cid, repr(float(value))])
