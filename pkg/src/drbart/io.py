"""Data ingestion, standardization and posterior draw files.

Draw files are JSON Lines. The first line is a header::

    {"format": "drbart-draws", "schema_version": 1, "meta": {...},
     "y_map": [shift, scale], "x_maps": [[shift, scale], ...], "columns": [...]}

followed by one line per retained draw::

    {"iteration": 1200, "sigma0_sq": 0.0031,
     "mean": {"sizes": [...], "axis": [...], "params": [...]},
     "var": {...}, "latents": [...]}

Each ensemble lists its trees in preorder: ``sizes`` gives the node count
of each tree, ``axis`` is the split axis per node (-1 for a leaf) and
``params`` the cutpoint of internal nodes or the parameter of leaves. A
final ``{"end": true, "n_draws": k}`` line marks a complete file.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .draws import AffineMap, DrawRecord, PosteriorDraws
from .tree_core import LEAF, Ensemble

__all__ = [
    'SCHEMA_VERSION',
    'InputError',
    'DrawFileError',
    'StandardizedData',
    'standardize',
    'load_csv',
    'encode_ensemble',
    'decode_ensemble',
    'DrawWriter',
    'save_draws',
    'load_draws',
]

SCHEMA_VERSION = 1
FORMAT_NAME = 'drbart-draws'


class InputError(ValueError):
    """Bad user data: missing columns, unparsable cells, degenerate values."""


class DrawFileError(ValueError):
    """A draw file that is truncated, corrupt or of another schema version."""


@dataclass
class StandardizedData:
    """Data mapped to the sampler frame: x columns to [0, 1], y to [-0.5, 0.5]."""

    x_raw: np.ndarray
    y_raw: np.ndarray
    x_maps: list[AffineMap]
    y_map: AffineMap
    columns: list[str] = field(default_factory=list)
    response: str = 'y'

    @property
    def x(self) -> np.ndarray:
        return np.column_stack([m.to_std(col) for m, col in zip(self.x_maps, self.x_raw.T)])

    @property
    def y(self) -> np.ndarray:
        return self.y_map.to_std(self.y_raw)

    @property
    def y_range(self) -> tuple[float, float]:
        return float(self.y_raw.min()), float(self.y_raw.max())

    @property
    def n(self) -> int:
        return int(self.y_raw.shape[0])


def standardize(x, y, columns: Sequence[str] | None = None, response: str = 'y') -> StandardizedData:
    """Fit the affine maps for raw covariates ``x`` (n, p) and response ``y``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise InputError(f'x has {x.shape[0]} rows but y has shape {y.shape}')
    if y.shape[0] == 0:
        raise InputError('no rows')
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputError('data contain NaN or infinite values')
    y_lo, y_hi = float(y.min()), float(y.max())
    if not y_hi > y_lo:
        raise InputError('zero response range')
    x_maps = []
    for j in range(x.shape[1]):
        lo, hi = float(x[:, j].min()), float(x[:, j].max())
        x_maps.append(AffineMap(lo, hi - lo if hi > lo else 1.0))
    if columns is None:
        columns = [f'x{j + 1}' for j in range(x.shape[1])]
    return StandardizedData(x, y, x_maps, AffineMap(0.5 * (y_lo + y_hi), y_hi - y_lo), list(columns), response)


def load_csv(path, response: str, covariates: Sequence[str] | None = None) -> StandardizedData:
    """Read a CSV with a header row and standardize it.

    ``covariates`` defaults to every column other than ``response``.
    Raises :class:`InputError` naming the row (1-based, header excluded) and
    column of the first bad cell.
    """
    path = Path(path)
    try:
        fh = open(path, newline='')
    except OSError as exc:
        raise InputError(f'cannot open {path}: {exc.strerror}') from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f'{path} is empty') from None
        if covariates is None:
            covariates = [h for h in header if h != response]
        wanted = [response, *covariates]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise InputError(f'missing column(s): {", ".join(missing)}')
        idx = [header.index(c) for c in wanted]
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise InputError(f'row {r}: expected {len(header)} fields, found {len(row)}')
            vals = []
            for c, j in zip(wanted, idx):
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f'row {r}, column {c!r}: non-numeric value {cell!r}') from None
                if not math.isfinite(v):
                    raise InputError(f'row {r}, column {c!r}: missing or non-finite value {cell!r}')
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise InputError(f'{path} has no data rows')
    arr = np.array(rows)
    if not covariates:
        raise InputError('no covariate columns')
    return standardize(arr[:, 1:], arr[:, 0], list(covariates), response)


# ---------------------------------------------------------------------------
# ensembles <-> JSON


def encode_ensemble(ens: Ensemble) -> dict:
    """Preorder node lists of every tree, concatenated."""
    ens = Ensemble.from_trees(list(ens.trees()), ens.kind)
    sizes = np.diff(np.append(ens.roots, ens.axis.shape[0])).tolist()
    internal = ens.axis >= 0
    params = np.where(internal, ens.cut, ens.value)
    return {'sizes': sizes, 'axis': ens.axis.tolist(), 'params': params.tolist()}


def decode_ensemble(obj: dict, kind: str) -> Ensemble:
    try:
        sizes = [int(s) for s in obj['sizes']]
        axis = np.asarray(obj['axis'], dtype=np.int64)
        params = np.asarray(obj['params'], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DrawFileError(f'malformed ensemble record: {exc}') from None
    total = sum(sizes)
    if axis.shape != (total,) or params.shape != (total,):
        raise DrawFileError('ensemble sizes do not match its node lists')
    left = np.full(total, LEAF, dtype=np.int64)
    right = np.full(total, LEAF, dtype=np.int64)
    roots = np.cumsum([0] + sizes[:-1]).astype(np.int64) if sizes else np.zeros(0, np.int64)
    for start, size in zip(roots, sizes):
        pending = []
        for k in range(start, start + size):
            if k > start:
                if not pending:
                    raise DrawFileError('tree node list is not a valid preorder')
                top = pending[-1]
                if left[top] == LEAF:
                    left[top] = k
                else:
                    right[top] = k
                    pending.pop()
            if axis[k] >= 0:
                pending.append(k)
        if pending:
            raise DrawFileError('tree node list ends before all children are present')
    internal = axis >= 0
    cut = np.where(internal, params, np.nan)
    value = np.where(internal, np.nan, params)
    return Ensemble(axis, cut, left, right, value, roots, kind)


def _encode_record(rec: DrawRecord) -> str:
    obj = {
        'iteration': int(rec.iteration),
        'sigma0_sq': float(rec.sigma0_sq),
        'mean': encode_ensemble(rec.mean),
        'var': encode_ensemble(rec.var),
    }
    if rec.latents is not None:
        obj['latents'] = np.asarray(rec.latents, dtype=float).tolist()
    return json.dumps(obj, separators=(',', ':'))


def _decode_record(obj: dict) -> DrawRecord:
    try:
        lat = obj.get('latents')
        return DrawRecord(
            iteration=int(obj['iteration']),
            mean=decode_ensemble(obj['mean'], 'mean'),
            var=decode_ensemble(obj['var'], 'variance'),
            sigma0_sq=float(obj['sigma0_sq']),
            latents=None if lat is None else np.asarray(lat, dtype=float),
        )
    except KeyError as exc:
        raise DrawFileError(f'draw record lacks field {exc}') from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


class DrawWriter:
    """Streams draws to a JSON-Lines file, one complete line per write."""

    def __init__(self, path, *, y_map: AffineMap, x_maps: Sequence[AffineMap], meta: dict, columns=()):
        self.path = Path(path)
        self.n = 0
        self._fh = open(self.path, 'w', encoding='utf-8')
        header = {
            'format': FORMAT_NAME,
            'schema_version': SCHEMA_VERSION,
            'meta': _jsonable(meta),
            'y_map': [y_map.shift, y_map.scale],
            'x_maps': [[m.shift, m.scale] for m in x_maps],
            'columns': list(columns),
        }
        self._line(json.dumps(header, separators=(',', ':')))

    def _line(self, text: str) -> None:
        self._fh.write(text + '\n')
        self._fh.flush()

    def write(self, rec: DrawRecord) -> None:
        self._line(_encode_record(rec))
        self.n += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._line(json.dumps({'end': True, 'n_draws': self.n}))
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_draws(draws: PosteriorDraws, path) -> None:
    with DrawWriter(path, y_map=draws.y_map, x_maps=draws.x_maps, meta=draws.meta, columns=draws.columns) as w:
        for rec in draws:
            w.write(rec)


def load_draws(path, *, allow_incomplete: bool = False) -> PosteriorDraws:
    """Read a draw file written by :class:`DrawWriter`.

    Raises :class:`DrawFileError` on a schema version mismatch, a corrupt
    line, or a file without its end marker (unless ``allow_incomplete``, for
    reading a run still in progress).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise DrawFileError(f'cannot read {path}: {exc.strerror}') from None
    lines = text.split('\n')
    if not lines or not lines[0].strip():
        raise DrawFileError(f'{path} is empty')
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DrawFileError(f'{path}: header line is not valid JSON') from None
    if header.get('format') != FORMAT_NAME:
        raise DrawFileError(f'{path} is not a draw file')
    version = header.get('schema_version')
    if version != SCHEMA_VERSION:
        raise DrawFileError(f'{path} has schema version {version}, this reader needs {SCHEMA_VERSION}')
    records = []
    ended = False
    body = lines[1:]
    complete_last = text.endswith('\n')
    for k, line in enumerate(body):
        if not line.strip():
            continue
        is_last = k == len(body) - 1
        if is_last and not complete_last:
            if allow_incomplete:
                break
            raise DrawFileError(f'{path}: truncated final line')
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            raise DrawFileError(f'{path}: line {k + 2} is not valid JSON') from None
        if obj.get('end'):
            if obj.get('n_draws') != len(records):
                raise DrawFileError(f'{path}: end marker counts {obj.get("n_draws")} draws, found {len(records)}')
            ended = True
            break
        records.append(_decode_record(obj))
    if not ended and not allow_incomplete:
        raise DrawFileError(f'{path}: missing end marker (truncated or still being written)')
    return PosteriorDraws(
        records=records,
        y_map=AffineMap(*header['y_map']),
        x_maps=[AffineMap(*m) for m in header['x_maps']],
        meta=header.get('meta', {}),
        columns=list(header.get('columns', [])),
    )


def chain_path(path, chain: int, n_chains: int) -> Path:
    """Per-chain output path: ``draws.jsonl`` -> ``draws.chain2.jsonl``."""
    path = Path(path)
    if n_chains == 1:
        return path
    return path.with_name(f'{path.stem}.chain{chain}{path.suffix}')


def atomic_write_text(path, text: str) -> None:
    tmp = Path(str(path) + '.tmp')
    tmp.write_text(text)
    os.replace(tmp, path)
