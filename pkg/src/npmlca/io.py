"""File formats: dataset / truth CSVs, JSON documents and the replication record store.

All text files are UTF-8 with ``\\n`` newlines.  JSON documents carry a
``schema_version`` field and are written with sorted keys so that equal
content gives byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .metrics import ReplicationRecord
from .model import DataError, Dataset, ModelSpec, Parameters
from .simulator import Condition

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_COLUMN = re.compile(r"^([yxz])(\d+)$")


class FormatError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# -- JSON -----------------------------------------------------------------

def _clean(obj):
    """Make numpy scalars/arrays JSON-safe; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=1) + "\n"


def write_json(path, doc: dict, kind: str) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **doc}
    atomic_write(Path(path), dumps(doc))


def read_json(path, kind: str | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {version!r}")
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} document, got {doc.get('kind')!r}")
    return doc


def atomic_write(path: Path, text: str) -> None:
    """Write-then-rename so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def params_to_dict(params: Parameters) -> dict:
    return {"n_categories": list(params.n_categories), "alpha": params.alpha,
            "gamma0": params.gamma0, "gamma1": params.gamma1, "gamma2": params.gamma2,
            "beta": params.beta}


def params_from_dict(d: dict) -> Parameters:
    L, M = np.asarray(d["gamma0"]).shape
    return Parameters(np.asarray(d["alpha"], float), np.asarray(d["gamma0"], float),
                      np.asarray(d["gamma1"], float).reshape(L, -1),
                      np.asarray(d["gamma2"], float).reshape(L, -1),
                      np.asarray(d["beta"], float), tuple(d["n_categories"]))


def read_condition(path) -> Condition:
    doc = read_json(path, "condition")
    try:
        return Condition.from_dict(doc["condition"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None


def write_condition(path, cond: Condition) -> None:
    write_json(path, {"condition": cond.to_dict()}, "condition")


# -- dataset CSV ----------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def write_dataset_csv(path, data: Dataset) -> None:
    K, P1, P2 = data.K, data.x.shape[1], data.z.shape[1]
    header = (["site_id"] + [f"y{k + 1}" for k in range(K)] + [f"x{p + 1}" for p in range(P1)]
              + [f"z{p + 1}" for p in range(P2)])
    lines = [",".join(header)]
    for i in range(data.N):
        j = data.site[i]
        row = ([str(data.site_ids[j])] + [str(v) for v in data.y[i]]
               + [_fmt(v) for v in data.x[i]] + [_fmt(v) for v in data.z[j]])
        lines.append(",".join(row))
    atomic_write(Path(path), "\n".join(lines) + "\n")


def read_dataset_csv(path, min_site_size: int = 5, keep_small_sites: bool = False):
    """Parse a ``site_id,y1..yK,x1..xP1,z1..zP2`` CSV.

    Sites smaller than ``min_site_size`` are dropped with a warning unless
    ``keep_small_sites``.  Returns ``(dataset, dropped_site_ids)``.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError("empty file", 1) from None
        if not header or header[0] != "site_id":
            raise FormatError("first column must be 'site_id'", 1)
        cols = {"y": [], "x": [], "z": []}
        for pos, name in enumerate(header[1:], start=1):
            m = _COLUMN.match(name)
            if not m:
                raise FormatError(f"unrecognised column {name!r}", 1)
            cols[m.group(1)].append((int(m.group(2)), pos))
        for kind, entries in cols.items():
            if [n for n, _ in entries] != list(range(1, len(entries) + 1)):
                raise FormatError(f"{kind} columns must be numbered 1..n in order", 1)
        if not cols["y"]:
            raise FormatError("no indicator columns", 1)
        yi = [p for _, p in cols["y"]]
        xi = [p for _, p in cols["x"]]
        zi = [p for _, p in cols["z"]]
        sites, ys, xs, zs, lines = [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                y = [int(row[p]) for p in yi]
                x = [float(row[p]) for p in xi]
                z = [float(row[p]) for p in zi]
            except ValueError as exc:
                raise FormatError(str(exc), line) from None
            if any(v < 1 for v in y):
                raise FormatError("category codes start at 1", line)
            if not all(math.isfinite(v) for v in x + z):
                raise FormatError("non-finite covariate", line)
            sites.append(row[0].strip())
            ys.append(y)
            xs.append(x)
            zs.append(z)
            lines.append(line)
    if not sites:
        raise FormatError("no data rows", 2)
    first_z = {}
    for s, z, line in zip(sites, zs, lines):
        if first_z.setdefault(s, z) != z:
            raise FormatError(f"level-2 covariates vary within site {s!r}", line)
    counts: dict[str, int] = {}
    for s in sites:
        counts[s] = counts.get(s, 0) + 1
    dropped = [s for s, n in counts.items() if n < min_site_size]
    if dropped and not keep_small_sites:
        log.warning("dropping %d site(s) with fewer than %d rows: %s",
                    len(dropped), min_site_size, ", ".join(dropped))
        keep = [s not in set(dropped) for s in sites]
        sites = [s for s, k in zip(sites, keep) if k]
        ys = [v for v, k in zip(ys, keep) if k]
        xs = [v for v, k in zip(xs, keep) if k]
        zs = [v for v, k in zip(zs, keep) if k]
        if not sites:
            raise FormatError("no sites left after removing small sites")
    else:
        dropped = []
    N = len(sites)
    data = Dataset.from_rows(sites, np.array(ys, dtype=np.int64),
                             np.array(xs, dtype=float).reshape(N, len(xi)),
                             np.array(zs, dtype=float).reshape(N, len(zi)))
    return data, dropped


def infer_spec(data: Dataset, L: int, M: int, n_categories=None) -> ModelSpec:
    if n_categories is None:
        n_categories = tuple(max(2, int(v)) for v in data.y.max(axis=0))
    return ModelSpec(tuple(n_categories), L, M, data.x.shape[1], data.z.shape[1])


# -- truth CSV ------------------------------------------------------------

def write_truth_csv(path, data: Dataset) -> None:
    """Two sections: ``site_id,row,true_c`` per individual then ``site_id,true_w`` per site."""
    if data.true_c is None or data.true_w is None:
        raise DataError("dataset carries no true memberships")
    lines = ["site_id,row,true_c"]
    lines += [f"{data.site_ids[data.site[i]]},{i + 1},{data.true_c[i]}" for i in range(data.N)]
    lines.append("site_id,true_w")
    lines += [f"{s},{w}" for s, w in zip(data.site_ids, data.true_w)]
    atomic_write(Path(path), "\n".join(lines) + "\n")


def read_truth_csv(path) -> tuple[list[tuple[str, int, int]], dict[str, int]]:
    individuals, sites = [], {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line == "site_id,row,true_c":
                section = "c"
                continue
            if line == "site_id,true_w":
                section = "w"
                continue
            parts = line.split(",")
            try:
                if section == "c" and len(parts) == 3:
                    individuals.append((parts[0], int(parts[1]), int(parts[2])))
                elif section == "w" and len(parts) == 2:
                    sites[parts[0]] = int(parts[1])
                else:
                    raise ValueError("unexpected row")
            except ValueError:
                raise FormatError(f"malformed truth row {line!r}", line_no) from None
    return individuals, sites


# -- record store ---------------------------------------------------------

class RecordStore:
    """Append-only directory of replication records, one JSON file per record.

    Records are keyed by ``(condition_id, replication)`` and committed with
    write-then-rename, so an interrupted run leaves only complete records.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.records_dir = self.root / "records"

    def path_for(self, condition_id: int, replication: int) -> Path:
        return self.records_dir / f"c{condition_id:03d}" / f"r{replication:05d}.json"

    def keys(self) -> set[tuple[int, int]]:
        out = set()
        if not self.records_dir.exists():
            return out
        for p in self.records_dir.glob("c*/r*.json"):
            out.add((int(p.parent.name[1:]), int(p.stem[1:])))
        return out

    def __contains__(self, key) -> bool:
        return self.path_for(*key).exists()

    def __len__(self) -> int:
        return len(self.keys())

    def append(self, record: ReplicationRecord) -> bool:
        """Commit ``record``; returns False if its key is already present."""
        path = self.path_for(*record.key)
        if path.exists():
            return False
        atomic_write(path, dumps({"schema_version": SCHEMA_VERSION, "kind": "record",
                                  **record.to_dict()}))
        return True

    def read_all(self) -> list[ReplicationRecord]:
        out = []
        for key in sorted(self.keys()):
            doc = read_json(self.path_for(*key), "record")
            doc.pop("schema_version")
            doc.pop("kind")
            out.append(ReplicationRecord.from_dict(doc))
        return out

    def write_config(self, doc: dict) -> None:
        write_json(self.root / "study.json", doc, "study")

    def read_config(self) -> dict:
        return read_json(self.root / "study.json", "study")
