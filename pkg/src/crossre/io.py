"""Long-format CSV ingestion and result-file writers.

The expected input is one record per observation with columns row_id,
col_id, optional rep_id, y, and any number of numeric covariates. Label
order in the file does not matter; indices are assigned by sorted
label. Every writer is deterministic and stamps a provenance trailer
(version, seed, config hash) so outputs are diffable.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .design import CenteredDesign, build_centered_design, decompose_cell_covariate
from .errors import DataError
from .layout import BalancedLayout, ResponseTable

__all__ = [
    "ROLES",
    "IngestResult",
    "parse_roles",
    "design_from_cubes",
    "ingest_csv",
    "write_long_csv",
    "provenance_dict",
    "write_json",
    "write_csv_rows",
    "load_json",
]

ROLES = ("row", "column", "interaction", "within", "auto")
_ID_COLUMNS = ("row_id", "col_id", "rep_id", "y")
_LIST_CAP = 20  # cap for enumerated problems in error messages


def parse_roles(spec: str | dict | None) -> dict:
    """Parse a roles spec like "speed=row,load=auto" into {name: role}."""
    if spec is None:
        return {}
    if isinstance(spec, dict):
        pairs = spec.items()
    else:
        pairs = []
        for chunk in spec.split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise DataError(
                    f"roles entry {chunk!r} is not of the form name=role"
                )
            name, role = chunk.split("=", 1)
            pairs.append((name.strip(), role.strip()))
    roles = {}
    for name, role in pairs:
        if role not in ROLES:
            raise DataError(
                f"unknown role {role!r} for covariate {name!r}; "
                f"expected one of {', '.join(ROLES)}"
            )
        roles[name] = role
    return roles


@dataclass(frozen=True)
class IngestResult:
    """Ingested dataset: layout, design, responses, and label maps."""

    layout: BalancedLayout
    design: CenteredDesign
    table: ResponseTable
    row_labels: tuple
    col_labels: tuple
    rep_ids: np.ndarray | None  # (g, h, m) object array, None without rep_id
    roles: dict                 # covariate name -> role, in column order
    covariates: dict            # covariate name -> (g, h, m) raw values


def _cap(items) -> str:
    items = list(items)
    shown = ", ".join(str(it) for it in items[:_LIST_CAP])
    if len(items) > _LIST_CAP:
        shown += f", and {len(items) - _LIST_CAP} more"
    return shown


def _parse_float(text, column, lineno) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataError(
            f"line {lineno}: column {column!r} has non-numeric value {text!r}"
        ) from None
    if not np.isfinite(value):
        raise DataError(
            f"line {lineno}: column {column!r} has non-finite value {text!r}"
        )
    return value


def _read_records(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise DataError(f"{path} is empty; expected a header row")
        for required in ("row_id", "col_id", "y"):
            if required not in header:
                raise DataError(
                    f"{path} is missing required column {required!r}; "
                    f"header has {header}"
                )
        has_rep = "rep_id" in header
        covariate_names = [c for c in header if c not in _ID_COLUMNS]
        records = []
        for lineno, rec in enumerate(reader, start=2):
            if rec.get(None):
                raise DataError(
                    f"line {lineno}: more fields than the header declares"
                )
            row = rec["row_id"]
            col = rec["col_id"]
            if row is None or col is None or rec["y"] is None:
                raise DataError(f"line {lineno}: fewer fields than the header")
            y = _parse_float(rec["y"], "y", lineno)
            covs = tuple(
                _parse_float(rec[name], name, lineno) for name in covariate_names
            )
            rep = rec.get("rep_id") if has_rep else None
            records.append((row, col, rep, y, covs, lineno))
    if not records:
        raise DataError(f"{path} has a header but no data rows")
    return records, covariate_names, has_rep


def _balanced_index(records, has_rep):
    """Sorted label maps plus the per-cell record lists, balance-checked."""
    row_labels = sorted({r[0] for r in records})
    col_labels = sorted({r[1] for r in records})

    cells = {}
    seen = {}
    duplicates = []
    for rec in records:
        key = (rec[0], rec[1], rec[2])
        if has_rep:
            if key in seen:
                duplicates.append(
                    f"({rec[0]}, {rec[1]}, {rec[2]}) at lines {seen[key]} and {rec[5]}"
                )
            else:
                seen[key] = rec[5]
        cells.setdefault((rec[0], rec[1]), []).append(rec)
    if not has_rep:
        # Without rep_id a cell may legitimately hold several records
        # only if every cell holds the same number; true duplicates are
        # caught by the balance check below. A single repeated pair in
        # an otherwise 1-per-cell file is reported as a duplicate.
        counts = {key: len(v) for key, v in cells.items()}
        if len(set(counts.values())) > 1 and max(counts.values()) > 1:
            worst = [k for k, c in counts.items() if c > min(counts.values())]
            lines = []
            for key in worst[:_LIST_CAP]:
                recs = cells[key]
                lines.append(
                    f"({key[0]}, {key[1]}) at lines "
                    + ", ".join(str(r[5]) for r in recs)
                )
            raise DataError(
                "duplicate (row_id, col_id) records without rep_id: " + _cap(lines)
            )
    if duplicates:
        raise DataError(
            "duplicate (row_id, col_id, rep_id) records: " + _cap(duplicates)
        )

    m = max(len(v) for v in cells.values())
    missing = []
    for row in row_labels:
        for col in col_labels:
            have = cells.get((row, col), [])
            if len(have) < m:
                if has_rep:
                    got = {r[2] for r in have}
                    universe = sorted(
                        {r[2] for key, recs in cells.items() for r in recs}
                    )
                    absent = [rep for rep in universe if rep not in got]
                    missing.extend(
                        f"({row}, {col}, {rep})" for rep in (absent or ["?"])
                    )
                else:
                    missing.append(f"({row}, {col})")
    if missing:
        raise DataError(
            f"unbalanced design: every cell needs {m} record(s); "
            "missing " + _cap(missing)
        )
    return row_labels, col_labels, cells, m


def design_from_cubes(layout: BalancedLayout, cubes: dict, roles: dict
                      ) -> CenteredDesign:
    """Assemble a design from observation-level covariate cubes.

    cubes maps covariate names to (g, h, m) arrays; roles maps each
    name to row/column/interaction/within/auto. Role-tagged covariates
    must be constant over the margins the role ignores; auto columns
    are split into their centered parts.
    """
    g, h, m = layout.shape
    blocks = {"row": [], "column": [], "cell": [], "obs": []}
    names = {"row": [], "col": [], "cell": [], "obs": []}

    def add(block, name, values):
        key = {"row": "row", "column": "col", "cell": "cell", "obs": "obs"}[block]
        blocks[block].append(values)
        names[key].append(name)

    for name, cube in cubes.items():
        cube = np.asarray(cube, dtype=float)
        if m == 1 and cube.shape == (g, h):
            cube = cube[:, :, None]
        if cube.shape != layout.shape:
            raise DataError(
                f"covariate {name!r} has shape {cube.shape}, expected "
                f"{layout.shape}"
            )
        role = roles.get(name, "auto")
        if role == "row":
            per_row = cube.reshape(g, -1)
            spread = np.ptp(per_row, axis=1)
            if spread.max() > 0:
                raise DataError(
                    f"covariate {name!r} has role 'row' but varies within "
                    f"row index {int(spread.argmax())}"
                )
            add("row", name, per_row[:, 0])
        elif role == "column":
            per_col = cube.transpose(1, 0, 2).reshape(h, -1)
            spread = np.ptp(per_col, axis=1)
            if spread.max() > 0:
                raise DataError(
                    f"covariate {name!r} has role 'column' but varies within "
                    f"column index {int(spread.argmax())}"
                )
            add("column", name, per_col[:, 0])
        elif role == "interaction" or (role == "within" and m == 1):
            if np.ptp(cube, axis=2).max() > 0:
                raise DataError(
                    f"covariate {name!r} has role {role!r} but varies within "
                    "a cell; use role 'within' with replicated data"
                )
            add("cell", name, cube[:, :, 0])
        elif role == "within":
            add("obs", name, cube)
        elif role == "auto":
            parts = decompose_cell_covariate(cube, layout)
            add("row", f"{name}_row_cent", parts["row"][:, 0])
            add("column", f"{name}_column_cent", parts["col"][:, 0])
            add("cell", f"{name}_cell_cent", parts["cell"][:, :, 0])
            if m > 1:
                add("obs", f"{name}_within", parts["obs"][:, :, :, 0])
        else:
            raise DataError(
                f"unknown role {role!r} for covariate {name!r}; "
                f"expected one of {', '.join(ROLES)}"
            )

    def stacked(values, axis):
        return np.stack(values, axis=axis) if values else None

    return build_centered_design(
        layout,
        x_row=stacked(blocks["row"], 1),
        x_col=stacked(blocks["column"], 1),
        x_cell=stacked(blocks["cell"], 2),
        x_obs=stacked(blocks["obs"], 3),
        names=names,
    )


def ingest_csv(path, roles=None) -> IngestResult:
    """Read a long-format CSV into a validated balanced dataset.

    roles assigns each covariate column a role (row, column,
    interaction, within, or auto); unlisted covariates default to auto,
    which splits the column into centered row, column, cell, and
    (with replicates) within parts.
    """
    roles = parse_roles(roles)
    records, covariate_names, has_rep = _read_records(path)
    unknown = set(roles) - set(covariate_names)
    if unknown:
        raise DataError(
            f"roles given for columns not in the file: {sorted(unknown)}"
        )
    roles = {name: roles.get(name, "auto") for name in covariate_names}

    row_labels, col_labels, cells, m = _balanced_index(records, has_rep)
    layout = BalancedLayout(g=len(row_labels), h=len(col_labels), m=m)
    row_index = {label: i for i, label in enumerate(row_labels)}
    col_index = {label: j for j, label in enumerate(col_labels)}

    y = np.empty(layout.shape)
    rep_ids = np.empty(layout.shape, dtype=object) if has_rep else None
    cubes = {name: np.empty(layout.shape) for name in covariate_names}
    for (row, col), recs in cells.items():
        recs = sorted(recs, key=lambda r: (r[2], r[5])) if has_rep else recs
        i, j = row_index[row], col_index[col]
        for k, rec in enumerate(recs):
            y[i, j, k] = rec[3]
            if has_rep:
                rep_ids[i, j, k] = rec[2]
            for name, value in zip(covariate_names, rec[4]):
                cubes[name][i, j, k] = value

    design = design_from_cubes(layout, cubes, roles)
    return IngestResult(
        layout=layout,
        design=design,
        table=ResponseTable(layout, y),
        row_labels=tuple(row_labels),
        col_labels=tuple(col_labels),
        rep_ids=rep_ids,
        roles=roles,
        covariates=cubes,
    )


def write_long_csv(path, ingest: IngestResult) -> None:
    """Write the dataset back out in the long format ingest_csv reads."""
    layout = ingest.layout
    has_rep = ingest.rep_ids is not None
    header = ["row_id", "col_id"] + (["rep_id"] if has_rep else []) + ["y"]
    header += list(ingest.roles)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        cube = ingest.table.table()
        for i in range(layout.g):
            for j in range(layout.h):
                for k in range(layout.m):
                    record = [ingest.row_labels[i], ingest.col_labels[j]]
                    if has_rep:
                        record.append(ingest.rep_ids[i, j, k])
                    record.append(repr(float(cube[i, j, k])))
                    record += [
                        repr(float(ingest.covariates[name][i, j, k]))
                        for name in ingest.roles
                    ]
                    writer.writerow(record)


# ---------------------------------------------------------------------------
# provenance and result files

def provenance_dict(seed=None, config=None) -> dict:
    """Version, seed, and a hash of the run configuration."""
    canon = json.dumps(config, sort_keys=True, default=str) if config else ""
    digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
    return {"version": __version__, "seed": seed, "config_hash": digest}


def write_json(path, payload: dict, seed=None, config=None) -> None:
    body = dict(payload)
    body["provenance"] = provenance_dict(seed=seed, config=config)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from None


def write_csv_rows(path, header, rows, seed=None, config=None) -> None:
    """CSV with a provenance comment trailer."""
    prov = provenance_dict(seed=seed, config=config)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        fh.write(
            f"# version={prov['version']} seed={prov['seed']} "
            f"config_hash={prov['config_hash']}\n"
        )
