"""Dataset/config ingestion and results emission for the CLI."""

from __future__ import annotations

import csv
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import DataValidationError, Dataset
from .simulation import ResultsTable, ScenarioConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class CsvFormatError(DataValidationError):
    """Malformed CSV cell or structure, with location diagnostics."""


class ConfigError(ValueError):
    """Bad experiment config file."""


def fmt_real(x: float) -> str:
    """17 significant digits: exact round-trip for any 64-bit float."""
    return format(float(x), ".17g")


def load_csv(path) -> Dataset:
    """Read a dataset: header row, response column named y first, covariates after.

    Non-finite or unparseable cells are rejected with their (1-based data)
    row and column name.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        header = [c.strip() for c in header]
        if not header or header[0] != "y":
            raise CsvFormatError(f"{path}: first column must be named 'y', got {header[:1]}")
        if len(header) < 2:
            raise CsvFormatError(f"{path}: need at least one covariate column")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if len(rec) != len(header):
                raise CsvFormatError(
                    f"{path}: row {i} has {len(rec)} cells, expected {len(header)}"
                )
            vals = []
            for name, cell in zip(header, rec):
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: malformed cell at row {i}, column {name}: {cell!r}"
                    ) from None
                if not np.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: non-finite value at row {i}, column {name}: {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    return Dataset(arr[:, 1:], arr[:, 0])


def save_csv(data: Dataset, path):
    """Write a dataset in the load_csv schema with round-trip-exact reals."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y"] + [f"x{j + 1}" for j in range(data.p)])
        for yi, xi in zip(data.y, data.X):
            writer.writerow([fmt_real(yi)] + [fmt_real(v) for v in xi])


_SCENARIO_KEYS = {
    "n0", "K", "n_k", "p", "s", "eta", "A", "delta_design", "error_dist",
    "tau", "replications", "seed", "methods",
}
_SELECTION_KEYS = {"folds", "grid_size", "grid_min_ratio"}
_TRANSFER_KEYS = {"kernel", "h_w", "h_delta"}
_DETECTION_KEYS = {"threshold"}
_DISTRIBUTED_KEYS = {"rho0", "iterations"}
_SECTIONS = {
    "scenario": _SCENARIO_KEYS,
    "selection": _SELECTION_KEYS,
    "transfer": _TRANSFER_KEYS,
    "detection": _DETECTION_KEYS,
    "distributed": _DISTRIBUTED_KEYS,
}
_SWEEPABLE = ("eta", "A", "delta_design", "tau")


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def load_experiment_config(path) -> list[ScenarioConfig]:
    """Parse a TOML experiment file into the scenario grid it describes.

    The [scenario] section may give arrays for eta, A, delta_design, and
    tau; the cross product becomes one ScenarioConfig per combination.
    Unknown sections or keys are rejected.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for section, table in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        unknown = set(table) - _SECTIONS[section]
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    sc = doc.get("scenario", {})
    if "seed" not in sc:
        raise ConfigError(f"{path}: [scenario] must set a seed")

    base = {k: v for k, v in sc.items() if k not in _SWEEPABLE}
    if "methods" in base:
        base["methods"] = tuple(base["methods"])
    sel = doc.get("selection", {})
    base.update({k: sel[k] for k in sel})
    tr = doc.get("transfer", {})
    base.update({k: tr[k] for k in tr})
    det = doc.get("detection", {})
    base.update({k: det[k] for k in det})
    dist = doc.get("distributed", {})
    if "rho0" in dist:
        base["rho0"] = dist["rho0"]
    if "iterations" in dist:
        base["dist_T"] = dist["iterations"]

    scenarios = []
    for eta in _as_list(sc.get("eta", 5.0)):
        for A in _as_list(sc.get("A", 8)):
            for delta in _as_list(sc.get("delta_design", 0.3)):
                for tau in _as_list(sc.get("tau", 0.5)):
                    sid = f"eta={eta},A={A},delta={delta},tau={tau}"
                    try:
                        scenarios.append(
                            ScenarioConfig(
                                eta=float(eta), A=int(A), delta_design=float(delta),
                                tau=float(tau), scenario_id=sid, **base,
                            )
                        )
                    except (TypeError, ValueError) as exc:
                        raise ConfigError(f"{path}: {exc}") from None
    return scenarios


RESULTS_FIELDS = ("scenario_id", "replication", "method", "tau", "error", "converged")
FAILED_MARKER = "FAILED"


def write_results_csv(table: ResultsTable, path, failed: bool = False):
    """Deterministic results file: everything except wall-clock timing."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_FIELDS)
        for r in table.rows:
            writer.writerow(
                [r.scenario_id, r.replication, r.method, fmt_real(r.tau),
                 fmt_real(r.error), int(r.converged)]
            )
        if failed:
            writer.writerow([FAILED_MARKER, "", "", "", "", ""])


def write_timing_csv(table: ResultsTable, path):
    """Wall-clock sidecar; separated so the results file stays reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario_id", "replication", "method", "seconds"])
        for r in table.rows:
            writer.writerow([r.scenario_id, r.replication, r.method, fmt_real(r.seconds)])


def write_summary_csv(table: ResultsTable, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario_id", "method", "replications", "mean_error", "sd_error"])
        by_sid = {}
        for r in table.rows:
            by_sid.setdefault(r.scenario_id, ResultsTable()).append(r)
        for sid, sub in by_sid.items():
            for s in sub.summary():
                writer.writerow(
                    [sid, s["method"], s["replications"],
                     fmt_real(s["mean_error"]), fmt_real(s["sd_error"])]
                )


def versions() -> dict:
    import scipy

    from . import __version__

    return {
        "transqr": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": ".".join(str(v) for v in sys.version_info[:3]),
    }


def write_manifest(path, command: str, settings: dict):
    """Plain-text echo of everything needed to reproduce the run."""
    lines = [f"command = {command}"]
    for k, v in settings.items():
        lines.append(f"{k} = {v}")
    for k, v in versions().items():
        lines.append(f"version.{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def scenario_settings(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["kernel"] = cfg.kernel.value
    d["methods"] = ",".join(cfg.methods)
    return d
