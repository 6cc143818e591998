"""Loading panels from CSV, scenario specs from JSON, and report rendering.

Two report formats exist: a human-readable summary table, and a
line-delimited records format (one JSON object per line, header first) that
parses back into an equivalent report. Machine-readable output contains no
timestamps, so identical runs serialize to identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging

import numpy as np

from .exceptions import ValidationError
from .model import PanelData
from .simulation import (
    RECORDS_SCHEMA_VERSION,
    DgpSpec,
    ScenarioReport,
    spec_from_payload,
)

logger = logging.getLogger(__name__)


def _read_csv_rows(path) -> list[list[str]]:
    with open(path, newline="") as handle:
        return [row for row in csv.reader(handle) if row]


def _read_unit_value_csv(path, value_name: str) -> dict[str, float]:
    """Parse a two-column (unit, value) CSV, tolerating one header row."""
    rows = _read_csv_rows(path)
    if not rows:
        raise ValidationError(f"{path}: file is empty")
    start = 0
    if len(rows[0]) == 2:
        try:
            float(rows[0][1])
        except ValueError:
            start = 1
    values: dict[str, float] = {}
    for idx, row in enumerate(rows[start:], start=start + 1):
        if len(row) != 2:
            raise ValidationError(
                f"{path}: row {idx} has {len(row)} fields, expected unit,{value_name}"
            )
        unit = row[0].strip()
        if unit in values:
            raise ValidationError(f"{path}: duplicate unit {unit!r}")
        try:
            values[unit] = float(row[1])
        except ValueError:
            raise ValidationError(
                f"{path}: non-numeric {value_name} for unit {unit!r} in row {idx}"
            ) from None
    return values


def _match_units(values: dict[str, float], names: list[str], path, what: str) -> np.ndarray:
    missing = [name for name in names if name not in values]
    if missing:
        raise ValidationError(f"{path}: missing {what} for unit {missing[0]!r}")
    extra = sorted(set(values) - set(names))
    if extra:
        raise ValidationError(f"{path}: {what} given for unknown unit {extra[0]!r}")
    return np.array([values[name] for name in names])


def load_panel_with_names(
    outcomes_path, sizes_path, normalize_sizes: bool = False
) -> tuple[PanelData, list[str]]:
    """Like :func:`load_panel`, but also returns the header's unit names."""
    rows = _read_csv_rows(outcomes_path)
    if len(rows) < 2:
        raise ValidationError(f"{outcomes_path}: need a header row and at least one data row")
    names = [name.strip() for name in rows[0]]
    if any(not name for name in names):
        raise ValidationError(f"{outcomes_path}: header contains an empty unit name")
    if len(set(names)) != len(names):
        raise ValidationError(f"{outcomes_path}: header contains duplicate unit names")
    n = len(names)
    data = np.empty((len(rows) - 1, n))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != n:
            raise ValidationError(
                f"{outcomes_path}: row {r} has {len(row)} fields, header has {n}"
            )
        for c, cell in enumerate(row):
            try:
                data[r - 1, c] = float(cell)
            except ValueError:
                raise ValidationError(
                    f"{outcomes_path}: non-numeric value {cell!r} at row {r}, "
                    f"column {names[c]!r}"
                ) from None

    sizes = _match_units(
        _read_unit_value_csv(sizes_path, "size"), names, sizes_path, "size"
    )
    total = float(np.sum(sizes))
    if abs(total - 1.0) > 1e-10:
        if normalize_sizes:
            logger.warning("sizes sum to %r; renormalizing to 1", total)
            sizes = sizes / total
        else:
            raise ValidationError(
                f"{sizes_path}: sizes sum to {total!r}, not 1; "
                "pass normalize_sizes to rescale"
            )
    return PanelData(data, sizes), names


def load_panel(outcomes_path, sizes_path, normalize_sizes: bool = False) -> PanelData:
    """Load a panel from an outcomes CSV and a sizes CSV.

    The outcomes file has one header row of unit names and one row per
    period. The sizes file has two columns (unit, size) whose unit set must
    match the header exactly. Sizes must sum to one within 1e-10 unless
    ``normalize_sizes`` is set, in which case they are rescaled with a
    logged warning.
    """
    panel, _ = load_panel_with_names(outcomes_path, sizes_path, normalize_sizes)
    return panel


def load_shock_variances(path, names: list[str]) -> np.ndarray:
    """Read per-unit shock variances (unit, sigma2) in header order."""
    values = _match_units(
        _read_unit_value_csv(path, "sigma2"), names, path, "shock variance"
    )
    if np.any(values <= 0.0):
        raise ValidationError(f"{path}: shock variances must be strictly positive")
    return values


def write_panel(panel: PanelData, outcomes_path, sizes_path, unit_names=None) -> None:
    """Write a panel back to the CSV pair accepted by :func:`load_panel`.

    Floats are written with ``repr`` so a round trip reproduces them
    exactly.
    """
    names = unit_names or [f"unit_{i}" for i in range(panel.n_units)]
    if len(names) != panel.n_units:
        raise ValidationError(
            f"got {len(names)} unit names for {panel.n_units} units"
        )
    with open(outcomes_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in panel.outcomes:
            writer.writerow([repr(float(v)) for v in row])
    with open(sizes_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["unit", "size"])
        for name, size in zip(names, panel.sizes):
            writer.writerow([name, repr(float(size))])


def load_dgp_spec(path) -> DgpSpec:
    """Load a scenario description from a JSON file.

    Keys mirror the scenario fields: name, n_units, n_periods, phi, sigma
    (lists, or scalars broadcast to all units), size_rule ("power-law" with
    zeta, or "explicit" with sizes), shock_dist, t_dof, seed. Unknown keys
    are rejected.
    """
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: expected a JSON object at top level")
    return spec_from_payload(payload)


def _json_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _fmt(value, width: int = 9, digits: int = 3) -> str:
    if value is None or (isinstance(value, float) and not np.isfinite(value)):
        return "-".rjust(width)
    return f"{value:.{digits}f}".rjust(width)


def _render_table(report: ScenarioReport) -> str:
    lines = []
    spec = report.spec
    lines.append(f"scenario: {spec.name}")
    lines.append(
        f"reps: {report.reps}   level: {report.level}   seed: {spec.seed}   "
        f"units: {spec.n_units}   periods: {spec.n_periods}"
    )
    lines.append(f"package version: {report.package_version}")
    lines.append(f"config hash: {report.config_hash}")
    fail = ", ".join(f"{tag}: {count}" for tag, count in sorted(report.failures.items()))
    lines.append(f"failures: {fail if fail else 'none'}")
    if np.isfinite(report.elapsed_seconds) and report.elapsed_seconds > 0:
        lines.append(f"elapsed: {report.elapsed_seconds:.1f} s")
    lines.append("")

    agg = report.aggregates
    lines.append(f"{'estimand':<22}{'coverage':>9}{'(se)':>9}{'median length':>15}")
    rgiv = agg.get("rgiv")
    if rgiv and rgiv.get("n_ok"):
        for label, key in (("rgiv phi_S", "phi_s"), ("rgiv phi_E", "phi_e")):
            block = rgiv[key]
            lines.append(
                f"{label:<22}{_fmt(block['coverage'])}{_fmt(block['coverage_se'])}"
                f"{_fmt(block['median_length'], width=15)}"
            )
    for tag in report.estimators:
        block = agg.get(tag)
        if tag.startswith("giv-") and block and block.get("n_ok"):
            lines.append(
                f"{tag:<22}{_fmt(block['coverage'])}{_fmt(block['coverage_se'])}"
                f"{_fmt(block['median_length'], width=15)}"
            )
    if rgiv and rgiv.get("n_ok"):
        lines.append("")
        lines.append(f"{'test':<22}{'rejection':>9}{'(se)':>9}{'alpha':>9}")
        for label, key in (
            ("overidentification", "j_test"),
            ("homogeneity", "homogeneity_test"),
        ):
            block = rgiv[key]
            lines.append(
                f"{label:<22}{_fmt(block['rejection_rate'])}"
                f"{_fmt(block['rejection_se'])}{_fmt(block['alpha'])}"
            )
        lines.append("")
        lines.append(
            f"{'unit':<6}{'true':>9}{'coverage':>10}{'(se)':>9}{'median length':>15}"
        )
        coef = rgiv["coefficients"]
        for i in range(spec.n_units):
            lines.append(
                f"{i + 1:<6}{_fmt(coef['true_values'][i])}"
                f"{_fmt(coef['coverage'][i], width=10)}{_fmt(coef['coverage_se'][i])}"
                f"{_fmt(coef['median_length'][i], width=15)}"
            )
    lines.append("")
    return "\n".join(lines)


def render_report(report: ScenarioReport, format: str = "table") -> str:
    """Render a scenario report.

    ``table`` gives the human-readable summary (coverage with Monte Carlo
    standard errors and median interval lengths, test rejection rates, and
    the per-coefficient block). ``records`` gives the line-delimited
    machine format: a header object carrying provenance (schema version,
    package version, config hash, scenario, aggregates), then one JSON
    object per replication. The records format round-trips through
    :func:`parse_records` and contains nothing run-dependent.
    """
    if format == "table":
        return _render_table(report)
    if format == "records":
        lines = [_json_line({"kind": "header", **report.to_payload()})]
        for record in report.records:
            lines.append(_json_line({"kind": "replication", **record}))
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown report format {format!r}; expected 'table' or 'records'")


def parse_records(text: str) -> ScenarioReport:
    """Rebuild a report from the records format of :func:`render_report`."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValidationError("records document is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise ValidationError("first line of a records document must be the header")
    version = header.get("schema_version")
    if version != RECORDS_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported records schema version {version!r}; "
            f"this package reads version {RECORDS_SCHEMA_VERSION}"
        )
    records = []
    for line in lines[1:]:
        obj = json.loads(line)
        if obj.get("kind") != "replication":
            raise ValidationError(f"unexpected record kind {obj.get('kind')!r}")
        obj.pop("kind")
        records.append(obj)
    spec = spec_from_payload(header["spec"])
    return ScenarioReport(
        spec=spec,
        reps=header["reps"],
        level=header["level"],
        estimators=tuple(header["estimators"]),
        aggregates=header["aggregates"],
        failures=header["failures"],
        records=records,
        config_hash=header["config_hash"],
        package_version=header["package_version"],
        elapsed_seconds=0.0,
    )


def write_report(report: ScenarioReport, path, format: str = "records") -> None:
    """Render and write a report; see :func:`render_report` for formats."""
    text = render_report(report, format)
    with open(path, "w") as handle:
        handle.write(text)
