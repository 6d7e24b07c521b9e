"""
Result files: tab-separated tables with a `#` provenance header, plus a JSON
run manifest. Every file is written atomically and never appended to.
"""
import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import ValidationError, validate
from loguru import logger

from config import ARTIFACT_VERSION, RESULTS_SCHEMA_VERSION
from harness import McReport, VariantSummary
from rules import RuleKind

RESULT_COLUMNS = ("variant", "rule", "kappa", "iw", "step", "rmse_m", "diverged_runs", "repairs")
STABILITY_COLUMNS = ("rule", "n_x", "alpha", "kappa", "stability")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["artifact_version", "schema_version", "command", "config_hash", "seed", "outputs"],
    "properties": {
        "artifact_version": {"type": "string"},
        "schema_version": {"type": "integer"},
        "command": {"type": "string"},
        "config_path": {"type": ["string", "null"]},
        "config": {"type": ["object", "null"]},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "streams_digests": {"type": "array", "items": {"type": "string"}},
        "outputs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
    },
}


@dataclass
class ResultTable:
    header: dict[str, str]
    columns: tuple[str, ...]
    rows: list[dict[str, str]]


def format_value(value) -> str:
    """Floats get round-trip precision; None becomes '-'."""
    if value is None:
        return "-"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(mode="w", dir=path.parent, prefix=f".{path.name}.", delete=False, encoding="utf-8") as temp_file:
        temp_file.write(text)
        temp_path = temp_file.name
    try:
        os.replace(temp_path, path)
    except OSError:
        os.unlink(temp_path)
        raise
    logger.info(f"Wrote {path}")


def render_table(header: dict[str, object], columns, rows) -> str:
    buffer = io.StringIO()
    buffer.write(f"# schema_version={RESULTS_SCHEMA_VERSION}\n# version={ARTIFACT_VERSION}\n")
    for key, value in header.items():
        buffer.write(f"# {key}={format_value(value)}\n")
    writer = csv.DictWriter(buffer, fieldnames=columns, delimiter="\t", lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows({c: format_value(row[c]) for c in columns} for row in rows)
    return buffer.getvalue()


def read_table(path: Path) -> ResultTable:
    """Parses a table written by render_table; numbers stay strings so callers choose the type."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = {}
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
    reader = csv.DictReader((line for line in lines if not line.startswith("#")), delimiter="\t")
    rows = list(reader)
    if not reader.fieldnames:
        raise ValueError(f"{path} has no column row.")
    if header.get("schema_version") != str(RESULTS_SCHEMA_VERSION):
        logger.warning(f"{path} has schema version {header.get('schema_version')}, expected {RESULTS_SCHEMA_VERSION}")
    return ResultTable(header, tuple(reader.fieldnames), rows)


def _variant_row(summary: VariantSummary, iw: float, step, rmse: float) -> dict:
    rule = summary.variant.rule
    return {
        "variant": summary.variant.mode.value,
        "rule": rule.kind.value,
        "kappa": rule.kappa if rule.kind is RuleKind.UT else None,
        "iw": float(iw),
        "step": step,
        "rmse_m": float(rmse),
        "diverged_runs": summary.diverged_runs,
        "repairs": summary.repairs,
    }


def summary_rows(report: McReport, iw: float) -> list[dict]:
    """Two rows per variant: the time average of the RMSE curve ('avg') and the pooled RMSE ('pooled')."""
    rows = []
    for summary in report.summaries.values():
        rows.append(_variant_row(summary, iw, "avg", summary.time_avg_rmse))
        rows.append(_variant_row(summary, iw, "pooled", summary.pooled_rmse))
    return rows


def curve_rows(report: McReport, iw: float) -> list[dict]:
    return [
        _variant_row(summary, iw, k, rmse)
        for summary in report.summaries.values()
        for k, rmse in enumerate(summary.rmse_curve, start=1)
    ]


def report_header(report: McReport) -> dict:
    return {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "mc_runs": report.mc_runs,
        "k_steps": report.k_steps,
        "streams_digest": report.streams_digest,
    }


def write_results(path: Path, header: dict, rows: list[dict]):
    atomic_write(path, render_table(header, RESULT_COLUMNS, rows))


def write_stability(path: Path, header: dict, rows: list[dict], columns=STABILITY_COLUMNS):
    atomic_write(path, render_table(header, columns, rows))


def write_manifest(path: Path, manifest: dict):
    manifest = {"artifact_version": ARTIFACT_VERSION, "schema_version": RESULTS_SCHEMA_VERSION, **manifest}
    try:
        validate(instance=manifest, schema=MANIFEST_SCHEMA)
    except ValidationError as e:
        logger.error(f"Run manifest does not match its schema: {e.message}")
        raise
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
