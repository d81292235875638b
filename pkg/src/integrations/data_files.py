"""Data ingestion and report writers for the command-line surface.

Input files hold one number per line, or a single-column CSV with an
optional header. Every CSV written here starts with '#' comment lines
echoing the configuration of the run, and all floats carry 17 significant
digits so doubles survive the round trip.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.models.densities import Sample
from src.models.errors import ConfigError, DataFileError
from src.models.schemas import CvCurve, FitReport
from src.services.mm_service import FitResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def parse_transform(text: Optional[str]) -> Optional[float]:
    """'log+50' -> 50.0 (x -> ln(x + 50)); None or 'none' -> no transform"""
    if text is None or text.strip().lower() in ("", "none"):
        return None
    body = text.strip().lower()
    if not body.startswith("log"):
        raise ConfigError(f"Unsupported transform '{text}', expected log+<c>")
    shift = body[3:] or "+0"
    try:
        return float(shift)
    except ValueError:
        raise ConfigError(f"Transform shift must be a number: '{text}'")


@dataclass(frozen=True)
class DataFile:
    """Numeric data file with an optional log-shift transform x -> ln(x + c)"""

    path: str
    log_shift: Optional[float] = None

    def read_values(self) -> np.ndarray:
        values, _ = self._parse()
        return values

    def _parse(self):
        if not os.path.exists(self.path):
            raise DataFileError(f"Data file not found: {self.path}")
        values: List[float] = []
        lines: List[int] = []
        seen_content = False
        with open(self.path, "r", encoding="utf-8") as fh:
            for number, raw in enumerate(fh, start=1):
                text = raw.strip()
                if not text or text.startswith("#"):
                    continue
                fields = [part.strip() for part in text.split(",")]
                if len(fields) > 1 and any(fields[1:]):
                    raise DataFileError(f"expected a single column, found {len(fields)}", line=number)
                cell = fields[0].strip('"')
                try:
                    value = float(cell)
                except ValueError:
                    if not seen_content:
                        seen_content = True
                        logger.debug(f"Treating line {number} of {self.path} as a header: '{text}'")
                        continue
                    raise DataFileError(f"not a number: '{cell}'", line=number)
                seen_content = True
                if not math.isfinite(value):
                    raise DataFileError(f"value is not finite: '{cell}'", line=number)
                values.append(value)
                lines.append(number)
        if not values:
            raise DataFileError(f"No numeric values in {self.path}")
        return np.array(values), lines

    def load(self) -> Sample:
        values, lines = self._parse()
        provenance = f"file {self.path}"
        if self.log_shift is not None:
            shifted = values + self.log_shift
            bad = np.flatnonzero(~(shifted > 0))
            if bad.size:
                i = int(bad[0])
                raise DataFileError(f"x + {self.log_shift:g} = {shifted[i]:g} is not positive; log transform undefined", line=lines[i])
            values = np.log(shifted)
            provenance += f", transform log(x + {self.log_shift:g})"
        logger.info(f"Loaded {values.size} values from {self.path}")
        return Sample(values, provenance=provenance)


def write_values(path: str, values, header: Optional[Dict[str, Any]] = None) -> None:
    """One number per line, 17 significant digits"""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        _write_header(fh, header)
        for value in np.asarray(values, dtype=float):
            fh.write(f"{value:.17g}\n")


def build_fit_report(result: FitResult, f0, config: Dict[str, Any]) -> FitReport:
    x = result.f_hat.abscissae
    mixture = (1 - result.p_hat) * np.asarray(f0.pdf(x), dtype=float) + result.p_hat * result.f_hat.values
    return FitReport(
        p_hat=result.p_hat,
        n_iters=result.n_iters,
        stop_reason=result.stop_reason,
        bandwidth=result.bandwidth,
        x=x.tolist(),
        f_hat=result.f_hat.values.tolist(),
        mixture=mixture.tolist(),
        trace=result.trace,
        config=config,
    )


def write_fit_report(path: str, report: FitReport) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.model_dump_json(indent=2))
    logger.info(f"Wrote fit report to {path}")


def read_fit_report(path: str) -> FitReport:
    with open(path, "r", encoding="utf-8") as fh:
        return FitReport.model_validate_json(fh.read())


def write_curves(prefix: str, report: FitReport, header: Optional[Dict[str, Any]] = None) -> List[str]:
    """Mixture and component curves as (x, density) CSVs; returns the paths"""
    paths = []
    for name, values in (("mixture", report.mixture), ("component", report.f_hat)):
        path = f"{prefix}_{name}.csv"
        write_table(path, pd.DataFrame({"x": report.x, "density": values}), header)
        paths.append(path)
    return paths


def cv_curve_table(curve: CvCurve) -> pd.DataFrame:
    return pd.DataFrame.from_records([{"h": point.h, "cv": point.cv, "error": point.error} for point in curve.points])


def write_table(path: str, table: pd.DataFrame, header: Optional[Dict[str, Any]] = None) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_header(fh, header)
        table.to_csv(fh, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(table)} rows to {path}")


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def _write_header(fh, header: Optional[Dict[str, Any]]) -> None:
    if header:
        fh.write(f"# config: {json.dumps(header, sort_keys=True, default=str)}\n")


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
