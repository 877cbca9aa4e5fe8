"""Report files, the loss comparison table and line-delimited training history."""
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

from pythonjsonlogger import jsonlogger

from .train import PUBLISHED_REFERENCE_ROWS, EpochRecord, LossRow, MetricsReport

logger = logging.getLogger("ComboLabReport")

PROVENANCE_BANNER = (
    "SYNTHETIC DESK-SCALE RESULTS: produced on generated data with a small seeded backbone. "
    "They are not the published SCUT-FBP, HotOrNot or SCUT-FBP5500 figures."
)

PathLike = Union[str, Path]


def write_json_report(path: PathLike, payload: dict) -> Path:
    """Write ``payload`` with the provenance banner, keys sorted."""
    path = Path(path)
    document = {"provenance": PROVENANCE_BANNER, **payload}
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.info("Wrote report {0}".format(path))
    return path


def _cell(value: Optional[float]) -> str:
    return "{0:.4f}".format(value) if value is not None else "undef"


def format_metrics(report: MetricsReport) -> str:
    return "MAE={0} RMSE={1} PC={2} (n={3})".format(
        _cell(report.mae), _cell(report.rmse), _cell(report.pc), report.n)


def format_loss_table(rows: Sequence[LossRow], with_reference: bool = True) -> str:
    """Plain-text (Loss Function, MAE, RMSE, PC) table, banner first."""
    width = max([len("Loss Function")] + [len(r.label) for r in rows])
    line = "{0:<" + str(width) + "}  {1:>8}  {2:>8}  {3:>8}"
    out: List[str] = [PROVENANCE_BANNER, "", line.format("Loss Function", "MAE", "RMSE", "PC")]
    out.append("-" * (width + 30))
    for row in rows:
        out.append(line.format(row.label, _cell(row.metrics.mae), _cell(row.metrics.rmse), _cell(row.metrics.pc)))
    if with_reference:
        out.extend(["", "Published SCUT-FBP5500 60/40 reference (not reproduced here):"])
        for row in rows:
            ref = PUBLISHED_REFERENCE_ROWS.get(row.loss)
            if ref is not None:
                out.append(line.format(row.label, *("{0:.4f}".format(v) for v in ref)))
    return "\n".join(out) + "\n"


def loss_table_payload(rows: Sequence[LossRow]) -> dict:
    return {
        "rows": [{"loss": r.loss, "label": r.label, **r.metrics.to_dict()} for r in rows],
        "published_reference": {k: dict(zip(("mae", "rmse", "pc"), v)) for k, v in PUBLISHED_REFERENCE_ROWS.items()},
    }


def write_history(path: PathLike, records: Iterable[EpochRecord], **tags) -> Path:
    """One JSON object per epoch through a dedicated non-propagating logger.

    Records carry no timestamps so seeded runs give identical files.
    """
    path = Path(path)
    history_logger = logging.getLogger("ComboLabHistory")
    history_logger.propagate = False
    history_logger.setLevel(logging.INFO)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(jsonlogger.JsonFormatter("%(message)s"))
    history_logger.addHandler(handler)
    try:
        for record in records:
            history_logger.info("epoch", extra={**tags, **record.to_record()})
    finally:
        history_logger.removeHandler(handler)
        handler.close()
    return path


def read_history(path: PathLike) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
