import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Annotated, List, Optional, Sequence, Union

import pandas as pd
from pydantic import BaseModel, PlainSerializer

from errors import PipelineError

logger = logging.getLogger(__name__)


def _inf_as_text(value: float) -> Union[float, str]:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


# +inf (PSNR of identical images, t of a constant nonzero difference) is written as "inf"
InfFloat = Annotated[float, PlainSerializer(_inf_as_text, return_type=Union[float, str])]


class FitReport(BaseModel):
    mode: str
    n_points: int
    rms: float
    collinear: bool
    rotation: List[List[float]]
    translation: List[float]
    vertebra_ids: List[int] = []


class ImageMetricRow(BaseModel):
    method: str
    volume_id: str
    crop_id: int
    slice_index: int
    l1: float
    mse: float
    psnr: InfFloat
    ssim: float
    vifp: float


class DiceRow(BaseModel):
    method: str
    volume_id: str
    vertebra_id: int
    subset: str
    dice: float


class TTestRow(BaseModel):
    pair: str
    metric: str
    t: InfFloat
    p: float
    n: int


class MethodSummary(BaseModel):
    method: str
    n_crops: int
    l1: float
    mse: float
    psnr: InfFloat
    psnr_of_mean_mse: InfFloat
    jensen_holds: bool
    ssim: float
    vifp: float
    dice_per_volume: Optional[float] = None
    dice_per_vertebra: Optional[float] = None
    dice_posterior_per_volume: Optional[float] = None
    dice_posterior_per_vertebra: Optional[float] = None


class MetricsReport(BaseModel):
    images: List[ImageMetricRow] = []
    dice: List[DiceRow] = []
    ttests: List[TTestRow] = []
    summaries: List[MethodSummary] = []
    worst_p: Optional[float] = None


class AblationRow(BaseModel):
    steps: int
    eta: float
    w: float
    is_default: bool
    l1: float
    mse: float
    psnr: InfFloat
    ssim: float
    vifp: float
    dice_all: Optional[float] = None
    dice_posterior: Optional[float] = None
    t_vs_default: Optional[InfFloat] = None
    p_vs_default: Optional[float] = None


class AblationReport(BaseModel):
    rows: List[AblationRow] = []
    worst_p: Optional[float] = None


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise PipelineError(f"Could not write {path}: {e}", "io-failure") from e


def write_table(rows: Sequence[BaseModel], path: Union[str, Path], columns: Optional[List[str]] = None) -> None:
    """One CSV row per model; the header is the model's field order."""
    path = Path(path)
    records = [row.model_dump(mode="json") for row in rows]
    frame = pd.DataFrame.from_records(records, columns=columns or (list(records[0]) if records else None))
    _atomic_write(path, frame.to_csv(index=False, lineterminator="\n"))
    logger.info(f"Wrote {len(records)} rows to {path}")


def write_json(report: BaseModel, path: Union[str, Path]) -> None:
    path = Path(path)
    _atomic_write(path, report.model_dump_json(indent=2) + "\n")
    logger.info(f"Wrote {path}")


def read_table(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)
