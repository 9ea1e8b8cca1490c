"""CSV datasets: a header row, an integer ``label`` column, numeric features."""
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from datasets.blobs import Dataset
from errors import DatasetParseError

LABEL_COLUMN = "label"


def load_csv(path, class_count=None):
    """Read a CSV and min-max rescale every feature column to [0, 1].

    Constant columns map to 0.5. Reported row numbers are file lines (header = 1).
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DatasetParseError(f"ragged rows in {path}: {e}") from e
    except pd.errors.EmptyDataError as e:
        raise DatasetParseError(f"{path} is empty") from e

    if LABEL_COLUMN not in frame.columns:
        raise DatasetParseError(f"{path} has no '{LABEL_COLUMN}' column")
    if len(frame) == 0:
        raise DatasetParseError(f"{path} has no data rows")

    values = {}
    for column in frame.columns:
        parsed = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = parsed.isna().to_numpy()
        if bad.any():
            row = int(np.argmax(bad)) + 2
            raise DatasetParseError(
                f"column '{column}' has non-numeric or missing cell {frame[column].iloc[row - 2]!r}",
                row=row,
            )
        values[column] = parsed.to_numpy(dtype=np.float64)

    labels = values.pop(LABEL_COLUMN)
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        row = int(np.argmax((labels != np.round(labels)) | (labels < 0))) + 2
        raise DatasetParseError("labels must be nonnegative integers", row=row)
    labels = labels.astype(np.int64)
    if not values:
        raise DatasetParseError(f"{path} has no feature columns")

    raw = np.stack(list(values.values()), axis=1)
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    span = hi - lo
    constant = span == 0
    features = np.where(constant, 0.5, (raw - lo) / np.where(constant, 1.0, span))

    return Dataset(
        features=torch.from_numpy(features),
        labels=torch.from_numpy(labels),
        class_count=class_count or int(labels.max()) + 1,
        name=path.stem,
        rescale={"columns": list(values.keys()), "min": lo.tolist(), "max": hi.tolist()},
    )


def save_csv(data, path):
    columns = (data.rescale or {}).get("columns") or [f"x{j}" for j in range(data.dim)]
    frame = pd.DataFrame(data.features.numpy(), columns=columns)
    frame[LABEL_COLUMN] = data.labels.numpy()
    Path(path).parent.mkdir(exist_ok=True, parents=True)
    frame.to_csv(path, index=False, float_format="%.17g")
