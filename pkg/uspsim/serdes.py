"""
Routines for serialising and deserialising reports, traces and tensors.

All files are UTF-8 with LF line endings. JSON is written with sorted keys
so that two runs producing equal reports produce byte-identical files.
"""

from typing import Iterable, Optional, TextIO, Union

import io

import csv

import json

from pathlib import Path

import numpy as np

from uspsim.tensor import Tensor4, check_tensor4


def tensor_to_json(x: Tensor4) -> dict:
    """
    Convert a tensor into a JSON-friendly dict holding its shape, dtype and
    flat (row-major) data.
    """
    check_tensor4(x)
    return {
        "shape": list(x.shape),
        "dtype": str(x.dtype),
        "data": x.reshape(-1).tolist(),
    }


def tensor_from_json(data: dict) -> Tensor4:
    """
    Inverse of :py:func:`tensor_to_json`. The dtype defaults to 64-bit float
    when not given (as in hand-written fixtures).
    """
    shape = tuple(data["shape"])
    x = np.asarray(data["data"], dtype=data.get("dtype", "float64"))
    if x.size != int(np.prod(shape)):
        raise ValueError(f"{x.size} values given for shape {shape}")
    return check_tensor4(x.reshape(shape))


def dumps_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(obj: object, filename: Path) -> None:
    with filename.open("w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_json(obj))


def read_json(filename: Path) -> object:
    with filename.open("r", encoding="utf-8") as f:
        return json.load(f)


def write_csv_rows(rows: Iterable[dict], columns: list[str], f: TextIO) -> None:
    """
    Write ``rows`` as CSV with a header. Only the named columns are written,
    in the order given.
    """
    writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def format_report(report: Union[dict, list], fmt: str, columns: Optional[list[str]] = None) -> str:
    """
    Render a report as text. CSV output needs a list of row dicts (or a
    dict with a ``rows`` list) and the column order.
    """
    if fmt == "json":
        return dumps_json(report)
    elif fmt == "csv":
        rows = report["rows"] if isinstance(report, dict) else report
        if columns is None:
            raise ValueError("CSV output requires a column list")
        out = io.StringIO()
        write_csv_rows(rows, columns, out)
        return out.getvalue()
    else:
        raise ValueError(f"Unknown report format '{fmt}'")


def write_report(
    report: Union[dict, list],
    filename: Path,
    fmt: str = "json",
    columns: Optional[list[str]] = None,
) -> None:
    """
    Write a report to ``filename``, creating parent directories as needed.
    """
    text = format_report(report, fmt, columns)
    filename.parent.mkdir(parents=True, exist_ok=True)
    with filename.open("w", encoding="utf-8", newline="\n") as f:
        f.write(text)
