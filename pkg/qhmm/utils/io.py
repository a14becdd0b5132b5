"""JSON and CSV codecs for instruments, FCS models and analysis results."""
import csv
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy import ndarray

from qhmm.core.operators import HermitianOperator, SuperOperator, choi_matrix, kraus_from_choi
from qhmm.models.instrument import FcsModel, Instrument, Outcome
from qhmm.models.reports import SumDistribution, Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

TRAJECTORY_COLUMNS = ("trial", "step", "outcome_label", "value")
SUM_DISTRIBUTION_COLUMNS = ("sum", "probability")


class InstrumentFormatError(ValueError):
    """Raised when an instrument or FCS file does not follow the JSON schema."""
    pass


def encode_matrix(matrix: ndarray) -> list:
    """Row-major nested list of [re, im] pairs."""
    array = np.asarray(matrix, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in array]


def decode_matrix(data: Any, name: str = "matrix") -> ndarray:
    """
    Inverse of encode_matrix.

    Raises:
        InstrumentFormatError: If data is not a rectangular matrix of [re, im] pairs
    """
    try:
        array = np.asarray(data, dtype=float)
    except (TypeError, ValueError) as e:
        raise InstrumentFormatError(f"{name} is not a numeric matrix: {e}") from e
    if array.ndim != 3 or array.shape[2] != 2:
        raise InstrumentFormatError(f"{name} must be a matrix of [re, im] pairs, got shape {array.shape}")
    return array[..., 0] + 1j * array[..., 1]


def format_number(value: Optional[float]) -> str:
    """Shortest round-tripping text for a float; empty for None."""
    if value is None:
        return ""
    return repr(float(value))


@contextmanager
def atomic_write(path: PathLike) -> Iterator:
    """
    Open a temporary file next to path and rename it over path on success.

    Nothing is left behind if the block raises.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temporary = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            yield handle
        os.replace(temporary, target)
        logger.info(f"Wrote {target}")
    except BaseException:
        if os.path.exists(temporary):
            os.unlink(temporary)
        raise


@contextmanager
def open_output(path: Optional[PathLike]) -> Iterator:
    """Atomic file writer for a path, stdout for None."""
    if path is None:
        yield sys.stdout
        sys.stdout.flush()
    else:
        with atomic_write(path) as handle:
            yield handle


def write_json(data: Any, path: Optional[PathLike] = None) -> None:
    """Indented JSON with a trailing newline."""
    with open_output(path) as handle:
        handle.write(json.dumps(data, indent=2))
        handle.write("\n")


def read_json(path: PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise InstrumentFormatError(f"{path} is not valid JSON: {e}") from e


def write_csv(path: Optional[PathLike], columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """CSV with a header row, LF line endings and floats in round-trip form."""
    with open_output(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_number(v) if isinstance(v, float) or v is None else v for v in row])


# Instrument JSON

def instrument_to_dict(instr: Instrument) -> dict:
    data = {
        "dim": instr.dim,
        "outcomes": [
            {"label": o.label, "value": o.value, "kraus": [encode_matrix(k) for k in o.kraus]}
            for o in instr.outcomes
        ],
    }
    if instr.initial_state is not None:
        data["initial_state"] = encode_matrix(instr.initial_state)
    return data


def instrument_from_dict(data: dict) -> Instrument:
    """
    Build an instrument from its JSON form.

    Raises:
        InstrumentFormatError: On missing keys or malformed matrices
        pydantic.ValidationError: On shape or label violations
    """
    if not isinstance(data, dict) or "dim" not in data or "outcomes" not in data:
        raise InstrumentFormatError("Instrument JSON needs 'dim' and 'outcomes'")
    outcomes = []
    for index, entry in enumerate(data["outcomes"]):
        try:
            label, value, kraus = entry["label"], entry["value"], entry["kraus"]
        except (KeyError, TypeError) as e:
            raise InstrumentFormatError(f"Outcome {index} needs 'label', 'value' and 'kraus'") from e
        outcomes.append(
            Outcome(
                label=label,
                value=value,
                kraus=[decode_matrix(k, f"kraus of outcome '{label}'") for k in kraus],
            )
        )
    initial = data.get("initial_state")
    return Instrument(
        dim=data["dim"],
        outcomes=outcomes,
        initial_state=None if initial is None else decode_matrix(initial, "initial_state"),
    )


def load_instrument(path: PathLike) -> Instrument:
    """Read an instrument JSON file."""
    instr = instrument_from_dict(read_json(path))
    logger.info(f"Loaded instrument from {path}: d={instr.dim}, {len(instr.outcomes)} outcomes")
    return instr


def dump_instrument(instr: Instrument, path: Optional[PathLike] = None) -> None:
    """Write an instrument JSON file."""
    write_json(instrument_to_dict(instr), path)


# FCS JSON

def fcs_to_dict(model: FcsModel) -> dict:
    kraus = model.gamma.kraus
    if kraus is None:
        kraus = kraus_from_choi(choi_matrix(model.gamma), model.gamma.dim_in, model.gamma.dim_out)
    data = {
        "hidden_dim": model.hidden_dim,
        "output_dim": model.output_dim,
        "gamma_kraus": [encode_matrix(k) for k in kraus],
        "observable": encode_matrix(model.observable.matrix),
    }
    if model.initial_state is not None:
        data["initial_state"] = encode_matrix(model.initial_state)
    return data


def fcs_from_dict(data: dict) -> FcsModel:
    """
    Build an FCS model from its JSON form.

    Raises:
        InstrumentFormatError: On missing keys or malformed matrices
        pydantic.ValidationError: If Gamma is not TP-CP or dimensions disagree
    """
    required = ("hidden_dim", "output_dim", "gamma_kraus", "observable")
    if not isinstance(data, dict) or any(key not in data for key in required):
        raise InstrumentFormatError(f"FCS JSON needs {', '.join(required)}")
    hidden, output = int(data["hidden_dim"]), int(data["output_dim"])
    kraus = [decode_matrix(k, "gamma_kraus") for k in data["gamma_kraus"]]
    initial = data.get("initial_state")
    return FcsModel(
        hidden_dim=hidden,
        output_dim=output,
        gamma=SuperOperator.from_kraus(kraus, dim_in=hidden, dim_out=output * hidden),
        observable=HermitianOperator(matrix=decode_matrix(data["observable"], "observable")),
        initial_state=None if initial is None else decode_matrix(initial, "initial_state"),
    )


def load_fcs(path: PathLike) -> FcsModel:
    """Read an FCS JSON file."""
    return fcs_from_dict(read_json(path))


def dump_fcs(model: FcsModel, path: Optional[PathLike] = None) -> None:
    """Write an FCS JSON file."""
    write_json(fcs_to_dict(model), path)


# Result CSVs

def write_trajectories(path: Optional[PathLike], trajectories: Iterable[Trajectory]) -> int:
    """Stream trajectories into (trial, step, outcome_label, value) rows; returns the count written."""
    count = 0

    def rows():
        nonlocal count
        for trajectory in trajectories:
            count += 1
            for step, (label, value) in enumerate(zip(trajectory.outcomes, trajectory.values)):
                yield trajectory.trial, step, label, float(value)

    write_csv(path, TRAJECTORY_COLUMNS, rows())
    return count


def write_sum_distribution(path: Optional[PathLike], distribution: SumDistribution) -> None:
    """(sum, probability) rows in increasing order of the sum."""
    write_csv(
        path,
        SUM_DISTRIBUTION_COLUMNS,
        ((float(s), float(p)) for s, p in distribution.probabilities().items()),
    )
