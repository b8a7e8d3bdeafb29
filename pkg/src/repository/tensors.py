from pathlib import Path

import numpy as np
import orjson
from pydantic import ValidationError

from src.exceptions import InvalidInputError
from src.schemas import MAGIC, TensorFileHeader, TensorStack

MAGIC_LINE = MAGIC.encode() + b"\n"


def encode_tensor(x: TensorStack) -> bytes:
    """
    Serialize a stack: the magic line, a one-line JSON header, then the slices as little-endian doubles.

    Each slice is written row-major and slices follow each other in subject order.

    :param x: TensorStack: The stack
    :return: bytes: The file contents
    """
    header = TensorFileHeader(scale_id=x.scale_id, P=x.P, N=x.N, subjects=list(x.subjects))
    payload = np.ascontiguousarray(x.values.transpose(2, 0, 1), dtype="<f8").tobytes()
    return MAGIC_LINE + orjson.dumps(header.model_dump()) + b"\n" + payload


def decode_tensor(data: bytes) -> TensorStack:
    """
    Parse the bytes written by :func:`encode_tensor`.

    :param data: bytes: File contents
    :return: TensorStack: The stack
    :raises InvalidInputError: On a bad magic line, a malformed header or a payload of the wrong size
    """
    if not data.startswith(MAGIC_LINE):
        raise InvalidInputError("not a tensor file: bad magic line")
    end = data.find(b"\n", len(MAGIC_LINE))
    if end < 0:
        raise InvalidInputError("tensor file header is not terminated")
    try:
        header = TensorFileHeader.model_validate(orjson.loads(data[len(MAGIC_LINE):end]))
    except (orjson.JSONDecodeError, ValidationError) as e:
        raise InvalidInputError(f"malformed tensor file header: {e}") from e
    payload = data[end + 1:]
    if len(payload) != header.payload_size:
        raise InvalidInputError(f"payload holds {len(payload)} bytes, header declares {header.payload_size}")
    values = np.frombuffer(payload, dtype="<f8").reshape(header.N, header.P, header.P).transpose(1, 2, 0)
    try:
        return TensorStack(scale_id=header.scale_id, values=values, subjects=header.subjects)
    except ValidationError as e:
        raise InvalidInputError(f"tensor file violates the stack invariants: {e}") from e


def write_tensor(x: TensorStack, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(x))
    return path


def read_tensor(path: Path | str) -> TensorStack:
    return decode_tensor(Path(path).read_bytes())
