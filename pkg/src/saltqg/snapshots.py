"""Binary field snapshot container.

Layout: a 32-byte header followed by the payload.

* bytes 0-3    magic ``QGF1``
* bytes 4-7    nx   (little-endian int32)
* bytes 8-11   ny
* bytes 12-15  record count (number of (ny, nx) fields that follow)
* bytes 16-19  value kind tag
* bytes 20-31  reserved, zero

Payload: ``records * ny * nx`` float64 little-endian values, row-major,
one record after another.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"QGF1"
HEADER_BYTES = 32

KIND_GENERIC = 0
KIND_PV = 1
KIND_PSI = 2
KIND_STATE = 3  # q1, q2, psi1, psi2
KIND_XI = 4     # noise basis: per mode and layer, xu then xv (south rows)


class SnapshotFormatError(ValueError):
    """Raised for malformed snapshot files."""


def write_snapshot(path, fields: np.ndarray, kind: int = KIND_GENERIC) -> None:
    """Write ``fields`` of shape (records, ny, nx) to ``path``."""
    fields = np.asarray(fields, dtype="<f8")
    if fields.ndim != 3:
        raise ValueError(f"expected (records, ny, nx) fields, got shape {fields.shape}")
    records, ny, nx = fields.shape
    header = MAGIC + np.array([nx, ny, records, kind], dtype="<i4").tobytes()
    header += b"\x00" * (HEADER_BYTES - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(fields).tobytes())


def read_snapshot(path) -> tuple[np.ndarray, int]:
    """Read a snapshot, returning (fields (records, ny, nx), kind)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_BYTES:
        raise SnapshotFormatError(
            f"truncated header: need {HEADER_BYTES} bytes, file ends at byte {len(raw)}"
        )
    if raw[:4] != MAGIC:
        raise SnapshotFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    nx, ny, records, kind = np.frombuffer(raw[4:20], dtype="<i4")
    if nx < 1 or ny < 1 or records < 1:
        raise SnapshotFormatError(
            f"invalid header dimensions nx={nx} ny={ny} records={records}"
        )
    expected = HEADER_BYTES + int(records) * int(ny) * int(nx) * 8
    if len(raw) != expected:
        raise SnapshotFormatError(
            f"truncated payload: expected {expected} bytes, file ends at byte {len(raw)}"
        )
    fields = np.frombuffer(raw[HEADER_BYTES:], dtype="<f8").reshape(records, ny, nx)
    return fields.astype(np.float64), int(kind)
