"""File formats: Matrix Market payloads with JSON sidecars.

A block matrix is stored as a scalar-level Matrix Market coordinate file plus
a sidecar ``<path>.json`` holding the block-size vectors and any run metadata;
the matrix file stays readable by every MM tool while the sidecar carries what
the format cannot.  Patterns are Matrix Market ``pattern`` files and need no
sidecar (their dimension is the header).  Values are written with 17
significant digits so numeric round trips are exact for doubles.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .blocksparse import BlockSparseMatrix, PatternMatrix
from .errors import ValidationError


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing JSON file: {p}")
    return json.loads(p.read_text())


def content_hash(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def hash_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def write_block_matrix(path, A: BlockSparseMatrix, meta: dict | None = None,
                       comment: str = "") -> None:
    path = Path(path)
    scipy.io.mmwrite(str(path), A.csr.tocoo(), comment=comment, field="real",
                     precision=17)
    sidecar = {
        "format": "blockspai.block_matrix",
        "row_block_sizes": list(A.row_block_sizes),
        "col_block_sizes": list(A.col_block_sizes),
    }
    if meta:
        sidecar["meta"] = meta
    write_json(sidecar_path(path), sidecar)


def read_block_matrix(path) -> tuple[BlockSparseMatrix, dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing matrix file: {path}")
    side = read_json(sidecar_path(path))
    for key in ("row_block_sizes", "col_block_sizes"):
        if key not in side:
            raise ValidationError(f"sidecar {sidecar_path(path)} lacks '{key}'")
    matrix = scipy.io.mmread(str(path))
    A = BlockSparseMatrix.from_csr(
        sp.csr_matrix(matrix), side["row_block_sizes"], side["col_block_sizes"]
    )
    return A, side.get("meta", {})


def write_pattern(path, P: PatternMatrix, comment: str = "") -> None:
    coo = sp.coo_matrix(
        (np.ones(len(P), dtype=np.int8), (P.rows, P.cols)),
        shape=(P.dimension, P.dimension),
    )
    scipy.io.mmwrite(str(path), coo, comment=comment, field="pattern")


def read_pattern(path) -> PatternMatrix:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing pattern file: {path}")
    matrix = scipy.io.mmread(str(path))
    return PatternMatrix.from_sparse(sp.csr_matrix(matrix))


def matrix_bytes(A: BlockSparseMatrix) -> bytes:
    """In-memory Matrix Market serialization, used for content hashing."""
    buf = io.BytesIO()
    scipy.io.mmwrite(buf, A.csr.tocoo(), field="real", precision=17)
    return buf.getvalue()
