"""Versioned flat-file helpers shared by every artifact format.

Every artifact this package writes starts with a one-line header of the
form ``#qreform-<kind> v<version>[ key=value ...]`` so that readers can
reject files of the wrong kind or version before parsing a single row.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Iterable, Iterator

HEADER_PREFIX = "#qreform-"


class FileFormatError(ValueError):
    """Raised when an artifact file fails header or row validation."""


def format_header(kind: str, version: int = 1, **attrs: object) -> str:
    parts = [f"{HEADER_PREFIX}{kind} v{version}"]
    for key in sorted(attrs):
        parts.append(f"{key}={attrs[key]}")
    return " ".join(parts)


def parse_header(line: str, kind: str, path: os.PathLike | str) -> dict[str, str]:
    """Validate a header line against the expected kind, return its attrs."""
    line = line.rstrip("\n")
    expected = f"{HEADER_PREFIX}{kind} v"
    if not line.startswith(expected):
        raise FileFormatError(
            f"{path}: expected a '{HEADER_PREFIX}{kind}' header, got {line[:60]!r}"
        )
    fields = line[len(expected):].split(" ")
    attrs: dict[str, str] = {"version": fields[0]}
    for field in fields[1:]:
        if field:
            key, _, value = field.partition("=")
            attrs[key] = value
    if attrs["version"] != "1":
        raise FileFormatError(f"{path}: unsupported {kind} version {attrs['version']!r}")
    return attrs


def write_tsv(
    path: os.PathLike | str,
    kind: str,
    rows: Iterable[Iterable[object]],
    columns: Iterable[str] | None = None,
    **attrs: object,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_header(kind, **attrs) + "\n")
        if columns is not None:
            fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(cell) for cell in row) + "\n")


def read_tsv(
    path: os.PathLike | str,
    kind: str,
    has_columns: bool = False,
) -> tuple[dict[str, str], list[list[str]]]:
    """Read a versioned TSV, returning (header attrs, data rows)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise FileFormatError(f"{path}: empty file, expected a {kind} header")
        attrs = parse_header(header, kind, path)
        rows = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            rows.append(line.split("\t"))
    if has_columns and rows:
        rows = rows[1:]
    return attrs, rows


def sha256_file(path: os.PathLike | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def iter_log_lines(path: os.PathLike | str) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, stripped line), skipping header/blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            yield lineno, line
