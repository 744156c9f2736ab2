"""Versioned JSON documents for everything the pipeline writes to disk."""

from __future__ import annotations

import json
import os

from scadatensor.errors import ConfigError, DataError

FORMAT_VERSION = 1


def write_document(path, kind: str, payload: dict) -> None:
    doc = {"format": f"scadatensor.{kind}", "version": FORMAT_VERSION, **payload}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_document(path, kind: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"artifact not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != f"scadatensor.{kind}":
        raise ConfigError(f"{path}: expected a scadatensor.{kind} document, "
                          f"found {doc.get('format') if isinstance(doc, dict) else type(doc).__name__!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported {kind} version {doc.get('version')!r} "
                          f"(this build reads version {FORMAT_VERSION})")
    return doc
