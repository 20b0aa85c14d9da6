"""Secret references: ``hex:..``, ``env:NAME``, ``file:path``, ``text:..``; anything else is literal text."""

from __future__ import annotations

import os
from pathlib import Path


def resolve_secret(ref: str | None) -> bytes | None:
    if not ref:
        return None
    scheme, sep, rest = ref.partition(":")
    if not sep:
        return ref.encode("utf-8")
    if scheme == "hex":
        return bytes.fromhex(rest)
    if scheme == "env":
        value = os.environ.get(rest)
        if value is None:
            raise ValueError(f"environment variable {rest} is not set")
        return value.encode("utf-8")
    if scheme == "file":
        return Path(rest).read_bytes().strip()
    if scheme == "text":
        return rest.encode("utf-8")
    return ref.encode("utf-8")
