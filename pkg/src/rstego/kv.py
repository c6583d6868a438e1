"""Plain-text key-value configuration documents.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines ignored. Values are kept as strings here; the config classes own the
typed parsing. Environment variables named ``RSTEGO_<KEY>`` (upper-cased,
dots replaced by double underscores) override file values.
"""

from __future__ import annotations

import os

ENV_PREFIX = "RSTEGO_"


def parse_kv(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def dump_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in pairs.items())


def env_key(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "__")


def apply_env_overrides(pairs: dict[str, str], keys) -> dict[str, str]:
    """Overlay RSTEGO_* environment variables onto parsed pairs."""
    merged = dict(pairs)
    for key in keys:
        value = os.environ.get(env_key(key))
        if value is not None:
            merged[key] = value
    return merged
