from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import List
from typing import MutableMapping
from typing import Union

import numpy as np


def write_file(path: Union[str, Path], content: str, end: str = "\n") -> None:
    """Writes `content` to `path`. Ensures content ends with a given character."""
    path = Path(path)
    # Ensure parent dirs exist
    make_parent_dirs(path)

    try:
        with open(path, "w") as f:
            if end and not content.endswith(end):
                content += end
            f.write(content)
    except OSError as e:
        logging.error("Failed to write to file '%s': %s", path, e)
        raise


def make_parent_dirs(path: Union[str, Path]) -> Path:
    """Attempts to create all parent directories given a path.

    NOTE: Intended for usage with Pydantic models, and as such it will raise
    a ValueError instead of OSError if the directory cannot be created."""
    path = Path(path)

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"Failed to create parent directories for {path}: {e}") from e
    return path


def write_jsonl(path: Union[str, Path], lines: Iterable[str]) -> None:
    """Writes pre-serialized JSON documents, one per line."""
    write_file(path, "\n".join(lines))


def read_jsonl(path: Union[str, Path]) -> Iterator[Dict[str, Any]]:
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"Invalid JSON on line {lineno} in {path}: {e}") from e


def parse_grid(text: str) -> np.ndarray:
    """Parses 'start:stop:step' into an inclusive grid of points."""
    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError:
        raise ValueError(
            f"Invalid grid {text!r}, expected 'start:stop:step'"
        ) from None
    if step <= 0 or stop < start:
        raise ValueError(f"Invalid grid {text!r}, need step > 0 and stop >= start")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


def spawn_rngs(seed: Union[int, np.random.SeedSequence], n: int) -> List[np.random.Generator]:
    """Independent generators derived from one seed."""
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in seq.spawn(n)]


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def expand_env_vars(value: Any) -> Any:
    """Expands ${VAR} references in all strings of a nested structure."""
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, dict):
        return {k: expand_env_vars(v) for k, v in value.items()}
    if isinstance(value, list):
        return [expand_env_vars(v) for v in value]
    return value


def deep_merge(
    base: MutableMapping[str, Any], override: MutableMapping[str, Any]
) -> Dict[str, Any]:
    """Returns a copy of `base` with `override` merged in, recursing into tables."""
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, MutableMapping) and isinstance(
            merged.get(key), MutableMapping
        ):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged
