"""Small shared helpers: seeding, rounding, JSONL manifests, dB formatting."""
from __future__ import annotations

import json
import math
import os
from typing import Iterable, Iterator

import numpy as np


def derive_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Child generator for (master seed, entity id, ...).

    Uses SeedSequence spawning semantics so workers can be re-ordered or
    parallelised without changing any stream.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def round_half_up(x: float) -> int:
    """round() with ties away from the bankers' rule; 2.5 -> 3."""
    return int(math.floor(x + 0.5))


def write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def format_db(x: float) -> str:
    """Render a dB value for CSV cells; keeps the infinity sentinels readable."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)


def write_csv(path, rows: Iterable[dict]) -> int:
    """Write dict rows with a union-of-keys header (first-seen order)."""
    import csv

    rows = list(rows)
    fields: list = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return len(rows)


def np_json(obj):
    """json.dumps default= hook for numpy scalars."""
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)!r}")
