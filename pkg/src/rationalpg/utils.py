"""
Utility functions for rationalpg.

Functions:
    stream_rng: Deterministic generator for one (seed, step, label) stream.
    total_variation: Total-variation distance between two distributions.
    write_csv: Writes a CSV file headed by its schema version.
    read_csv: Reads a CSV file written by `write_csv`.
    parse_grid_value: Parses one value of a sweep grid.
    parse_grid: Parses `name=v1,v2` sweep arguments.
    format_probs: Renders policy probabilities for the metrics stream.

Constants:
    CSV_SCHEMA_VERSION: Version written in every CSV header.

Example:
    rng = stream_rng(0, step=3, label="evaluation:victimxadversary")
    grid = parse_grid(["lookahead=1,2,4,8"])  # {"lookahead": [1, 2, 4, 8]}
"""

import csv
import os
import zlib
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError

CSV_SCHEMA_VERSION: int = 1


def stream_rng(seed: int, step: int = 0, label: str = "") -> np.random.Generator:
    """Counter-based generator for one random stream.

    Streams are keyed by (step, crc32(label)) under the root seed, so drawing
    batches in a different order or in parallel leaves every stream unchanged.
    """
    key = (int(step), zlib.crc32(label.encode()))
    sequence = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Writes `rows` under `header`, preceded by a `# schema_version=N` line."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as file:
        file.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        writer = csv.writer(file)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    with open(path, "r", newline="", encoding="utf-8") as file:
        lines = [line for line in file if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, list(reader)


def parse_grid_value(text: str) -> Any:
    """Parses a grid value as int, then float, then bool, else keeps the string."""
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_grid(arguments: Sequence[str]) -> Dict[str, List[Any]]:
    """Parses sweep arguments of the form `name=v1,v2,...`.

    Raises:
        ConfigError: On a malformed argument or an empty value list.
    """
    grid: Dict[str, List[Any]] = {}
    for argument in arguments:
        name, sep, values = argument.partition("=")
        name = name.strip()
        if not sep or not name:
            raise ConfigError(
                f"grid argument '{argument}' is not of the form name=v1,v2", field=name or None
            )
        parsed = [parse_grid_value(v) for v in values.split(",") if v.strip()]
        if not parsed:
            raise ConfigError(f"grid argument '{argument}' lists no values", field=name)
        grid[name] = parsed
    return grid


def format_probs(per_seat: Sequence[Sequence[float]]) -> str:
    """Seats separated by `|`, probabilities by `;`."""
    return "|".join(";".join(f"{p:.6f}" for p in probs) for probs in per_seat)
