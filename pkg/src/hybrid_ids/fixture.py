"""Synthetic UNSW-NB15-shaped data for offline runs and tests.

``fixture_1000.csv`` in the package data directory is the output of
``write_fixture(path)`` with the defaults below; the test suite checks the
two stay identical.
"""

from __future__ import annotations

import csv

import numpy as np

from .pipeline import CLASS_NAMES, Schema

FIXTURE_COUNTS = {
    "Normal": 200,
    "Generic": 150,
    "Exploits": 150,
    "Fuzzers": 120,
    "DoS": 100,
    "Reconnaissance": 90,
    "Analysis": 60,
    "Backdoor": 50,
    "Shellcode": 50,
    "Worms": 30,
}
FIXTURE_SEED = 20240601

_LEVELS = {
    "proto": ["tcp", "udp", "arp", "ospf", "unas"],
    "service": ["-", "http", "dns", "ftp", "smtp"],
    "state": ["FIN", "INT", "CON", "REQ"],
}


def fixture_rows(counts: dict[str, int] | None = None, seed: int = FIXTURE_SEED, schema: Schema | None = None):
    """Header and rows of a synthetic partition with class-dependent features."""
    counts = counts or FIXTURE_COUNTS
    schema = schema or Schema.load()
    rng = np.random.default_rng(seed)
    n_num = len(schema.numeric)
    n_cls = len(CLASS_NAMES)
    centers = rng.uniform(0.0, 3.0, size=(n_cls, n_num))
    scales = rng.choice([1.0, 10.0, 100.0, 1000.0], size=n_num)
    integral = rng.random(n_num) < 0.5
    level_probs = {col: rng.dirichlet(np.full(len(levels), 0.8), size=n_cls) for col, levels in _LEVELS.items()}

    classes = np.concatenate([np.full(counts.get(name, 0), k) for k, name in enumerate(CLASS_NAMES)])
    classes = classes[rng.permutation(classes.size)]

    header = ["id", *schema.numeric[:1], *schema.categorical, *schema.numeric[1:], schema.category_column, schema.label_column]
    rows = []
    for i, k in enumerate(classes):
        values = np.maximum(0.0, rng.normal(centers[k], 1.0)) * scales
        num = [str(int(round(v))) if integral[j] else f"{v:.6g}" for j, v in enumerate(values)]
        cats = [_LEVELS[col][rng.choice(len(_LEVELS[col]), p=level_probs[col][k])] for col in schema.categorical]
        rows.append([str(i + 1), num[0], *cats, *num[1:], CLASS_NAMES[k], "0" if k == 0 else "1"])
    return header, rows


def write_fixture(path, counts: dict[str, int] | None = None, seed: int = FIXTURE_SEED) -> None:
    header, rows = fixture_rows(counts, seed)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
