"""CSV and JSON export of ensembles, series and reports."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .engine import EnsembleRun


def _clean(obj):
    """Make numpy scalars/arrays and non-finite floats JSON-safe."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def trajectory_csv(run: EnsembleRun, dest=None) -> str:
    """One row per particle per snapshot: ``replicate,t,id,x0..x{d-1},weight``."""
    d = run.model.dim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["replicate", "t", "id"] + [f"x{i}" for i in range(d)] + ["weight"])
    for k, snap in enumerate(run.snapshots):
        weights = run.weights(k)
        order = np.lexsort((snap.ids, snap.replicate))
        for i in order:
            writer.writerow([int(snap.replicate[i]), repr(float(snap.time)), int(snap.ids[i])]
                            + [repr(float(v)) for v in snap.positions[i]]
                            + [repr(float(weights[i]))])
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def trajectory_summary(run: EnsembleRun) -> dict:
    """Per-snapshot counts, ``W_t`` and support radius for every replicate."""
    return {
        "model": run.model.kind,
        "n_replicates": run.n_replicates,
        "capped": run.capped,
        "snapshots": [
            {"t": snap.time, "count": run.counts(k), "w_phi": run.w_phi(k),
             "support_radius": run.support_radius(k)}
            for k, snap in enumerate(run.snapshots)
        ],
    }
