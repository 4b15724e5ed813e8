"""Transfer-ASR matrices, loss-vs-transform sweeps, and their CSV/JSON emission."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .attacks import (IDENTITY, TRANSFORM_NAMES, TransformGrid, canonical_transforms, run_attack,
                      transform_matrices)
from .affine import warp_plan
from .errors import SpecError
from .zoo import predict

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["source", "attack", "target", "n_images", "n_fooled", "asr_percent",
                  "white_box", "seed"]
SWEEP_COLUMNS = ["attack", "transform", "magnitude", "mean_loss"]


@dataclass(frozen=True)
class ASRRow:
    source: str
    attack: str
    target: str
    n_images: int
    n_fooled: int
    seed: int
    spec_digest: str = ""

    @property
    def asr_percent(self):
        return 100.0 * self.n_fooled / self.n_images if self.n_images else 0.0

    @property
    def white_box(self):
        # the "*" entries of a transfer table
        return self.source == self.target

    def sort_key(self):
        return (self.source, self.attack, self.target)


@dataclass
class ASRReport:
    rows: list = field(default_factory=list)
    # (source, attack, target) -> per-image fooled flags; not serialized
    fooled: dict = field(default_factory=dict, compare=False, repr=False)

    def sorted_rows(self):
        return sorted(self.rows, key=ASRRow.sort_key)

    def get(self, source, attack, target):
        for row in self.rows:
            if (row.source, row.attack, row.target) == (source, attack, target):
                return row
        raise KeyError((source, attack, target))

    def __eq__(self, other):
        return isinstance(other, ASRReport) and self.sorted_rows() == other.sorted_rows()


@dataclass
class LossSweep:
    attack: str
    transform: str
    magnitudes: list
    mean_losses: list

    def at(self, magnitude):
        return self.mean_losses[self.magnitudes.index(magnitude)]


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def craft(spec, model, eval_set, batch_size=500):
    """Adversarial versions of every eval-set image, keyed to dataset indices for RNG streams."""
    images, labels, indices = eval_set.images, eval_set.labels, eval_set.indices
    out = np.empty_like(images)
    for sl in _batches(len(images), batch_size):
        out[sl] = run_attack(spec, model, images[sl], labels[sl], indices=indices[sl]).adversarial
    return out


def run_transfer_matrix(zoo, eval_sets, specs, batch_size=500):
    """One row per (source, attack, target); sources are the keys of ``eval_sets``."""
    report = ASRReport()
    for source_name, eval_set in eval_sets.items():
        source = zoo[source_name]
        labels = eval_set.labels
        for spec in specs:
            adv = craft(spec, source, eval_set, batch_size)
            for target in zoo:
                fooled = predict(target, adv)[0] != labels
                report.rows.append(ASRRow(source_name, spec.label, target.name, len(labels),
                                          int(fooled.sum()), spec.seed, spec.digest()))
                report.fooled[(source_name, spec.label, target.name)] = fooled
            log.info("%s %s done", source_name, spec.label)
    return report


def sweep_magnitudes(kind, spec, height, points=7):
    """Evenly spaced magnitudes over the attack's configured range, identity included."""
    grid = TransformGrid.evenly_spaced(points, spec.theta_range, spec.scale_range,
                                       spec.shift_bounds(height))
    return list(grid.candidates(canonical_transforms([kind])[0]))


def run_loss_sweep(model, eval_set, base_spec, kind, magnitudes, adversarial=None,
                   batch_size=500):
    """Mean loss of base-attack adversarials after each transform magnitude."""
    kind = canonical_transforms([kind])[0]
    magnitudes = sorted(float(m) for m in magnitudes)
    if IDENTITY[kind] not in magnitudes:
        raise SpecError(f"sweep magnitudes must include the identity {IDENTITY[kind]}")
    if adversarial is None:
        adversarial = craft(base_spec, model, eval_set, batch_size)
    labels = eval_set.labels
    h, w = adversarial.shape[2:]
    means = []
    for m in magnitudes:
        plan = warp_plan(transform_matrices(kind, [m], h, w), h, w)
        total = np.concatenate([model.losses(plan.apply(adversarial[sl]), labels[sl])
                                for sl in _batches(len(labels), batch_size)])
        means.append(float(total.mean()) if len(total) else 0.0)
    return LossSweep(base_spec.label, TRANSFORM_NAMES[kind], magnitudes, means)


# ----------------------------------------------------------------------------
# emission
# ----------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _report_records(report):
    for row in report.sorted_rows():
        yield {"source": row.source, "attack": row.attack, "target": row.target,
               "n_images": row.n_images, "n_fooled": row.n_fooled,
               "asr_percent": row.asr_percent, "white_box": row.white_box, "seed": row.seed,
               "spec_digest": row.spec_digest}


def _sweep_records(sweeps):
    rows = [(s.attack, s.transform, m, v) for s in sweeps for m, v in zip(s.magnitudes, s.mean_losses)]
    for attack, transform, m, v in sorted(rows, key=lambda r: (r[1], r[2], r[0])):
        yield {"attack": attack, "transform": transform, "magnitude": float(m), "mean_loss": float(v)}


def _json_value(value):
    if isinstance(value, float) and not isinstance(value, bool):
        return f"{value:.4f}"
    return json.dumps(value)


def _to_json(records):
    lines = ["{" + ", ".join(f"{json.dumps(k)}: {_json_value(v)}" for k, v in r.items()) + "}"
             for r in records]
    if not lines:
        return "[]\n"
    return "[\n  " + ",\n  ".join(lines) + "\n]\n"


def _to_csv(records, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        writer.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def render(obj, fmt="csv"):
    if isinstance(obj, ASRReport):
        records, columns = list(_report_records(obj)), REPORT_COLUMNS
    else:
        sweeps = [obj] if isinstance(obj, LossSweep) else list(obj)
        records, columns = list(_sweep_records(sweeps)), SWEEP_COLUMNS
    if fmt == "csv":
        return _to_csv(records, columns)
    if fmt == "json":
        return _to_json(records)
    raise SpecError(f"unknown output format {fmt!r}")


def write_atomic(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(obj, path, fmt=None):
    """Write atomically; ``fmt`` defaults to json for ``*.json`` paths, csv otherwise."""
    if fmt is None:
        fmt = "json" if os.fspath(path).endswith(".json") else "csv"
    write_atomic(path, render(obj, fmt))


def load_report(path):
    """Read a report written by ``emit`` (CSV or JSON, chosen by extension)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if os.fspath(path).endswith(".json"):
        records = json.loads(text)
    else:
        records = list(csv.DictReader(io.StringIO(text)))
    return ASRReport([ASRRow(r["source"], r["attack"], r["target"], int(r["n_images"]),
                             int(r["n_fooled"]), int(r["seed"]), r.get("spec_digest", ""))
                      for r in records])
