"""Sidecar manifest: the JSON record written next to every converted file.

Captures the job parameters and per-class sample counts so downstream
loaders can check they got exactly what the converter produced. Keys are
sorted and floats round-tripped through repr, so a fixed source corpus and
job yield byte-identical manifests.
"""

from __future__ import annotations

import json
from pathlib import Path

from spikedelay.datasets import SpikeDataset


def manifest_path(output_path) -> Path:
    return Path(str(output_path) + ".manifest.json")


def build_manifest(ds: SpikeDataset, kind: str, params: dict,
                   class_names: list[str] | None = None) -> dict:
    counts = [0] * ds.num_classes
    for s in ds.samples:
        counts[s.label] += 1
    doc = {
        "format": "spkds-manifest/1",
        "kind": kind,
        "num_samples": len(ds.samples),
        "num_channels": ds.num_channels,
        "num_classes": ds.num_classes,
        "delta_t_us": ds.delta_t_us,
        "per_class_counts": counts,
        "params": params,
    }
    if class_names is not None:
        doc["class_names"] = class_names
    return doc


def write_manifest(output_path, doc: dict) -> Path:
    path = manifest_path(output_path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def read_manifest(output_path) -> dict:
    return json.loads(manifest_path(output_path).read_text())
