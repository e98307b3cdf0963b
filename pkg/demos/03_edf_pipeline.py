#!/usr/bin/env python3
"""EDF ingestion end to end: synthesize a recording, label phases, segment.

Builds a one-hour 23-channel EDF with a 40 s seizure, parses it back
(selecting the first 22 electrodes), extracts ictal / pre-ictal /
inter-ictal phases, and cuts 5 s training windows with overlapping strides
for the minority classes.
"""

import tempfile
from pathlib import Path

from spiking_conformer.data import (
    SeizureAnnotation,
    balance,
    extract_phases,
    kfold_split,
    parse_edf,
    segment_interval,
    standardize_recording,
)
from spiking_conformer.synthetic import make_synthetic_edf

workdir = Path(tempfile.mkdtemp(prefix="spkf_demo_"))
edf_path = workdir / "case01.edf"
seizures = make_synthetic_edf(edf_path, duration_s=3600.0,
                              seizures=[(1000.0, 1040.0)], n_channels=23)
print(f"wrote {edf_path} ({edf_path.stat().st_size / 1e6:.1f} MB)")

rec = standardize_recording(parse_edf(edf_path))
print(f"parsed: {len(rec.channels)} channels (of 23), fs={rec.fs:.0f} Hz, "
      f"{rec.duration_s:.0f} s")

annotations = [SeizureAnnotation("case01", on, off) for on, off in seizures]
phases = extract_phases(rec, annotations)
for iv in phases:
    print(f"  {iv.phase:<12} [{iv.start_s:7.1f}, {iv.end_s:7.1f})  "
          f"{iv.length_s:7.1f} s")

pos, neg = [], []
for iv in phases:
    stride = 5.0 if iv.phase == "inter_ictal" else 1.0
    segs = segment_interval(iv, rec, stride_s=stride)
    print(f"  {iv.phase:<12} stride {stride}s -> {len(segs)} segments")
    (neg if iv.phase == "inter_ictal" else pos).extend(segs)

dataset = balance(pos, neg, seed=0)
n_pos = int((dataset.y == 0).sum())
n_neg = int((dataset.y == 1).sum())
print(f"balanced dataset: {n_pos} positive / {n_neg} negative")

folds = kfold_split(len(dataset), k=5, seed=0)
print(f"5-fold split test sizes: {[len(test) for _, test in folds]}")
