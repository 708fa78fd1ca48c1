"""Feature matrices from simulated cycles, for model training and evaluation."""

from __future__ import annotations

import numpy as np

from ..simulator.dataset import LabeledCycle
from ..simulator.generator import CycleSignals
from .clean import CleanParams, clean
from .features import FeatureVector, features_from_segments


def featurize_signals(cycle_id: str, signals: CycleSignals,
                      params: CleanParams = CleanParams()) -> FeatureVector:
    """Clean the three streams and extract the catalog vector, in memory."""
    cleaned, reports = {}, {}
    for seg in signals.segments():
        cleaned[seg.channel], reports[seg.channel] = clean(seg, params, cycle_id)
    return features_from_segments(cycle_id, cleaned["power"], cleaned["current"],
                                  cleaned["vibration"], signals.start_us, signals.end_us,
                                  reports)


def feature_matrix(cycles: list[LabeledCycle]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(X, y, cycle_ids) for a planned dataset; signals are generated one at a time."""
    rows, labels, ids = [], [], []
    for c in cycles:
        fv = featurize_signals(c.cycle_id, c.generate())
        rows.append(fv.values)
        labels.append(c.label)
        ids.append(c.cycle_id)
    return np.vstack(rows), np.array(labels), ids
