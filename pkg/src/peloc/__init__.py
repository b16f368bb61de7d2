"""Temporal localization of protocol phases in therapy session audio.

Submodules: core (sessions, splits, manifests), ingest (audio/transcript IO
and mel features), windowing (offset math and example assembly), supervision
(annotation proposals and rater verification), synth (synthetic corpus),
net (the adapted regressor), training (optimizer and epoch loop), evaluate
(MAE metrics, the experiment grid, reports), cli and server (gateway).
"""

__version__ = "0.1.0"
