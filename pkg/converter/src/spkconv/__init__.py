"""Offline dataset ingestion for the spikedelay trainer.

Turns event archives (HDF5 with per-sample spike times and unit ids) and
speech-command audio folders into SPKDS files, so the trainer never parses
scientific archive formats or audio itself.
"""

__version__ = "0.1.0"
