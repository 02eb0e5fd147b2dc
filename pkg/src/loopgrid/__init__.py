"""Loop-detector data pipeline.

Turns raw single-loop samples (flow, occupancy) into a clean space-time
grid, per-detector speed estimates and corridor travel-time predictions,
with a synthetic ground-truth generator for validating every stage.
"""

from .model import (
    CorridorLayout,
    DataGrid,
    DetectorRef,
    HealthFlag,
    LoopSample,
    LoopgridError,
    MeanLengthProfile,
    Provenance,
    TravelTimeSeries,
    VelocityField,
    validate_sample,
)

__all__ = [
    "CorridorLayout",
    "DataGrid",
    "DetectorRef",
    "HealthFlag",
    "LoopSample",
    "LoopgridError",
    "MeanLengthProfile",
    "Provenance",
    "TravelTimeSeries",
    "VelocityField",
    "validate_sample",
]

__version__ = "0.1.0"
