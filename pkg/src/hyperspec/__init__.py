"""Single-photon mid-infrared hyperspectral imaging: simulation, gating, rescaling, calibration and cube assembly."""

from .calibration import CalibrationModel, TransmissionSpectrum, fit_calibration
from .correlation import noise_stats, rescale_idler
from .gating import GateWindow, auto_gate, gated_counts
from .hypercube import HyperCube, ScanPlan, assemble_cube
from .sim import SourceConfig, simulate_stream, simulate_window, simulate_windows
from .timetag import decode_stream, encode_stream, split_by_trigger

__version__ = "0.1.0"

__all__ = [
    "CalibrationModel", "GateWindow", "HyperCube", "ScanPlan", "SourceConfig", "TransmissionSpectrum",
    "assemble_cube", "auto_gate", "decode_stream", "encode_stream", "fit_calibration", "gated_counts",
    "noise_stats", "rescale_idler", "simulate_stream", "simulate_window", "simulate_windows", "split_by_trigger",
]
