"""Hybrid urban localisation: weighted GPS, UWB multilateration against
parked-car anchors, RFID RSSI ranging and a mode-switching fusion layer."""

from .errors import (DegenerateFitError, DegenerateGeometryError, DomainError, HybridNavError,
                     InconsistentMeasurementError, InsufficientDataError, InsufficientGeometryError,
                     NoConvergenceError, OutOfRangeError, ScenarioValidationError)
from .geo import FrameOrigin, GeoPosition, LocalPosition, distance, enu_to_geodetic, geodetic_to_enu
from .gps import GpsNoiseModel, GpsSample, hdop_weights, simulate_gps_track, weighted_position
from .nav import (AgentState, ControlCommand, CoverageReport, CriticalZone, NavMode, PositionEstimate,
                  fuse, line_hold_step, orientation_step, select_mode, waypoint_step)
from .rfid import (AngleModel, PathLossModel, RssiAggregate, RssiReading, aggregate,
                   delta_rssi_to_angle, dual_antenna_position, fit_angle_model, fit_path_loss,
                   rssi_to_distance, simulate_backscatter)
from .sim import (RunSummary, Scenario, TraceRecord, bundled_scenario, car_density_schedule,
                  load_scenario, run_scenario, summarize)
from .uwb import Anchor, AnchorKind, UwbRange, gdop, multilaterate, refine_anchor_position, update_car

__version__ = "0.1.0"
