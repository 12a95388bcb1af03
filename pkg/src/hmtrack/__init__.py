"""Per-slice rigid head-motion tracking for slice-sequential fMRI."""
from .geometry import Calibration, RigidParams
from .imaging import Slice, SliceGeometry, Volume
from .phantom import PhantomConfig, generate
from .pipeline import estimate_motion
from .tracking.gpf import TrackConfig, hmt_track

__all__ = ["Calibration", "RigidParams", "Slice", "SliceGeometry", "Volume", "PhantomConfig", "generate",
           "estimate_motion", "TrackConfig", "hmt_track"]
__version__ = "0.1.0"
