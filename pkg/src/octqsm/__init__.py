"""Octave-convolutional QSM toolkit.

Dipole forward physics, synthetic phantoms, a from-scratch differentiable
3D tensor engine, an octave-convolutional U-net, training, inference, and
evaluation metrics, all runnable at desk scale on a single CPU core.
"""

__version__ = "0.1.0"

from .volume import PadRecord, Unit, Volume, VolumeFormatError, crop_with_record, pad_to_multiple, read_volume, write_volume

__all__ = [
    "PadRecord",
    "Unit",
    "Volume",
    "VolumeFormatError",
    "crop_with_record",
    "pad_to_multiple",
    "read_volume",
    "write_volume",
    "__version__",
]
