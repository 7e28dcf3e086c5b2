"""Recurrent segmentation of image sequences trained from sparse annotations.

A U-Net extracts per-frame features, bidirectional convolutional LSTMs carry
them across time, and annotations at two frames are spread to the rest of the
sequence by B-spline registration. Everything runs on numpy.
"""

from . import clstm, io, labelprop, metrics, phantom, registration, tensor, unet
from .errors import (ConfigError, DegenerateError, GraphError, SeqSegError, ShapeError,
                     WindowError)

__version__ = "0.1.0"
