"""Convolution kernel backend selection.

The compiled extension is preferred when importable; set LAYOUTSEG_NO_EXT=1
to force the numpy fallback. Both backends expose the same four functions.
"""

import os

from . import conv_numpy

if os.environ.get("LAYOUTSEG_NO_EXT"):
    _impl = conv_numpy
else:
    try:
        from . import _convext as _impl
    except ImportError:
        _impl = conv_numpy

BACKEND = "compiled" if _impl is not conv_numpy else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
