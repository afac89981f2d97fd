"""Cross-domain hyperspectral object detection with spectral-spatial
feature alignment: autodiff engine, data tooling, alignment backbone,
detection heads, trainer and AP/AR evaluation.
"""

__version__ = "0.1.0"
