"""Multi-scale convolution + multi-head multi-scale attention transformer
for traffic-flow forecasting, on a small numpy autodiff core."""

__version__ = "0.1.0"
