"""Two-stream spatiotemporal steering regression on dense optical flow.

NumPy-only reimplementation at desk scale: a reverse-mode autodiff core, a
Farneback optical-flow estimator with color-wheel encoding, a synthetic
driving-scene generator with a spatiotemporal oracle, the two-stage training
procedure with a multitask head, and RMSE/whiteness evaluation.
"""

__version__ = "0.1.0"
