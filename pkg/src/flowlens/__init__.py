"""flowlens: density gradients of a normalizing flow as a camera tuning signal.

Modules:
    autodiff     tape-based reverse-mode differentiation over numpy arrays
    flow         RealNVP-style affine coupling flow
    features     small CNN feature extractor
    oodscore     log-density / gradient scores and FPR calibration
    camsim       synthetic scenes and a parametric camera pipeline
    detector     sliding-window detector and IoU matching
    optimizer    elitist evolution over camera parameters
    experiments  OOD, correlation and adaptation experiment drivers
    cli          ``flowlens`` command-line entry point
"""

__version__ = "0.1.0"
