"""Vision-guided capture and time-optimal detumbling of a tumbling satellite.

Modules: ``so3`` (quaternions), ``target`` (rigid-body dynamics), ``vision``
(synthetic scans and registration), ``estimator`` (fault-tolerant EKF),
``precapture`` and ``postcapture`` (minimum-time planners), ``supervisor``
(closed-loop mission), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
