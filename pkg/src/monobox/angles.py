"""Angle wrapping helpers shared by the geometry, codec, and I/O modules."""

import math

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into the half-open interval (-pi, pi].

    Idempotent: wrap_angle(wrap_angle(x)) == wrap_angle(x).
    """
    w = math.remainder(theta, TWO_PI)
    # math.remainder lands in [-pi, pi]; move the closed lower endpoint.
    if w <= -math.pi:
        w += TWO_PI
    return w
