"""Monotone piecewise-linear functions on [0, 1] with fixed end points.

A function with M segments is pinned at (0, 0) and (1, 1) and shaped by its
M-1 interior control points. Interior points are parameterized by ratio
pairs in the open interval (0, 1): each ratio places the next knot a fraction
of the way between the previous knot and 1,

    x_k = x_{k-1} + r_x_k * (1 - x_{k-1}),

and likewise for y. Any ratio vector in (0, 1)^(2(M-1)) therefore yields a
valid monotone function, which is what makes the family searchable without
explicit constraints.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstraintViolationError, DomainError, InvalidInputError


@dataclass(frozen=True, eq=False)
class RatioParams:
    """Ratio pairs (r_x_k, r_y_k), one per interior control point.

    ratios is an (M-1, 2) array; every component must lie strictly inside
    (0, 1).
    """

    ratios: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2:
            raise InvalidInputError(f"ratios must have shape (M-1, 2), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise InvalidInputError("ratios must be finite")
        if not np.all((r > 0.0) & (r < 1.0)):
            raise ConstraintViolationError("ratios must lie strictly inside (0, 1)")
        object.__setattr__(self, "ratios", r)

    @property
    def segments(self) -> int:
        return self.ratios.shape[0] + 1

    def flat(self) -> np.ndarray:
        """Scalars in order (r_x_1, r_y_1, r_x_2, r_y_2, ...)."""
        return self.ratios.reshape(-1).copy()

    @classmethod
    def from_flat(cls, values) -> "RatioParams":
        v = np.asarray(values, dtype=float)
        if v.ndim != 1 or v.size % 2 != 0:
            raise InvalidInputError(f"flat ratio vector must have even length, got shape {v.shape}")
        return cls(v.reshape(-1, 2))


@dataclass(frozen=True, eq=False)
class PiecewiseFn:
    """Piecewise-linear function given by M+1 control points (x_k, y_k).

    Segment membership uses half-open intervals [x_k, x_{k+1}); x = 1 is
    assigned to the last segment so the domain is closed. The slope at a
    knot is the slope of the segment the knot belongs to under that rule.
    """

    control_points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise InvalidInputError(f"control points must have shape (M+1, 2) with M >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("control points must be finite")
        if not (pts[0, 0] == 0.0 and pts[0, 1] == 0.0 and pts[-1, 0] == 1.0 and pts[-1, 1] == 1.0):
            raise InvalidInputError("control points must start at (0, 0) and end at (1, 1)")
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            raise InvalidInputError("control points must lie in [0, 1]^2")
        xs = pts[:, 0]
        ys = pts[:, 1]
        if not np.all(np.diff(xs) > 0.0):
            raise InvalidInputError("x coordinates must be strictly increasing")
        if np.any(np.diff(ys) < 0.0):
            raise InvalidInputError("y coordinates must be non-decreasing")
        object.__setattr__(self, "control_points", pts)
        object.__setattr__(self, "_slopes", np.diff(ys) / np.diff(xs))

    @property
    def segments(self) -> int:
        return self.control_points.shape[0] - 1

    def _segment_index(self, x: np.ndarray) -> np.ndarray:
        xs = self.control_points[:, 0]
        return np.clip(np.searchsorted(xs, x, side="right") - 1, 0, self.segments - 1)

    def _check_domain(self, x: np.ndarray):
        if not np.all(np.isfinite(x)):
            raise DomainError("evaluation point must be finite")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("evaluation point outside [0, 1]")

    def eval(self, x):
        """Evaluate at x (scalar or array); inputs must lie in [0, 1]."""
        arr = np.asarray(x, dtype=float)
        self._check_domain(arr)
        idx = self._segment_index(arr)
        xs = self.control_points[:, 0]
        ys = self.control_points[:, 1]
        out = ys[idx] + self._slopes[idx] * (arr - xs[idx])
        if np.isscalar(x) or arr.ndim == 0:
            return float(out)
        return out

    __call__ = eval

    def slope(self, x):
        """Segment slope at x under the half-open membership rule."""
        arr = np.asarray(x, dtype=float)
        self._check_domain(arr)
        out = self._slopes[self._segment_index(arr)]
        if np.isscalar(x) or arr.ndim == 0:
            return float(out)
        return out

    def ratios(self) -> RatioParams:
        """Recover the ratio parameterization of the interior points."""
        pts = self.control_points
        prev = pts[:-2]  # (x_{k-1}, y_{k-1}) for each interior k
        cur = pts[1:-1]
        r = (cur - prev) / (1.0 - prev)
        return RatioParams(r)

    def to_points(self) -> list:
        """Control points as a plain list of [x, y] pairs (JSON-friendly)."""
        return [[float(x), float(y)] for x, y in self.control_points]

    @classmethod
    def from_points(cls, points) -> "PiecewiseFn":
        return cls(np.asarray(points, dtype=float))


def build(params: RatioParams, M: int) -> PiecewiseFn:
    """Construct the piecewise function for M segments from ratio pairs.

    Raises:
        InvalidInputError: M < 1 or the ratio count is not M-1.
        ConstraintViolationError: a ratio outside (0, 1), or ratios so
            extreme that consecutive knots collapse in float arithmetic.
    """
    if M < 1:
        raise InvalidInputError(f"M must be a positive integer, got {M}")
    if params.ratios.shape[0] != M - 1:
        raise InvalidInputError(
            f"expected {M - 1} ratio pairs for M={M}, got {params.ratios.shape[0]}"
        )
    pts = np.zeros((M + 1, 2))
    pts[-1] = 1.0
    for k in range(1, M):
        pts[k] = pts[k - 1] + params.ratios[k - 1] * (1.0 - pts[k - 1])
    if not np.all(np.diff(pts[:, 0]) > 0.0):
        raise ConstraintViolationError("ratios collapse adjacent x knots in float arithmetic")
    return PiecewiseFn(pts)


def identity_params(M: int) -> RatioParams:
    """Ratios of evenly spaced diagonal control points x_k = y_k = k/M.

    build(identity_params(M), M) is the identity map on [0, 1].
    """
    if M < 2:
        raise InvalidInputError(f"identity initialization needs M >= 2, got {M}")
    k = np.arange(1, M)
    r = 1.0 / (M - k + 1.0)
    return RatioParams(np.stack([r, r], axis=1))
