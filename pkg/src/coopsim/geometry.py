"""Planar rigid-body geometry: poses and SE(2) transforms."""

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


@dataclass(frozen=True)
class Pose2:
    """A planar pose: position in meters, heading in radians, wrapped."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def as_array(self):
        return np.array([self.x, self.y, self.theta])


class SE2Transform:
    """Rigid planar transform y = R(theta) x + t, stored as (cos, sin, tx, ty)."""

    __slots__ = ("c", "s", "tx", "ty")

    def __init__(self, theta, tx, ty):
        self.c = math.cos(theta)
        self.s = math.sin(theta)
        self.tx = float(tx)
        self.ty = float(ty)

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_pose(cls, pose):
        """Local-to-world transform of a body at `pose`."""
        return cls(pose.theta, pose.x, pose.y)

    @property
    def theta(self):
        return math.atan2(self.s, self.c)

    def apply(self, pts):
        """Transform points [...,2]."""
        pts = np.asarray(pts, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
        out = np.empty_like(pts)
        out[..., 0] = self.c * x - self.s * y + self.tx
        out[..., 1] = self.s * x + self.c * y + self.ty
        return out

    def apply_pose(self, pose):
        x, y = self.apply(np.array([pose.x, pose.y]))
        return Pose2(float(x), float(y), pose.theta + self.theta)

    def compose(self, other):
        """self after other: (self ∘ other)(x) = self(other(x))."""
        out = SE2Transform.__new__(SE2Transform)
        out.c = self.c * other.c - self.s * other.s
        out.s = self.s * other.c + self.c * other.s
        out.tx = self.c * other.tx - self.s * other.ty + self.tx
        out.ty = self.s * other.tx + self.c * other.ty + self.ty
        return out

    def inverse(self):
        out = SE2Transform.__new__(SE2Transform)
        out.c = self.c
        out.s = -self.s
        out.tx = -(self.c * self.tx + self.s * self.ty)
        out.ty = -(-self.s * self.tx + self.c * self.ty)
        return out

    def matrix(self):
        return np.array([
            [self.c, -self.s, self.tx],
            [self.s, self.c, self.ty],
            [0.0, 0.0, 1.0],
        ])

    def __repr__(self):
        return f"SE2Transform(theta={self.theta:.6f}, t=({self.tx:.6f}, {self.ty:.6f}))"


def relative_pose_transform(from_pose, to_pose):
    """Transform taking coordinates in `from_pose`'s frame into `to_pose`'s frame."""
    return SE2Transform.from_pose(to_pose).inverse().compose(SE2Transform.from_pose(from_pose))
