"""Analytic solids used for synthetic inputs and ground-truth surfaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Sphere:
    radius: float = 0.3

    def contains(self, points):
        return np.sum(np.asarray(points) ** 2, axis=1) <= self.radius ** 2

    def sample_surface(self, k, rng):
        n = rng.normal(size=(k, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n * self.radius, n


@dataclass(frozen=True)
class BoxMinusCylinder:
    """Axis-aligned box with a z-axis cylindrical hole through its full height."""

    half: tuple = (0.35, 0.35, 0.2)
    radius: float = 0.15

    def contains(self, points):
        pts = np.asarray(points)
        in_box = np.all(np.abs(pts) <= np.asarray(self.half), axis=1)
        in_hole = pts[:, 0] ** 2 + pts[:, 1] ** 2 < self.radius ** 2
        return in_box & ~in_hole

    def _face_areas(self):
        hx, hy, hz = self.half
        cap = 4 * hx * hy - np.pi * self.radius ** 2
        return np.array([4 * hy * hz, 4 * hy * hz, 4 * hx * hz, 4 * hx * hz, cap, cap,
                         2 * np.pi * self.radius * 2 * hz])

    def sample_surface(self, k, rng):
        """Area-uniform samples on the boundary with outward normals."""
        hx, hy, hz = self.half
        areas = self._face_areas()
        which = rng.choice(len(areas), size=k, p=areas / areas.sum())
        pts = np.empty((k, 3))
        nrm = np.zeros((k, 3))
        for face in range(7):
            idx = np.flatnonzero(which == face)
            m = len(idx)
            if m == 0:
                continue
            if face == 6:
                theta = rng.uniform(0, 2 * np.pi, m)
                z = rng.uniform(-hz, hz, m)
                pts[idx] = np.stack([self.radius * np.cos(theta), self.radius * np.sin(theta), z], 1)
                nrm[idx] = -np.stack([np.cos(theta), np.sin(theta), np.zeros(m)], 1)
                continue
            axis, sign = face // 2, (1.0 if face % 2 == 0 else -1.0)
            got = 0
            while got < m:
                cand = rng.uniform(-1, 1, (m, 3)) * np.asarray(self.half)
                cand[:, axis] = sign * self.half[axis]
                if axis == 2:
                    cand = cand[cand[:, 0] ** 2 + cand[:, 1] ** 2 >= self.radius ** 2]
                take = min(len(cand), m - got)
                pts[idx[got:got + take]] = cand[:take]
                got += take
            nrm[idx, axis] = sign
        return pts, nrm


SHAPES = {"sphere": Sphere(), "box_minus_cylinder": BoxMinusCylinder()}
