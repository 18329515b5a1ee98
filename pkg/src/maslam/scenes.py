"""Bundled synthetic scenes: a textured room with orbiting agents (loops by
construction), a seam scene for merge refinement, and a corridor for
pose-initialization studies.

World frame is right-handed with z up; cameras look with +z forward and
+y down.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import SE3Pose
from .world import Box, Plane, SceneSpec, Sphere, Texture


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> SE3Pose:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    r = np.cross(f, up)
    n = np.linalg.norm(r)
    if n < 1e-9:                       # looking along up: pick any right
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(r)
    r = r / n
    d = np.cross(f, r)                 # camera down axis
    R = np.column_stack([r, d, f])
    return SE3Pose.from_rt(R, eye)


def _room_primitives() -> list:
    walls = [
        Plane((3.0, 0.0, 0.0), (-1.0, 0.0, 0.0),
              Texture("checker", (0.85, 0.35, 0.30), (0.25, 0.10, 0.10), 0.45)),
        Plane((-3.0, 0.0, 0.0), (1.0, 0.0, 0.0),
              Texture("checker", (0.30, 0.75, 0.35), (0.08, 0.25, 0.10), 0.55)),
        Plane((0.0, 3.0, 0.0), (0.0, -1.0, 0.0),
              Texture("checker", (0.30, 0.40, 0.85), (0.08, 0.12, 0.30), 0.50)),
        Plane((0.0, -3.0, 0.0), (0.0, 1.0, 0.0),
              Texture("checker", (0.85, 0.80, 0.30), (0.30, 0.28, 0.08), 0.60)),
        Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
              Texture("gradient", (0.55, 0.45, 0.40), (0.25, 0.20, 0.18), 1.2,
                      (1.0, 0.7, 0.0))),
        Plane((0.0, 0.0, 3.0), (0.0, 0.0, -1.0),
              Texture("gradient", (0.80, 0.80, 0.82), (0.55, 0.55, 0.60), 1.5,
                      (0.4, 1.0, 0.0))),
    ]
    props = [
        Sphere((1.8, 1.2, 0.5), 0.5,
               Texture("checker", (0.90, 0.55, 0.15), (0.35, 0.18, 0.05), 0.25)),
        Sphere((-1.6, -1.4, 0.4), 0.4,
               Texture("gradient", (0.20, 0.70, 0.75), (0.05, 0.25, 0.28), 0.3,
                       (0.2, 0.5, 1.0))),
        Box((-1.2, 1.6, 0.45), (0.45, 0.35, 0.45),
            Texture("checker", (0.70, 0.30, 0.70), (0.25, 0.08, 0.25), 0.3)),
        Box((1.4, -1.7, 0.35), (0.35, 0.45, 0.35),
            Texture("checker", (0.95, 0.90, 0.85), (0.40, 0.35, 0.30), 0.2)),
    ]
    return walls + props


def _orbit_keyframes(phase_deg: float, n_keys: int = 13, radius: float = 1.1,
                     height: float = 1.4) -> list:
    # 45 degree offset points the view at room corners (geometry-rich for
    # loop-constraint registration) rather than flat wall centers
    keys = []
    for k in range(n_keys):
        ang = math.radians(45.0 + phase_deg + 360.0 * k / (n_keys - 1))
        eye = (radius * math.cos(ang), radius * math.sin(ang), height)
        target = (2.8 * math.cos(ang), 2.8 * math.sin(ang), 1.3)
        keys.append(look_at(eye, target))
    return keys


def room_scene(agents: int, frames_per_agent: int) -> SceneSpec:
    phases = {1: [0.0], 2: [0.0, 180.0], 3: [0.0, 120.0, 240.0]}[agents]
    trajectories = [_orbit_keyframes(p) for p in phases]
    return SceneSpec(_room_primitives(), trajectories, frames_per_agent,
                     name=f"room{agents}")


def seam_scene(frames_per_agent: int) -> SceneSpec:
    """One agent panning along a wall: consecutive sub-maps overlap on a
    seam region, exercising merge refinement."""
    keys = []
    for k in range(7):
        x = -1.6 + 3.2 * k / 6.0
        eye = (x, -0.4, 1.4)
        target = (x * 0.7, 2.8, 1.3)
        keys.append(look_at(eye, target))
    return SceneSpec(_room_primitives(), [keys], frames_per_agent, name="seam")


def corridor_scene(frames_per_agent: int) -> SceneSpec:
    prims = [
        Plane((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0),
              Texture("checker", (0.80, 0.40, 0.30), (0.30, 0.12, 0.08), 0.35)),
        Plane((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0),
              Texture("checker", (0.35, 0.55, 0.80), (0.10, 0.18, 0.30), 0.45)),
        Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
              Texture("checker", (0.60, 0.60, 0.55), (0.25, 0.25, 0.22), 0.5)),
        Plane((0.0, 0.0, 2.5), (0.0, 0.0, -1.0),
              Texture("gradient", (0.75, 0.75, 0.78), (0.50, 0.50, 0.55), 1.0,
                      (0.0, 1.0, 0.3))),
        Plane((0.0, 6.0, 0.0), (0.0, -1.0, 0.0),
              Texture("checker", (0.85, 0.75, 0.30), (0.30, 0.25, 0.08), 0.4)),
        Box((0.6, 2.0, 0.4), (0.3, 0.3, 0.4),
            Texture("checker", (0.70, 0.30, 0.65), (0.25, 0.08, 0.22), 0.25)),
        Box((-0.55, 3.5, 0.5), (0.25, 0.4, 0.5),
            Texture("gradient", (0.25, 0.70, 0.40), (0.08, 0.25, 0.12), 0.3,
                    (1.0, 0.0, 0.4))),
    ]
    keys = []
    for k in range(6):
        y = -3.5 + 7.0 * k / 5.0
        sway = 0.25 * math.sin(k * 1.1)
        eye = (sway, y, 1.3)
        target = (sway * 0.3, y + 3.0, 1.25)
        keys.append(look_at(eye, target))
    return SceneSpec(prims, [keys], frames_per_agent, name="corridor")


def build_scene(name: str, frames_per_agent: int) -> SceneSpec:
    if name in ("room1", "room2", "room3"):
        return room_scene(int(name[-1]), frames_per_agent)
    if name == "seam":
        return seam_scene(frames_per_agent)
    if name == "corridor":
        return corridor_scene(frames_per_agent)
    raise ValueError(f"unknown scene {name!r}; "
                     "choose room1, room2, room3, seam, or corridor")
