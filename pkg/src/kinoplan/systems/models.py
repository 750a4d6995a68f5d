"""Concrete system models: acrobot, cartpole, car, quadrotor, double integrator.

Derivatives are written componentwise (column arithmetic only, no reductions)
so that propagating a batch row-by-row matches propagating each row alone,
bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .base import System

PI = math.pi
GRAVITY = 9.81


class Acrobot(System):
    """Two-link pendulum actuated at the elbow; theta = 0 is hanging down.

    theta1 is the shoulder angle from the downward vertical, theta2 the relative
    elbow angle.  Links are uniform rods (m = 1, l = 1, lc = 0.5, Ic = 1/12).
    """

    name = "acrobot"

    def __init__(self, **overrides):
        cfg = dict(
            state_lo=[-PI, -PI, -6.0, -6.0],
            state_hi=[PI, PI, 6.0, 6.0],
            control_lo=[-4.0],
            control_hi=[4.0],
            angular_mask=[True, True, False, False],
            velocity_mask=[False, False, True, True],
            dt=0.002,
            distance_weights=[1.0, 1.0, 1.0, 1.0],
            goal_radius=2.0,
            params=dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0,
                        lc1=0.5, lc2=0.5, ic1=1.0 / 12.0, ic2=1.0 / 12.0,
                        g=GRAVITY),
        )
        cfg.update(overrides)
        super().__init__(**cfg)

    def derivative(self, x, u, out=None):
        p = self.params
        m1, m2 = p["m1"], p["m2"]
        l1, lc1, lc2 = p["l1"], p["lc1"], p["lc2"]
        g = p["g"]
        # moments about each link's own pivot
        i1 = p["ic1"] + m1 * lc1 * lc1
        i2 = p["ic2"] + m2 * lc2 * lc2

        th1 = x[..., 0]
        th2 = x[..., 1]
        w1 = x[..., 2]
        w2 = x[..., 3]
        tau = u[..., 0]

        s1 = np.sin(th1)
        s2 = np.sin(th2)
        c2 = np.cos(th2)
        s12 = np.sin(th1 + th2)

        m11 = i1 + i2 + m2 * l1 * l1 + 2.0 * m2 * l1 * lc2 * c2
        m12 = i2 + m2 * l1 * lc2 * c2
        m22 = i2

        # Coriolis/centrifugal terms and gravity torques (theta from downward vertical)
        cor1 = -2.0 * m2 * l1 * lc2 * s2 * w1 * w2 - m2 * l1 * lc2 * s2 * w2 * w2
        cor2 = m2 * l1 * lc2 * s2 * w1 * w1
        grav1 = -(m1 * lc1 + m2 * l1) * g * s1 - m2 * lc2 * g * s12
        grav2 = -m2 * lc2 * g * s12

        rhs1 = grav1 - cor1
        rhs2 = grav2 - cor2 + tau
        det = m11 * m22 - m12 * m12

        if out is None:
            out = np.empty_like(x)
        out[..., 0] = w1
        out[..., 1] = w2
        out[..., 2] = (m22 * rhs1 - m12 * rhs2) / det
        out[..., 3] = (m11 * rhs2 - m12 * rhs1) / det
        return out

    def energy(self, x):
        """Total mechanical energy with zero control (for integrator sanity checks)."""
        p = self.params
        m1, m2 = p["m1"], p["m2"]
        l1, lc1, lc2 = p["l1"], p["lc1"], p["lc2"]
        g = p["g"]
        i1 = p["ic1"] + m1 * lc1 * lc1
        i2 = p["ic2"] + m2 * lc2 * lc2
        th1, th2, w1, w2 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        c2 = np.cos(th2)
        m11 = i1 + i2 + m2 * l1 * l1 + 2.0 * m2 * l1 * lc2 * c2
        m12 = i2 + m2 * l1 * lc2 * c2
        kinetic = 0.5 * (m11 * w1 * w1 + 2.0 * m12 * w1 * w2 + i2 * w2 * w2)
        potential = -g * ((m1 * lc1 + m2 * l1) * np.cos(th1) + m2 * lc2 * np.cos(th1 + th2))
        return kinetic + potential


class Cartpole(System):
    """Cart on a rail with an inverted pendulum; theta = 0 is the pole upright.

    State (x, v, theta, omega), force on the cart as the single control.
    Cart mass 1, pole point mass 0.1 at length 0.5.
    """

    name = "cartpole"

    def __init__(self, **overrides):
        cfg = dict(
            state_lo=[-30.0, -40.0, -PI, -2.0],
            state_hi=[30.0, 40.0, PI, 2.0],
            control_lo=[-300.0],
            control_hi=[300.0],
            angular_mask=[False, False, True, False],
            velocity_mask=[False, True, False, True],
            dt=0.002,
            distance_weights=[1.0, 1.0, 1.0, 1.0],
            goal_radius=1.5,
            params=dict(mc=1.0, mp=0.1, length=0.5, g=GRAVITY),
        )
        cfg.update(overrides)
        super().__init__(**cfg)

    def derivative(self, x, u, out=None):
        p = self.params
        mc, mp, ell, g = p["mc"], p["mp"], p["length"], p["g"]
        v = x[..., 1]
        th = x[..., 2]
        w = x[..., 3]
        f = u[..., 0]

        s = np.sin(th)
        c = np.cos(th)
        denom = mc + mp * s * s

        if out is None:
            out = np.empty_like(x)
        out[..., 0] = v
        out[..., 1] = (f + mp * ell * w * w * s - mp * g * s * c) / denom
        out[..., 2] = w
        out[..., 3] = ((mc + mp) * g * s - c * (f + mp * ell * w * w * s)) / (ell * denom)
        return out


class Car(System):
    """Kinematic unicycle: state (x, y, theta), control (speed, turn rate)."""

    name = "car"

    def __init__(self, **overrides):
        cfg = dict(
            state_lo=[-25.0, -35.0, -PI],
            state_hi=[25.0, 35.0, PI],
            control_lo=[0.0, -0.5],
            control_hi=[2.0, 0.5],
            angular_mask=[False, False, True],
            velocity_mask=[False, False, False],
            dt=0.02,
            distance_weights=[1.0, 1.0, 1.0],
            goal_radius=0.5,
            params=dict(clearance=0.5),
        )
        cfg.update(overrides)
        super().__init__(**cfg)

    def derivative(self, x, u, out=None):
        th = x[..., 2]
        v = u[..., 0]
        if out is None:
            out = np.empty_like(x)
        out[..., 0] = v * np.cos(th)
        out[..., 1] = v * np.sin(th)
        out[..., 2] = u[..., 1]
        return out


class Quadrotor(System):
    """Rigid-body quadrotor: state (p, q, v, omega), 13 numbers / 12 DOF.

    q = (w, x, y, z) is a unit quaternion (body to world).  Controls are a
    collective thrust (negative = upward force; hover at -g) and body torques
    with unit inertia.
    """

    name = "quadrotor"

    def __init__(self, **overrides):
        cfg = dict(
            state_lo=[-5.0, -5.0, -5.0,
                      -1.0, -1.0, -1.0, -1.0,
                      -3.0, -3.0, -3.0,
                      -2.0, -2.0, -2.0],
            state_hi=[5.0, 5.0, 5.0,
                      1.0, 1.0, 1.0, 1.0,
                      3.0, 3.0, 3.0,
                      2.0, 2.0, 2.0],
            control_lo=[-15.0, -1.0, -1.0, -1.0],
            control_hi=[-5.0, 1.0, 1.0, 1.0],
            angular_mask=[False] * 13,
            velocity_mask=[False] * 7 + [True] * 6,
            dt=0.02,
            distance_weights=[1.0, 1.0, 1.0,
                              0.5, 0.5, 0.5, 0.5,
                              1.0, 1.0, 1.0,
                              0.2, 0.2, 0.2],
            goal_radius=2.0,
            quat_block=3,
            params=dict(g=GRAVITY, half_extent=0.25),
        )
        cfg.update(overrides)
        super().__init__(**cfg)

    def derivative(self, x, u, out=None):
        g = self.params["g"]
        qw = x[..., 3]
        qx = x[..., 4]
        qy = x[..., 5]
        qz = x[..., 6]
        vx = x[..., 7]
        vy = x[..., 8]
        vz = x[..., 9]
        wx = x[..., 10]
        wy = x[..., 11]
        wz = x[..., 12]
        thrust = u[..., 0]

        # body z-axis in world frame, columns of R(q)
        bz_x = 2.0 * (qx * qz + qw * qy)
        bz_y = 2.0 * (qy * qz - qw * qx)
        bz_z = 1.0 - 2.0 * (qx * qx + qy * qy)

        if out is None:
            out = np.empty_like(x)
        out[..., 0] = vx
        out[..., 1] = vy
        out[..., 2] = vz
        out[..., 3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
        out[..., 4] = 0.5 * (qw * wx + qy * wz - qz * wy)
        out[..., 5] = 0.5 * (qw * wy - qx * wz + qz * wx)
        out[..., 6] = 0.5 * (qw * wz + qx * wy - qy * wx)
        out[..., 7] = -thrust * bz_x
        out[..., 8] = -thrust * bz_y
        out[..., 9] = -g - thrust * bz_z
        out[..., 10] = u[..., 1]
        out[..., 11] = u[..., 2]
        out[..., 12] = u[..., 3]
        return out


class DoubleIntegrator(System):
    """1-D point mass: state (position, velocity), control (acceleration)."""

    name = "double_integrator"

    def __init__(self, **overrides):
        cfg = dict(
            state_lo=[-10.0, -2.0],
            state_hi=[10.0, 2.0],
            control_lo=[-1.0],
            control_hi=[1.0],
            angular_mask=[False, False],
            velocity_mask=[False, True],
            dt=0.002,
            distance_weights=[1.0, 1.0],
            goal_radius=0.1,
            params={},
        )
        cfg.update(overrides)
        super().__init__(**cfg)

    def derivative(self, x, u, out=None):
        if out is None:
            out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        return out
