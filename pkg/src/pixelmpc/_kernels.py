"""Compiled hot loop for batched control rollouts.

Numerically the same computation as the numpy recording path in
``control.RolloutEngine``; this version loops per sample under numba so a
full 512 x 80 rollout batch fits in a few milliseconds. The flow network
runs in float32 through BLAS matmuls; everything else is float64.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _relu_bias_inplace(h, b):
    n, m = h.shape
    for i in range(n):
        for j in range(m):
            x = h[i, j] + b[j]
            h[i, j] = x if x > 0.0 else 0.0


@nb.njit(cache=True)
def _bias_inplace(h, b):
    n, m = h.shape
    for i in range(n):
        for j in range(m):
            h[i, j] += b[j]


@nb.njit(cache=True)
def rollout_costs(p0, q0, v0, seg0, u,
                  seg_start, seg_dir, seg_len, seg_quat,
                  centers, normals, side, up, half, framew,
                  d_max, c1, c2, c3, speed, dt, mass, drag, gvec,
                  use_pixel, pixel0, c_pixel, n_pixel_steps, cx, cy, u_scale,
                  polar_targets,
                  W0, b0, W1, b1, W2, b2, W3, b3):
    N = u.shape[0]
    T = u.shape[1]
    G = centers.shape[0]
    p = np.empty((N, 3))
    v = np.empty((N, 3))
    q = np.empty((N, 4))
    for i in range(N):
        for k in range(3):
            p[i, k] = p0[k]
            v[i, k] = v0[k]
        for k in range(4):
            q[i, k] = q0[k]
    seg = np.full(N, seg0, np.int64)
    crashed = np.zeros(N, np.bool_)
    costs = np.zeros(N)
    pix = np.zeros((N, 2))
    if use_pixel:
        for i in range(N):
            pix[i, 0] = pixel0[0]
            pix[i, 1] = pixel0[1]
    net_in = np.empty((N, 10), np.float32)

    for t in range(T):
        for i in range(N):
            s = seg[i]
            # distance to the active path segment
            rx = p[i, 0] - seg_start[s, 0]
            ry = p[i, 1] - seg_start[s, 1]
            rz = p[i, 2] - seg_start[s, 2]
            tp = rx * seg_dir[s, 0] + ry * seg_dir[s, 1] + rz * seg_dir[s, 2]
            if tp < 0.0:
                tp = 0.0
            elif tp > seg_len[s]:
                tp = seg_len[s]
            dx = rx - tp * seg_dir[s, 0]
            dy = ry - tp * seg_dir[s, 1]
            dz = rz - tp * seg_dir[s, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            h = 2.0 * d / d_max - 1.0
            if h > 1.0:
                h = 1.0
            elif h < -1.0:
                h = -1.0
            if crashed[i]:
                h = 1000.0
            dot = (q[i, 0] * seg_quat[s, 0] + q[i, 1] * seg_quat[s, 1]
                   + q[i, 2] * seg_quat[s, 2] + q[i, 3] * seg_quat[s, 3])
            sign = 1.0 if dot >= 0.0 else -1.0
            qerr = 0.0
            for k in range(4):
                e = sign * q[i, k] - seg_quat[s, k]
                qerr += e * e
            verr = 0.0
            for k in range(3):
                e = v[i, k] - speed * seg_dir[s, k]
                verr += e * e
            stage = (c1 * h * h + c2 * qerr + c3 * verr) * dt
            if use_pixel and t < n_pixel_steps:
                l1 = abs(pix[i, 0] - cx) + abs(pix[i, 1] - cy)
                if l1 > 1.0:   # saturate once the point leaves the frame
                    l1 = 1.0
                stage += c_pixel * dt * l1
            costs[i] += stage

        # pixel propagation through the flow network (while the cost needs it)
        if use_pixel and t + 1 < n_pixel_steps:
            for i in range(N):
                net_in[i, 0] = q[i, 0]
                net_in[i, 1] = q[i, 1]
                net_in[i, 2] = q[i, 2]
                net_in[i, 3] = q[i, 3]
                net_in[i, 4] = pix[i, 0]
                net_in[i, 5] = pix[i, 1]
                net_in[i, 6] = u[i, t, 0]
                net_in[i, 7] = u[i, t, 1]
                net_in[i, 8] = u[i, t, 2]
                net_in[i, 9] = u[i, t, 3] * u_scale
            h1 = np.dot(net_in, W0)
            _relu_bias_inplace(h1, b0)
            h2 = np.dot(h1, W1)
            _relu_bias_inplace(h2, b1)
            h3 = np.dot(h2, W2)
            _relu_bias_inplace(h3, b2)
            out = np.dot(h3, W3)
            _bias_inplace(out, b3)
            for i in range(N):
                if polar_targets:
                    l = out[i, 0]
                    if l < 0.0:
                        l = 0.0
                    du = l * math.cos(out[i, 1])
                    dv = l * math.sin(out[i, 1])
                else:
                    du = out[i, 0]
                    dv = out[i, 1]
                pix[i, 0] += dt * du
                pix[i, 1] += dt * dv

        for i in range(N):
            # body-to-world rotation third column, thrust and drag
            qw, qx, qy, qz = q[i, 0], q[i, 1], q[i, 2], q[i, 3]
            r02 = 2.0 * (qx * qz + qy * qw)
            r12 = 2.0 * (qy * qz - qx * qw)
            r22 = 1.0 - 2.0 * (qx * qx + qy * qy)
            ft = u[i, t, 3]
            ax = gvec[0] + (r02 * ft - drag * mass * v[i, 0]) / mass
            ay = gvec[1] + (r12 * ft - drag * mass * v[i, 1]) / mass
            az = gvec[2] + (r22 * ft - drag * mass * v[i, 2]) / mass
            px_old = p[i, 0]
            py_old = p[i, 1]
            pz_old = p[i, 2]
            p[i, 0] += dt * v[i, 0]
            p[i, 1] += dt * v[i, 1]
            p[i, 2] += dt * v[i, 2]
            v[i, 0] += dt * ax
            v[i, 1] += dt * ay
            v[i, 2] += dt * az
            wx, wy, wz = u[i, t, 0], u[i, t, 1], u[i, t, 2]
            dqw = 0.5 * (-qx * wx - qy * wy - qz * wz)
            dqx = 0.5 * (qw * wx - qz * wy + qy * wz)
            dqy = 0.5 * (qz * wx + qw * wy - qx * wz)
            dqz = 0.5 * (-qy * wx + qx * wy + qw * wz)
            nqw = qw + dt * dqw
            nqx = qx + dt * dqx
            nqy = qy + dt * dqy
            nqz = qz + dt * dqz
            nn = math.sqrt(nqw * nqw + nqx * nqx + nqy * nqy + nqz * nqz)
            if nn == 0.0 or not math.isfinite(nn):
                nn = np.nan  # degenerate attitude -> non-finite cost
            q[i, 0] = nqw / nn
            q[i, 1] = nqx / nn
            q[i, 2] = nqy / nn
            q[i, 3] = nqz / nn

            # gate-plane crossing: advance through the opening, crash on frame
            s = seg[i]
            d0 = ((px_old - centers[s, 0]) * normals[s, 0]
                  + (py_old - centers[s, 1]) * normals[s, 1]
                  + (pz_old - centers[s, 2]) * normals[s, 2])
            d1 = ((p[i, 0] - centers[s, 0]) * normals[s, 0]
                  + (p[i, 1] - centers[s, 1]) * normals[s, 1]
                  + (p[i, 2] - centers[s, 2]) * normals[s, 2])
            if d0 > 0.0 and d1 <= 0.0:
                alpha = d0 / (d0 - d1)
                cxp = px_old + alpha * (p[i, 0] - px_old) - centers[s, 0]
                cyp = py_old + alpha * (p[i, 1] - py_old) - centers[s, 1]
                czp = pz_old + alpha * (p[i, 2] - pz_old) - centers[s, 2]
                ain = abs(cxp * side[s, 0] + cyp * side[s, 1] + czp * side[s, 2])
                bin_ = abs(cxp * up[s, 0] + cyp * up[s, 1] + czp * up[s, 2])
                m = ain if ain > bin_ else bin_
                if m <= half[s]:
                    if s < G - 1:
                        seg[i] = s + 1
                elif m <= half[s] + framew[s]:
                    crashed[i] = True
            if p[i, 2] <= 0.0:   # ground contact, same as the plant
                crashed[i] = True
            # lateral slab hit
            s = seg[i]
            gx = p[i, 0] - centers[s, 0]
            gy = p[i, 1] - centers[s, 1]
            gz2 = p[i, 2] - centers[s, 2]
            dn = abs(gx * normals[s, 0] + gy * normals[s, 1] + gz2 * normals[s, 2])
            if dn <= framew[s] * 0.5:
                ain = abs(gx * side[s, 0] + gy * side[s, 1] + gz2 * side[s, 2])
                bin_ = abs(gx * up[s, 0] + gy * up[s, 1] + gz2 * up[s, 2])
                m = ain if ain > bin_ else bin_
                if m > half[s] and m <= half[s] + framew[s]:
                    crashed[i] = True
    for i in range(N):
        if not math.isfinite(costs[i]):
            costs[i] = np.inf
    return costs
