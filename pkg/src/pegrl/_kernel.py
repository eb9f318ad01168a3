"""Fused inner physics/control loop, JIT-compiled.

One call advances the gantry through the policy-step substeps: contact
query, hybrid-controller update, adaptation, and semi-implicit Euler
integration, with identical semantics to the reference path built from
`contact_wrench` + `controller_substep` + `dynamics.step` (tested for
agreement).  Everything is scalar math on small arrays so numba gets tight
loops.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _contact_accumulate(
    q, qd, pts, hole_poly, hx, hy, ch, sh,
    plane_z, bottom_z, k_c, c_c, mu, v_eps, F,
):
    """Accumulate the contact wrench about the end-effector origin into F."""
    for i in range(6):
        F[i] = 0.0
    pz = q[2]
    if pz >= plane_z:
        return
    cyaw = np.cos(q[5])
    syaw = np.sin(q[5])
    n_pts = pts.shape[0]
    ne = hole_poly.shape[0]
    for k in range(n_pts):
        rx = cyaw * pts[k, 0] - syaw * pts[k, 1]
        ry = syaw * pts[k, 0] + cyaw * pts[k, 1]
        wx = q[0] + rx
        wy = q[1] + ry
        # point velocity (r_z = 0)
        vpx = qd[0] - qd[5] * ry
        vpy = qd[1] + qd[5] * rx
        vpz = qd[2] + qd[3] * ry - qd[4] * rx
        # hole frame
        dxh = wx - hx
        dyh = wy - hy
        phx = ch * dxh + sh * dyh
        phy = -sh * dxh + ch * dyh
        # crossing-number containment (same arithmetic as shapes.points_in_polygon)
        inside = False
        for e in range(ne):
            e2 = e + 1 if e + 1 < ne else 0
            y0 = hole_poly[e, 1]
            y1 = hole_poly[e2, 1]
            if (y0 > phy) != (y1 > phy):
                x_int = (hole_poly[e2, 0] - hole_poly[e, 0]) * (phy - y0) / (
                    y1 - y0
                ) + hole_poly[e, 0]
                if phx < x_int:
                    inside = not inside
        nx = 0.0
        ny = 0.0
        nz = 0.0
        pen = 0.0
        if not inside:
            # distance to boundary and closest point
            best = 1e30
            bx = 0.0
            by = 0.0
            for e in range(ne):
                ax = hole_poly[e, 0]
                ay = hole_poly[e, 1]
                e2 = (e + 1) % ne
                abx = hole_poly[e2, 0] - ax
                aby = hole_poly[e2, 1] - ay
                ab2 = abx * abx + aby * aby
                t = ((phx - ax) * abx + (phy - ay) * aby) / ab2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                cx = ax + t * abx
                cy = ay + t * aby
                d2 = (phx - cx) ** 2 + (phy - cy) ** 2
                if d2 < best:
                    best = d2
                    bx = cx
                    by = cy
            sdf = np.sqrt(best)
            pen_z = plane_z - pz
            if pen_z <= sdf:
                nz = 1.0
                pen = pen_z
            else:
                if sdf < 1e-12:
                    continue
                nhx = (bx - phx) / sdf
                nhy = (by - phy) / sdf
                nx = ch * nhx - sh * nhy
                ny = sh * nhx + ch * nhy
                pen = sdf
        else:
            if pz < bottom_z:
                nz = 1.0
                pen = bottom_z - pz
            else:
                continue
        vn = vpx * nx + vpy * ny + vpz * nz
        fn = k_c * pen + c_c * (-vn)
        if fn <= 0.0:
            continue
        fx = fn * nx
        fy = fn * ny
        fz = fn * nz
        # regularized Coulomb friction on the tangential velocity
        vtx = vpx - vn * nx
        vty = vpy - vn * ny
        vtz = vpz - vn * nz
        vt = np.sqrt(vtx * vtx + vty * vty + vtz * vtz)
        if vt > 1e-12:
            ff = -mu * fn * np.tanh(vt / v_eps) / vt
            fx += ff * vtx
            fy += ff * vty
            fz += ff * vtz
        F[0] += fx
        F[1] += fy
        F[2] += fz
        F[3] += ry * fz
        F[4] += -rx * fz
        F[5] += rx * fy - ry * fx


@njit(cache=True)
def run_policy_step(
    q, qd, z, D_hat,  # state, mutated in place, (6,) each
    x_d, f_d,  # setpoint (xdot_d = xddot_d = 0 inside a policy step)
    K_vz, K_pz, K_fz,  # z-state gain diagonals
    F1, F2, A, K_s, gamma_d, D_max,  # controller gain diagonals
    robust_gain,  # h^2 / (4 eta)
    force_mask,  # 1.0 on force-controlled axes
    M_diag, G_vec, d_const,  # gantry terms + injected disturbance
    n_sub, dt,
    pts, hole_poly, hx, hy, ch, sh, plane_z, bottom_z,
    k_c, c_c, mu, v_eps,
    f_ext_out,  # (6,) wrench from the last substep
):
    """Run n_sub fused substeps; returns 0, or 1 if the state went non-finite."""
    F = np.zeros(6)
    xe = np.zeros(6)
    xde = np.zeros(6)
    fe = np.zeros(6)
    zdot = np.zeros(6)
    s = np.zeros(6)
    for _ in range(n_sub):
        _contact_accumulate(
            q, qd, pts, hole_poly, hx, hy, ch, sh, plane_z, bottom_z,
            k_c, c_c, mu, v_eps, F,
        )
        for i in range(6):
            xe[i] = q[i] - x_d[i]
            xde[i] = qd[i]
            fe[i] = (F[i] - f_d[i]) * force_mask[i]
        for i in range(6):
            zdot[i] = -A[i] * z[i] + K_pz[i] * xe[i] + K_vz[i] * xde[i] + K_fz[i] * fe[i]
            s[i] = xde[i] + F1[i] * xe[i] + F2[i] * z[i]
        ok = True
        for i in range(6):
            xd_eq = -F1[i] * xe[i] - F2[i] * z[i]
            xdd_eq = -F1[i] * xde[i] - F2[i] * zdot[i]
            f_tau = (
                M_diag[i] * xdd_eq
                + G_vec[i]
                + D_hat[i]
                - F[i]
                - K_s[i] * s[i]
                - robust_gain * s[i]
            )
            # xd_eq only feeds the (zero) Coriolis term on the gantry
            _ = xd_eq
            # adaptation with componentwise projection
            cand = D_hat[i] - gamma_d[i] * s[i] * dt
            if cand > D_max[i]:
                cand = D_max[i]
            elif cand < -D_max[i]:
                cand = -D_max[i]
            D_hat[i] = cand
            z[i] = z[i] + zdot[i] * dt
            # gantry dynamics: J = I, C = 0
            qdd = (f_tau + F[i] - G_vec[i] - d_const[i]) / M_diag[i]
            qd[i] = qd[i] + qdd * dt
            q[i] = q[i] + qd[i] * dt
            if not (np.isfinite(q[i]) and np.isfinite(qd[i])):
                ok = False
        if not ok:
            return 1
    for i in range(6):
        f_ext_out[i] = F[i]
    return 0
