"""Camera pose from 2D-3D correspondences: P3P inside RANSAC, then refinement.

The minimal solver follows the classical three-point formulation: with unit
bearing vectors m_i toward three scene points and pairwise angles known, the
camera-point distances satisfy three law-of-cosines equations. Setting
s2 = u s1, s3 = v s1 and eliminating u yields a quartic in v; the quartic
coefficients are built by explicit polynomial arithmetic (no hand-expanded
formulas) and its roots are polished by Newton steps. Each admissible root
gives camera-frame point positions; a rigid alignment (Kabsch) against the
world points produces a candidate pose, and candidates must reproject the
three points essentially exactly.

RANSAC samples minimal triples, disambiguates the up-to-four candidates with
a fourth point, counts inliers by reprojection error, and refines the best
model by damped Gauss-Newton on all inliers. Hypothesis evaluation is
sequential but scored so the chosen model is independent of evaluation order
(most inliers, ties to the earliest hypothesis).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, LocalizationFailure
from .geometry import Intrinsics, Pose, pixel_directions, project, rotation_about_axis

P3P_REPROJ_TOL = 1e-6


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    threshold_px: float = 2.0
    confidence: float = 0.999
    rng_seed: int = 0

    def __post_init__(self):
        if self.threshold_px <= 0:
            raise ValueError("threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inliers: np.ndarray
    mean_error: float

    def __post_init__(self):
        if len(self.inliers) < 4:
            raise ValueError("a pose estimate needs at least 4 inliers")


def _kabsch(src, dst):
    """Rotation/translation with dst ~= R @ src + t (no scale)."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, dc - r @ sc


def _poly_mul(p, q):
    return np.convolve(p, q)


def _poly_add(p, q):
    n = max(len(p), len(q))
    out = np.zeros(n)
    out[:len(p)] += p
    out[:len(q)] += q
    return out


def solve_p3p(points_3d, pixels_2d, intrinsics: Intrinsics):
    """All real solutions of the three-point perspective problem.

    ``points_3d`` is (3, 3) world points, ``pixels_2d`` (3, 2) continuous
    pixel coordinates. Returns up to four camera-to-world poses, each
    reprojecting the three points within 1e-6 px.
    """
    pts = np.asarray(points_3d, dtype=np.float64)
    pix = np.asarray(pixels_2d, dtype=np.float64)
    if pts.shape != (3, 3) or pix.shape != (3, 2):
        raise ValueError("need exactly 3 points and 3 pixels")
    cross = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    scale = max(np.linalg.norm(pts[1] - pts[0]), np.linalg.norm(pts[2] - pts[0]))
    if np.linalg.norm(cross) < 1e-12 * scale * scale:
        raise DegenerateGeometryError("collinear 3D points")

    m = pixel_directions(intrinsics, pix)
    # Opposite side lengths and inter-bearing cosines.
    a = np.linalg.norm(pts[1] - pts[2])
    b = np.linalg.norm(pts[0] - pts[2])
    c = np.linalg.norm(pts[0] - pts[1])
    cos_a = float(m[1] @ m[2])
    cos_b = float(m[0] @ m[2])
    cos_g = float(m[0] @ m[1])
    if min(a, b, c) < 1e-12:
        raise DegenerateGeometryError("coincident 3D points")

    ab = (a / b) ** 2
    cb = (c / b) ** 2
    # q(v) = 1 + v^2 - 2 v cos_b  (so s1^2 q = b^2)
    q = np.array([1.0, -2.0 * cos_b, 1.0])
    # u(v) = n(v) / dv(v) from subtracting the two normalized equations.
    n_poly = _poly_add(np.array([1.0, 0.0, -1.0]), (ab - cb) * q)
    dv = np.array([2.0 * cos_g, -2.0 * cos_a])
    # Substitute into u^2 - 2 u cos_g + (1 - cb q) = 0, cleared of denominators.
    quart = _poly_add(
        _poly_mul(n_poly, n_poly),
        _poly_add(-2.0 * cos_g * _poly_mul(n_poly, dv),
                  _poly_mul(_poly_mul(dv, dv), _poly_add(np.array([1.0]), -cb * q))),
    )
    coeffs = quart[::-1]  # numpy wants highest degree first
    lead = np.max(np.abs(coeffs))
    if lead == 0.0:
        raise DegenerateGeometryError("degenerate quartic")
    coeffs = coeffs / lead
    roots = np.roots(np.trim_zeros(coeffs, "f"))

    deriv = np.polyder(coeffs)
    poses = []
    for root in roots:
        if abs(root.imag) > 1e-6:
            continue
        v = float(root.real)
        for _ in range(3):  # Newton polish on the quartic
            f = np.polyval(coeffs, v)
            fp = np.polyval(deriv, v)
            if fp == 0.0:
                break
            v -= f / fp
        qv = 1.0 + v * v - 2.0 * v * cos_b
        if v <= 0.0 or qv <= 0.0:
            continue
        s1 = b / math.sqrt(qv)
        # u comes from the linear elimination or from the quadratic in
        # equation (II); the linear form loses accuracy when its denominator
        # is small, so evaluate every candidate against the remaining
        # law-of-cosines equation and keep the most consistent one.
        den = 2.0 * (cos_g - v * cos_a)
        u_candidates = []
        if abs(den) > 1e-12:
            u_candidates.append(float(np.polyval(n_poly[::-1], v)) / den)
        disc = cos_g * cos_g - (1.0 - cb * qv)
        if disc >= 0.0:
            u_candidates += [cos_g + math.sqrt(disc), cos_g - math.sqrt(disc)]
        u_candidates = [u for u in u_candidates if u > 0.0]
        if not u_candidates:
            continue
        resid_i = [abs(u * u + v * v - 2.0 * u * v * cos_a - ab * qv)
                   for u in u_candidates]
        for u in [u_candidates[int(np.argmin(resid_i))]]:
            dists = np.array([s1, u * s1, v * s1])
            cam_pts = dists[:, None] * m
            r, t = _kabsch(pts, cam_pts)  # world -> camera
            pose = Pose(r.T, -r.T @ t)
            uv, valid = project(pose, intrinsics, pts)
            if np.all(valid) and np.max(np.linalg.norm(uv - pix, axis=1)) < P3P_REPROJ_TOL:
                if not any(np.allclose(pose.translation, p.translation, atol=1e-9)
                           and np.allclose(pose.rotation, p.rotation, atol=1e-9)
                           for p in poses):
                    poses.append(pose)
    return poses[:4]


def _reproj_errors(pose, intrinsics, points, pixels):
    uv, valid = project(pose, intrinsics, points)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(valid, err, np.inf)


def _gauss_newton(pose, intrinsics, points, pixels, iterations=10):
    """Minimize reprojection error over an axis-angle + translation increment
    applied to the world-to-camera transform. Damped: a step is kept only if
    it does not increase the mean error, so refinement never regresses."""
    r_wc = pose.rotation.T
    t_wc = -pose.rotation.T @ pose.translation
    lam = 1e-6
    best_err = float(np.mean(_reproj_errors(pose, intrinsics, points, pixels)))
    for _ in range(iterations):
        cam = points @ r_wc.T + t_wc
        z = -cam[:, 2]
        if np.any(z <= 1e-9):
            break
        inv_z = 1.0 / z
        u_res = intrinsics.cx + intrinsics.fx * cam[:, 0] * inv_z - pixels[:, 0]
        v_res = intrinsics.cy + intrinsics.fy * cam[:, 1] * inv_z - pixels[:, 1]
        res = np.stack([u_res, v_res], axis=1).ravel()
        # d(pixel)/d(cam point), with depth along -z.
        du = np.stack([intrinsics.fx * inv_z, np.zeros_like(z),
                       intrinsics.fx * cam[:, 0] * inv_z * inv_z], axis=1)
        dv = np.stack([np.zeros_like(z), intrinsics.fy * inv_z,
                       intrinsics.fy * cam[:, 1] * inv_z * inv_z], axis=1)
        # d(cam point)/d(omega) = -[cam]_x, d/d(tau) = I.
        j = np.zeros((len(points), 2, 6))
        skew = np.zeros((len(points), 3, 3))  # -[cam]_x
        skew[:, 0, 1] = cam[:, 2]; skew[:, 0, 2] = -cam[:, 1]
        skew[:, 1, 0] = -cam[:, 2]; skew[:, 1, 2] = cam[:, 0]
        skew[:, 2, 0] = cam[:, 1]; skew[:, 2, 1] = -cam[:, 0]
        j[:, 0, :3] = np.einsum("nk,nkj->nj", du, skew)
        j[:, 0, 3:] = du
        j[:, 1, :3] = np.einsum("nk,nkj->nj", dv, skew)
        j[:, 1, 3:] = dv
        jf = j.reshape(-1, 6)
        h = jf.T @ jf + lam * np.eye(6)
        g = jf.T @ res
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        r_new = rotation_about_axis(step[:3], np.linalg.norm(step[:3])) @ r_wc \
            if np.linalg.norm(step[:3]) > 0 else r_wc
        u_svd, _, vt_svd = np.linalg.svd(r_new)
        r_new = u_svd @ vt_svd
        t_new = rotation_about_axis(step[:3], np.linalg.norm(step[:3])) @ t_wc + step[3:] \
            if np.linalg.norm(step[:3]) > 0 else t_wc + step[3:]
        cand = Pose(r_new.T, -r_new.T @ t_new)
        err = float(np.mean(_reproj_errors(cand, intrinsics, points, pixels)))
        if err <= best_err:
            best_err = err
            r_wc, t_wc = r_new, t_new
            lam = max(lam * 0.5, 1e-9)
            if best_err < 1e-12:
                break
        else:
            lam *= 10.0
            if lam > 1e6:
                break
    return Pose(r_wc.T, -r_wc.T @ t_wc)


def ransac_pnp(correspondences, intrinsics: Intrinsics, config: RansacConfig) -> PoseEstimate:
    """Robust pose from correspondences: minimal P3P hypotheses disambiguated
    by a fourth point, inliers by reprojection threshold, Gauss-Newton
    refinement of the winner on its inliers. Deterministic given the seed."""
    points = np.asarray(correspondences.points, dtype=np.float64)
    pixels = correspondences.pixel_points()
    n = len(points)
    if n < 4:
        raise ValueError("need at least 4 correspondences")
    rng = np.random.default_rng(config.rng_seed)
    best_count = 0
    best_pose = None
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            candidates = solve_p3p(points[idx[:3]], pixels[idx[:3]], intrinsics)
        except DegenerateGeometryError:
            continue
        if not candidates:
            continue
        # Fourth point picks the physically consistent candidate.
        extra_err = [
            _reproj_errors(c, intrinsics, points[idx[3:]], pixels[idx[3:]])[0]
            for c in candidates
        ]
        pose = candidates[int(np.argmin(extra_err))]
        errs = _reproj_errors(pose, intrinsics, points, pixels)
        count = int(np.sum(errs < config.threshold_px))
        if count > best_count:  # strict: ties stay with the earlier hypothesis
            best_count = count
            best_pose = pose
            w = count / n
            if w >= 1.0:
                break
            denom = math.log1p(-min(w ** 3, 1.0 - 1e-12))
            needed = min(config.max_iterations,
                         int(math.ceil(math.log(1.0 - config.confidence) / denom)))
    if best_pose is None or best_count < 4:
        raise LocalizationFailure("no model with at least 4 inliers")

    inliers = np.flatnonzero(_reproj_errors(best_pose, intrinsics, points, pixels)
                             < config.threshold_px)
    refined = _gauss_newton(best_pose, intrinsics, points[inliers], pixels[inliers])
    final_errs = _reproj_errors(refined, intrinsics, points, pixels)
    final_inliers = np.flatnonzero(final_errs < config.threshold_px)
    if len(final_inliers) < 4:
        refined = best_pose
        final_errs = _reproj_errors(refined, intrinsics, points, pixels)
        final_inliers = np.flatnonzero(final_errs < config.threshold_px)
    return PoseEstimate(pose=refined, inliers=final_inliers,
                        mean_error=float(np.mean(final_errs[final_inliers])))


def compose_with_initial(relative, initial: Pose) -> Pose:
    """Final world pose from a relative estimate expressed in the initialized
    camera's frame: compose(initial, relative)."""
    rel = relative.pose if isinstance(relative, PoseEstimate) else relative
    from .geometry import compose
    return compose(initial, rel)
