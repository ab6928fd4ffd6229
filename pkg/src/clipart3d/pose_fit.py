"""Metric 6-DoF pose and shape recovery from 2D keypoints.

Initialization uses the four-control-point PnP solver (barycentric
formulation, null-space candidates of dimension 1 to 3, Gauss-Newton
refinement of the combination weights, best candidate by reprojection
error). Refinement is damped least squares over rotation, translation, and
shape coefficients; track fitting shares one coefficient vector across
frames and penalizes wheel-contact points leaving the ground plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DivergedOptimization,
    EmptyTrack,
    NonPositiveDepth,
    TooFewPoints,
)
from .geometry import (
    CameraModel,
    Pixel,
    RigidPose,
    axis_angle_to_quat,
    compose,
    ground_point,
)
from .shape_model import ShapeBasis, ShapeCoefficients, instantiate
from .tracks import Keypoints2D, ObjectTrack, Visibility

_Z_EPS = 1e-9


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 100
    cost_tolerance: float = 1e-10       # relative cost decrease
    step_tolerance: float = 1e-12       # parameter step norm
    ground_weight: float = 1e3          # lambda_g, per squared meter off plane
    shape_prior_weight: float = 1.0     # lambda_s on alpha / sigma
    min_keypoints: int = 6
    self_occluded_weight: float = 0.5


@dataclass(frozen=True)
class FitResult:
    pose: RigidPose
    coeffs: ShapeCoefficients
    rms_reprojection_error: float
    n_inlier_keypoints: int
    converged: bool
    cost_history: tuple = field(default=(), compare=False)


def _usable(x2d: Keypoints2D) -> np.ndarray:
    """Keypoints that constrain the pose: detected and not hidden by another object."""
    vis = x2d.visibility
    return (vis != Visibility.MISSING) & (vis != Visibility.OCCLUDED_BY_OTHERS)


def _fit_weights(x2d: Keypoints2D, opts: FitOptions) -> np.ndarray:
    w = np.zeros(len(x2d))
    vis = x2d.visibility
    w[vis == Visibility.VISIBLE] = 1.0
    w[vis == Visibility.SELF_OCCLUDED] = opts.self_occluded_weight
    return w * x2d.confidence


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def _procrustes(Xw, Xc):
    """Rigid R, t with Xc ~= R Xw + t (Horn's closed form via SVD)."""
    cw = Xw.mean(axis=0)
    cc = Xc.mean(axis=0)
    H = (Xw - cw).T @ (Xc - cc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cc - R @ cw


def _reproj_rms(camera, R, t, X, uv):
    Y = X @ R.T + t
    if np.any(Y[:, 2] <= _Z_EPS):
        return np.inf
    proj = (Y @ camera.K.T)
    proj = proj[:, :2] / proj[:, 2:3]
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


_CTRL_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _beta_gauss_newton(dv, rho, beta, iters=8):
    """Refine the 4-vector of null-space weights against the six control-point
    distance constraints. dv has shape (6, 4, 3)."""
    for _ in range(iters):
        diff = np.einsum("k,pkc->pc", beta, dv)          # (6, 3)
        resid = np.sum(diff * diff, axis=1) - rho
        J = 2.0 * np.einsum("pc,pkc->pk", diff, dv)      # (6, 4)
        try:
            step, *_ = np.linalg.lstsq(J, -resid, rcond=None)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.linalg.norm(step) < 1e-14:
            break
    return beta


def _planar_init(camera, X, uv):
    """Pose from a homography when the 3D points are coplanar."""
    c = X.mean(axis=0)
    centered = X - c
    _, svals, Vt = np.linalg.svd(centered, full_matrices=False)
    if svals[1] < 1e-9 * max(svals[0], 1e-12):
        raise DegenerateConfiguration("keypoints are collinear")
    E = Vt[:2].T                       # in-plane axes
    p2 = centered @ E                  # (n, 2) plane coordinates

    # Hartley-normalized DLT for the plane-to-image homography
    def norm_T(pts):
        m = pts.mean(axis=0)
        s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - m, axis=1)), 1e-12)
        return np.array([[s, 0, -s * m[0]], [0, s, -s * m[1]], [0, 0, 1.0]])

    Ta, Tb = norm_T(p2), norm_T(uv)
    a = (np.column_stack([p2, np.ones(len(p2))]) @ Ta.T)
    b = (np.column_stack([uv, np.ones(len(uv))]) @ Tb.T)
    rows = []
    for (x, y, _), (u, v, _) in zip(a, b):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, VtH = np.linalg.svd(np.asarray(rows))
    H = np.linalg.inv(Tb) @ VtH[-1].reshape(3, 3) @ Ta

    B = camera.K_inv @ H
    scale = 2.0 / (np.linalg.norm(B[:, 0]) + np.linalg.norm(B[:, 1]))
    B = B * scale
    if B[2, 2] < 0:
        B = -B
    r1, r2, tp = B[:, 0], B[:, 1], B[:, 2]
    Rp = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt3 = np.linalg.svd(Rp)
    Rp = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt3))]) @ Vt3
    # plane coordinates relate to the object frame by X = c + E p2
    Exp = np.column_stack([E, np.cross(E[:, 0], E[:, 1])])
    R = Rp @ Exp.T
    t = tp - R @ c
    return RigidPose.from_matrix(R, t)


def epnp(camera: CameraModel, X3d, x2d: Keypoints2D, min_keypoints: int = 6) -> RigidPose:
    """Closed-form pose from N 3D-2D correspondences.

    Uses keypoints whose visibility is not missing and not occluded by
    another object. Raises TooFewPoints below min_keypoints and
    DegenerateConfiguration when the constraints collapse (coplanar point
    sets fall back to a homography-based pose first).
    """
    X3d = np.asarray(X3d, dtype=float)
    use = _usable(x2d)
    if int(use.sum()) < min_keypoints:
        raise TooFewPoints(f"{int(use.sum())} usable keypoints, need {min_keypoints}")
    X = X3d[use]
    uv = x2d.points[use]
    n = X.shape[0]

    centroid = X.mean(axis=0)
    cov = (X - centroid).T @ (X - centroid) / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 1e-12:
        raise DegenerateConfiguration("keypoints are coincident")
    if evals[2] < 1e-8 * evals[0]:
        return _planar_init(camera, X, uv)

    ctrl_w = np.vstack([centroid, centroid + np.sqrt(evals)[:, None] * evecs.T])  # (4, 3)

    # barycentric coordinates of each point in the control-point frame
    Cmat = np.vstack([ctrl_w.T, np.ones(4)])            # (4, 4)
    Xh = np.vstack([X.T, np.ones(n)])                   # (4, n)
    alphas = np.linalg.solve(Cmat, Xh).T                # (n, 4)

    fu, fv = camera.K[0, 0], camera.K[1, 1]
    s = camera.K[0, 1]
    uc, vc = camera.K[0, 2], camera.K[1, 2]
    M = np.zeros((2 * n, 12))
    for j in range(4):
        M[0::2, 3 * j + 0] = alphas[:, j] * fu
        M[0::2, 3 * j + 1] = alphas[:, j] * s
        M[0::2, 3 * j + 2] = alphas[:, j] * (uc - uv[:, 0])
        M[1::2, 3 * j + 1] = alphas[:, j] * fv
        M[1::2, 3 * j + 2] = alphas[:, j] * (vc - uv[:, 1])

    _, kevecs = np.linalg.eigh(M.T @ M)
    V = kevecs[:, :4]                                   # kernel candidates, (12, 4)
    vctrl = V.T.reshape(4, 4, 3)                        # (candidate k, control j, xyz)

    rho = np.array([np.sum((ctrl_w[a] - ctrl_w[b]) ** 2) for a, b in _CTRL_PAIRS])
    dv = np.stack(
        [[vctrl[k, a] - vctrl[k, b] for k in range(4)] for a, b in _CTRL_PAIRS]
    )                                                   # (6, 4, 3)
    L = np.zeros((6, 10))
    cols = [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2), (0, 3), (1, 3), (2, 3), (3, 3)]
    for ci, (a, b) in enumerate(cols):
        dot = np.sum(dv[:, a] * dv[:, b], axis=1)
        L[:, ci] = dot if a == b else 2.0 * dot

    betas0 = []
    # dimension 1: single kernel vector, scale from the distance ratios
    denom = L[:, 0] @ L[:, 0]
    if denom > 0:
        b1 = np.sqrt(max((L[:, 0] @ rho) / denom, 0.0))
        betas0.append(np.array([b1, 0.0, 0.0, 0.0]))
    # dimension 2
    sol, *_ = np.linalg.lstsq(L[:, [0, 1, 2]], rho, rcond=None)
    b1 = np.sqrt(abs(sol[0]))
    b2 = np.sqrt(abs(sol[2])) * np.sign(sol[1]) if b1 > 0 else 0.0
    betas0.append(np.array([b1, b2, 0.0, 0.0]))
    # dimension 3
    sol, *_ = np.linalg.lstsq(L[:, [0, 1, 2, 3, 4, 5]], rho, rcond=None)
    b1 = np.sqrt(abs(sol[0]))
    b2 = np.sqrt(abs(sol[2])) * np.sign(sol[1])
    b3 = np.sqrt(abs(sol[5])) * np.sign(sol[3])
    betas0.append(np.array([b1, b2, b3, 0.0]))

    best = None
    for beta in betas0:
        beta = _beta_gauss_newton(dv, rho, beta)
        ctrl_c = np.einsum("k,kjc->jc", beta, vctrl)    # (4, 3)
        Xc = alphas @ ctrl_c
        if Xc[:, 2].mean() < 0:
            Xc = -Xc
        R, t = _procrustes(X, Xc)
        err = _reproj_rms(camera, R, t, X, uv)
        if best is None or err < best[0]:
            best = (err, R, t)

    if best is None or not np.isfinite(best[0]):
        raise DegenerateConfiguration("no valid pose candidate")
    return RigidPose.from_matrix(best[1], best[2])


@dataclass
class _FrameProblem:
    kp_idx: np.ndarray      # model keypoint index per residual pair
    pixels: np.ndarray      # (m, 2)
    sqrt_w: np.ndarray      # (m,)
    n_inlier: int


def _build_frame_problem(x2d: Keypoints2D, opts: FitOptions) -> _FrameProblem:
    w = _fit_weights(x2d, opts)
    idx = np.flatnonzero(w > 0)
    return _FrameProblem(idx, x2d.points[idx], np.sqrt(w[idx]), int(idx.size))


def _stack_residuals(camera, basis, problems, poses, alpha, opts, with_jacobian):
    """Residual vector (and optionally Jacobian) of the joint objective.

    Layout: per frame the weighted reprojection residuals then the
    ground-contact residuals, followed by the shape-prior block. Parameters
    are [rotation increment, translation] per frame, then alpha. Returns
    (r, J) or (r, None); r is None when any used keypoint depth is
    non-positive (caller treats the state as infeasible).
    """
    K = basis.n_components
    F = len(problems)
    n_params = 6 * F + K
    X = instantiate(basis, ShapeCoefficients(alpha))
    contact = basis.contact_indices() if opts.ground_weight > 0 else np.array([], dtype=int)
    sg = np.sqrt(opts.ground_weight)
    n_c, d_c = camera.plane_normal, camera.plane_offset

    blocks, jblocks = [], []
    for f, (prob, pose) in enumerate(zip(problems, poses)):
        R = pose.rotation
        t = pose.translation
        Xf = X[prob.kp_idx]
        RX = Xf @ R.T
        Y = RX + t
        z = Y[:, 2]
        if np.any(z <= _Z_EPS):
            return None, None
        fx, fy = camera.K[0, 0], camera.K[1, 1]
        u = fx * Y[:, 0] / z + camera.K[0, 2]
        v = fy * Y[:, 1] / z + camera.K[1, 2]
        r = np.column_stack([u, v]) - prob.pixels
        blocks.append((prob.sqrt_w[:, None] * r).ravel())

        g = None
        if contact.size:
            Yc = X[contact] @ R.T + t
            g = sg * (Yc @ n_c + d_c)
            blocks.append(g)

        if with_jacobian:
            m = len(prob.kp_idx)
            Jp = np.zeros((m, 2, 3))
            Jp[:, 0, 0] = fx / z
            Jp[:, 0, 2] = -fx * Y[:, 0] / z**2
            Jp[:, 1, 1] = fy / z
            Jp[:, 1, 2] = -fy * Y[:, 1] / z**2
            Jw = np.einsum("mij,mjk->mik", Jp, -np.stack([_skew(p) for p in RX]))
            Jt = Jp
            Jrow = np.zeros((m, 2, n_params))
            Jrow[:, :, 6 * f : 6 * f + 3] = Jw
            Jrow[:, :, 6 * f + 3 : 6 * f + 6] = Jt
            if K:
                # d(cam point)/d alpha_k = R Q_k at the keypoint
                RQ = np.einsum("knc,dc->knd", basis.components[:, prob.kp_idx, :], R)
                Jrow[:, :, 6 * F :] = np.einsum("mij,kmj->mik", Jp, RQ)
            Jrow *= prob.sqrt_w[:, None, None]
            jblocks.append(Jrow.reshape(2 * m, n_params))

            if contact.size:
                RXc = X[contact] @ R.T
                Jg = np.zeros((contact.size, n_params))
                Jg[:, 6 * f : 6 * f + 3] = np.cross(RXc, n_c)
                Jg[:, 6 * f + 3 : 6 * f + 6] = n_c
                if K:
                    RQc = np.einsum("knc,dc->knd", basis.components[:, contact, :], R)
                    Jg[:, 6 * F :] = np.einsum("kmd,d->mk", RQc, n_c)
                jblocks.append(sg * Jg)

    if K:
        sl = np.sqrt(opts.shape_prior_weight)
        blocks.append(sl * alpha / basis.coefficient_scales)
        if with_jacobian:
            Jprior = np.zeros((K, n_params))
            Jprior[:, 6 * F :] = np.diag(sl / basis.coefficient_scales)
            jblocks.append(Jprior)

    r = np.concatenate(blocks) if blocks else np.zeros(0)
    if not with_jacobian:
        return r, None
    J = np.vstack(jblocks) if jblocks else np.zeros((0, n_params))
    return r, J


def _apply_step(poses, alpha, step, F, K):
    new_poses = []
    for f in range(F):
        w = step[6 * f : 6 * f + 3]
        dt = step[6 * f + 3 : 6 * f + 6]
        dq = axis_angle_to_quat(w)
        rotated = compose(RigidPose(dq, np.zeros(3)), RigidPose(poses[f].quaternion, np.zeros(3)))
        new_poses.append(RigidPose(rotated.quaternion, poses[f].translation + dt))
    new_alpha = alpha + step[6 * F :] if K else alpha
    return new_poses, new_alpha


def _optimize(camera, basis, problems, poses, alpha, opts: FitOptions):
    """Damped least squares over all frame poses and the shared coefficients."""
    F, K = len(problems), basis.n_components
    r, J = _stack_residuals(camera, basis, problems, poses, alpha, opts, True)
    if r is None:
        raise NonPositiveDepth("initial pose places keypoints at non-positive depth")
    with np.errstate(over="ignore"):
        cost = float(r @ r)
    history = [cost]
    A = J.T @ J
    g = J.T @ r
    mu = 1e-3 * float(np.max(np.diag(A))) if A.size else 1e-3
    converged = False

    for _ in range(opts.max_iterations):
        if not np.isfinite(cost):
            raise DivergedOptimization(f"cost diverged to {cost}")
        try:
            step = np.linalg.solve(A + mu * np.eye(A.shape[0]), -g)
        except np.linalg.LinAlgError:
            mu *= 2.0
            continue
        if np.linalg.norm(step) < opts.step_tolerance:
            converged = True
            break
        cand_poses, cand_alpha = _apply_step(poses, alpha, step, F, K)
        r_new, _ = _stack_residuals(camera, basis, problems, cand_poses, cand_alpha, opts, False)
        with np.errstate(over="ignore"):
            new_cost = float(r_new @ r_new) if r_new is not None else np.inf
        if new_cost < cost:
            # accepted steps never increase the objective
            assert new_cost <= cost
            poses, alpha = cand_poses, cand_alpha
            rel_drop = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            history.append(cost)
            r, J = _stack_residuals(camera, basis, problems, poses, alpha, opts, True)
            A = J.T @ J
            g = J.T @ r
            mu /= 3.0
            if rel_drop < opts.cost_tolerance:
                converged = True
                break
        else:
            mu *= 2.0

    return poses, alpha, cost, converged, tuple(history)


def _result_for_frame(camera, basis, problem, pose, alpha, converged, history) -> FitResult:
    X = instantiate(basis, ShapeCoefficients(alpha))
    rms = _reproj_rms(camera, pose.rotation, pose.translation, X[problem.kp_idx], problem.pixels)
    return FitResult(pose, ShapeCoefficients(alpha), rms, problem.n_inlier, converged, history)


def initial_fit(camera, basis, x2d: Keypoints2D, opts: FitOptions = FitOptions()) -> FitResult:
    """Closed-form initialization: pose on the mean shape, zero coefficients."""
    pose = epnp(camera, basis.mean_shape, x2d, opts.min_keypoints)
    problem = _build_frame_problem(x2d, opts)
    alpha = np.zeros(basis.n_components)
    return _result_for_frame(camera, basis, problem, pose, alpha, False, ())


def refine_pose(
    camera: CameraModel,
    basis: ShapeBasis,
    x2d: Keypoints2D,
    init: FitResult,
    opts: FitOptions = FitOptions(),
) -> FitResult:
    """Minimize the weighted reprojection error plus the shape prior from init.

    Visible keypoints weigh by confidence, self-occluded ones at half
    confidence; missing and occluded-by-others keypoints are excluded.
    """
    problem = _build_frame_problem(x2d, opts)
    single = replace(opts, ground_weight=0.0)
    poses, alpha, _, converged, history = _optimize(
        camera, basis, [problem], [init.pose], init.coeffs.alpha.copy(), single
    )
    return _result_for_frame(camera, basis, problem, poses[0], alpha, converged, history)


def fit_track(
    camera: CameraModel,
    basis: ShapeBasis,
    track: ObjectTrack,
    opts: FitOptions = FitOptions(),
) -> tuple[list[FitResult], ShapeCoefficients]:
    """Joint fit of one track: per-frame poses, one shared coefficient vector,
    and a ground-plane penalty on the wheel-contact keypoints."""
    if len(track) == 0:
        raise EmptyTrack("track has no frames")
    problems, poses = [], []
    for fr in track.frames:
        if fr.keypoints is None:
            raise TooFewPoints(f"frame {fr.frame_id} has no keypoints")
        init = initial_fit(camera, basis, fr.keypoints, opts)
        problems.append(_build_frame_problem(fr.keypoints, opts))
        poses.append(init.pose)
    alpha0 = np.zeros(basis.n_components)
    poses, alpha, _, converged, history = _optimize(camera, basis, problems, poses, alpha0, opts)
    results = [
        _result_for_frame(camera, basis, prob, pose, alpha, converged, history)
        for prob, pose in zip(problems, poses)
    ]
    return results, ShapeCoefficients(alpha)


def place_on_ground(camera: CameraModel, bbox, object_height: float = 1.7) -> RigidPose:
    """Upright pose at the ground intersection of the bbox bottom-center ray.

    The translation comes from the ray alone; object_height only documents
    the assumed metric height of the proxy the caller will attach. Yaw turns
    the object's forward axis toward the camera azimuth. Raises
    RayParallelToPlane or PointBehindCamera from the ground intersection.
    """
    x0, y0, x1, y1 = bbox
    foot = ground_point(camera, Pixel((x0 + x1) / 2.0, y1))
    n = camera.plane_normal
    up = -n
    toward_cam = -foot
    forward = toward_cam - (toward_cam @ n) * n
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        # object directly under the camera: face along the projected optical axis
        axis = np.array([0.0, 0.0, 1.0])
        forward = axis - (axis @ n) * n
        norm = np.linalg.norm(forward)
        if norm < 1e-9:
            forward = np.array([1.0, 0.0, 0.0]) - (np.array([1.0, 0.0, 0.0]) @ n) * n
            norm = np.linalg.norm(forward)
    forward = forward / norm
    R = np.column_stack([np.cross(up, forward), up, forward])
    return RigidPose.from_matrix(R, foot)
