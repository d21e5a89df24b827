"""Sparse Levenberg-Marquardt over keyframes, landmarks, and planes.

Landmark blocks are eliminated by Schur complement each attempt; the
reduced keyframe+plane system is solved by sparse LU with fill-reducing
ordering. The reduced-system sparsity pattern is frozen after the first
assembly and only values are rebuilt afterwards. A dense reference path
(``use_schur=False``) assembles the full normal equations and exists to
cross-check the elimination on small problems.

One iteration = one linearization; damping retries inside an iteration
redo only the (damped) elimination, solve, and trial cost. Accepted costs
are non-increasing by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import InvalidProblem, LinearSolveFailure
from .state import KF_BLOCK, GbaStates


@dataclass
class SolverConfig:
    max_iterations: int = 100
    max_time_s: float | None = 2.0
    damping_init_scale: float = 1e-4  # initial mu = scale * max(diag H)
    damping_up: float = 2.0  # on rejection
    damping_down: float = 1.0 / 3.0  # on acceptance
    tol_cost_rel: float = 1e-8
    tol_gradient: float = 1e-10
    max_retries: int = 8
    run_all_iterations: bool = False  # benchmark mode: no convergence exits
    use_schur: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SolveReport:
    iterations: int = 0
    residual_ms: float = 0.0
    jacobians_ms: float = 0.0
    linear_ms: float = 0.0
    pre_ms: float = 0.0  # filled by the pipeline: assembly + compression prep
    post_ms: float = 0.0  # filled by the pipeline: write-back + triangulation
    total_ms: float = 0.0  # wall clock of solve_lm
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = ""

    @property
    def sum_ms(self) -> float:
        return self.pre_ms + self.post_ms + self.total_ms

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual_ms": self.residual_ms,
            "jacobians_ms": self.jacobians_ms,
            "linear_ms": self.linear_ms,
            "pre_ms": self.pre_ms,
            "post_ms": self.post_ms,
            "sum_ms": self.sum_ms,
            "total_ms": self.total_ms,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
        }


class Problem:
    """Factor lists, state vector, and fixing masks for one solve.

    ``fixed_keyframes`` freezes whole 15-dim keyframe blocks (LBA's old
    frames); unless any keyframe is already fixed, ``gauge_first_pose``
    freezes the 6 pose dims of keyframe 0.
    """

    def __init__(self, states: GbaStates, reproj=None, imu_factors=(),
                 homography_points=None, homography_compressed=None,
                 point_plane_points=None, point_plane_compressed=None,
                 fixed_keyframes=None, gauge_first_pose: bool = True,
                 config: SolverConfig | None = None):
        self.states = states
        self.reproj = reproj
        self.imu_factors = list(imu_factors)
        self.homography_points = homography_points
        self.homography_compressed = homography_compressed
        self.point_plane_points = point_plane_points
        self.point_plane_compressed = point_plane_compressed
        self.fixed_keyframes = (
            np.zeros(states.n_keyframes, dtype=bool)
            if fixed_keyframes is None
            else np.asarray(fixed_keyframes, dtype=bool).copy()
        )
        self.gauge_first_pose = gauge_first_pose
        self.config = config or SolverConfig()
        self.validate()

    # -- structure ----------------------------------------------------------
    @property
    def n_reduced(self) -> int:
        return self.states.n_keyframes * KF_BLOCK + self.states.n_planes * 3

    def plane_offset(self, p) -> int:
        return self.states.n_keyframes * KF_BLOCK + 3 * p

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.n_reduced, dtype=bool)
        K = self.states.n_keyframes
        for k in np.flatnonzero(self.fixed_keyframes):
            mask[k * KF_BLOCK : (k + 1) * KF_BLOCK] = False
        if self.gauge_first_pose and not self.fixed_keyframes.any():
            mask[0:6] = False
        return mask

    def state_dimension(self) -> int:
        """Total optimized dimension including landmark blocks."""
        return self.n_reduced + 3 * self.states.n_landmarks

    def counts(self) -> dict:
        return {
            "keyframes": self.states.n_keyframes,
            "landmarks": self.states.n_landmarks,
            "planes": self.states.n_planes,
            "reproj": 0 if self.reproj is None else len(self.reproj),
            "imu": len(self.imu_factors),
            "homography_points": 0 if self.homography_points is None else len(self.homography_points),
            "homography_compressed": 0
            if self.homography_compressed is None
            else len(self.homography_compressed),
            "point_plane_points": 0 if self.point_plane_points is None else len(self.point_plane_points),
            "point_plane_compressed": 0
            if self.point_plane_compressed is None
            else len(self.point_plane_compressed),
        }

    def validate(self):
        K, L, P = self.states.n_keyframes, self.states.n_landmarks, self.states.n_planes
        def _check(idx, bound, what):
            idx = np.asarray(idx)
            if idx.size and (idx.min() < 0 or idx.max() >= bound):
                raise InvalidProblem(f"{what} index out of range [0, {bound})")
        if self.reproj is not None:
            _check(self.reproj.kf_idx, K, "reprojection keyframe")
            _check(self.reproj.lm_idx, L, "reprojection landmark")
        for f in self.imu_factors:
            _check([f.frame_i, f.frame_j], K, "imu keyframe")
        for b in (self.homography_points, self.homography_compressed):
            if b is not None:
                _check(b.i_idx, K, "homography keyframe")
                _check(b.j_idx, K, "homography keyframe")
                _check(b.plane_idx, P, "homography plane")
        for b in (self.point_plane_points, self.point_plane_compressed):
            if b is not None:
                _check(b.kf_idx, K, "point-to-plane keyframe")
                _check(b.plane_idx, P, "point-to-plane plane")
        if self.fixed_keyframes.shape[0] != K:
            raise InvalidProblem("fixed_keyframes mask length mismatch")

    # -- cost ----------------------------------------------------------------
    def total_cost(self, states=None) -> float:
        from ..factors.imu import eval_imu

        states = states or self.states
        cost = 0.0
        if self.reproj is not None:
            cost += self.reproj.cost(states)
        for f in self.imu_factors:
            r, _, _ = eval_imu(f, states)
            cost += 0.5 * float(r @ r)
        for b in (
            self.homography_points,
            self.homography_compressed,
            self.point_plane_points,
            self.point_plane_compressed,
        ):
            if b is not None:
                cost += b.cost(states)
        return cost


class _PatternCache:
    """Frozen COO->CSC mapping so repeated assemblies only rebuild values."""

    def __init__(self):
        self.frozen = False
        self.rows = []
        self.cols = []
        self.map = None
        self.template = None

    def freeze(self, n):
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        keys = rows.astype(np.int64) * n + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.map = inverse
        data = np.zeros(uniq.shape[0])
        csr = sp.csr_matrix((data, (uniq // n, uniq % n)), shape=(n, n))
        csr.sort_indices()
        self.template = csr
        self.rows = self.cols = None
        self.frozen = True

    def build(self, values, n) -> sp.csr_matrix:
        if not self.frozen:
            self.freeze(n)
        data = np.bincount(self.map, weights=values, minlength=self.template.nnz)
        out = self.template.copy()
        out.data = data
        return out


def _block_indices(row_base, col_base, r, c):
    """COO index arrays for M dense blocks of shape (r, c)."""
    M = row_base.shape[0]
    rr = (row_base[:, None, None] + np.arange(r)[None, :, None]).astype(np.int64)
    cc = (col_base[:, None, None] + np.arange(c)[None, None, :]).astype(np.int64)
    return np.broadcast_to(rr, (M, r, c)).ravel(), np.broadcast_to(cc, (M, r, c)).ravel()


class _Linearization:
    """All block contributions of one linearization point."""

    def __init__(self, problem: Problem):
        self.problem = problem
        K = problem.states.n_keyframes
        P = problem.states.n_planes
        L = problem.states.n_landmarks
        self.kf_diag = np.zeros((K, KF_BLOCK, KF_BLOCK))
        self.plane_diag = np.zeros((P, 3, 3))
        self.b = np.zeros(problem.n_reduced)
        self.off_blocks = []  # (row_base [M], col_base [M], blocks [M, r, c])
        self.D = np.zeros((L, 3, 3))
        self.bl = np.zeros((L, 3))
        self.W = None  # [N_obs, 6, 3]
        self.obs_kf = None
        self.obs_lm = None


def _linearize(problem: Problem, states) -> _Linearization:
    from ..factors.imu import eval_imu

    lin = _Linearization(problem)
    K = states.n_keyframes

    if problem.reproj is not None and len(problem.reproj):
        bun = problem.reproj
        r, J_pose, J_lm, _ = bun.linearize(states)
        np.add.at(
            lin.kf_diag[:, 0:6, 0:6], bun.kf_idx, np.einsum("nij,nik->njk", J_pose, J_pose)
        )
        np.add.at(lin.D, bun.lm_idx, np.einsum("nij,nik->njk", J_lm, J_lm))
        lin.W = np.einsum("nij,nik->njk", J_pose, J_lm)
        g_pose = np.einsum("nij,ni->nj", J_pose, r)
        bk = np.zeros((K, 6))
        np.add.at(bk, bun.kf_idx, g_pose)
        lin.b[: K * KF_BLOCK].reshape(K, KF_BLOCK)[:, 0:6] -= bk
        np.add.at(lin.bl, bun.lm_idx, np.einsum("nij,ni->nj", J_lm, r))
        lin.obs_kf = bun.kf_idx
        lin.obs_lm = bun.lm_idx

    for f in problem.imu_factors:
        r, J_i, J_j = eval_imu(f, states)
        i, j = f.frame_i, f.frame_j
        lin.kf_diag[i] += J_i.T @ J_i
        lin.kf_diag[j] += J_j.T @ J_j
        lin.off_blocks.append(
            (
                np.array([i * KF_BLOCK]),
                np.array([j * KF_BLOCK]),
                (J_i.T @ J_j)[None],
            )
        )
        lin.b[i * KF_BLOCK : (i + 1) * KF_BLOCK] -= J_i.T @ r
        lin.b[j * KF_BLOCK : (j + 1) * KF_BLOCK] -= J_j.T @ r

    if problem.homography_points is not None and len(problem.homography_points):
        bun = problem.homography_points
        r, J, _ = bun.linearize(states)
        blocks = np.einsum("nri,nrj->nij", J, J)  # per-point 15x15 over the stacked columns
        grad = np.einsum("nri,nr->ni", J, r)
        G = bun.n_groups
        acc = np.zeros((G, 15, 15))
        np.add.at(acc, bun.group_of, blocks)
        gacc = np.zeros((G, 15))
        np.add.at(gacc, bun.group_of, grad)
        _scatter_pose_pose_plane(lin, bun.i_idx, bun.j_idx, bun.plane_idx, acc, gacc)

    if problem.homography_compressed is not None and len(problem.homography_compressed):
        bun = problem.homography_compressed
        r, J, _ = bun.linearize(states)
        acc = np.einsum("gri,grj->gij", J, J)
        gacc = np.einsum("gri,gr->gi", J, r)
        _scatter_pose_pose_plane(lin, bun.i_idx, bun.j_idx, bun.plane_idx, acc, gacc)

    if problem.point_plane_points is not None and len(problem.point_plane_points):
        bun = problem.point_plane_points
        r, J = bun.linearize(states)
        blocks = np.einsum("ni,nj->nij", J, J)
        grad = J * r[:, None]
        G = bun.n_groups
        acc = np.zeros((G, 9, 9))
        np.add.at(acc, bun.group_of, blocks)
        gacc = np.zeros((G, 9))
        np.add.at(gacc, bun.group_of, grad)
        _scatter_pose_plane(lin, bun.kf_idx, bun.plane_idx, acc, gacc)

    if problem.point_plane_compressed is not None and len(problem.point_plane_compressed):
        bun = problem.point_plane_compressed
        r, J = bun.linearize(states)
        acc = np.einsum("gri,grj->gij", J, J)
        gacc = np.einsum("gri,gr->gi", J, r)
        _scatter_pose_plane(lin, bun.kf_idx, bun.plane_idx, acc, gacc)

    return lin


def _scatter_pose_pose_plane(lin, i_idx, j_idx, plane_idx, acc, gacc):
    """Scatter grouped 15x15 blocks over columns [pose_i(6), pose_j(6), plane(3)]."""
    K = lin.problem.states.n_keyframes
    np.add.at(lin.kf_diag[:, 0:6, 0:6], i_idx, acc[:, 0:6, 0:6])
    np.add.at(lin.kf_diag[:, 0:6, 0:6], j_idx, acc[:, 6:12, 6:12])
    np.add.at(lin.plane_diag, plane_idx, acc[:, 12:15, 12:15])
    row_i = i_idx * KF_BLOCK
    row_j = j_idx * KF_BLOCK
    row_p = K * KF_BLOCK + 3 * plane_idx
    lin.off_blocks.append((row_i, row_j, acc[:, 0:6, 6:12]))
    lin.off_blocks.append((row_i, row_p, acc[:, 0:6, 12:15]))
    lin.off_blocks.append((row_j, row_p, acc[:, 6:12, 12:15]))
    bk = np.zeros((K, 6))
    np.add.at(bk, i_idx, gacc[:, 0:6])
    np.add.at(bk, j_idx, gacc[:, 6:12])
    lin.b[: K * KF_BLOCK].reshape(K, KF_BLOCK)[:, 0:6] -= bk
    bp = np.zeros((lin.problem.states.n_planes, 3))
    np.add.at(bp, plane_idx, gacc[:, 12:15])
    lin.b[K * KF_BLOCK :].reshape(-1, 3)[:] -= bp


def _scatter_pose_plane(lin, kf_idx, plane_idx, acc, gacc):
    """Scatter grouped 9x9 blocks over columns [pose(6), plane(3)]."""
    K = lin.problem.states.n_keyframes
    np.add.at(lin.kf_diag[:, 0:6, 0:6], kf_idx, acc[:, 0:6, 0:6])
    np.add.at(lin.plane_diag, plane_idx, acc[:, 6:9, 6:9])
    row_k = kf_idx * KF_BLOCK
    row_p = K * KF_BLOCK + 3 * plane_idx
    lin.off_blocks.append((row_k, row_p, acc[:, 0:6, 6:9]))
    bk = np.zeros((K, 6))
    np.add.at(bk, kf_idx, gacc[:, 0:6])
    lin.b[: K * KF_BLOCK].reshape(K, KF_BLOCK)[:, 0:6] -= bk
    bp = np.zeros((lin.problem.states.n_planes, 3))
    np.add.at(bp, plane_idx, gacc[:, 6:9])
    lin.b[K * KF_BLOCK :].reshape(-1, 3)[:] -= bp


class _SchurSolver:
    """Schur elimination of landmarks plus sparse solve of the reduced system."""

    def __init__(self, problem: Problem):
        self.problem = problem
        self.pattern = _PatternCache()
        self.pair_a = None
        self.pair_b = None

    def _build_pairs(self, obs_lm):
        # All (a, b) observation index pairs sharing a landmark; order is the
        # deterministic sorted-by-landmark order.
        order = np.argsort(obs_lm, kind="stable")
        sorted_lm = obs_lm[order]
        starts = np.flatnonzero(np.r_[True, sorted_lm[1:] != sorted_lm[:-1]])
        counts = np.diff(np.r_[starts, sorted_lm.shape[0]])
        pa, pb = [], []
        for s, c in zip(starts, counts):
            idx = order[s : s + c]
            pa.append(np.repeat(idx, c))
            pb.append(np.tile(idx, c))
        self.pair_a = np.concatenate(pa) if pa else np.empty(0, dtype=np.int64)
        self.pair_b = np.concatenate(pb) if pb else np.empty(0, dtype=np.int64)

    def step(self, lin: _Linearization, mu: float):
        """Solve the damped system; returns (kf_delta, plane_delta, lm_delta)."""
        pr = self.problem
        states = pr.states
        K, P, L = states.n_keyframes, states.n_planes, states.n_landmarks
        n = pr.n_reduced

        values = []
        fresh = not self.pattern.frozen
        if fresh:
            rows, cols = self.pattern.rows, self.pattern.cols

        def emit(row_base, col_base, blocks, symmetric_pair=True):
            r, c = blocks.shape[1], blocks.shape[2]
            values.append(blocks.ravel())
            if symmetric_pair:
                values.append(blocks.transpose(0, 2, 1).ravel())
            if fresh:
                ri, ci = _block_indices(row_base, col_base, r, c)
                rows.append(ri)
                cols.append(ci)
                if symmetric_pair:
                    # transposed values iterate (m, col, row); indices must match
                    ri2, ci2 = _block_indices(col_base, row_base, c, r)
                    rows.append(ri2)
                    cols.append(ci2)

        kf_diag = lin.kf_diag + mu * np.eye(KF_BLOCK)
        emit(np.arange(K) * KF_BLOCK, np.arange(K) * KF_BLOCK, kf_diag, symmetric_pair=False)
        if P:
            base = K * KF_BLOCK + 3 * np.arange(P)
            emit(base, base, lin.plane_diag + mu * np.eye(3), symmetric_pair=False)
        for row_base, col_base, blocks in lin.off_blocks:
            emit(row_base, col_base, blocks)

        # lin.b is already the rhs (-gradient) of the reduced part; lin.bl is
        # the raw landmark gradient, so the landmark rhs is -lin.bl.
        rhs = lin.b.copy()
        lm_delta = None
        if L and lin.W is not None:
            Dd = lin.D + mu * np.eye(3)
            Dinv = np.linalg.inv(Dd)
            Y = np.matmul(lin.W, Dinv[lin.obs_lm])  # [N,6,3]
            if self.pair_a is None:
                self._build_pairs(lin.obs_lm)
            SB = -np.matmul(Y[self.pair_a], lin.W[self.pair_b].transpose(0, 2, 1))
            emit(lin.obs_kf[self.pair_a] * KF_BLOCK, lin.obs_kf[self.pair_b] * KF_BLOCK, SB,
                 symmetric_pair=False)
            gk = np.einsum("nij,nj->ni", Y, lin.bl[lin.obs_lm])
            acc = np.zeros((K, 6))
            np.add.at(acc, lin.obs_kf, gk)
            # rhs_reduced = b - Y * rhs_lm = b - Y * (-bl) = b + Y bl
            rhs[: K * KF_BLOCK].reshape(K, KF_BLOCK)[:, 0:6] += acc

        S = self.pattern.build(np.concatenate(values), n)
        free = pr.free_mask()
        S_free = S[free][:, free].tocsc()
        try:
            lu = spla.splu(S_free)
            x = lu.solve(rhs[free])
        except RuntimeError as exc:
            raise LinearSolveFailure(str(exc)) from exc
        if not np.all(np.isfinite(x)):
            raise LinearSolveFailure("non-finite reduced solution")
        delta = np.zeros(n)
        delta[free] = x

        if L and lin.W is not None:
            # Back-substitution: delta_lm = Dinv (rhs_lm - W^T delta_pose)
            pose_delta = delta[: K * KF_BLOCK].reshape(K, KF_BLOCK)[:, 0:6]
            u = np.einsum("nij,ni->nj", lin.W, pose_delta[lin.obs_kf])
            acc = np.zeros((L, 3))
            np.add.at(acc, lin.obs_lm, u)
            lm_delta = np.einsum("lij,lj->li", Dinv, -lin.bl - acc)
        elif L:
            lm_delta = np.zeros((L, 3))

        kf_delta = delta[: K * KF_BLOCK].reshape(K, KF_BLOCK)
        plane_delta = delta[K * KF_BLOCK :].reshape(P, 3) if P else None
        return kf_delta, plane_delta, lm_delta


def _dense_step(problem: Problem, lin: _Linearization, mu: float):
    """Reference path: full dense normal equations including landmarks."""
    states = problem.states
    K, P, L = states.n_keyframes, states.n_planes, states.n_landmarks
    n_red = problem.n_reduced
    n = n_red + 3 * L
    H = np.zeros((n, n))
    for k in range(K):
        H[k * KF_BLOCK : (k + 1) * KF_BLOCK, k * KF_BLOCK : (k + 1) * KF_BLOCK] += lin.kf_diag[k]
    for p in range(P):
        off = problem.plane_offset(p)
        H[off : off + 3, off : off + 3] += lin.plane_diag[p]
    for row_base, col_base, blocks in lin.off_blocks:
        r, c = blocks.shape[1], blocks.shape[2]
        for m in range(row_base.shape[0]):
            H[row_base[m] : row_base[m] + r, col_base[m] : col_base[m] + c] += blocks[m]
            H[col_base[m] : col_base[m] + c, row_base[m] : row_base[m] + r] += blocks[m].T
    b = np.zeros(n)
    b[:n_red] = lin.b
    if L:
        for l in range(L):
            off = n_red + 3 * l
            H[off : off + 3, off : off + 3] += lin.D[l]
            b[off : off + 3] -= lin.bl[l]
        if lin.W is not None:
            for m in range(lin.obs_kf.shape[0]):
                r0 = lin.obs_kf[m] * KF_BLOCK
                c0 = n_red + 3 * lin.obs_lm[m]
                H[r0 : r0 + 6, c0 : c0 + 3] += lin.W[m]
                H[c0 : c0 + 3, r0 : r0 + 6] += lin.W[m].T
    H[np.diag_indices(n)] += mu
    free = np.concatenate([problem.free_mask(), np.ones(3 * L, dtype=bool)])
    delta = np.zeros(n)
    try:
        delta[free] = np.linalg.solve(H[np.ix_(free, free)], b[free])
    except np.linalg.LinAlgError as exc:
        raise LinearSolveFailure(str(exc)) from exc
    kf_delta = delta[: K * KF_BLOCK].reshape(K, KF_BLOCK)
    plane_delta = delta[K * KF_BLOCK : n_red].reshape(P, 3) if P else None
    lm_delta = delta[n_red:].reshape(L, 3) if L else None
    return kf_delta, plane_delta, lm_delta


def solve_lm(problem: Problem, config: SolverConfig | None = None):
    """Minimize the problem's total cost; returns (states, SolveReport)."""
    cfg = config or problem.config
    t_start = time.perf_counter()
    report = SolveReport()
    states = problem.states

    t0 = time.perf_counter()
    cost = problem.total_cost(states)
    report.residual_ms += (time.perf_counter() - t0) * 1e3
    report.initial_cost = cost

    schur = _SchurSolver(problem) if cfg.use_schur else None
    mu = None
    termination = "max_iterations"

    for it in range(cfg.max_iterations):
        if cfg.max_time_s is not None and time.perf_counter() - t_start > cfg.max_time_s:
            termination = "max_time"
            break
        report.iterations = it + 1

        t0 = time.perf_counter()
        lin = _linearize(problem, states)
        report.jacobians_ms += (time.perf_counter() - t0) * 1e3

        if not cfg.run_all_iterations:
            grad_free = np.abs(lin.b[problem.free_mask()])
            if grad_free.size and grad_free.max() < cfg.tol_gradient:
                termination = "converged_gradient"
                break

        if mu is None:
            diag_max = max(
                lin.kf_diag.diagonal(axis1=1, axis2=2).max() if states.n_keyframes else 0.0,
                lin.plane_diag.diagonal(axis1=1, axis2=2).max() if states.n_planes else 0.0,
                lin.D.diagonal(axis1=1, axis2=2).max() if states.n_landmarks else 0.0,
            )
            mu = cfg.damping_init_scale * max(diag_max, 1e-12)

        accepted = False
        for _retry in range(cfg.max_retries):
            t0 = time.perf_counter()
            try:
                if cfg.use_schur:
                    kf_d, pl_d, lm_d = schur.step(lin, mu)
                else:
                    kf_d, pl_d, lm_d = _dense_step(problem, lin, mu)
                solve_ok = True
            except LinearSolveFailure:
                solve_ok = False
            report.linear_ms += (time.perf_counter() - t0) * 1e3

            if solve_ok:
                trial = states.boxplus(kf_d, lm_d, pl_d)
                t0 = time.perf_counter()
                trial_cost = problem.total_cost(trial)
                report.residual_ms += (time.perf_counter() - t0) * 1e3
                if np.isfinite(trial_cost) and trial_cost <= cost:
                    states = trial
                    prev_cost = cost
                    cost = trial_cost
                    mu *= cfg.damping_down
                    accepted = True
                    break
            mu *= cfg.damping_up
        if not accepted:
            if not solve_ok:
                raise LinearSolveFailure(
                    "linear solve failed after damping retries"
                )
            termination = "no_decrease"
            break
        if not cfg.run_all_iterations:
            if prev_cost > 0 and (prev_cost - cost) / max(prev_cost, 1e-300) < cfg.tol_cost_rel:
                termination = "converged_cost"
                break
    else:
        termination = "max_iterations"

    report.final_cost = cost
    report.termination = termination
    report.total_ms = (time.perf_counter() - t_start) * 1e3
    return states, report
