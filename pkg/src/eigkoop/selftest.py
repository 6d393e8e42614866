"""Fast oracle-based self checks run by ``eigkoop selftest``.

Each check compares a library routine against an independent computation
(finite differences, dense least squares, enumeration, a stage-form KKT
solve) on small random instances and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .dynamics import make_rng
from .eigfun import propagate_values
from .mpc import MpcSpec, condense, solve_qp
from .predictor import LinearPredictor
from .qp import solve_dense_qp
from .spectrum import LambdaObjective, objective_gradient, objective_value, vandermonde


def _random_objective(rng, Mt=3, Ms=15, Ni=2, Ts=0.1):
    H = rng.standard_normal((Ms + 1, Mt)) + 1j * rng.standard_normal((Ms + 1, Mt))
    lam = rng.uniform(-1, 0.3, Ni) + 1j * rng.uniform(-2, 2, Ni)
    return LambdaObjective(H, Ts, Ni), lam


def check_gradient(rng, instances=5):
    worst = 0.0
    for _ in range(instances):
        obj, lam = _random_objective(rng)
        g = objective_gradient(obj, lam)
        fd = np.empty_like(g)
        for j in range(len(lam)):
            for part, d in ((0, 1.0), (1, 1j)):
                e = 1e-6 * max(1.0, abs(lam[j]))
                lp, lm = lam.copy(), lam.copy()
                lp[j] += e * d
                lm[j] -= e * d
                fd[2 * j + part] = (objective_value(obj, lp) - objective_value(obj, lm)) / (2 * e)
        worst = max(worst, np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))))
    return "gradient vs central differences", bool(worst < 1e-4), f"max rel err {worst:.2e}"


def check_residual(rng, instances=5):
    worst = 0.0
    for _ in range(instances):
        obj, lam = _random_objective(rng)
        V = vandermonde(lam, obj.H.shape[0] - 1, obj.Ts)
        G = np.linalg.lstsq(V, obj.H, rcond=None)[0]
        r = np.linalg.norm(obj.H - V @ G) ** 2
        p = objective_value(obj, lam)
        worst = max(worst, abs(p - r) / max(r, 1e-300))
    return "projection residual identity", bool(worst < 1e-8), f"max rel err {worst:.2e}"


def check_propagation(rng):
    lam = rng.uniform(-1, 1, 3) + 1j * rng.uniform(-3, 3, 3)
    G = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    Ts, Ms = 0.01, 50
    vals = propagate_values(G, lam, Ts, Ms).reshape(3, 4, Ms + 1)
    mu = np.exp(lam * Ts)[:, None, None]
    err = np.abs(vals[:, :, 1:] - mu * vals[:, :, :-1])
    ulp = np.spacing(np.abs(vals[:, :, 1:]))
    worst = float(np.max(err / np.maximum(ulp, np.finfo(float).tiny)))
    return "eigenfunction propagation", bool(worst <= 10), f"max {worst:.1f} ulp"


def _enumerate(P, c, A, b):
    n, p = P.shape[0], A.shape[0]
    for k in range(min(n, p) + 1):
        for S in combinations(range(p), k):
            S = list(S)
            K = np.block([[P, A[S].T], [A[S], np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-c, b[S]]))
            except np.linalg.LinAlgError:
                continue
            if np.all(sol[n:] >= -1e-9) and np.all(A @ sol[:n] <= b + 1e-9):
                return sol[:n]
    raise RuntimeError("enumeration found no optimum")


def check_qp(rng, instances=10):
    worst = 0.0
    for _ in range(instances):
        n, p = 4, 8
        G = rng.standard_normal((n, n))
        P = G @ G.T + np.eye(n)
        c = rng.standard_normal(n) * 2
        A = rng.standard_normal((p, n))
        b = rng.uniform(0.1, 1.0, p)
        sol = solve_dense_qp(P, c, A, b)
        worst = max(worst, np.max(np.abs(sol.u - _enumerate(P, c, A, b))))
    return "QP vs active-set enumeration", bool(worst < 1e-5), f"max err {worst:.2e}"


def check_condensation(rng, instances=5):
    worst = 0.0
    for _ in range(instances):
        N, m, nh, Np = 3, 1, 2, 4
        Ad = 0.6 * rng.standard_normal((N, N))
        Bd = rng.standard_normal((N, m))
        C = rng.standard_normal((nh, N))
        pred = LinearPredictor(np.zeros((N, N)), C, 0.1, Ad=Ad, Bd=Bd)
        Q, R = np.eye(nh), 0.5 * np.eye(m)
        z0 = rng.standard_normal(N)
        u_dense = solve_qp(condense(MpcSpec(Np, Q, R), pred), z0).u
        # Stage form: variables [z_0..z_Np, u_0..u_{Np-1}] with dynamics as equalities.
        nz, nu = (Np + 1) * N, Np * m
        H = np.zeros((nz + nu, nz + nu))
        for i in range(Np + 1):
            H[i * N:(i + 1) * N, i * N:(i + 1) * N] = 2 * C.T @ Q @ C
        H[nz:, nz:] = np.kron(np.eye(Np), 2 * R)
        Aeq = np.zeros((nz, nz + nu))
        beq = np.zeros(nz)
        Aeq[:N, :N] = np.eye(N)
        beq[:N] = z0
        for i in range(Np):
            r = slice((i + 1) * N, (i + 2) * N)
            Aeq[r, (i + 1) * N:(i + 2) * N] = np.eye(N)
            Aeq[r, i * N:(i + 1) * N] = -Ad
            Aeq[r, nz + i * m:nz + (i + 1) * m] = -Bd
        K = np.block([[H, Aeq.T], [Aeq, np.zeros((nz, nz))]])
        w = np.linalg.lstsq(K, np.concatenate([np.zeros(nz + nu), beq]), rcond=None)[0]
        worst = max(worst, np.max(np.abs(u_dense[:m] - w[nz:nz + m])))
    return "dense vs stage-form MPC", bool(worst < 1e-6), f"max first-input err {worst:.2e}"


CHECKS = (check_gradient, check_residual, check_propagation, check_qp, check_condensation)


def run(seed: int = 0):
    rng = make_rng(seed, 123)
    return [check(rng) for check in CHECKS]
