"""Dense real linear algebra for small control problems.

Matrices are plain ``numpy`` float64 arrays; :func:`as_matrix` is the single
gatekeeper that enforces shape and finiteness.  The eigensolver is a
balanced Hessenberg reduction followed by Francis double-shift QR (compiled
with numba), with eigenvectors recovered by inverse iteration.
"""
from dataclasses import dataclass

import numba
import numpy as np

from lalqr.errors import (
    ConvergenceError,
    DefinitenessError,
    DimensionError,
    NonFiniteError,
    StabilizabilityError,
)

MAX_SIDE = 256
QR_SWEEP_CAP = 500


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array.

    1-D input is read as a column vector; scalars become 1x1.
    """
    arr = np.array(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def _square(a, name="matrix"):
    arr = as_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a real square matrix.

    ``eigenvectors[:, i]`` is the unit-norm vector paired with
    ``eigenvalues[i]``.  Pairs are sorted by descending modulus, ties by
    descending real part (then descending imaginary part).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def residuals(self, a):
        a = np.asarray(a, dtype=np.float64)
        r = a @ self.eigenvectors - self.eigenvectors * self.eigenvalues
        return np.linalg.norm(r, axis=0)


@dataclass(frozen=True)
class DareSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float


# ---------------------------------------------------------------------------
# eigenvalues: balance -> Hessenberg -> Francis QR
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _balance(a):
    n = a.shape[0]
    radix = 2.0
    sqrdx = radix * radix
    done = False
    while not done:
        done = True
        for i in range(n):
            r = 0.0
            c = 0.0
            for j in range(n):
                if j != i:
                    c += abs(a[j, i])
                    r += abs(a[i, j])
            if c != 0.0 and r != 0.0:
                g = r / radix
                f = 1.0
                s = c + r
                while c < g:
                    f *= radix
                    c *= sqrdx
                g = r * radix
                while c > g:
                    f /= radix
                    c /= sqrdx
                if (c + r) / f < 0.95 * s:
                    done = False
                    g = 1.0 / f
                    for j in range(n):
                        a[i, j] *= g
                    for j in range(n):
                        a[j, i] *= f


@numba.njit(cache=True)
def _hessenberg(a):
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1:, k].copy()
        alpha = np.sqrt(np.sum(x * x))
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x.copy()
        v[0] -= alpha
        vnorm2 = np.sum(v * v)
        if vnorm2 == 0.0:
            continue
        # H = I - 2 v v^T / (v^T v), applied from both sides
        for j in range(n):
            s = 0.0
            for i in range(n - k - 1):
                s += v[i] * a[k + 1 + i, j]
            s = 2.0 * s / vnorm2
            for i in range(n - k - 1):
                a[k + 1 + i, j] -= s * v[i]
        for i in range(n):
            s = 0.0
            for j in range(n - k - 1):
                s += a[i, k + 1 + j] * v[j]
            s = 2.0 * s / vnorm2
            for j in range(n - k - 1):
                a[i, k + 1 + j] -= s * v[j]
        for i in range(k + 2, n):
            a[i, k] = 0.0


@numba.njit(cache=True)
def _sign(a, b):
    return abs(a) if b >= 0.0 else -abs(a)


@numba.njit(cache=True)
def _hqr(h, max_sweeps):
    """Eigenvalues of an upper Hessenberg matrix (destroyed in place).

    Returns ``(wr, wi, ok, last_subdiag)``; indices are 1-based internally on a
    padded copy to keep the classic deflation logic intact.
    """
    n = h.shape[0]
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = h
    wr = np.zeros(n + 1)
    wi = np.zeros(n + 1)
    anorm = 0.0
    for i in range(1, n + 1):
        for j in range(max(i - 1, 1), n + 1):
            anorm += abs(a[i, j])
    nn = n
    t = 0.0
    x = y = z = w = p = q = r = s = 0.0
    while nn >= 1:
        its = 0
        while True:
            l = 1
            for ll in range(nn, 1, -1):
                s = abs(a[ll - 1, ll - 1]) + abs(a[ll, ll])
                if s == 0.0:
                    s = anorm
                if abs(a[ll, ll - 1]) + s == s:
                    a[ll, ll - 1] = 0.0
                    l = ll
                    break
            x = a[nn, nn]
            if l == nn:
                wr[nn] = x + t
                wi[nn] = 0.0
                nn -= 1
            else:
                y = a[nn - 1, nn - 1]
                w = a[nn, nn - 1] * a[nn - 1, nn]
                if l == nn - 1:
                    p = 0.5 * (y - x)
                    q = p * p + w
                    z = np.sqrt(abs(q))
                    x += t
                    if q >= 0.0:
                        z = p + _sign(z, p)
                        wr[nn - 1] = x + z
                        wr[nn] = x + z
                        if z != 0.0:
                            wr[nn] = x - w / z
                        wi[nn - 1] = 0.0
                        wi[nn] = 0.0
                    else:
                        wr[nn - 1] = x + p
                        wr[nn] = x + p
                        wi[nn - 1] = z
                        wi[nn] = -z
                    nn -= 2
                else:
                    if its >= max_sweeps:
                        return wr[1:], wi[1:], False, abs(a[nn, nn - 1])
                    if its > 0 and its % 10 == 0:
                        # exceptional shift
                        t += x
                        for i in range(1, nn + 1):
                            a[i, i] -= x
                        s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                        x = 0.75 * s
                        y = x
                        w = -0.4375 * s * s
                    its += 1
                    m = nn - 2
                    while m >= l:
                        z = a[m, m]
                        r = x - z
                        s = y - z
                        p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                        q = a[m + 1, m + 1] - z - r - s
                        r = a[m + 2, m + 1]
                        s = abs(p) + abs(q) + abs(r)
                        p /= s
                        q /= s
                        r /= s
                        if m == l:
                            break
                        u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                        v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                        if u + v == v:
                            break
                        m -= 1
                    for i in range(m + 2, nn + 1):
                        a[i, i - 2] = 0.0
                        if i != m + 2:
                            a[i, i - 3] = 0.0
                    for k in range(m, nn):
                        if k != m:
                            p = a[k, k - 1]
                            q = a[k + 1, k - 1]
                            r = 0.0
                            if k != nn - 1:
                                r = a[k + 2, k - 1]
                            x = abs(p) + abs(q) + abs(r)
                            if x != 0.0:
                                p /= x
                                q /= x
                                r /= x
                        s = _sign(np.sqrt(p * p + q * q + r * r), p)
                        if s != 0.0:
                            if k == m:
                                if l != m:
                                    a[k, k - 1] = -a[k, k - 1]
                            else:
                                a[k, k - 1] = -s * x
                            p += s
                            x = p / s
                            y = q / s
                            z = r / s
                            q /= p
                            r /= p
                            for j in range(k, nn + 1):
                                p = a[k, j] + q * a[k + 1, j]
                                if k != nn - 1:
                                    p += r * a[k + 2, j]
                                    a[k + 2, j] -= p * z
                                a[k + 1, j] -= p * y
                                a[k, j] -= p * x
                            mmin = nn if nn < k + 3 else k + 3
                            for i in range(l, mmin + 1):
                                p = x * a[i, k] + y * a[i, k + 1]
                                if k != nn - 1:
                                    p += z * a[i, k + 2]
                                    a[i, k + 2] -= p * r
                                a[i, k + 1] -= p * q
                                a[i, k] -= p
            if nn < 1 or l >= nn - 1:
                break
    return wr[1:], wi[1:], True, 0.0


def eigenvalues(a):
    """Eigenvalues of a real square matrix, unsorted."""
    a = _square(a)
    n = a.shape[0]
    if n > MAX_SIDE:
        raise DimensionError(f"side {n} exceeds the supported maximum {MAX_SIDE}")
    if n == 0:
        return np.zeros(0, dtype=complex)
    work = a.copy()
    _balance(work)
    _hessenberg(work)
    wr, wi, ok, sub = _hqr(work, QR_SWEEP_CAP)
    if not ok:
        raise ConvergenceError(
            f"QR iteration did not converge within {QR_SWEEP_CAP} sweeps", best_residual=sub
        )
    return wr + 1j * wi


def _inverse_iteration(a, lam, rng, tol):
    n = a.shape[0]
    scale = 1.0 + np.linalg.norm(a)
    eye = np.eye(n)
    best_v, best_res = None, np.inf
    for attempt in range(4):
        shift = lam + (10.0 ** attempt) * 1e-13 * scale * (1 + 1j if lam.imag else 1)
        m = a - shift * eye
        v = rng.standard_normal(n) + (1j * rng.standard_normal(n) if lam.imag else 0)
        v = v / np.linalg.norm(v)
        for _ in range(3):
            try:
                y = np.linalg.solve(m, v)
            except np.linalg.LinAlgError:
                break
            ny = np.linalg.norm(y)
            if not np.isfinite(ny) or ny == 0.0:
                break
            v = y / ny
        res = np.linalg.norm(a @ v - lam * v)
        if res < best_res:
            best_v, best_res = v, res
        if res <= tol:
            break
    return best_v, best_res


def eigen(a):
    """Eigenvalues and unit eigenvectors of a real square matrix.

    Raises:
        DimensionError: non-square input or side above 256.
        ConvergenceError: QR iteration or vector recovery failed.
    """
    a = _square(a)
    lam = eigenvalues(a)
    order = sorted(range(len(lam)), key=lambda i: (-abs(lam[i]), -lam[i].real, -lam[i].imag))
    lam = np.array([lam[i] for i in order], dtype=complex)
    n = a.shape[0]
    tol = 1e-8 * (1.0 + np.linalg.norm(a))
    rng = np.random.default_rng(0)
    vecs = np.zeros((n, n), dtype=complex)
    for i, li in enumerate(lam):
        if li.imag < 0 and i > 0 and lam[i - 1] == np.conj(li):
            vecs[:, i] = np.conj(vecs[:, i - 1])
            continue
        v, res = _inverse_iteration(a, li, rng, tol)
        if v is None or res > tol:
            raise ConvergenceError(
                f"eigenvector for {li:.6g} did not reach residual {tol:.3g}", best_residual=res
            )
        vecs[:, i] = v
    return EigenDecomposition(eigenvalues=lam, eigenvectors=vecs)


def spectral_radius(a):
    a = _square(a)
    if a.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(eigenvalues(a))))


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------


def _is_pd(m):
    try:
        np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        return False
    return True


def riccati_map(P, a, b, q, r):
    """One step of the Riccati recursion; returns ``(P_next, K)``."""
    bt_p = b.T @ P
    gram = r + bt_p @ b
    k = np.linalg.solve(gram, bt_p @ a)
    p_next = q + a.T @ P @ a - (a.T @ P @ b) @ k
    return 0.5 * (p_next + p_next.T), k


def dare_solve(a, b, q, r, max_iterations=10_000, tol=1e-10):
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates the Riccati recursion from ``P = q`` until successive iterates
    differ by at most ``tol * max(1, ||P||_F)``.  The gain is ``m x N`` so that
    ``u = -K z``.

    Raises:
        DimensionError: operands are not conformable.
        DefinitenessError: ``r`` is not positive definite.
        StabilizabilityError: the recursion diverged, stalled, or the fixed
            point is not closed-loop stable.
    """
    a = _square(a, "a")
    n = a.shape[0]
    b = as_matrix(b, "b")
    q = _square(q, "q")
    r = _square(r, "r")
    if b.shape[0] != n or q.shape[0] != n or r.shape[0] != b.shape[1]:
        raise DimensionError(
            f"non-conformable shapes a{a.shape} b{b.shape} q{q.shape} r{r.shape}"
        )
    if not _is_pd(r):
        raise DefinitenessError("r must be symmetric positive definite")
    P = 0.5 * (q + q.T)
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        P_next, _ = riccati_map(P, a, b, q, r)
        if not np.all(np.isfinite(P_next)) or np.linalg.norm(P_next) > 1e14:
            raise StabilizabilityError(f"Riccati recursion diverged after {iterations} steps")
        diff = np.linalg.norm(P_next - P)
        P = P_next
        if diff <= tol * max(1.0, np.linalg.norm(P)):
            converged = True
            break
    P_fix, _ = riccati_map(P, a, b, q, r)
    residual = float(np.linalg.norm(P - P_fix))
    if not converged or residual > 1e-8 * max(1.0, np.linalg.norm(P)):
        raise StabilizabilityError(
            f"Riccati recursion did not settle in {max_iterations} steps (residual {residual:.3g})"
        )
    K = np.linalg.solve(r + b.T @ P @ b, b.T @ P @ a)
    rho = spectral_radius(a - b @ K)
    if rho >= 1.0:
        raise StabilizabilityError(f"closed loop is not stable (spectral radius {rho:.6g})")
    return DareSolution(P=P, K=K, iterations=iterations, residual=residual)


def controllability_matrix(a, b):
    a = _square(a, "a")
    b = as_matrix(b, "b")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"b has {b.shape[0]} rows, a is {a.shape[0]}x{a.shape[0]}")
    blocks = [b]
    for _ in range(a.shape[0] - 1):
        blocks.append(a @ blocks[-1])
    return np.hstack(blocks)


def controllability_rank(a, b, tol=1e-9):
    """Numeric rank of ``[B, AB, ..., A^(N-1) B]`` with a relative SVD cutoff."""
    sv = np.linalg.svd(controllability_matrix(a, b), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv >= tol * sv[0]))
