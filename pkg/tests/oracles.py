"""Independent reference implementations used to check the package.

Everything here is written as plain nested loops / direct formulas with no
imports from sweepreg, so agreement is evidence rather than tautology.
"""
import math

import numpy as np


# ---------------------------------------------------------------------------
# convolution

def conv_same_oracle(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Nested-loop n-d cross-correlation, zero 'same' padding, ceil-div output.

    x: (N, C_in, *spatial), w: (C_out, C_in, *kernel).  Padding puts the
    extra element on the high side when the total is odd.
    """
    nd = x.ndim - 2
    ks = w.shape[2:]
    outs = []
    los = []
    for n, k in zip(x.shape[2:], ks):
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        los.append(total // 2)
        outs.append(out)
    y = np.zeros((x.shape[0], w.shape[0]) + tuple(outs), dtype=np.float64)
    for idx in np.ndindex(*y.shape):
        b, co = idx[0], idx[1]
        opos = idx[2:]
        acc = 0.0
        for ci in range(x.shape[1]):
            for kidx in np.ndindex(*ks):
                src = tuple(o * stride - lo + kk
                            for o, lo, kk in zip(opos, los, kidx))
                if all(0 <= s < n for s, n in zip(src, x.shape[2:])):
                    acc += float(x[(b, ci) + src]) * float(w[(co, ci) + kidx])
        y[idx] = acc
    return y


# ---------------------------------------------------------------------------
# finite differences

def central_diff_grad(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Central finite-difference gradient of scalar f w.r.t. every entry."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(np.asarray(a, dtype=np.float64).ravel()))
    nb = float(np.linalg.norm(np.asarray(b, dtype=np.float64).ravel()))
    diff = float(np.linalg.norm((np.asarray(a, dtype=np.float64)
                                 - np.asarray(b, dtype=np.float64)).ravel()))
    return diff / max(na, nb, 1e-12)


# ---------------------------------------------------------------------------
# matching chain

def similarity_oracle(us: np.ndarray, mr: np.ndarray, alpha: float) -> np.ndarray:
    """(M+1, N+1) scores: scalar-loop dot products, sink row/col = alpha."""
    m, d = us.shape
    n = mr.shape[0]
    s = np.zeros((m + 1, n + 1), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc += float(us[i, k]) * float(mr[j, k])
            s[i, j] = acc
    for j in range(n + 1):
        s[m, j] = alpha
    for i in range(m + 1):
        s[i, n] = alpha
    return s


def dual_softmax_oracle(s: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row softmax times column softmax, scalar loops, max-shifted."""
    s = np.asarray(s, dtype=np.float64) / temperature
    rows, cols = s.shape
    r = np.zeros_like(s)
    for i in range(rows):
        mx = max(s[i, j] for j in range(cols))
        denom = sum(math.exp(s[i, j] - mx) for j in range(cols))
        for j in range(cols):
            r[i, j] = math.exp(s[i, j] - mx) / denom
    c = np.zeros_like(s)
    for j in range(cols):
        mx = max(s[i, j] for i in range(rows))
        denom = sum(math.exp(s[i, j] - mx) for i in range(rows))
        for i in range(rows):
            c[i, j] = math.exp(s[i, j] - mx) / denom
    return r * c


def weights_oracle(targets: dict[int, int | None], beta: float, policy: str,
                   n_us: int, mr_dims: tuple[int, ...]) -> np.ndarray:
    """targets maps us_cell -> mr flat cell (None = outside the grid)."""
    n_mr = 1
    for g in mr_dims:
        n_mr *= g
    w = np.zeros((n_us + 1, n_mr + 1), dtype=np.float64)
    for i, tgt in targets.items():
        if tgt is None:
            if policy == "outside_only":
                w[i, n_mr] = 1.0
            continue
        tz = np.unravel_index(tgt, mr_dims)
        for j in range(n_mr):
            jz = np.unravel_index(j, mr_dims)
            dist = math.sqrt(sum((float(a) - float(b)) ** 2
                                 for a, b in zip(jz, tz)))
            w[i, j] = math.exp(-beta * dist)
    if policy == "full_sink":
        for j in range(n_mr + 1):
            w[n_us, j] = 1.0
        for i in range(n_us + 1):
            w[i, n_mr] = 1.0
    return w


def loss_oracle(a: np.ndarray, w: np.ndarray) -> float:
    total = 0.0
    wsum = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if w[i, j] > 0:
                total += float(w[i, j]) * math.log(float(a[i, j]))
                wsum += float(w[i, j])
    return -total / wsum


def extract_oracle(a: np.ndarray, n_us: int, n_mr: int, threshold: float,
                   mutual: bool) -> list[tuple[int, int, float]]:
    """Exhaustive scan: row best above threshold, optional mutual check.

    Argmax ties break toward the lower index (first hit in the scan).
    Output sorted by descending confidence, then (i, j).
    """
    real = np.asarray(a, dtype=np.float64)[:n_us, :n_mr]
    out = []
    for i in range(n_us):
        bj, bv = 0, -math.inf
        for j in range(n_mr):
            if real[i, j] > bv:
                bj, bv = j, real[i, j]
        if bv < threshold:
            continue
        if mutual:
            bi, biv = 0, -math.inf
            for k in range(n_us):
                if real[k, bj] > biv:
                    bi, biv = k, real[k, bj]
            if bi != i:
                continue
        out.append((i, bj, bv))
    out.sort(key=lambda t: (-t[2], t[0], t[1]))
    return out


# ---------------------------------------------------------------------------
# geometry

def quat_rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle between rotations via the relative quaternion's scalar part."""
    m = np.asarray(ra, dtype=np.float64) @ np.asarray(rb, dtype=np.float64).T
    t = np.trace(m)
    qw = math.sqrt(max(0.0, (t + 1.0))) / 2.0
    return math.degrees(2.0 * math.acos(min(1.0, qw)))


def nearest_center_bruteforce(point_mm: np.ndarray, grid_dims: tuple[int, ...],
                              spacing: float, stride: int = 8) -> int | None:
    """Scan every cell center; None when outside the pixel-center span.

    Mirrors the documented outside rule: grid-local pixel coordinate beyond
    [0, stride * extent - 1] on any axis.  Identity grid pose assumed.
    """
    p = np.asarray(point_mm, dtype=np.float64)
    px = p / spacing
    for a, g in enumerate(grid_dims):
        if px[a] < 0.0 or px[a] > stride * g - 1:
            return None
    best = None
    best_d = math.inf
    for flat, idx in enumerate(np.ndindex(*grid_dims)):
        center = (np.asarray(idx, dtype=np.float64) + 0.5) * stride - 0.5
        d = float(np.linalg.norm(px - center))
        if d < best_d - 1e-12:
            best_d = d
            best = flat
    return best


def trilinear_oracle(vol: np.ndarray, p: np.ndarray) -> float:
    """Scalar trilinear interpolation; 0 outside the voxel-center span."""
    x, y, z = (float(v) for v in p)
    nx, ny, nz = vol.shape
    if not (0 <= x <= nx - 1 and 0 <= y <= ny - 1 and 0 <= z <= nz - 1):
        return 0.0
    i, j, k = min(int(x), nx - 2), min(int(y), ny - 2), min(int(z), nz - 2)
    fx, fy, fz = x - i, y - j, z - k
    acc = 0.0
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                wgt = ((fx if di else 1 - fx) * (fy if dj else 1 - fy)
                       * (fz if dk else 1 - fz))
                acc += wgt * float(vol[i + di, j + dj, k + dk])
    return acc


def point_in_convex_polygon(point: np.ndarray, poly: np.ndarray) -> bool:
    """Centroid-side test: inside iff on the same side as the centroid for
    every edge (boundary counts as inside).  No winding assumption."""
    poly = np.asarray(poly, dtype=np.float64)
    cen = poly.mean(axis=0)
    k = len(poly)
    for a in range(k):
        p0, p1 = poly[a], poly[(a + 1) % k]
        e = p1 - p0
        side_pt = e[0] * (point[1] - p0[1]) - e[1] * (point[0] - p0[0])
        side_cen = e[0] * (cen[1] - p0[1]) - e[1] * (cen[0] - p0[0])
        if side_cen > 0 and side_pt < 0:
            return False
        if side_cen < 0 and side_pt > 0:
            return False
    return True


def adam_single_step_oracle(p0: float, g: float, lr: float, b1: float,
                            b2: float, eps: float) -> float:
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    return p0 - lr * mhat / (math.sqrt(vhat) + eps)
