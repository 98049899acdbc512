"""Cone bookkeeping for the interior-point solver.

Nonnegative orthants and second-order cones are stored in the slack vector as
contiguous blocks. All second-order cones of the same dimension are processed
together as a ``(k, d)`` array so that per-iteration cost stays vectorized.
Every operation also accepts leading batch axes (``(..., m)`` vectors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NonNegative:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"NonNegative cone needs dim >= 1, got {self.dim}")


@dataclass(frozen=True)
class SecondOrder:
    """``{(t, u) : t >= ||u||}`` with ``dim = 1 + len(u)``."""

    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"SecondOrder cone needs dim >= 2, got {self.dim}")


class ConeLayout:
    """Index maps from a cone list into the stacked slack vector."""

    def __init__(self, cones):
        lin = []
        soc: dict[int, list[np.ndarray]] = {}
        offset = 0
        for cone in cones:
            if not isinstance(cone, (NonNegative, SecondOrder)):
                raise TypeError(f"unknown cone type {cone!r}")
            idx = np.arange(offset, offset + cone.dim)
            if isinstance(cone, NonNegative):
                lin.append(idx)
            else:
                soc.setdefault(cone.dim, []).append(idx)
            offset += cone.dim
        lin = np.concatenate(lin) if lin else np.zeros(0, dtype=int)
        # one (k, d) index array per distinct SOC dimension, sorted for determinism
        self._set(offset, lin, [np.vstack(soc[d]) for d in sorted(soc)])

    def _set(self, dim, lin, soc):
        self.dim = dim
        self.lin = lin
        self.soc = soc
        self.degree = len(lin) + sum(len(g) for g in soc)
        # the same index sets as slices where they are contiguous
        self._lin_sel = _as_slice(lin)
        self._cols = [[_as_slice(g[:, j]) for j in range(g.shape[1])] for g in soc]

    def component_major(self) -> tuple[np.ndarray, "ConeLayout"]:
        """An equivalent layout whose SOC components are contiguous runs.

        Returns ``(perm, layout)`` with ``v[..., perm]`` the reordered vector.
        Orthant entries come first, then for each SOC group all first
        components, all second components, and so on.
        """
        parts = [self.lin]
        new_lin = np.arange(len(self.lin))
        off = len(self.lin)
        new_soc = []
        for g in self.soc:
            k, d = g.shape
            parts.append(g.T.ravel())
            new_soc.append(off + np.arange(d)[None, :] * k + np.arange(k)[:, None])
            off += k * d
        out = ConeLayout.__new__(ConeLayout)
        out._set(self.dim, new_lin, new_soc)
        return np.concatenate(parts).astype(int), out

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[self.lin] = 1.0
        for g in self.soc:
            e[g[:, 0]] = 1.0
        return e

    def _eig_min(self, x: np.ndarray) -> np.ndarray:
        # per-cone smallest eigenvalue, concatenated on the last axis
        parts = [x[..., self.lin]]
        for g in self.soc:
            xs = x[..., g]
            parts.append(xs[..., 0] - np.linalg.norm(xs[..., 1:], axis=-1))
        return np.concatenate(parts, axis=-1)

    def interior_margin(self, x: np.ndarray):
        """Smallest 'eigenvalue' of ``x``: x is in the cone iff this is >= 0.

        A float for one vector, an array over leading batch axes otherwise.
        """
        out = np.min(self._eig_min(x), axis=-1, initial=np.inf)
        return float(out) if out.ndim == 0 else out

    def max_step(self, x: np.ndarray, dx: np.ndarray):
        """Largest ``a >= 0`` keeping ``x + a*dx`` in the cone (x interior)."""
        parts = []
        if len(self.lin):
            d = dx[..., self.lin]
            with np.errstate(divide="ignore", invalid="ignore"):
                parts.append(np.where(d < 0, -x[..., self.lin] / d, np.inf))
        for g in self.soc:
            xs, ds = x[..., g], dx[..., g]
            # f(a) = (x0 + a d0)^2 - ||x1 + a d1||^2 = qa a^2 + 2 qb a + qc
            qa = ds[..., 0] ** 2 - np.sum(ds[..., 1:] ** 2, axis=-1)
            qb = xs[..., 0] * ds[..., 0] - np.sum(xs[..., 1:] * ds[..., 1:], axis=-1)
            qc = xs[..., 0] ** 2 - np.sum(xs[..., 1:] ** 2, axis=-1)
            parts.append(_smallest_positive_root(qa, qb, qc))
        out = np.min(np.concatenate(parts, axis=-1), axis=-1, initial=np.inf)
        return float(out) if out.ndim == 0 else out

    def nt_scaling(self, s: np.ndarray, z: np.ndarray) -> "NTScaling":
        return NTScaling(self, s, z)


def _as_slice(idx):
    if len(idx) and np.all(np.diff(idx) == 1):
        return slice(int(idx[0]), int(idx[-1]) + 1)
    return idx


def _smallest_positive_root(a, b, c):
    """Elementwise smallest root > 0 of ``a t^2 + 2 b t + c`` given ``c > 0``.

    Returns inf where the quadratic stays positive for all ``t > 0``.
    """
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), c)
    lin = np.abs(a) <= 1e-14 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        lin_root = np.where(b < 0, -c / (2 * b), np.inf)
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        q = -(b + np.where(b >= 0, sq, -sq))
        r1 = np.where(q != 0, q / a, np.inf)
        r2 = np.where(q != 0, c / q, np.inf)
    r1 = np.where(r1 > 0, r1, np.inf)
    r2 = np.where(r2 > 0, r2, np.inf)
    quad_root = np.where(disc >= 0, np.minimum(r1, r2), np.inf)
    out = np.where(lin, lin_root, quad_root)
    return np.where(c <= 0, 0.0, out)


def _jnorm(x):
    # sqrt(x0^2 - |x1|^2) in factored form to limit cancellation near the boundary
    r = np.linalg.norm(x[..., 1:], axis=-1)
    return np.sqrt(np.maximum((x[..., 0] - r) * (x[..., 0] + r), 0.0))


class NTScaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lam``.

    ``W`` is symmetric for both cone types, so ``W^T = W`` throughout.
    ``s`` and ``z`` may carry leading batch axes.
    """

    def __init__(self, layout: ConeLayout, s: np.ndarray, z: np.ndarray):
        self.layout = layout
        lin = layout.lin
        self.d = np.sqrt(s[..., lin] / z[..., lin])
        self.W = []
        self.Winv = []
        self._frames = []  # (w0, w1, eta) per SOC group
        lam = np.empty_like(s)
        lam[..., lin] = np.sqrt(s[..., lin] * z[..., lin])
        for g in layout.soc:
            ss, zz = s[..., g], z[..., g]
            ns = _jnorm(ss)
            nz = _jnorm(zz)
            sb = ss / ns[..., None]
            zb = zz / nz[..., None]
            gam = np.sqrt((1.0 + np.sum(sb * zb, axis=-1)) / 2.0)
            wb = sb.copy()
            wb[..., 0] += zb[..., 0]
            wb[..., 1:] -= zb[..., 1:]
            wb /= 2.0 * gam[..., None]
            eta = np.sqrt(ns / nz)
            dim = g.shape[1]
            w0 = wb[..., 0]
            w1 = wb[..., 1:]
            # one contiguous array per component keeps the apply loops long
            self._frames.append((np.ascontiguousarray(w0),
                                 [np.ascontiguousarray(w1[..., j]) for j in range(dim - 1)], eta))
            outer = w1[..., :, None] * w1[..., None, :] / (1.0 + w0)[..., None, None]
            W = np.empty(wb.shape + (dim,))
            W[..., 0, 0] = w0
            W[..., 0, 1:] = w1
            W[..., 1:, 0] = w1
            W[..., 1:, 1:] = np.eye(dim - 1) + outer
            Winv = W.copy()
            Winv[..., 0, 1:] *= -1
            Winv[..., 1:, 0] *= -1
            W *= eta[..., None, None]
            Winv /= eta[..., None, None]
            self.W.append(W)
            self.Winv.append(Winv)
            lam[..., g] = np.einsum("...ij,...j->...i", W, zz)
        self.lam = lam

    def apply(self, v: np.ndarray, inverse: bool = False, columns: bool = False) -> np.ndarray:
        """``W v`` (or ``W^{-1} v``) block by block.

        With ``columns=True``, ``v`` is (..., m, k) and every column is mapped.
        """
        if columns:
            def ex(a):
                return a[..., None]

            def rows(idx):
                return (Ellipsis, idx, slice(None))
        else:
            def ex(a):
                return a

            def rows(idx):
                return (Ellipsis, idx)
        out = np.empty(v.shape)
        lin = self.layout._lin_sel
        d = ex(self.d)
        out[rows(lin)] = v[rows(lin)] / d if inverse else v[rows(lin)] * d
        for cols, (w0, w1, eta) in zip(self.layout._cols, self._frames):
            w0, w1, eta = ex(w0), [ex(a) for a in w1], ex(eta)
            v0 = v[rows(cols[0])]
            v1 = [v[rows(j)] for j in cols[1:]]
            dot = sum(a * b for a, b in zip(w1, v1))
            sign, f = (-1.0, 1.0 / eta) if inverse else (1.0, eta)
            out[rows(cols[0])] = f * (w0 * v0 + sign * dot)
            q = dot / (1.0 + w0)
            sv0 = sign * v0
            for j, a, b in zip(cols[1:], w1, v1):
                out[rows(j)] = f * (sv0 * a + b + a * q)
        return out

    def matrix(self, inverse: bool = False) -> np.ndarray:
        """Dense block-diagonal ``W`` (or ``W^{-1}``), built once and cached."""
        key = "_dense_inv" if inverse else "_dense"
        M = getattr(self, key, None)
        if M is None:
            m = self.layout.dim
            M = np.zeros(self.lam.shape[:-1] + (m, m))
            lin = self.layout.lin
            M[..., lin, lin] = 1.0 / self.d if inverse else self.d
            for g, B in zip(self.layout.soc, self.Winv if inverse else self.W):
                M[..., g[:, :, None], g[:, None, :]] = B
            setattr(self, key, M)
        return M


def jordan_product(layout: ConeLayout, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.empty(np.broadcast_shapes(x.shape, y.shape))
    lin = layout.lin
    out[..., lin] = x[..., lin] * y[..., lin]
    for g in layout.soc:
        xs, ys = x[..., g], y[..., g]
        block = np.empty(np.broadcast_shapes(xs.shape, ys.shape))
        block[..., 0] = np.sum(xs * ys, axis=-1)
        block[..., 1:] = xs[..., :1] * ys[..., 1:] + ys[..., :1] * xs[..., 1:]
        out[..., g] = block
    return out


def jordan_divide(layout: ConeLayout, lam: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``lam o u = r`` for ``u`` (lam in the cone interior)."""
    out = np.empty(np.broadcast_shapes(lam.shape, r.shape))
    lin = layout.lin
    out[..., lin] = r[..., lin] / lam[..., lin]
    for g in layout.soc:
        ls, rs = lam[..., g], r[..., g]
        l0 = ls[..., 0]
        det = l0 ** 2 - np.sum(ls[..., 1:] ** 2, axis=-1)
        u0 = (l0 * rs[..., 0] - np.sum(ls[..., 1:] * rs[..., 1:], axis=-1)) / det
        block = np.empty(np.broadcast_shapes(ls.shape, rs.shape))
        block[..., 0] = u0
        block[..., 1:] = (rs[..., 1:] - u0[..., None] * ls[..., 1:]) / l0[..., None]
        out[..., g] = block
    return out


def arrow_matrix(layout: ConeLayout, x: np.ndarray) -> np.ndarray:
    """Dense ``Arw(x)`` with ``Arw(x) y = x o y`` (Jordan product)."""
    m = x.shape[-1]
    M = np.zeros(x.shape + (m,))
    lin = layout.lin
    M[..., lin, lin] = x[..., lin]
    for g in layout.soc:
        b = x[..., g]
        d = g.shape[1]
        blocks = b[..., 0, None, None] * np.eye(d)
        blocks[..., 0, 1:] = b[..., 1:]
        blocks[..., 1:, 0] = b[..., 1:]
        M[..., g[:, :, None], g[:, None, :]] = blocks
    return M


def purify(layout: ConeLayout, s: np.ndarray, z: np.ndarray):
    """Snap an interior-point pair to exact complementarity.

    Near the central path ``s`` and ``z`` share a Jordan frame and their
    eigenvalues pair up with products ``~mu``. In each pair the smaller member
    is set to zero; the other is kept. Orthant entries are 1-d frames.
    Returns ``(s_clean, z_clean, pair_max)`` where ``pair_max`` holds the
    larger member of every pair (small values flag missing strict
    complementarity).
    """
    s2, z2 = s.copy(), z.copy()
    lin = layout.lin
    sl, zl = s[..., lin], z[..., lin]
    small_s = sl < zl
    s2[..., lin] = np.where(small_s, 0.0, np.maximum(sl, 0.0))
    z2[..., lin] = np.where(small_s, np.maximum(zl, 0.0), 0.0)
    pair_max = [np.maximum(sl, zl)]
    for g in layout.soc:
        ss, zz = s[..., g], z[..., g]
        ns = np.linalg.norm(ss[..., 1:], axis=-1)
        nz = np.linalg.norm(zz[..., 1:], axis=-1)
        # common frame direction from the better-defined vector part
        use_s = ns >= nz
        ref = np.where(use_s[..., None], ss[..., 1:], -zz[..., 1:])
        nref = np.linalg.norm(ref, axis=-1)
        ok = nref > 0
        e1 = np.zeros(ref.shape[-1])
        e1[0] = 1.0
        u = np.where(ok[..., None], ref / np.where(ok, nref, 1.0)[..., None], e1)
        ps = np.sum(ss[..., 1:] * u, axis=-1)
        pz = np.sum(zz[..., 1:] * u, axis=-1)
        sig = np.stack([ss[..., 0] - ps, ss[..., 0] + ps], axis=-1)
        zet = np.stack([zz[..., 0] - pz, zz[..., 0] + pz], axis=-1)
        keep_s = sig >= zet
        sig = np.where(keep_s, np.maximum(sig, 0.0), 0.0)
        zet = np.where(keep_s, 0.0, np.maximum(zet, 0.0))
        pm = np.maximum(np.where(keep_s, sig, zet), 0.0)
        pair_max.append(pm.reshape(pm.shape[:-2] + (2 * pm.shape[-2],)))
        s2[..., g] = _from_frame(sig, u)
        z2[..., g] = _from_frame(zet, u)
    return s2, z2, np.concatenate(pair_max, axis=-1)


def _from_frame(eig, u):
    # x = eig_1 (1, -u)/2 + eig_2 (1, u)/2
    out = np.empty(u.shape[:-1] + (u.shape[-1] + 1,))
    out[..., 0] = 0.5 * (eig[..., 0] + eig[..., 1])
    out[..., 1:] = 0.5 * (eig[..., 1] - eig[..., 0])[..., None] * u
    return out
