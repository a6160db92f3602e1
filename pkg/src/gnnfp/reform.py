"""Per-cell beamforming update rewritten as one augmented quadratic form.

The cell's QP over Q beams becomes a single stacked variable v_sta
(dimension Nt*Q) with block-diagonal quadratic term, then the linear term
is absorbed by appending a constant-1 coordinate:

    D_aug = [[D_blk, -b_sta], [-b_sta^H, 0]],   vbar = [v_sta; 1]

so the objective is plainly vbar^H D_aug vbar. Records of this form are
what the network trains on; the bisection solver stays available as the
exact oracle.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .channel import NetworkInstance
from .config import TOL
from .fp_solvers import build_D, build_b, solve_qp_bisection


HARVEST_MAGIC = b"GNFPHARV"
HARVEST_VERSION = 1


class DimensionMismatch(Exception):
    """Vector length disagrees with the subproblem's Nt*Q layout."""


class BadHarvestFile(Exception):
    """Magic/version mismatch or truncated harvest container."""


@dataclass
class QuadraticSubproblem:
    """One cell's beamforming QP in augmented form.

    scale is the largest entry modulus of D_aug, stored (not applied) so the
    oracle reads raw values while graph features use the normalized view;
    the minimizer is invariant to that positive rescaling.
    """

    cell_index: int
    D_aug: np.ndarray     # (Nt*Q+1, Nt*Q+1) complex, Hermitian, corner 0
    P: float
    scale: float
    Nt: int
    Q: int

    @property
    def n_var(self) -> int:
        return self.Nt * self.Q

    @property
    def d_block(self) -> np.ndarray:
        """One Nt x Nt diagonal block (all Q are identical)."""
        return self.D_aug[:self.Nt, :self.Nt]

    @property
    def b_sta(self) -> np.ndarray:
        """Stacked linear term, recovered from the last column."""
        return -self.D_aug[:self.n_var, self.n_var]


def build_subproblem(inst: NetworkInstance, y: np.ndarray, gamma: np.ndarray,
                     l: int) -> QuadraticSubproblem:
    """Assemble cell l's augmented form from the auxiliary state."""
    cfg = inst.config
    d = build_D(inst, y, gamma, l)
    b = build_b(inst, y, gamma, l)
    m = cfg.Nt * cfg.Q
    d_aug = np.zeros((m + 1, m + 1), dtype=complex)
    for q in range(cfg.Q):
        d_aug[q * cfg.Nt:(q + 1) * cfg.Nt, q * cfg.Nt:(q + 1) * cfg.Nt] = d
    b_sta = b.reshape(m)
    d_aug[:m, m] = -b_sta
    d_aug[m, :m] = -b_sta.conj()
    scale = max(1e-30, float(np.abs(d_aug).max()))
    return QuadraticSubproblem(cell_index=l, D_aug=d_aug, P=cfg.max_tx_power_W,
                               scale=scale, Nt=cfg.Nt, Q=cfg.Q)


def objective(sub: QuadraticSubproblem, v_sta: np.ndarray) -> float:
    """[v_sta; 1]^H D_aug [v_sta; 1], guaranteed real up to rounding."""
    if v_sta.shape != (sub.n_var,):
        raise DimensionMismatch(f"expected ({sub.n_var},), got {v_sta.shape}")
    vbar = np.concatenate([v_sta, [1.0]])
    val = vbar.conj() @ sub.D_aug @ vbar
    if abs(val.imag) > 1e-10 * (1.0 + abs(val.real)):
        raise ArithmeticError(f"objective has imaginary part {val.imag:.3e}")
    return float(val.real)


def stack(per_user: np.ndarray) -> np.ndarray:
    """(Q, Nt) beams -> stacked (Nt*Q,) vector, user 0 first."""
    return np.asarray(per_user).reshape(-1)


def unstack(sub: QuadraticSubproblem, v_sta: np.ndarray) -> np.ndarray:
    """Stacked vector -> (Q, Nt) beams; exact inverse of stack."""
    if v_sta.shape != (sub.n_var,):
        raise DimensionMismatch(f"expected ({sub.n_var},), got {v_sta.shape}")
    return v_sta.reshape(sub.Q, sub.Nt)


def oracle_solve(sub: QuadraticSubproblem, tol: float = TOL.bisection_power) -> np.ndarray:
    """Exact minimizer of the augmented form via the bisection solver."""
    b = sub.b_sta.reshape(sub.Q, sub.Nt)
    if not b.any():
        # objective reduces to a PSD quadratic; zero attains the minimum
        return np.zeros(sub.n_var, dtype=complex)
    sol = solve_qp_bisection(np.ascontiguousarray(sub.d_block), b, sub.P, tol)
    return sol.v.reshape(sub.n_var)


def cell_quadratics(inst: NetworkInstance, y: np.ndarray,
                    gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-cell quadratic pieces in one shot: the shared curvature block
    (L, Nt, Nt) and the stacked linear terms (L, Nt*Q). Same entries as the
    per-cell builder, batched einsums."""
    cfg = inst.config
    c = cfg.weight_array() * (1.0 + gamma)
    z = np.einsum("ijlnm,ijn->ijlm", inst.H.conj(), y)       # (L,Q,L,Nt)
    d_all = np.einsum("ij,ijlm,ijlk->lmk", c, z, z.conj())   # (L,Nt,Nt)
    lidx = np.arange(cfg.L)[:, None]
    z_own = z[lidx, np.arange(cfg.Q)[None, :], lidx]         # (L,Q,Nt)
    b_all = (c[:, :, None] * z_own).reshape(cfg.L, -1)
    return d_all, b_all


def build_cell_forms(inst: NetworkInstance, y: np.ndarray,
                     gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every cell's augmented form in one shot: (L, Nt*Q+1, Nt*Q+1) plus the
    per-cell scales. Same entries as build_subproblem."""
    cfg = inst.config
    d_all, b_all = cell_quadratics(inst, y, gamma)
    m = cfg.Nt * cfg.Q
    daug = np.zeros((cfg.L, m + 1, m + 1), dtype=complex)
    for q in range(cfg.Q):
        daug[:, q * cfg.Nt:(q + 1) * cfg.Nt, q * cfg.Nt:(q + 1) * cfg.Nt] = d_all
    daug[:, :m, m] = -b_all
    daug[:, m, :m] = -b_all.conj()
    scale = np.maximum(1e-30, np.abs(daug).max(axis=(1, 2)))
    return daug, scale


# ---------------------------------------------------------------------------
# harvest container: fixed-stride records, memmap-friendly


_HARVEST_HEADER = struct.Struct("<8sIIIIQ")  # magic, version, Nt, Q, pad, count


def _record_dtype(nt: int, q: int) -> np.dtype:
    n = nt * q + 1
    return np.dtype([("cell", "<u4"), ("nt", "<u4"), ("q", "<u4"), ("pad", "<u4"),
                     ("power", "<f8"), ("scale", "<f8"), ("daug", "<c16", (n, n))])


class HarvestWriter:
    """Appends subproblem records; all records share one (Nt, Q) shape."""

    def __init__(self, path: str, nt: int, q: int):
        self.path = path
        self.nt = nt
        self.q = q
        self.dtype = _record_dtype(nt, q)
        self.count = 0
        self._f = open(path, "wb")
        self._f.write(_HARVEST_HEADER.pack(HARVEST_MAGIC, HARVEST_VERSION,
                                           nt, q, 0, 0))

    def append(self, sub: QuadraticSubproblem):
        if (sub.Nt, sub.Q) != (self.nt, self.q):
            raise DimensionMismatch("record shape differs from file header")
        rec = np.zeros((), dtype=self.dtype)
        rec["cell"] = sub.cell_index
        rec["nt"] = sub.Nt
        rec["q"] = sub.Q
        rec["power"] = sub.P
        rec["scale"] = sub.scale
        rec["daug"] = sub.D_aug
        self._f.write(rec.tobytes())
        self.count += 1

    def close(self, manifest: dict | None = None):
        self._f.seek(0)
        self._f.write(_HARVEST_HEADER.pack(HARVEST_MAGIC, HARVEST_VERSION,
                                           self.nt, self.q, 0, self.count))
        self._f.close()
        if manifest is not None:
            manifest = dict(manifest, records=self.count, Nt=self.nt, Q=self.q)
            with open(self.path + ".manifest.json", "w") as f:
                json.dump(manifest, f, indent=2)


class HarvestFile:
    """Lazy reader over a harvest container; records stay on disk until
    sliced, so multi-gigabyte files train without loading fully."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "rb") as f:
            head = f.read(_HARVEST_HEADER.size)
        if len(head) < _HARVEST_HEADER.size:
            raise BadHarvestFile("truncated header")
        magic, version, nt, q, _, count = _HARVEST_HEADER.unpack(head)
        if magic != HARVEST_MAGIC:
            raise BadHarvestFile(f"bad magic {magic!r}")
        if version != HARVEST_VERSION:
            raise BadHarvestFile(f"unsupported version {version}")
        self.nt, self.q, self.count = nt, q, count
        self.dtype = _record_dtype(nt, q)
        expected = _HARVEST_HEADER.size + count * self.dtype.itemsize
        if os.path.getsize(path) < expected:
            raise BadHarvestFile("file shorter than header count implies")
        self.raw = np.memmap(path, dtype=self.dtype, mode="r",
                             offset=_HARVEST_HEADER.size, shape=(count,))

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> QuadraticSubproblem:
        rec = self.raw[int(i)]
        return QuadraticSubproblem(cell_index=int(rec["cell"]),
                                   D_aug=np.array(rec["daug"]),
                                   P=float(rec["power"]), scale=float(rec["scale"]),
                                   Nt=int(rec["nt"]), Q=int(rec["q"]))

    def subproblems(self):
        for i in range(self.count):
            yield self[i]
