"""Graph network that maps one cell's augmented quadratic form to beams.

Every subproblem becomes a dense graph: one node per stacked beamforming
coordinate plus a constant node (always the last index), edges between all
ordered pairs. Node features are the scaled diagonal of D_aug, edge features
the scaled off-diagonal entries. Three message-passing rounds with max+mean
pooling feed a per-node decoder that emits re/im parts for the variable
nodes only; outputs are rescaled onto the power ball whenever they land
outside it.

Two forward implementations share the same parameters: a taped one used for
training and gradient checks, and a fold()-ed pure-array one for benchmarks
(batchnorm folded into the affine maps, messages computed on the full node
grid with self-pairs masked at pooling). They agree to rounding error.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import TOL
from .reform import QuadraticSubproblem


CHECKPOINT_MAGIC = b"GNFPMODEL"
CHECKPOINT_VERSION = 1


class VersionMismatch(Exception):
    """Checkpoint written by an incompatible format revision."""


class CorruptFile(Exception):
    """Checkpoint fails magic, size, or consistency checks."""


@dataclass(frozen=True)
class GNNDims:
    node_in: int = 2
    edge_in: int = 2
    enc_hidden: int = 16
    enc_out: int = 8
    msg_hidden: int = 32
    msg_out: int = 16
    n_convs: int = 3
    dec_out: int = 2

    @property
    def node_dim(self) -> int:
        """Width of a node embedding after any conv round (max + mean)."""
        return 2 * self.msg_out

    def conv_in(self, k: int) -> int:
        h = self.enc_out if k == 0 else self.node_dim
        return 2 * h + self.enc_out

    @property
    def dec_in(self) -> int:
        return self.node_dim + self.enc_out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class GNNModel:
    """Parameters plus batchnorm state. Parameter traversal order is fixed
    and documented in save_model; checkpoints depend on it."""

    def __init__(self, seed: int = 0, dims: GNNDims = GNNDims()):
        self.dims = dims
        rng = np.random.default_rng(seed)
        d = dims

        def block(fan_in, hidden, out):
            return [
                ad.parameter(_glorot(rng, fan_in, hidden)),
                ad.parameter(np.zeros(hidden)),
                ad.parameter(np.ones(hidden)),
                ad.parameter(np.zeros(hidden)),
                ad.parameter(_glorot(rng, hidden, out)),
                ad.parameter(np.zeros(out)),
                ad.parameter(np.ones(out)),
                ad.parameter(np.zeros(out)),
            ]

        self.node_enc = block(d.node_in, d.enc_hidden, d.enc_out)
        self.edge_enc = block(d.edge_in, d.enc_hidden, d.enc_out)
        self.convs = [block(d.conv_in(k), d.msg_hidden, d.msg_out)
                      for k in range(d.n_convs)]
        self.dec_W = ad.parameter(_glorot(rng, d.dec_in, d.dec_out))
        self.dec_b = ad.parameter(np.zeros(d.dec_out))

        def states(hidden, out):
            return [ad.BatchNormState(hidden), ad.BatchNormState(out)]

        self.node_bn = states(d.enc_hidden, d.enc_out)
        self.edge_bn = states(d.enc_hidden, d.enc_out)
        self.conv_bn = [states(d.msg_hidden, d.msg_out) for _ in range(d.n_convs)]

    def cast(self, dtype) -> "GNNModel":
        """Convert parameters in place (running stats stay float64). Single
        precision roughly halves training step time on one core."""
        for p in self.parameters():
            p.data = p.data.astype(dtype, copy=False)
        return self

    @property
    def dtype(self):
        return self.dec_W.data.dtype

    def parameters(self) -> list[ad.Tensor]:
        out = list(self.node_enc) + list(self.edge_enc)
        for c in self.convs:
            out.extend(c)
        out.extend([self.dec_W, self.dec_b])
        return out

    def bn_states(self) -> list[ad.BatchNormState]:
        out = list(self.node_bn) + list(self.edge_bn)
        for s in self.conv_bn:
            out.extend(s)
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def block_param_counts(self) -> dict[str, int]:
        counts = {
            "node_encoder": sum(p.data.size for p in self.node_enc),
            "edge_encoder": sum(p.data.size for p in self.edge_enc),
        }
        for k, c in enumerate(self.convs, start=1):
            counts[f"conv{k}"] = sum(p.data.size for p in c)
        counts["decoder"] = self.dec_W.data.size + self.dec_b.data.size
        return counts


# ---------------------------------------------------------------------------
# graph construction


@dataclass
class ProblemGraph:
    """Dense graph view of one subproblem. Edges run over ordered pairs
    (i, j), i != j, i-major; the i endpoint is the message receiver."""

    node_features: np.ndarray   # (n, 2)
    edge_i: np.ndarray          # (E,)
    edge_j: np.ndarray          # (E,)
    edge_features: np.ndarray   # (E, 2)
    constant_index: int

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_i.shape[0]


def node_feature_batch(daug: np.ndarray, scl: np.ndarray,
                       dtype=np.float64) -> np.ndarray:
    """(B, n, n) complex, (B,) -> (B, n, 2) scaled diagonal re/im."""
    diag = np.einsum("bii->bi", daug) / scl[:, None]
    out = np.empty(diag.shape + (2,), dtype=dtype)
    out[..., 0] = diag.real
    out[..., 1] = diag.imag
    return out


def edge_feature_list(daug: np.ndarray, scl: np.ndarray,
                      dtype=np.float64) -> np.ndarray:
    """(B, n, n) -> (B*E, 2), off-diagonal entries in i-major pair order."""
    n = daug.shape[1]
    off = ~np.eye(n, dtype=bool)
    vals = daug[:, off] / scl[:, None]
    out = np.empty(vals.shape + (2,), dtype=dtype)
    out[..., 0] = vals.real
    out[..., 1] = vals.imag
    return out.reshape(-1, 2)


def edge_feature_grid(daug: np.ndarray, scl: np.ndarray,
                      dtype=np.float64) -> np.ndarray:
    """(B, n, n) -> (B, n, n, 2) full grid incl. the (masked) diagonal."""
    out = np.empty(daug.shape + (2,), dtype=dtype)
    s = scl[:, None, None]
    np.divide(daug.real, s, out=out[..., 0])
    np.divide(daug.imag, s, out=out[..., 1])
    return out


def build_graph(sub: QuadraticSubproblem) -> ProblemGraph:
    daug = sub.D_aug[None]
    scl = np.array([sub.scale])
    n = daug.shape[1]
    ei, ej = np.nonzero(~np.eye(n, dtype=bool))
    return ProblemGraph(node_features=node_feature_batch(daug, scl)[0],
                        edge_i=ei.astype(np.uint32), edge_j=ej.astype(np.uint32),
                        edge_features=edge_feature_list(daug, scl),
                        constant_index=sub.n_var)


# ---------------------------------------------------------------------------
# taped forward (training / gradient checks)


_IDX_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _indices(B: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row gathers for a batch of size-n graphs: off-diagonal positions of
    the flattened (B, n, n) grid, and the variable-node rows of (B, n)."""
    key = (B, n)
    if key not in _IDX_CACHE:
        off = np.nonzero(~np.eye(n, dtype=bool).reshape(-1))[0]
        edge_rows = (off[None, :] + np.arange(B)[:, None] * n * n).reshape(-1)
        var_rows = (np.arange(n - 1)[None, :] + np.arange(B)[:, None] * n).reshape(-1)
        _IDX_CACHE[key] = (edge_rows, var_rows)
    return _IDX_CACHE[key]


def _drop_rngs(dkey, training: bool):
    if not training:
        return [None] * 11
    if dkey is None:
        raise ValueError("training mode needs dkey=(seed, epoch, batch)")
    seed, epoch, batch = dkey
    return [ad.dropout_rng(seed, epoch, batch, site) for site in range(11)]


def _encoder(x, params, bns, training, rngs, rate=0.1):
    W1, b1, g1, be1, W2, b2, g2, be2 = params
    h = ad.affine(x, W1, b1)
    h = ad.dropout(ad.relu(ad.batchnorm(h, g1, be1, bns[0], training)),
                   rate, training, rngs[0])
    h = ad.affine(h, W2, b2)
    h = ad.dropout(ad.relu(ad.batchnorm(h, g2, be2, bns[1], training)),
                   rate, training, rngs[1])
    return h


def _conv(h, e0, params, bns, B, n, edge_rows, training, rngs, rate=0.1):
    W1, b1, g1, be1, W2, b2, g2, be2 = params
    d = h.data.shape[1]
    wid = W1.data.shape[1]
    Wi = ad.select_rows(W1, np.arange(d), unique=True)
    Wj = ad.select_rows(W1, np.arange(d, 2 * d), unique=True)
    We = ad.select_rows(W1, np.arange(2 * d, W1.data.shape[0]), unique=True)
    Pi = ad.affine(h, Wi, b1)                  # receiver term, (B*n, wid)
    Pj = ad.matmul(h, Wj)                      # sender term
    Pe = ad.matmul(e0, We)                     # edge term, (B*E, wid)
    grid = ad.add(ad.reshape(Pi, (B, n, 1, wid)), ad.reshape(Pj, (B, 1, n, wid)))
    sel = ad.select_rows(ad.reshape(grid, (B * n * n, wid)), edge_rows, unique=True)
    m = ad.add(sel, Pe)
    m = ad.dropout(ad.relu(ad.batchnorm(m, g1, be1, bns[0], training)),
                   rate, training, rngs[0])
    m = ad.affine(m, W2, b2)
    m = ad.dropout(ad.relu(ad.batchnorm(m, g2, be2, bns[1], training)),
                   rate, training, rngs[1])
    # i-major edge order makes each node's n-1 messages contiguous
    per_node = ad.reshape(m, (B * n, n - 1, m.data.shape[1]))
    return ad.concat([ad.reduce_max(per_node, axis=1),
                      ad.reduce_mean(per_node, axis=1)], axis=1)


def _project(out, P: np.ndarray, B: int):
    """Rescale each graph's output onto the power ball iff it lies outside."""
    dt = out.data.dtype
    pw = ad.tsum(ad.square(out), axis=(1, 2))
    ratio = ad.elementwise_mul(ad.reciprocal(ad.add(pw, ad.constant(
        np.full(B, TOL.projection_eps, dtype=dt)))), ad.constant(P.astype(dt)))
    s = ad.tsqrt(ratio)
    over = (pw.data > P).astype(dt)
    s_eff = ad.add(ad.elementwise_mul(s, ad.constant(over)),
                   ad.constant((1.0 - over).astype(dt)))
    return ad.elementwise_mul(out, ad.reshape(s_eff, (B, 1, 1)))


def batched_forward(model: GNNModel, nf: np.ndarray, ef: np.ndarray,
                    P: np.ndarray, mode: str, dkey=None) -> ad.Tensor:
    """Shared forward over a batch of same-size graphs.

    nf (B, n, 2), ef (B*E, 2) i-major, P (B,). Returns (B, n-1, 2) decoded
    variable-node outputs after the ball projection.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"
    rngs = _drop_rngs(dkey, training)
    B, n, _ = nf.shape
    edge_rows, var_rows = _indices(B, n)
    dt = model.dtype

    x = ad.constant(nf.reshape(B * n, -1).astype(dt, copy=False))
    e_in = ad.constant(ef.astype(dt, copy=False))
    h0 = _encoder(x, model.node_enc, model.node_bn, training, rngs[0:2])
    e0 = _encoder(e_in, model.edge_enc, model.edge_bn, training, rngs[2:4])
    h = h0
    for k in range(model.dims.n_convs):
        h = _conv(h, e0, model.convs[k], model.conv_bn[k], B, n, edge_rows,
                  training, rngs[4 + 2 * k: 6 + 2 * k])
    z = ad.concat([h, h0], axis=1)
    z = ad.dropout(z, 0.2, training, rngs[10])
    dec = ad.affine(z, model.dec_W, model.dec_b)
    out = ad.reshape(ad.select_rows(dec, var_rows, unique=True), (B, n - 1, 2))
    return _project(out, P, B)


def forward(model: GNNModel, graph: ProblemGraph, P: float,
            mode: str = "eval", dkey=None) -> tuple[np.ndarray, ad.Tensor]:
    """Single-graph wrapper: returns the complex beams and the taped output."""
    nf = graph.node_features[None]
    out = batched_forward(model, nf, graph.edge_features, np.array([float(P)]),
                          mode, dkey)
    v = out.data[0, :, 0] + 1j * out.data[0, :, 1]
    return v, out


# ---------------------------------------------------------------------------
# training loss


def real_embed_batch(d_blk: np.ndarray, dtype=np.float64) -> np.ndarray:
    """(B, m, m) Hermitian -> (B, 2m, 2m) real symmetric embedding."""
    B, m, _ = d_blk.shape
    A = np.empty((B, 2 * m, 2 * m), dtype=dtype)
    A[:, :m, :m] = d_blk.real
    A[:, m:, m:] = d_blk.real
    A[:, :m, m:] = -d_blk.imag
    A[:, m:, :m] = d_blk.imag
    return A


def quadratic_loss(d_blk: np.ndarray, b_sta: np.ndarray, v_out: ad.Tensor) -> ad.Tensor:
    """Mean of v^H D_blk v - 2 Re(b^H v) over the batch, computed on the raw
    (un-normalized) quadratic forms through the real embedding x = [Re; Im]:
    per-record gradient wrt x is 2 (A x - r)."""
    B, m = b_sta.shape
    dt = v_out.data.dtype
    A = real_embed_batch(d_blk, dtype=dt)
    r = np.concatenate([b_sta.real, b_sta.imag], axis=1).astype(dt, copy=False)
    x = ad.reshape(ad.swapaxes(v_out, 1, 2), (B, 2 * m))
    quad = ad.tsum(ad.elementwise_mul(ad.batched_matvec(A, x), x), axis=1)
    lin = ad.tsum(ad.elementwise_mul(x, ad.constant(r)), axis=1)
    return ad.reduce_mean(ad.add(quad, ad.scale(lin, -2.0)), axis=0)


def loss_for(subs: list[QuadraticSubproblem], v_out: ad.Tensor) -> ad.Tensor:
    m = subs[0].n_var
    d_blk = np.stack([s.D_aug[:m, :m] for s in subs])
    b_sta = np.stack([s.b_sta for s in subs])
    return quadratic_loss(d_blk, b_sta, v_out)


# ---------------------------------------------------------------------------
# folded eval path: batchnorm collapsed into affines, no tape


@dataclass
class FoldedModel:
    dims: GNNDims
    node_enc: list    # [(W, b), (W, b)]
    edge_enc: list
    convs: list       # [(W1, b1, W2, b2)] per round
    dec: tuple
    # scratch grids reused across calls, keyed by (B, n); not thread-safe
    workspace: dict = field(default_factory=dict, repr=False)


def fold(model: GNNModel, eps: float = 1e-5, dtype=None) -> FoldedModel:
    """Collapse eval-mode batchnorm into the preceding affine layer.

    Fusion happens in float64; pass dtype=float32 for the cheaper benchmark
    inference path.
    """
    dt = dtype if dtype is not None else model.dtype

    def fuse(params, bns):
        W1, b1, g1, be1, W2, b2, g2, be2 = [np.asarray(p.data, np.float64)
                                            for p in params]
        k1 = g1 / np.sqrt(bns[0].running_var + eps)
        k2 = g2 / np.sqrt(bns[1].running_var + eps)
        return ((W1 * k1).astype(dt), ((b1 - bns[0].running_mean) * k1 + be1).astype(dt)), \
               ((W2 * k2).astype(dt), ((b2 - bns[1].running_mean) * k2 + be2).astype(dt))

    ne = fuse(model.node_enc, model.node_bn)
    ee = fuse(model.edge_enc, model.edge_bn)
    convs = []
    for k in range(model.dims.n_convs):
        (W1, b1), (W2, b2) = fuse(model.convs[k], model.conv_bn[k])
        convs.append((W1, b1, W2, b2))
    return FoldedModel(dims=model.dims, node_enc=list(ne), edge_enc=list(ee),
                       convs=convs, dec=(model.dec_W.data.astype(dt),
                                         model.dec_b.data.astype(dt)))


def fast_forward(fm: FoldedModel, nf: np.ndarray, ef_grid: np.ndarray,
                 P: np.ndarray) -> np.ndarray:
    """Eval-only forward on the full pair grid; self-pairs are computed then
    masked out at pooling (cheaper than gather/scatter for dense graphs).
    Matches the taped eval forward to rounding error at matching precision."""
    dt = fm.dec[0].dtype
    B, n, _ = nf.shape
    ar = np.arange(n)

    def enc(x, layers):
        for W, b in layers:
            x = x @ W
            x += b
            np.maximum(x, 0.0, out=x)
        return x

    h = enc(nf.reshape(B * n, -1).astype(dt, copy=False), fm.node_enc)
    h0 = h
    e = enc(ef_grid.reshape(B * n * n, -1).astype(dt, copy=False), fm.edge_enc)
    for W1, b1, W2, b2 in fm.convs:
        d = h.shape[1]
        Pi = h @ W1[:d]
        Pi += b1
        Pj = h @ W1[d:2 * d]
        m = (e @ W1[2 * d:]).reshape(B, n, n, -1)   # edge term owns the grid
        m += Pi.reshape(B, n, 1, -1)
        m += Pj.reshape(B, 1, n, -1)
        np.maximum(m, 0.0, out=m)
        m = m.reshape(B * n * n, -1) @ W2
        m += b2
        np.maximum(m, 0.0, out=m)
        m = m.reshape(B, n, n, -1)
        diag = m[:, ar, ar, :].copy()
        mean = m.sum(axis=2)
        mean -= diag
        mean /= n - 1
        m[:, ar, ar, :] = -np.inf
        h = np.concatenate([m.max(axis=2), mean], axis=-1).reshape(B * n, -1)
    z = np.concatenate([h, h0], axis=1)
    W, b = fm.dec
    out = z @ W
    out += b
    out = out.reshape(B, n, -1)[:, :n - 1, :]
    pw = np.sum(out * out, axis=(1, 2))
    s = np.where(pw > P, np.sqrt(P / (pw + TOL.projection_eps)), 1.0)
    return out * s[:, None, None].astype(dt)


def _tree_max(x: np.ndarray) -> np.ndarray:
    """Max over axis 1 by pairwise halving; contiguous elementwise maxima
    run several times faster than a strided reduce at this shape."""
    while x.shape[1] > 1:
        k = x.shape[1] // 2
        y = np.maximum(x[:, :k], x[:, k:2 * k])
        if x.shape[1] & 1:
            np.maximum(y[:, 0], x[:, -1], out=y[:, 0])
        x = y
    return x[:, 0]


def fast_forward_structured(fm: FoldedModel, d_all: np.ndarray, b_all: np.ndarray,
                            P: np.ndarray) -> np.ndarray:
    """Solver-loop forward straight from the per-cell (D, b) pair, skipping
    the augmented-matrix materialization.

    The augmented form is block diagonal, so most ordered pairs carry a zero
    edge feature: the edge encoder runs once per distinct feature (Nt*Nt
    within-block entries, 2m budget-row entries, one shared zero) and the
    contributions are painted onto the pair grid by slice. Matches
    fast_forward on the equivalent dense inputs to rounding error.
    """
    dt = fm.dec[0].dtype
    B, nt, _ = d_all.shape
    m = b_all.shape[1]
    q = m // nt
    n = m + 1
    scl = np.maximum(1e-30, np.maximum(np.abs(d_all).max(axis=(1, 2)),
                                       np.abs(b_all).max(axis=1)))

    wid = fm.convs[0][0].shape[1]
    pool = fm.convs[0][2].shape[1]
    key = (B, n, np.dtype(dt).str)
    ws = fm.workspace.get(key)
    if ws is None:
        ws = {"g1": np.empty((B, n, n, wid), dtype=dt),
              "g2": np.empty((B, n, n, pool), dtype=dt),
              "h": np.empty((B, n, 2 * pool), dtype=dt)}
        fm.workspace[key] = ws
    g1, g2, h3 = ws["g1"], ws["g2"], ws["h"]

    def enc(x, layers):
        for W, b in layers:
            x = x @ W
            x += b
            np.maximum(x, 0.0, out=x)
        return x

    # node features: Q copies of the block diagonal, constant node zero
    diag = np.einsum("bii->bi", d_all) / scl[:, None]
    nf = np.zeros((B, n, 2), dtype=dt)
    nf[:, :m, 0] = np.tile(diag.real, (1, q))
    nf[:, :m, 1] = np.tile(diag.imag, (1, q))
    h = enc(nf.reshape(B * n, -1), fm.node_enc)
    h0 = h

    # distinct edge features: within-block D entries, -b / -conj(b), zero
    feats = np.zeros((B, nt * nt + 2 * m + 1, 2), dtype=dt)
    db = (d_all / scl[:, None, None]).reshape(B, -1)
    bb = b_all / scl[:, None]
    feats[:, :nt * nt, 0] = db.real
    feats[:, :nt * nt, 1] = db.imag
    feats[:, nt * nt:nt * nt + m, 0] = -bb.real
    feats[:, nt * nt:nt * nt + m, 1] = -bb.imag
    feats[:, nt * nt + m:nt * nt + 2 * m, 0] = -bb.real
    feats[:, nt * nt + m:nt * nt + 2 * m, 1] = bb.imag
    e_u = enc(feats.reshape(-1, 2), fm.edge_enc).reshape(B, -1, fm.edge_enc[1][0].shape[1])

    for W1, b1, W2, b2 in fm.convs:
        d = h.shape[1]
        Pi = h @ W1[:d]
        Pi += b1
        Pj = h @ W1[d:2 * d]
        pe = e_u @ W1[2 * d:]                      # (B, distinct, wid)
        pe_zero = pe[:, -1, :]
        # fold the shared zero-feature edge term into the sender term
        Pj = Pj.reshape(B, n, wid) + pe_zero[:, None, :]
        np.copyto(g1, Pj[:, None, :, :])
        np.add(g1, Pi.reshape(B, n, 1, wid), out=g1)
        corr = pe - pe_zero[:, None, :]
        blk = corr[:, :nt * nt].reshape(B, nt, nt, wid)
        for qq in range(q):
            g1[:, qq * nt:(qq + 1) * nt, qq * nt:(qq + 1) * nt] += blk
        g1[:, :m, n - 1] += corr[:, nt * nt:nt * nt + m]
        g1[:, n - 1, :m] += corr[:, nt * nt + m:nt * nt + 2 * m]
        np.maximum(g1, 0.0, out=g1)
        np.matmul(g1.reshape(B * n * n, wid), W2, out=g2.reshape(B * n * n, pool))
        g2 += b2
        np.maximum(g2, 0.0, out=g2)
        gdiag = g2.reshape(B, n * n, pool)[:, ::n + 1, :]
        dg = gdiag.copy()
        # h's storage doubles as the pooling target; the incoming h was
        # consumed by the Pi/Pj projections above
        mean = h3[:, :, pool:]
        np.einsum("bijc->bic", g2, out=mean)
        mean -= dg
        mean /= n - 1
        gdiag[...] = -np.inf
        h3[:, :, :pool] = _tree_max(g2.reshape(B * n, n, pool)).reshape(B, n, pool)
        h = h3.reshape(B * n, 2 * pool)
    z = np.concatenate([h, h0], axis=1)
    W, b = fm.dec
    out = z @ W
    out += b
    out = out.reshape(B, n, -1)[:, :m, :]
    pw = np.sum(out * out, axis=(1, 2))
    s = np.where(pw > P, np.sqrt(P / (pw + TOL.projection_eps)), 1.0)
    out = out * s[:, None, None].astype(dt)
    v = np.empty((B, m), dtype=complex)
    v.real = out[..., 0]
    v.imag = out[..., 1]
    return v


def fast_forward_complex(fm: FoldedModel, daug: np.ndarray, scl: np.ndarray,
                         P: np.ndarray) -> np.ndarray:
    """(B, n, n) raw forms -> (B, n-1) complex128 beams."""
    dt = fm.dec[0].dtype
    out = fast_forward(fm, node_feature_batch(daug, scl, dt),
                       edge_feature_grid(daug, scl, dt), P)
    v = np.empty(out.shape[:2], dtype=complex)
    v.real = out[..., 0]
    v.imag = out[..., 1]
    return v


def gnnfp_iteration(fm: FoldedModel, inst, v: np.ndarray) -> np.ndarray:
    """One model-driven solver sweep: refresh the auxiliary variables from the
    current beams, run the network on every cell's quadratic form, and return
    the (L, Q, Nt) beams rescaled in float64 so feasibility does not depend on
    the folded model's dtype."""
    from .fp_solvers import update_y, update_gamma
    from .reform import cell_quadratics

    cfg = inst.config
    y = update_y(inst, v)
    gamma = update_gamma(inst, v)
    d_all, b_all = cell_quadratics(inst, y, gamma)
    P = np.full(cfg.L, cfg.max_tx_power_W)
    flat = fast_forward_structured(fm, d_all, b_all, P)
    pw = np.sum(flat.real ** 2 + flat.imag ** 2, axis=1)
    s = np.where(pw > P, np.sqrt(P / (pw + TOL.projection_eps)), 1.0)
    return (flat * s[:, None]).reshape(cfg.L, cfg.Q, cfg.Nt)


# ---------------------------------------------------------------------------
# checkpoints


_CKPT_HEADER = struct.Struct("<9s3xI8IQ")


def save_model(model: GNNModel, path: str):
    """Write magic, version, dim table, parameter blob, batchnorm blob.

    Parameter order: node encoder (W1, b1, gamma1, beta1, W2, b2, gamma2,
    beta2), edge encoder (same), each conv round (same), decoder (W, b);
    running statistics as (mean, var) per batchnorm layer in the same
    traversal order. All values are little-endian float64.
    """
    d = model.dims
    head = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             d.node_in, d.edge_in, d.enc_hidden, d.enc_out,
                             d.msg_hidden, d.msg_out, d.n_convs, d.dec_out,
                             model.param_count())
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes()
                    for p in model.parameters())
    stats = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                     for s in model.bn_states()
                     for a in (s.running_mean, s.running_var))
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(head)
            f.write(blob)
            f.write(stats)
        os.chmod(tmp, 0o644)  # mkstemp defaults to owner-only
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path: str) -> GNNModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEADER.size:
        raise CorruptFile("truncated header")
    fields = _CKPT_HEADER.unpack_from(raw)
    if fields[0] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"bad magic {fields[0]!r}")
    if fields[1] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"format version {fields[1]}")
    dims = GNNDims(*fields[2:10])
    count = fields[10]
    model = GNNModel(seed=0, dims=dims)
    if model.param_count() != count:
        raise CorruptFile(f"parameter count {count} does not match dim table")
    stats_n = sum(2 * len(s.running_mean) for s in model.bn_states())
    expected = _CKPT_HEADER.size + 8 * (count + stats_n)
    if len(raw) != expected:
        raise CorruptFile(f"expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size)
    pos = 0
    for p in model.parameters():
        size = p.data.size
        p.data = vals[pos:pos + size].reshape(p.data.shape).copy()
        pos += size
    for s in model.bn_states():
        c = len(s.running_mean)
        s.running_mean = vals[pos:pos + c].copy()
        pos += c
        s.running_var = vals[pos:pos + c].copy()
        pos += c
    return model
