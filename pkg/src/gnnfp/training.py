"""Dataset splitting, subproblem harvesting, and the network training loop.

Harvesting runs a solver from the matched-filter start and records every
cell's augmented quadratic form at every iteration, so one network instance
yields L * iters training records. The ``classical_fp`` policy advances the
beams with the exact per-cell solver; the ``current_model`` policy advances
them with a folded model, which exposes the network to the subproblem
distribution its own trajectories induce.

Training minimises the quadratic objective directly (no solved labels are
needed): each record's form is divided by its scale so batches mix record
magnitudes evenly, which rescales the objective by a positive constant and
leaves the minimiser unchanged. Validation reports the relative objective
gap against the exact solver; the checkpoint on disk always holds the best
validation snapshot seen so far (the freshly initialised model before the
first epoch), so an aborted run still leaves a usable file behind.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import NetworkInstance, mrt_initializer
from .fp_solvers import solve_qp_bisection, update_gamma, update_y
from .gnn import (FoldedModel, GNNModel, batched_forward, edge_feature_list,
                  fast_forward_complex, fold, gnnfp_iteration,
                  node_feature_batch, quadratic_loss, save_model)
from .reform import (DimensionMismatch, HarvestFile, HarvestWriter,
                     QuadraticSubproblem, build_cell_forms)


class DivergedLoss(Exception):
    """Raised when the training loss stops being finite."""


HARVEST_POLICIES = ("classical_fp", "current_model")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    harvest_iters: int = 8
    refresh_period: int = 0
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    early_stop_patience: int = 30

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.harvest_iters < 0 or self.refresh_period < 0:
            raise ValueError("harvest_iters and refresh_period must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        r = np.asarray(self.split_ratios, dtype=float)
        if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
            raise ValueError("split_ratios must be three nonnegative "
                             "fractions summing to 1")


def split_indices(n: int, ratios=(0.70, 0.15, 0.15),
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle range(n) and cut it into train/val/test index arrays.

    Cut points are the rounded cumulative ratios, so the three sizes always
    sum to n. Arrays come back sorted; membership is what matters.
    """
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be three nonnegative fractions "
                         "summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.floor(np.cumsum(r) * n + 0.5).astype(int)
    return (np.sort(perm[:cuts[0]]),
            np.sort(perm[cuts[0]:cuts[1]]),
            np.sort(perm[cuts[1]:cuts[2]]))


def _harvest_instance(args) -> tuple[np.ndarray, np.ndarray]:
    """All of one instance's records: (iters*L, n, n) forms plus scales,
    iteration-major then cell."""
    inst, iters, policy, fm = args
    c = inst.config
    m = c.Nt * c.Q
    all_daug = np.empty((iters * c.L, m + 1, m + 1), dtype=complex)
    all_scale = np.empty(iters * c.L)
    v = mrt_initializer(inst)
    for k in range(iters):
        y = update_y(inst, v)
        gamma = update_gamma(inst, v)
        daug, scale = build_cell_forms(inst, y, gamma)
        all_daug[k * c.L:(k + 1) * c.L] = daug
        all_scale[k * c.L:(k + 1) * c.L] = scale
        if policy == "classical_fp":
            for l in range(c.L):
                sol = solve_qp_bisection(
                    daug[l, :c.Nt, :c.Nt],
                    -daug[l, :m, m].reshape(c.Q, c.Nt),
                    c.max_tx_power_W)
                v[l] = sol.v
        else:
            v = gnnfp_iteration(fm, inst, v)
    return all_daug, all_scale


def harvest(instances: list[NetworkInstance], iters: int, path: str,
            policy: str = "classical_fp", model: GNNModel | None = None,
            manifest_extra: dict | None = None, workers: int = 1) -> int:
    """Run ``iters`` solver sweeps on each instance from the matched-filter
    start, appending every cell's subproblem at every sweep. Records are
    ordered instance-major, then iteration, then cell, so a fixed instance
    list reproduces the file byte for byte (instances may be processed by
    worker processes, but records are written in order). Returns the record
    count.
    """
    if policy not in HARVEST_POLICIES:
        raise ValueError(f"unknown harvest policy {policy!r}")
    fm = None
    if policy == "current_model":
        if model is None:
            raise ValueError("current_model policy needs a model")
        fm = fold(model, dtype=np.float32)
    if not instances:
        raise ValueError("no instances to harvest")
    cfg = instances[0].config
    for inst in instances:
        c = inst.config
        if (c.Nt, c.Q, c.L) != (cfg.Nt, cfg.Q, cfg.L):
            raise DimensionMismatch("instances mix network shapes")
    writer = HarvestWriter(path, cfg.Nt, cfg.Q)
    jobs = ((inst, iters, policy, fm) for inst in instances)
    try:
        if workers > 1:
            import multiprocessing as mp
            if fm is not None:
                fm.workspace.clear()  # scratch buffers do not travel
            with mp.Pool(min(workers, len(instances))) as pool:
                results = pool.imap(_harvest_instance, jobs, chunksize=4)
                _write_records(writer, results, cfg)
        else:
            _write_records(writer, map(_harvest_instance, jobs), cfg)
    except BaseException:
        writer.close(None)
        raise
    manifest = {"policy": policy, "iters": iters,
                "instances": len(instances),
                "instance_indices": [int(i.index) for i in instances],
                "L": cfg.L, "seed": cfg.seed}
    if manifest_extra:
        manifest.update(manifest_extra)
    writer.close(manifest)
    return writer.count


def _write_records(writer: HarvestWriter, results, cfg):
    for all_daug, all_scale in results:
        for r in range(all_daug.shape[0]):
            writer.append(QuadraticSubproblem(
                cell_index=r % cfg.L, D_aug=all_daug[r],
                P=cfg.max_tx_power_W, scale=float(all_scale[r]),
                Nt=cfg.Nt, Q=cfg.Q))


# ---------------------------------------------------------------------------
# training loop


def _batch_arrays(raw: np.ndarray, idx: np.ndarray):
    recs = raw[idx]
    daug = np.ascontiguousarray(recs["daug"])
    return daug, recs["scale"], recs["power"]


def _objectives(daug: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched raw objective v^H D v - 2 Re(b^H v) for (B, n, n) forms."""
    m = daug.shape[1] - 1
    d_blk = daug[:, :m, :m]
    b_sta = -daug[:, :m, m]
    quad = np.einsum("bi,bij,bj->b", v.conj(), d_blk, v).real
    lin = 2.0 * np.einsum("bi,bi->b", b_sta.conj(), v).real
    return quad - lin


def _oracle_objectives(harvest: HarvestFile, batch: int = 256) -> np.ndarray:
    out = np.empty(harvest.count)
    nt, q = harvest.nt, harvest.q
    m = nt * q
    for start in range(0, harvest.count, batch):
        recs = harvest.raw[start:start + batch]
        daug = recs["daug"]
        vs = np.empty((len(recs), m), dtype=complex)
        for i, rec in enumerate(recs):
            d = daug[i, :nt, :nt]
            b = -daug[i, :m, m].reshape(q, nt)
            vs[i] = solve_qp_bisection(d, b, rec["power"]).v.ravel()
        out[start:start + len(recs)] = _objectives(daug, vs)
    return out


def _gap_stats(fm: FoldedModel, harvest: HarvestFile, obj_star: np.ndarray,
               batch: int = 64) -> dict[str, float]:
    gaps = np.empty(harvest.count)
    for start in range(0, harvest.count, batch):
        recs = harvest.raw[start:start + batch]
        daug = np.ascontiguousarray(recs["daug"])
        v = fast_forward_complex(fm, daug, recs["scale"], recs["power"])
        obj = _objectives(daug, v)
        ref = obj_star[start:start + len(recs)]
        gaps[start:start + len(recs)] = (obj - ref) / (np.abs(ref) + 1e-12)
    return {"mean": float(gaps.mean()), "median": float(np.median(gaps)),
            "p90": float(np.quantile(gaps, 0.9))}


def evaluate_gap(model: GNNModel | FoldedModel, harvest: HarvestFile,
                 batch: int = 64) -> dict[str, float]:
    """Relative objective gap of the model against the exact per-record
    solver: (model - exact) / |exact|, summarised as mean/median/p90."""
    fm = model if isinstance(model, FoldedModel) else fold(model)
    if harvest.count == 0:
        return {"mean": float("nan"), "median": float("nan"),
                "p90": float("nan")}
    return _gap_stats(fm, harvest, _oracle_objectives(harvest), batch)


_LOG_FIELDS = ("epoch", "train_loss", "val_gap_mean", "val_gap_median",
               "lr", "elapsed_s")


def train(train_harvest: HarvestFile, val_harvest: HarvestFile,
          config: TrainConfig, checkpoint_path: str,
          log_path: str | None = None,
          initial: GNNModel | None = None) -> tuple[GNNModel, list[dict]]:
    """Adam on the scale-normalised quadratic objective.

    The model (a fresh one per ``config.seed`` unless ``initial`` is given,
    which is then trained in place) is cast to float32 and checkpointed
    immediately; afterwards the file is overwritten only when the mean
    validation gap improves, and training stops early once
    ``early_stop_patience`` epochs pass without improvement. A non-finite
    loss raises DivergedLoss, leaving the last good checkpoint on disk.
    Checkpoint bytes are a pure function of the harvest files and config;
    the elapsed_s log column is the one nondeterministic output.
    """
    if (train_harvest.nt, train_harvest.q) != (val_harvest.nt, val_harvest.q):
        raise DimensionMismatch("train and validation harvests disagree on "
                                "subproblem shape")
    model = GNNModel(seed=config.seed) if initial is None else initial
    model.cast(np.float32)
    save_model(model, checkpoint_path)
    history: list[dict] = []
    if config.epochs == 0 or train_harvest.count == 0:
        return model, history
    if val_harvest.count == 0:
        raise ValueError("validation harvest is empty")

    nt, q = train_harvest.nt, train_harvest.q
    m = nt * q
    obj_star = _oracle_objectives(val_harvest)
    params = model.parameters()
    opt = ad.OptimizerState(lr=config.learning_rate)
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=_LOG_FIELDS)
        writer.writeheader()
    best = np.inf
    best_epoch = -1
    n = train_harvest.count
    t0 = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence(config.seed, spawn_key=(epoch,))
            ).permutation(n)
            losses = []
            for bi, start in enumerate(range(0, n, config.batch_size)):
                idx = np.sort(order[start:start + config.batch_size])
                daug, scl, power = _batch_arrays(train_harvest.raw, idx)
                nf = node_feature_batch(daug, scl, np.float32)
                ef = edge_feature_list(daug, scl, np.float32)
                s = scl[:, None, None]
                with ad.Tape():
                    out = batched_forward(model, nf, ef, power, mode="train",
                                          dkey=(config.seed, epoch, bi))
                    loss = quadratic_loss(daug[:, :m, :m] / s,
                                          -daug[:, :m, m] / s[..., 0], out)
                val = float(loss.data)
                if not np.isfinite(val):
                    raise DivergedLoss(
                        f"non-finite loss at epoch {epoch} batch {bi}")
                ad.backward(loss)
                ad.optimizer_step(params, opt)
                ad.zero_grads(params)
                losses.append(val)
            gap = _gap_stats(fold(model, dtype=np.float32), val_harvest,
                             obj_star)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_gap_mean": gap["mean"],
                   "val_gap_median": gap["median"],
                   "lr": config.learning_rate,
                   "elapsed_s": time.perf_counter() - t0}
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                log_file.flush()
            if gap["mean"] < best:
                best = gap["mean"]
                best_epoch = epoch
                save_model(model, checkpoint_path)
            elif epoch - best_epoch >= config.early_stop_patience:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return model, history
