"""Benchmark core: solver comparisons on held-out instances.

Every algorithm starts from the matched-filter beams and reports a weighted
sum-rate trace whose entry k is the objective after k iterations (entry 0 is
the starting point). Scores are normalized against the classical solver run
for a long baseline horizon on the same instances, so a row reads as "percent
of the converged objective". Per-iteration wall time is measured on a single
instance, median over warm repetitions, with the objective bookkeeping
excluded identically for every algorithm.

The published DeepFP figures are carried as constants for side-by-side
tables; this package does not implement DeepFP, and every surface that prints
them labels the numbers "paper-reported, not reproduced".
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import NetworkInstance, generate_instance, mrt_initializer
from .fp_solvers import SolverTrace, classical_fp, fastfp, weighted_sum_rate
from .gnn import FoldedModel, GNNModel, fold, gnnfp_iteration
from .reform import DimensionMismatch

ALGORITHMS = ("fp", "fastfp", "gnnfp")

# published comparison constants; never measured by this package
DEEPFP_LABEL = "paper-reported, not reproduced"
DEEPFP_PARAM_COUNT = 47365
DEEPFP_NORMALIZED_PCT_5ITER = {3: 91.01, 4: 88.54, 5: 88.20, 6: 91.12}
DEEPFP_SEC_PER_LAYER = 0.3571

LN2 = math.log(2.0)


def _fold_for_inference(model) -> FoldedModel:
    """Benchmarks run the folded single-precision path; feasibility is
    restored in float64 after each sweep (see gnnfp_iteration)."""
    if isinstance(model, FoldedModel):
        return model
    return fold(model, dtype=np.float32)


def check_model_dims(model: GNNModel | FoldedModel, inst: NetworkInstance):
    """Feature widths are fixed by construction; a mismatch means a foreign
    or corrupt checkpoint."""
    d = model.dims
    if (d.node_in, d.edge_in, d.dec_out) != (2, 2, 2):
        raise DimensionMismatch(
            f"model expects {d.node_in}/{d.edge_in}-wide features and "
            f"{d.dec_out}-wide outputs; graphs built from this data "
            f"carry 2/2/2")


def gnnfp_solve(model: GNNModel | FoldedModel, inst: NetworkInstance,
                iters: int) -> tuple[np.ndarray, SolverTrace]:
    """Model-driven counterpart of classical_fp with the same trace
    conventions: wsr[k] is the objective after k sweeps, elapsed_s[k]
    excludes the objective bookkeeping."""
    fm = _fold_for_inference(model)
    check_model_dims(fm, inst)
    v = mrt_initializer(inst)
    trace = SolverTrace(wsr=[weighted_sum_rate(inst, v)], elapsed_s=[0.0],
                        iterations=iters)
    for _ in range(iters):
        t0 = time.perf_counter()
        v = gnnfp_iteration(fm, inst, v)
        elapsed = time.perf_counter() - t0
        trace.wsr.append(weighted_sum_rate(inst, v))
        trace.elapsed_s.append(elapsed)
    return v, trace


def run_algorithm(name: str, inst: NetworkInstance, iters: int,
                  model=None) -> SolverTrace:
    if name == "fp":
        return classical_fp(inst, mrt_initializer(inst), iters)[1]
    if name == "fastfp":
        return fastfp(inst, mrt_initializer(inst), iters)[1]
    if name == "gnnfp":
        if model is None:
            raise ValueError("gnnfp needs a model")
        return gnnfp_solve(model, inst, iters)[1]
    raise ValueError(f"unknown algorithm {name!r}")


def per_iteration_times(name: str, inst: NetworkInstance, iters: int,
                        model=None, reps: int = 1,
                        warmup: int = 1) -> np.ndarray:
    """Per-iteration wall seconds, reps*iters entries, warm-up runs
    discarded. The model is folded once up front so every timed sweep sees
    a warm cache, mirroring how the classical solver reuses its buffers."""
    if name == "gnnfp":
        model = _fold_for_inference(model)
    times = []
    for r in range(warmup + reps):
        trace = run_algorithm(name, inst, iters, model)
        if r >= warmup:
            times.extend(trace.elapsed_s[1:])
    return np.asarray(times)


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class BenchReport:
    """Mean traces over an instance set, normalized to the long-horizon
    classical run on those same instances."""

    iters: int
    baseline_iters: int
    baseline_wsr: float                       # mean, nats
    mean_wsr: dict[str, np.ndarray] = field(default_factory=dict)
    sec_per_iter: dict[str, float] = field(default_factory=dict)
    instances: int = 0
    param_count: int | None = None

    def pct(self, name: str, iteration: int) -> float:
        return 100.0 * self.mean_wsr[name][iteration] / self.baseline_wsr

    def validate(self):
        if not np.isfinite(self.baseline_wsr) or self.baseline_wsr <= 0:
            raise AssertionError("baseline objective must be finite and "
                                 "positive")
        for name, tr in self.mean_wsr.items():
            p = 100.0 * tr / self.baseline_wsr
            if np.any(p <= 0.0) or np.any(p >= 120.0):
                raise AssertionError(
                    f"{name} normalized scores leave (0, 120): "
                    f"[{p.min():.2f}, {p.max():.2f}]")


def _instance_traces(args):
    inst, names, iters, horizon, model = args
    out = {"fp": np.asarray(run_algorithm("fp", inst, horizon).wsr)}
    for name in names:
        out[name] = np.asarray(run_algorithm(name, inst, iters, model).wsr)
    return out


def benchmark(instances: list[NetworkInstance], algorithms=ALGORITHMS,
              iters: int = 16, baseline_iters: int = 100, model=None,
              timing_reps: int = 5, workers: int = 1) -> BenchReport:
    """Run each algorithm on every instance and aggregate.

    The classical solver always runs for max(iters, baseline_iters)
    sweeps: its first `iters` entries form the fp series and the entry at
    baseline_iters is the normalization denominator. Timing uses the first
    instance only, one warm-up then `timing_reps` repetitions, median over
    all per-iteration samples; it stays in this process regardless of
    `workers` so wall times are not polluted by scheduling.
    """
    if not instances:
        raise ValueError("no instances to benchmark")
    unknown = set(algorithms) - set(ALGORITHMS)
    if unknown:
        raise ValueError(f"unknown algorithms {sorted(unknown)}")
    if "gnnfp" in algorithms:
        if model is None:
            raise ValueError("gnnfp benchmark needs a model")
        model = _fold_for_inference(model)
        check_model_dims(model, instances[0])
    horizon = max(iters, baseline_iters)
    others = tuple(n for n in algorithms if n != "fp")
    fp_sum = np.zeros(horizon + 1)
    sums = {name: np.zeros(iters + 1) for name in others}
    jobs = ((inst, others, iters, horizon, model) for inst in instances)
    if workers > 1:
        import multiprocessing as mp
        if model is not None:
            model.workspace.clear()  # scratch buffers do not travel
        with mp.Pool(min(workers, len(instances))) as pool:
            results = pool.imap(_instance_traces, jobs, chunksize=4)
            for tr in results:
                fp_sum += tr["fp"]
                for name in others:
                    sums[name] += tr[name]
    else:
        for job in jobs:
            tr = _instance_traces(job)
            fp_sum += tr["fp"]
            for name in others:
                sums[name] += tr[name]
    n = len(instances)
    report = BenchReport(iters=iters, baseline_iters=baseline_iters,
                         baseline_wsr=fp_sum[baseline_iters] / n,
                         instances=n)
    if "fp" in algorithms:
        report.mean_wsr["fp"] = fp_sum[:iters + 1] / n
    for name, s in sums.items():
        report.mean_wsr[name] = s / n
    for name in algorithms if timing_reps > 0 else ():
        t = per_iteration_times(name, instances[0], iters, model,
                                reps=timing_reps)
        report.sec_per_iter[name] = float(np.median(t))
    if "gnnfp" in algorithms:
        report.param_count = GNNModel().param_count()
    report.validate()
    return report


# ---------------------------------------------------------------------------
# delimited output


BENCH_FIELDS = ("algorithm", "iteration", "mean_wsr", "unit",
                "normalized_pct", "sec_per_iter", "params", "source")
GENERALIZE_FIELDS = ("users", "algorithm", "iters", "normalized_pct",
                     "source")


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_atomic(path: str, text: str):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path))
                               or ".")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.chmod(tmp, 0o644)  # mkstemp defaults to owner-only
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Rows:
    def __init__(self, fields):
        import io
        self.buf = io.StringIO()
        self.writer = csv.DictWriter(self.buf, fieldnames=fields)
        self.writer.writeheader()

    def add(self, **kw):
        self.writer.writerow(kw)

    def text(self) -> str:
        return self.buf.getvalue()


def report_csv(report: BenchReport, bits: bool = False,
               include_deepfp: bool = True, users: int | None = None) -> str:
    """Flat rows: one per (algorithm, iteration), mean objective plus its
    normalized percentage; sec_per_iter and params repeat on each row of
    their series. The classical series extends to the baseline horizon so
    the 100.0 row is part of the output."""
    unit = "bits" if bits else "nats"
    conv = 1.0 / LN2 if bits else 1.0
    rows = _Rows(BENCH_FIELDS)
    for name, tr in report.mean_wsr.items():
        sec = report.sec_per_iter.get(name)
        params = report.param_count if name == "gnnfp" else None
        for k, w in enumerate(tr):
            rows.add(algorithm=name, iteration=k, mean_wsr=_fmt(w * conv),
                     unit=unit, normalized_pct=_fmt(report.pct(name, k)),
                     sec_per_iter="" if sec is None else _fmt(sec),
                     params="" if params is None else params,
                     source="measured")
    if "fp" in report.mean_wsr and report.baseline_iters > report.iters:
        rows.add(algorithm="fp", iteration=report.baseline_iters,
                 mean_wsr=_fmt(report.baseline_wsr * conv), unit=unit,
                 normalized_pct=_fmt(100.0),
                 sec_per_iter=_fmt(report.sec_per_iter["fp"])
                 if "fp" in report.sec_per_iter else "",
                 params="", source="measured")
    if include_deepfp and users in DEEPFP_NORMALIZED_PCT_5ITER:
        rows.add(algorithm="deepfp", iteration=5, mean_wsr="", unit=unit,
                 normalized_pct=_fmt(DEEPFP_NORMALIZED_PCT_5ITER[users]),
                 sec_per_iter=_fmt(DEEPFP_SEC_PER_LAYER),
                 params=DEEPFP_PARAM_COUNT, source=DEEPFP_LABEL)
    return rows.text()


def generalize(model, users: list[int], iters: int, samples: int,
               base_config, baseline_iters: int = 100,
               progress=None, workers: int = 1) -> str:
    """Re-run the 5-iteration comparison at each user count on freshly
    drawn instances, model unchanged. Returns generalization CSV text."""
    from dataclasses import replace
    rows = _Rows(GENERALIZE_FIELDS)
    fm = _fold_for_inference(model)
    for q in users:
        cfg = replace(base_config, Q=q, weights=())
        insts = [generate_instance(cfg, i) for i in range(samples)]
        rep = benchmark(insts, ("fp", "fastfp", "gnnfp"), iters=iters,
                        baseline_iters=baseline_iters, model=fm,
                        timing_reps=0, workers=workers)
        for name in ("fp", "fastfp", "gnnfp"):
            rows.add(users=q, algorithm=name, iters=iters,
                     normalized_pct=_fmt(rep.pct(name, iters)),
                     source="measured")
        if q in DEEPFP_NORMALIZED_PCT_5ITER and iters == 5:
            rows.add(users=q, algorithm="deepfp", iters=5,
                     normalized_pct=_fmt(DEEPFP_NORMALIZED_PCT_5ITER[q]),
                     source=DEEPFP_LABEL)
        elif iters == 5:
            rows.add(users=q, algorithm="deepfp", iters=5,
                     normalized_pct="", source=DEEPFP_LABEL + " (N/A)")
        if progress is not None:
            progress(q)
    return rows.text()
