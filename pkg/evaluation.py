# evaluation.py
"""ADE/FDE evaluation and the patient-specific vs multi-patient experiment protocol."""
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from dataset import Cohort, DrrSample, SessionDataset, TrainingPool, denormalize_position
from formats.reports import (
    DETAIL_COLUMNS, SUMMARY_COLUMNS, TABLE1_COLUMNS, TEST_COLUMNS, read_rows, write_rows,
)
from model import init_glorot
from train import stack_batch, train
from tumor_shared import (
    ContractError, ForecastError, ModelConfig, ParameterError, ShapeError, TrainConfig, emit, log_error,
)

STRATEGIES = ("PS", "MP")
SESSIONS = ("T1", "T2")
DEFAULT_N_TRAIN_GRID = (200, 500, 1000, 2500)
DEFAULT_THRESHOLD_MM = 2.0


# --- Metrics ---
def _displacements(pred, gt) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 2 or p.shape[-1] != 3 or p.shape[0] < 1:
        raise ShapeError("prediction and ground truth differ", p.shape, g.shape)
    return np.sqrt(((p - g) ** 2).sum(axis=1))


def ade(pred, gt) -> float:
    return float(_displacements(pred, gt).mean())


def fde(pred, gt) -> float:
    return float(_displacements(pred, gt)[-1])


def horizon_steps(horizon_s: float, rate_hz: float = 5.0) -> int:
    """1.0 s -> 5 steps, 0.2 s -> 1 step at 5 Hz."""
    return max(1, int(round(horizon_s * rate_hz)))


def _sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class MetricsReport:
    patient_id: str
    session: str
    strategy: str = ""
    n_train: int = 0
    seed: int = 0
    ade: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fde: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_patients: Tuple[str, ...] = ()
    status: str = "ok"
    message: str = ""
    group: str = ""

    @property
    def key(self) -> Tuple:
        return (self.patient_id, self.strategy, self.session, self.n_train, self.seed)

    @property
    def ade_mean(self) -> float:
        return float(self.ade.mean()) if self.ade.size else math.nan

    @property
    def fde_mean(self) -> float:
        return float(self.fde.mean()) if self.fde.size else math.nan

    @property
    def ade_sd(self) -> float:
        return _sd(self.ade)

    @property
    def fde_sd(self) -> float:
        return _sd(self.fde)

    def to_row(self) -> Dict:
        ok = self.status == "ok"
        return {
            "patient_id": self.patient_id, "group": self.group, "strategy": self.strategy, "session": self.session,
            "n_train": self.n_train, "seed": self.seed, "n_samples": int(self.ade.size),
            "ade_mean": self.ade_mean if ok else None, "ade_sd": self.ade_sd if ok else None,
            "fde_mean": self.fde_mean if ok else None, "fde_sd": self.fde_sd if ok else None,
            "status": self.status, "train_patients": ";".join(self.train_patients), "message": self.message,
        }


class PersistenceBaseline:
    """Predicts the last observed position for every future step."""

    def __init__(self, T_obs: int = 16, T_pred: int = 5):
        self.T_obs = T_obs
        self.T_pred = T_pred

    def predict(self, frames, observed) -> np.ndarray:
        obs = np.asarray(observed, dtype=np.float64)
        return np.repeat(obs[:, -1:, :], self.T_pred, axis=1)


def _window_of(model) -> Tuple[int, int, Optional[int]]:
    cfg = getattr(model, "config", model)
    return cfg.T_obs, cfg.T_pred, getattr(cfg, "image_size", None)


def evaluate(model, dataset, *, strategy: str = "", n_train: int = 0, seed: int = 0,
             horizon: Optional[int] = None, batch_size: int = 32,
             train_patients: Iterable[str] = (), group: str = "") -> MetricsReport:
    """Autoregressive inference per sample; metrics in mm after denormalization."""
    samples: List[DrrSample] = list(getattr(dataset, "samples", dataset))
    if not samples:
        raise ParameterError("cannot evaluate on an empty dataset")
    T_obs, T_pred, size = _window_of(model)
    if samples[0].frames.shape[0] != T_obs or samples[0].targets.shape[0] != T_pred:
        raise ContractError(f"dataset windows ({samples[0].frames.shape[0]}, {samples[0].targets.shape[0]}) "
                            f"do not match the model ({T_obs}, {T_pred})")
    if size is not None and samples[0].frames.shape[1:] != (size, size):
        raise ContractError(f"dataset frames {samples[0].frames.shape[1:]} do not match the model image size "
                            f"({size}, {size})")
    k = T_pred if horizon is None else horizon
    if not 1 <= k <= T_pred:
        raise ParameterError(f"horizon {k} outside [1, {T_pred}]")
    ades, fdes = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        frames, observed, _ = stack_batch(chunk)
        preds = np.asarray(model.predict(frames, observed), dtype=np.float64)
        for s, p in zip(chunk, preds):
            p_mm = denormalize_position(p[:k], s.norm)
            g_mm = denormalize_position(s.targets[:k], s.norm)
            ades.append(ade(p_mm, g_mm))
            fdes.append(fde(p_mm, g_mm))
    return MetricsReport(
        patient_id=samples[0].patient_id, session=samples[0].session, strategy=strategy,
        n_train=n_train, seed=seed, ade=np.asarray(ades), fde=np.asarray(fdes),
        train_patients=tuple(sorted(train_patients)), group=group,
    )


# --- Statistics ---
@dataclass(frozen=True)
class PairedTest:
    t: float
    p: float
    df: int
    significant: bool
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> PairedTest:
    """Two-sided paired t-test on a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("paired samples differ in length", a.shape, b.shape)
    n = a.size
    if n < 2:
        raise ParameterError(f"paired t-test needs at least 2 pairs, got {n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTest(t=0.0, p=1.0, df=n - 1, significant=False, degenerate=True)
        return PairedTest(t=math.copysign(math.inf, mean), p=0.0, df=n - 1, significant=True, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return PairedTest(t=t, p=p, df=n - 1, significant=p < alpha)


# --- Experiment ---
@dataclass
class ExperimentResult:
    reports: List[MetricsReport]
    n_train_grid: Tuple[int, ...] = ()
    seeds: Tuple[int, ...] = ()

    def sorted_reports(self) -> List[MetricsReport]:
        return sorted(self.reports, key=lambda r: r.key)

    def rows(self) -> List[Dict]:
        return [r.to_row() for r in self.sorted_reports()]

    @property
    def missing(self) -> List[MetricsReport]:
        return [r for r in self.reports if r.status != "ok"]


@dataclass(frozen=True)
class CellTask:
    target_id: str
    n_train: int
    seed: int
    ps_pool: TrainingPool
    mp_pool: TrainingPool
    tests: Dict[str, SessionDataset]
    model_config: ModelConfig
    train_config: TrainConfig
    horizon: Optional[int] = None
    group: str = ""


def _run_cell(task: CellTask) -> List[MetricsReport]:
    out = []
    for strategy, pool in (("PS", task.ps_pool), ("MP", task.mp_pool)):
        tags = dict(strategy=strategy, n_train=task.n_train, seed=task.seed,
                    train_patients=sorted(pool.patient_ids), group=task.group)
        try:
            model = init_glorot(task.model_config, task.seed)
            train(model, pool, task.train_config.model_copy(update={"seed": task.seed}), verbose=False)
            for session in SESSIONS:
                out.append(evaluate(model, task.tests[session], horizon=task.horizon, **tags))
        except ForecastError as e:
            log_error(f"cell {task.target_id}/{strategy}/{task.n_train}/{task.seed} failed: {e}")
            done = {r.session for r in out if r.strategy == strategy}
            for session in SESSIONS:
                if session not in done:
                    out.append(MetricsReport(patient_id=task.target_id, session=session, status="missing",
                                             message=f"{e.category}: {e}", **tags))
    return out


def run_strategy_comparison(cohort: Cohort, n_train_grid: Sequence[int] = DEFAULT_N_TRAIN_GRID,
                            seeds: Sequence[int] = (0,), model_config: Optional[ModelConfig] = None,
                            train_config: Optional[TrainConfig] = None, *, workers: int = 1,
                            horizon: Optional[int] = None) -> ExperimentResult:
    """PS and MP models per (target patient, n_train, seed), each evaluated on T1 and T2."""
    if len(cohort.patient_ids) < 2:
        raise ParameterError("strategy comparison needs at least 2 patients")
    model_config = model_config or ModelConfig.toy()
    train_config = train_config or TrainConfig()
    tasks = []
    for pid in cohort.patient_ids:
        tests = {s: cohort.test_set(pid, s) for s in SESSIONS}
        for n_train in n_train_grid:
            for seed in seeds:
                split = cohort.split(pid, n_train, seed)
                if pid in split.mp_pool.patient_ids:
                    raise ContractError(f"MP pool for {pid} contains its own samples")
                tasks.append(CellTask(pid, n_train, seed, split.ps_pool, split.mp_pool, tests,
                                      model_config, train_config, horizon, cohort.entry(pid).group))
    reports: List[MetricsReport] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell in pool.map(_run_cell, tasks):
                reports.extend(cell)
    else:
        for task in tasks:
            reports.extend(_run_cell(task))
            emit("sweep_cell", {"patient_id": task.target_id, "n_train": task.n_train, "seed": task.seed})
    reports.sort(key=lambda r: r.key)
    return ExperimentResult(reports=reports, n_train_grid=tuple(n_train_grid), seeds=tuple(seeds))


def _per_patient(rows: Sequence[Dict], strategy: str, session: str, n_train: int,
                 metric: str) -> Dict[str, float]:
    """Per-patient value: mean over seeds of the per-cell sample mean."""
    acc: Dict[str, List[float]] = {}
    for r in rows:
        if (r["strategy"], r["session"], r["n_train"], r["status"]) == (strategy, session, n_train, "ok"):
            acc.setdefault(r["patient_id"], []).append(r[f"{metric}_mean"])
    return {pid: float(np.mean(v)) for pid, v in sorted(acc.items())}


def paired_tests(result, alpha: float = 0.05) -> List[Dict]:
    """PS vs MP over patients for each (n_train, session, metric)."""
    rows = result.rows() if isinstance(result, ExperimentResult) else list(result)
    out = []
    for n_train in sorted({r["n_train"] for r in rows}):
        for session in SESSIONS:
            for metric in ("ade", "fde"):
                ps = _per_patient(rows, "PS", session, n_train, metric)
                mp = _per_patient(rows, "MP", session, n_train, metric)
                common = sorted(set(ps) & set(mp))
                if len(common) < 2:
                    continue
                res = paired_t_test([ps[p] for p in common], [mp[p] for p in common], alpha)
                out.append({"n_train": n_train, "session": session, "metric": metric, "n": len(common),
                            "t": res.t, "p": res.p, "df": res.df, "significant": res.significant,
                            "degenerate": res.degenerate})
    return out


@dataclass(frozen=True)
class DecompositionRow:
    strategy: str
    patient_id: str
    modeling_error_mm: float
    inter_fractional_error_mm: float


@dataclass
class ErrorDecomposition:
    rows: List[DecompositionRow]
    threshold_mm: float
    n_train: int

    def count_under(self, strategy: str, kind: str) -> int:
        attr = "modeling_error_mm" if kind == "modeling" else "inter_fractional_error_mm"
        return sum(1 for r in self.rows if r.strategy == strategy and getattr(r, attr) <= self.threshold_mm)


def error_decomposition(result, threshold_mm: float = DEFAULT_THRESHOLD_MM,
                        n_train: Optional[int] = None) -> ErrorDecomposition:
    """Modeling error (T1 ADE) and inter-fractional error (T2 ADE) per patient and strategy."""
    rows = result.rows() if isinstance(result, ExperimentResult) else list(result)
    sessions = {r["session"] for r in rows if r["status"] == "ok"}
    if not set(SESSIONS) <= sessions:
        raise ContractError(f"error decomposition needs both sessions, result has {sorted(sessions)}")
    if n_train is None:
        n_train = max(r["n_train"] for r in rows)
    out = []
    for strategy in STRATEGIES:
        t1 = _per_patient(rows, strategy, "T1", n_train, "ade")
        t2 = _per_patient(rows, strategy, "T2", n_train, "ade")
        for pid in sorted(set(t1) & set(t2)):
            out.append(DecompositionRow(strategy, pid, t1[pid], t2[pid]))
    return ErrorDecomposition(rows=out, threshold_mm=threshold_mm, n_train=n_train)


# --- Reports ---
def _pooled_sd(cells: Sequence[Dict], metric: str) -> float:
    """SD over all samples, rebuilt from per-cell counts, means and SDs."""
    n = np.array([c["n_samples"] for c in cells], dtype=np.float64)
    m = np.array([c[f"{metric}_mean"] for c in cells], dtype=np.float64)
    s = np.array([c[f"{metric}_sd"] for c in cells], dtype=np.float64)
    total = n.sum()
    if total < 2:
        return 0.0
    grand = float((n * m).sum() / total)
    ss = float(((n - 1) * s ** 2).sum() + (n * (m - grand) ** 2).sum())
    return math.sqrt(max(ss, 0.0) / (total - 1))


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Cohort summary per (strategy, session, n_train): means over patients, both SDs."""
    out = []
    keys = sorted({(r["strategy"], r["session"], r["n_train"]) for r in rows if r["status"] == "ok"})
    for strategy, session, n_train in keys:
        cells = [r for r in rows if (r["strategy"], r["session"], r["n_train"], r["status"])
                 == (strategy, session, n_train, "ok")]
        row = {"strategy": strategy, "session": session, "n_train": n_train}
        for metric in ("ade", "fde"):
            per = np.array(list(_per_patient(rows, strategy, session, n_train, metric).values()))
            row["n_patients"] = int(per.size)
            row[f"{metric}_mean"] = float(per.mean())
            row[f"{metric}_sd_patients"] = _sd(per)
            row[f"{metric}_sd_samples"] = _pooled_sd(cells, metric)
        out.append(row)
    return out


def table1(rows: Sequence[Dict], n_train: Optional[int] = None) -> List[Dict]:
    """Wide table per dataset group and strategy at one n_train, plus an "Averaged" group.

    Means are over patients; SDs are pooled over test samples.
    """
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return []
    if n_train is None:
        n_train = max(r["n_train"] for r in ok)
    groups = sorted({r.get("group") or "" for r in ok} - {""})
    out = []
    for name in groups + ["Averaged"]:
        members = ok if name == "Averaged" else [r for r in ok if (r.get("group") or "") == name]
        for strategy in STRATEGIES:
            row = {"dataset": name, "strategy": strategy, "n_train": n_train, "n_patients": 0}
            for session in SESSIONS:
                cells = [r for r in members if (r["strategy"], r["session"], r["n_train"])
                         == (strategy, session, n_train)]
                for metric in ("ade", "fde"):
                    col = f"{session.lower()}_{metric}"
                    per = np.array(list(_per_patient(cells, strategy, session, n_train, metric).values()))
                    row[col] = float(per.mean()) if per.size else None
                    row[f"{col}_sd"] = _pooled_sd(cells, metric) if cells else None
                    row["n_patients"] = max(row["n_patients"], int(per.size))
            out.append(row)
    return out


def write_report(result, out_dir: str) -> Dict[str, str]:
    """detail.csv, summary.csv, table1.csv and tests.csv under out_dir."""
    rows = result.rows() if isinstance(result, ExperimentResult) else list(result)
    paths = {
        "detail": write_rows(os.path.join(out_dir, "detail.csv"), DETAIL_COLUMNS, rows),
        "summary": write_rows(os.path.join(out_dir, "summary.csv"), SUMMARY_COLUMNS, summarize(rows)),
        "table1": write_rows(os.path.join(out_dir, "table1.csv"), TABLE1_COLUMNS, table1(rows)),
        "tests": write_rows(os.path.join(out_dir, "tests.csv"), TEST_COLUMNS, paired_tests(rows)),
    }
    emit("report_written", {"out_dir": out_dir, "rows": len(rows)})
    return paths


def read_report(path: str) -> List[Dict]:
    rows = read_rows(path, DETAIL_COLUMNS)
    for r in rows:
        r["train_patients"] = r["train_patients"] or ""
        r["message"] = r["message"] or ""
        r["group"] = r["group"] or ""
    return rows
