"""Turn run configs into simulations and experiment directories into tables.

Directory layout written by the CLI::

    <out>/runs/<label>__seed<s>.ndjson   full run log (header carries the RunConfig)
    <out>/runs/<label>__seed<s>.csv      flat record export
    <out>/tables/*.csv, *.txt            summaries, rebuilt from runs/ only
    <out>/plots/*.csv, plot.py           x,y series and a plotting script
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import RunConfig
from .data import (
    Dataset,
    dirichlet_partition,
    iid_partition,
    load_csv,
    synth_classification,
    train_test_split,
)
from .errors import ConfigError
from .metrics import (
    FAILED,
    accuracy_series,
    best_accuracy,
    best_accuracy_within,
    seed_aggregate,
    staleness_histogram,
    table_to_csv,
    table_to_text,
    time_to_target,
)
from .params import LocalTrainConfig, ModelSpec
from .runlog import SCHEMA_VERSION, RunLog
from .simulator import DelayModel, SimConfig, run_simulation, server_wait_accounting
from .strategies import StalenessFn

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "FEDFA_OUT_ROOT"


@dataclass
class Prepared:
    model: ModelSpec
    train: Dataset
    test: Dataset
    sim: SimConfig


def _load_data(rc: RunConfig) -> tuple[Dataset, Dataset]:
    d = rc.data
    if d.source == "synthetic":
        full = synth_classification(d.n_samples, d.n_features, d.n_classes, d.cluster_spread,
                                    seed=rc.seed, class_sep=d.class_sep, scale_ratio=d.scale_ratio)
        return train_test_split(full, d.test_fraction, seed=rc.seed)
    train = load_csv(d.path, d.label_column, header=d.header)
    if d.test_path:
        test = load_csv(d.test_path, d.label_column, header=d.header)
        n_classes = max(train.n_classes, test.n_classes)
        return (Dataset(train.features, train.labels, n_classes),
                Dataset(test.features, test.labels, n_classes))
    return train_test_split(train, d.test_fraction, seed=rc.seed)


def prepare(rc: RunConfig) -> Prepared:
    """Materialise data, partition, model and simulator config for one run."""
    train, test = _load_data(rc)
    sizes = (train.n_features, *rc.model.hidden, train.n_classes)
    model = ModelSpec(rc.model.kind, sizes, rc.model.loss, rc.model.l2_reg, rc.model.bias)
    m = rc.sim.n_clients
    if rc.partition.kind == "iid":
        plan = iid_partition(train, m, seed=rc.seed)
    else:
        plan = dirichlet_partition(train, m, rc.partition.alpha, seed=rc.seed)
    loc = rc.local
    eta = tuple(loc.eta_l) if isinstance(loc.eta_l, list) else loc.eta_l
    local = LocalTrainConfig(Q=loc.steps or 1, eta_l=eta, batch_size=loc.batch_size,
                             prox_mu=loc.prox_mu)
    dl = rc.delay
    fixed = dl.fixed
    if isinstance(fixed, list):
        fixed = tuple(tuple(f) if isinstance(f, list) else f for f in fixed)
    delay = DelayModel(dl.kind, dl.mean, dl.sigma, dl.shape, dl.noise_sigma, fixed,
                       tuple(dl.per_client_rate) if dl.per_client_rate else None)
    st = rc.strategy
    sim = SimConfig(
        n_clients=m,
        concurrency=rc.sim.concurrency,
        partition=plan,
        strategy=st.kind,
        K=st.K,
        eta_g=st.eta_g,
        fedasync_beta=st.beta,
        staleness=StalenessFn(st.staleness, st.staleness_a),
        delta_mode=st.delta_mode,
        fedavg_payload=st.fedavg_payload,
        local=local,
        local_epochs=loc.epochs,
        delay=delay,
        eval_every=rc.sim.eval_every,
        max_virtual_time=rc.sim.max_virtual_time,
        max_versions=rc.sim.max_versions,
        seed=rc.seed,
        store_checkpoints=rc.sim.store_checkpoints,
    )
    return Prepared(model, train, test, sim)


def execute_run(rc: RunConfig) -> RunLog:
    p = prepare(rc)
    out = run_simulation(p.sim, p.model, p.train, p.test)
    out.header["label"] = rc.strategy.name
    out.header["run_config"] = rc.model_dump(mode="json")
    return out


def replay(log_path) -> tuple[bool, RunLog, RunLog]:
    """Re-run the config stored in a log; report whether the output is byte-identical."""
    stored = RunLog.load(log_path)
    if "run_config" not in stored.header:
        raise ConfigError(f"{log_path}: header has no run_config")
    rc = RunConfig.model_validate(stored.header["run_config"])
    fresh = execute_run(rc)
    return fresh.to_ndjson() == stored.to_ndjson(), stored, fresh


def default_output_dir(name: str) -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "fedfa_runs")) / name


def _run_and_save(args: tuple[dict, str]) -> tuple[str, bool]:
    rc_dict, runs_dir = args
    rc = RunConfig.model_validate(rc_dict)
    out = execute_run(rc)
    base = Path(runs_dir) / rc.run_id
    out.save(base.with_suffix(".ndjson"))
    base.with_suffix(".csv").write_text(out.to_csv(), encoding="utf-8")
    return rc.run_id, out.aborted


def run_all(runs: list[RunConfig], out_dir: Path, jobs: int = 1) -> list[str]:
    """Execute runs into ``out_dir/runs``; return the ids of aborted runs."""
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    ids = [rc.run_id for rc in runs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate strategy labels; give each strategy a distinct 'label'")
    tasks = [(rc.model_dump(mode="json"), str(runs_dir)) for rc in runs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_and_save, tasks))
    else:
        results = [_run_and_save(t) for t in tasks]
    for run_id, aborted in results:
        log.info("finished %s%s", run_id, " (aborted)" if aborted else "")
    return [run_id for run_id, aborted in results if aborted]


def load_runs(out_dir: Path) -> dict[str, list[RunLog]]:
    """Stored logs grouped by strategy label, seeds in ascending order."""
    groups: dict[str, list[RunLog]] = {}
    paths = sorted((out_dir / "runs").glob("*.ndjson"))
    if not paths:
        raise ConfigError(f"no run logs under {out_dir / 'runs'}")
    logs = [RunLog.load(p) for p in paths]
    logs.sort(key=lambda lg: (lg.header.get("seed", 0)))
    for lg in logs:
        groups.setdefault(lg.header.get("label", lg.strategy), []).append(lg)
    return groups


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def run_summary_rows(groups: dict[str, list[RunLog]], targets: Iterable[float],
                     budget: float | None = None) -> list[dict]:
    rows = []
    for label, logs in groups.items():
        for lg in logs:
            s = lg.summary
            row = {
                "strategy": label,
                "seed": lg.header.get("seed"),
                "aborted": lg.aborted,
                "final_time": s.get("final_time"),
                "final_version": s.get("final_version"),
                "arrivals": s.get("total_arrivals"),
                "best_accuracy": best_accuracy(lg),
                "tau_max": s.get("tau_max"),
                "server_wait": server_wait_accounting(lg),
                "buffer_latency": s.get("buffer_latency"),
            }
            if budget is not None:
                row["best_accuracy_within_budget"] = best_accuracy_within(lg, budget)
            for t in targets:
                hit = time_to_target(lg, t)
                row[f"time_to_{t:g}"] = hit[0] if hit else FAILED
                row[f"rounds_to_{t:g}"] = hit[1] if hit else FAILED
            rows.append(row)
    return rows


PLOT_SCRIPT = '''\
"""Plot every x,y series in this directory (generated file)."""
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).parent
groups = {}
for path in sorted(here.glob("*.csv")):
    kind = path.stem.split("__")[0]
    groups.setdefault(kind, []).append(path)
for kind, paths in groups.items():
    fig, ax = plt.subplots()
    for path in paths:
        rows = [r for r in csv.reader(l for l in path.open() if not l.startswith("#"))]
        header, data = rows[0], rows[1:]
        xs = [float(r[0]) for r in data]
        ax.plot(xs, [float(r[1]) for r in data], label=path.stem.split("__", 1)[-1])
        ax.set_xlabel(header[0])
        ax.set_ylabel(header[1])
    ax.legend(fontsize="small")
    fig.savefig(here / f"{kind}.png", dpi=120)
    print("wrote", here / f"{kind}.png", file=sys.stderr)
'''


def _series_csv(header: tuple[str, str], points) -> str:
    lines = [f"# schema_version={SCHEMA_VERSION}", ",".join(header)]
    lines += [f"{x!r},{y!r}" for x, y in points]
    return "\n".join(lines) + "\n"


def write_plot_data(groups: dict[str, list[RunLog]], plots_dir: Path) -> None:
    for label, logs in groups.items():
        for lg in logs:
            tag = f"{label}__seed{lg.header.get('seed')}"
            _write(plots_dir / f"acc_vs_time__{tag}.csv",
                   _series_csv(("virtual_time", "accuracy"), accuracy_series(lg, "time")))
            _write(plots_dir / f"acc_vs_rounds__{tag}.csv",
                   _series_csv(("version", "accuracy"), accuracy_series(lg, "version")))
            _write(plots_dir / f"staleness_hist__{tag}.csv",
                   _series_csv(("staleness", "count"), enumerate(staleness_histogram(lg))))
    _write(plots_dir / "plot.py", PLOT_SCRIPT)


def write_tables(out_dir: Path, targets: list[float], budget: float | None = None,
                 compare: bool = False) -> dict[str, list[dict]]:
    """Rebuild every table and plot file from ``out_dir/runs`` alone."""
    groups = load_runs(out_dir)
    tables: dict[str, list[dict]] = {}
    tables["summary"] = run_summary_rows(groups, targets, budget)
    if compare:
        for t in targets:
            tables[f"time_to_target_{t:g}"] = seed_aggregate(groups, t)
        best = []
        for label, logs in groups.items():
            row = {"strategy": label,
                   "best_accuracy_median": float(np.median([best_accuracy(lg) for lg in logs])),
                   "best_accuracy_max": max(best_accuracy(lg) for lg in logs)}
            if budget is not None:
                row["best_within_budget_median"] = float(
                    np.median([best_accuracy_within(lg, budget) for lg in logs]))
            best.append(row)
        tables["best_accuracy"] = best
    for name, rows in tables.items():
        _write(out_dir / "tables" / f"{name}.csv", table_to_csv(rows))
        _write(out_dir / "tables" / f"{name}.txt", table_to_text(rows))
    write_plot_data(groups, out_dir / "plots")
    return tables


def sweep_value_dir(out_dir: Path, axis: str, value) -> Path:
    return out_dir / f"sweep_{axis}" / f"{axis}={value:g}"


def write_sweep_tables(out_dir: Path, axis: str, values: list[float], targets: list[float],
                       budget: float | None = None) -> list[dict]:
    """Trend table across sweep values: one row per (value, strategy)."""
    rows = []
    for v in values:
        groups = load_runs(sweep_value_dir(out_dir, axis, v))
        for label, logs in groups.items():
            row = {axis: v, "strategy": label,
                   "best_accuracy": float(np.median([best_accuracy(lg) for lg in logs]))}
            if budget is not None:
                row["best_within_budget"] = float(
                    np.median([best_accuracy_within(lg, budget) for lg in logs]))
            for agg in [seed_aggregate({label: logs}, t)[0] for t in targets]:
                row[f"time_to_{agg['target']:g}"] = agg["time"]
                row[f"rounds_to_{agg['target']:g}"] = agg["rounds"]
                row[f"reached_{agg['target']:g}"] = f"{agg['reached']}/{agg['seeds']}"
            rows.append(row)
    _write(out_dir / "tables" / f"sweep_{axis}.csv", table_to_csv(rows))
    _write(out_dir / "tables" / f"sweep_{axis}.txt", table_to_text(rows))
    key = "best_within_budget" if budget is not None else "best_accuracy"
    by_label: dict[str, list] = {}
    for r in rows:
        by_label.setdefault(r["strategy"], []).append((r[axis], r[key]))
    for label, pts in by_label.items():
        _write(out_dir / "plots" / f"sweep_{axis}__{label}.csv", _series_csv((axis, key), pts))
    _write(out_dir / "plots" / "plot.py", PLOT_SCRIPT)
    return rows
