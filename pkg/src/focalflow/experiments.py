"""Train-then-evaluate protocol shared by the ``train``/``sweep`` commands and the
acceptance suite."""

import csv
import itertools
import json
from pathlib import Path

from . import _rng
from .config import DEFAULTS, apply_overrides, dump_config, merge, resolve
from .evaluation import evaluate_policy
from .trajectory import Dataset, generate_expert, load_demos
from .training import policy_from_state, run_training


def training_demos(data):
    if data.demos:
        return load_demos(data.demos)
    return generate_expert(data.task, data.seed, data.count, data.length)


def heldout_demos(data, ev):
    """Fresh demonstrations of the same task from a disjoint seed."""
    return generate_expert(data.task, data.seed + ev.heldout_offset, data.count, data.length)


def build_dataset(data, demos=None):
    return Dataset(demos if demos is not None else training_demos(data),
                   data.chunk_size, data.num_chunks, data.n_obs)


def evaluate_run(state, dataset, run, demos=None):
    """Aggregate metrics of the EMA policy on held-out demonstrations."""
    policy = policy_from_state(state, dataset)
    demos = demos if demos is not None else heldout_demos(run.data, run.eval)
    _, _, agg = evaluate_policy(
        policy, demos, run.eval.episodes, run.eval.mode, run.eval.exec_steps,
        rng=_rng.stream(run.eval.seed, "eval"), tolerance=run.eval.tolerance,
    )
    row = {k: v for k, v in agg.row().items() if isinstance(v, (int, float))}
    row["nfe_per_decision"] = policy.nfe_per_decision
    return row, agg


def train_and_evaluate(run, out_dir=None):
    """Train under ``run`` (a :class:`RunConfig`), then evaluate on held-out demos."""
    dataset = build_dataset(run.data)
    result = run_training(run.train, dataset, out_dir=out_dir)
    metrics, agg = evaluate_run(result.state, dataset, run)
    metrics["final_loss_total"] = result.summary["final_loss_total"]
    if out_dir is not None:
        out = Path(out_dir)
        (out / "config.yaml").write_text(dump_config(run.raw))
        (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return result, metrics, agg


# -- sweeps ------------------------------------------------------------------

def grid_points(grid):
    """Cross product of ``{"section.key": [values, ...]}`` as lists of (key, value)."""
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield list(zip(keys, values))


def point_name(point):
    return "__".join(f"{k.split('.')[-1]}={v}" for k, v in point) or "base"


def is_default_horizon(run):
    return run.data.chunk_size == 4 and run.data.num_chunks == 3


def run_sweep(base, grid, out_dir, progress=None):
    """Run every grid point into its own directory; completed points are skipped.

    Returns the summary rows, also written to ``out_dir/summary.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = merge(DEFAULTS, base)
    rows = []
    for point in grid_points(grid):
        name = point_name(point)
        cfg = apply_overrides(base, [f"{k}={json.dumps(v)}" for k, v in point])
        run = resolve(cfg)
        point_dir = out / name
        done = point_dir / "eval.json"
        if done.exists():
            metrics = json.loads(done.read_text())
            status = "skipped"
        else:
            _, metrics, _ = train_and_evaluate(run, point_dir)
            status = "ran"
        if progress is not None:
            progress(name, status)
        row = {k: v for k, v in point}
        row["label"] = "default" if is_default_horizon(run) else ""
        row["run_dir"] = name
        row.update(metrics)
        rows.append(row)
    write_summary(out / "summary.csv", rows)
    return rows


def write_summary(path, rows):
    columns = []
    for r in rows:
        columns.extend(k for k in r if k not in columns)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path

