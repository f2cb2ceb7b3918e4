"""Desk-scale experiments behind the CLI commands.

Each ``run_*`` returns an Outcome: a summary dict plus the rendered text of
every artifact file. Rendering is deterministic (repr floats, sorted JSON
keys, no timestamps) so equal configs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checks
from .config import ExperimentConfig, to_dict
from .data import Dataset, Task, class_indices, load
from .errors import ConfigError, CorrelationUndefined, InvalidParameter
from .models import CurvatureKind, ModelSpec, output, per_example_nll
from .mpe import hessian_view, output_deviations
from .optim import PreconditionerView, TrainerState, fit_map, preconditioner_view, train
from .oracle import DeviationComparison, compare_removals, rank_correlation, retrain_without
from .predict import heldout_metrics, loo_estimate, subset_loss_estimate

SWEEP_HEADER = ("delta", "loo", "test_nll", "train_nll", "test_accuracy")
EVOLVE_HEADER = ("epoch", "step", "example_id", "score")
LOCO_HEADER = ("class", "n", "loco", "retrained_nll", "test_nll", "retrained_test_nll")
TRACK_KEYS = ("epoch", "step", "loo", "train_nll", "test_nll", "test_accuracy", "n")


@dataclass
class Outcome:
    summary: dict
    files: dict[str, str] = field(default_factory=dict)
    passed: bool = True

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in sorted(self.files):
            p = out / name
            p.write_text(self.files[name], encoding="utf-8")
            paths.append(p)
        return paths


# ------------------------------------------------------------ rendering


def _num(x):
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else None


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def render_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _safe_corr(xs, ys, kind):
    try:
        return rank_correlation(xs, ys, kind)
    except CorrelationUndefined:
        return None


# -------------------------------------------------------------- plumbing


@dataclass
class Problem:
    model: ModelSpec
    train: Dataset
    test: Dataset | None


def prepare(cfg: ExperimentConfig) -> Problem:
    train_set, test_set = load(replace(cfg.data, seed=cfg.seed))
    model = ModelSpec.for_data(cfg.model.arch, train_set, tuple(cfg.model.hidden))
    return Problem(model, train_set, test_set if test_set.n else None)


def fit(cfg: ExperimentConfig, prob: Problem, data: Dataset | None = None, theta0=None, callback=None):
    """(theta, trainer state or None) under the configured trainer."""
    data = prob.train if data is None else data
    if cfg.trainer.algorithm == "map":
        if not prob.model.convex:
            raise ConfigError("trainer.algorithm", "'map' needs a convex model; pick an optimizer")
        theta, _ = fit_map(prob.model, data, theta0, cfg.trainer.tol, cfg.trainer.max_iter)
        return theta, None
    st = train(prob.model, data, cfg.trainer.algorithm, cfg.trainer.hyper(cfg.seed), cfg.trainer.epochs, callback=callback, theta0=theta0)
    return st.theta, st


def make_view(cfg: ExperimentConfig, prob: Problem, theta, state: TrainerState | None, data: Dataset | None = None) -> PreconditionerView:
    data = prob.train if data is None else data
    kind = cfg.estimator.view
    if kind == "auto":
        kind = "hessian" if state is None else "trainer"
    if kind == "hessian":
        return hessian_view(prob.model, theta, data, CurvatureKind.FULL_GGN)
    if kind == "diag_ggn":
        return hessian_view(prob.model, theta, data, CurvatureKind.DIAG_GGN)
    if state is None:
        raise ConfigError("estimator.view", "'trainer' view needs an iterative trainer")
    return preconditioner_view(state, data.delta)


def _need_trainer(cfg: ExperimentConfig, command: str) -> None:
    if cfg.trainer.algorithm == "map":
        raise ConfigError("trainer.algorithm", f"{command} follows training epochs; pick an optimizer, not 'map'")


def _need_test(prob: Problem, command: str) -> None:
    if prob.test is None:
        raise ConfigError("data", f"{command} needs held-out rows (n_test or test_fraction)")


def _config_file(cfg: ExperimentConfig) -> str:
    d = to_dict(cfg)
    d.pop("output_dir")
    return render_json(d)


# ------------------------------------------------------------- commands


def run_scatter(cfg: ExperimentConfig) -> Outcome:
    """Estimated vs retrained prediction deviation for random removal groups."""
    prob = prepare(cfg)
    theta, state = fit(cfg, prob)
    view = make_view(cfg, prob, theta, state)
    sc = cfg.scatter
    total = sc.n_removals * sc.group_size
    if total > prob.train.n:
        raise ConfigError("scatter.n_removals", f"{total} removals exceed {prob.train.n} training rows")
    picks = np.random.default_rng([cfg.seed, 21]).choice(prob.train.n, total, replace=False)
    groups = [np.sort(g).tolist() for g in picks.reshape(sc.n_removals, sc.group_size)]
    comps = compare_removals(
        prob.model, prob.train, theta, view, groups, cfg.estimator.mode, cfg.retrain.build(cfg.seed), cfg.estimator.cap
    )
    rho = cfg.estimator.rho
    comps = [
        replace(c, estimated_deviation=rho * c.estimated_deviation, estimate_param_delta_norm=rho * c.estimate_param_delta_norm)
        for c in comps
    ]
    true_s = [c.true_score for c in comps]
    est_s = [c.est_score for c in comps]
    summary = {
        "command": "scatter",
        "n_groups": sc.n_removals,
        "group_size": sc.group_size,
        "mode": cfg.estimator.mode,
        "spearman": _num(_safe_corr(est_s, true_s, "spearman")),
        "pearson": _num(_safe_corr(est_s, true_s, "pearson")),
        "seed": cfg.seed,
    }
    files = {
        "scatter.csv": render_csv(DeviationComparison.CSV_HEADER, [c.csv_row() for c in comps]),
        "scatter_summary.json": render_json(summary),
        "config.json": _config_file(cfg),
    }
    return Outcome(summary, files)


def sweep_grid(cfg: ExperimentConfig) -> list[float]:
    sw = cfg.sweep
    if sw.deltas is not None:
        return [float(d) for d in sw.deltas]
    if not 0 < sw.delta_min < sw.delta_max:
        raise ConfigError("sweep", "need 0 < delta_min < delta_max")
    return [float(d) for d in np.logspace(math.log10(sw.delta_min), math.log10(sw.delta_max), sw.n_points)]


def run_sweep(cfg: ExperimentConfig) -> Outcome:
    """LOO estimate and held-out NLL along a grid of prior precisions."""
    prob = prepare(cfg)
    _need_test(prob, "sweep")
    rows = []
    warm = None
    for delta in sweep_grid(cfg):
        data = prob.train.with_delta(delta)
        theta, state = fit(cfg, prob, data, theta0=warm)
        if state is None:
            warm = theta
        view = make_view(cfg, prob, theta, state, data)
        rep = loo_estimate(prob.model, theta, view, data, prob.test, scale=cfg.estimator.rho)
        rows.append((delta, rep.loo, rep.test_nll, rep.train_nll, rep.test_accuracy))
    loo = [r[1] for r in rows]
    tst = [r[2] for r in rows]
    a_loo, a_test = int(np.argmin(loo)), int(np.argmin(tst))
    summary = {
        "command": "sweep",
        "deltas": [r[0] for r in rows],
        "argmin_loo": a_loo,
        "argmin_test": a_test,
        "argmin_gap": abs(a_loo - a_test),
        "pearson": _num(_safe_corr(loo, tst, "pearson")),
        "spearman": _num(_safe_corr(loo, tst, "spearman")),
        "seed": cfg.seed,
    }
    files = {
        "sweep.csv": render_csv(SWEEP_HEADER, rows),
        "sweep_summary.json": render_json(summary),
        "config.json": _config_file(cfg),
    }
    return Outcome(summary, files)


def run_track(cfg: ExperimentConfig) -> Outcome:
    """LOO estimate and test NLL at every checkpoint during training."""
    _need_trainer(cfg, "track")
    prob = prepare(cfg)
    _need_test(prob, "track")
    records = []

    def checkpoint(st: TrainerState, epoch: int):
        if epoch % cfg.track.every:
            return
        view = make_view(cfg, prob, st.theta, st)
        rep = loo_estimate(prob.model, st.theta, view, prob.train, prob.test, step=st.step, scale=cfg.estimator.rho)
        rec = {k: _num(v) for k, v in rep.to_json().items()}
        rec["epoch"] = epoch
        records.append(rec)

    fit(cfg, prob, callback=checkpoint)
    loo = [r["loo"] for r in records]
    tst = [r["test_nll"] for r in records]
    summary = {
        "command": "track",
        "n_checkpoints": len(records),
        "spearman": _num(_safe_corr(loo, tst, "spearman")) if len(records) >= 3 else None,
        "pearson": _num(_safe_corr(loo, tst, "pearson")) if len(records) >= 3 else None,
        "seed": cfg.seed,
    }
    lines = "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in records)
    files = {"track.jsonl": lines, "track_summary.json": render_json(summary), "config.json": _config_file(cfg)}
    return Outcome(summary, files)


def run_evolve(cfg: ExperimentConfig) -> Outcome:
    """Per-example sensitivity scores over the course of training."""
    _need_trainer(cfg, "evolve")
    prob = prepare(cfg)
    ev = cfg.evolve
    ids = list(range(min(ev.n_examples, prob.train.n))) if ev.examples is None else list(ev.examples)
    if not ids or min(ids) < 0 or max(ids) >= prob.train.n:
        raise ConfigError("evolve.examples", f"indices must lie in [0, {prob.train.n})")
    rows = []

    def checkpoint(st: TrainerState, epoch: int):
        if epoch % ev.every:
            return
        view = make_view(cfg, prob, st.theta, st)
        for rec in output_deviations(prob.model, st.theta, view, prob.train, ids):
            rows.append((epoch, st.step, rec.example_id, cfg.estimator.rho * rec.score))

    fit(cfg, prob, callback=checkpoint)
    summary = {"command": "evolve", "n_examples": len(ids), "n_rows": len(rows), "seed": cfg.seed}
    files = {"evolve.csv": render_csv(EVOLVE_HEADER, rows), "config.json": _config_file(cfg)}
    return Outcome(summary, files)


def _class_nll(model, theta, data: Dataset, c: int):
    idx = class_indices(data, c)
    if idx.size == 0:
        return None
    return float(per_example_nll(model, output(model, theta, data.X[idx]), data.y[idx]).mean())


def run_loco(cfg: ExperimentConfig) -> Outcome:
    """Leave-one-class-out estimates vs retraining without each class.

    ``loco`` and ``retrained_nll`` score the left-out class's training rows;
    the test columns score its held-out rows under the full and retrained fits.
    """
    prob = prepare(cfg)
    if prob.model.task is Task.REGRESSION:
        raise ConfigError("data", "loco needs a classification task")
    theta, state = fit(cfg, prob)
    view = make_view(cfg, prob, theta, state)
    rc = cfg.retrain.build(cfg.seed)
    rows = []
    for c in range(prob.train.n_classes):
        idx = class_indices(prob.train, c)
        if idx.size == 0:
            continue
        est = subset_loss_estimate(
            prob.model, theta, view, prob.train, idx, exact_group=cfg.estimator.mode == "full", reduce="mean", scale=cfg.estimator.rho
        )
        res = retrain_without(prob.model, prob.train, idx, theta, rc)
        truth = _class_nll(prob.model, res.theta, prob.train, c)
        t_full = _class_nll(prob.model, theta, prob.test, c) if prob.test is not None else None
        t_re = _class_nll(prob.model, res.theta, prob.test, c) if prob.test is not None else None
        rows.append((c, int(idx.size), est, truth, t_full, t_re))
    est = [r[2] for r in rows]
    tru = [r[3] for r in rows]
    summary = {
        "command": "loco",
        "spearman": _num(_safe_corr(est, tru, "spearman")) if len(rows) >= 3 else None,
        "argmax_loco": int(np.argmax(est)),
        "argmax_retrained": int(np.argmax(tru)),
        "seed": cfg.seed,
    }
    if prob.test is not None and len(rows) >= 3:
        summary["spearman_test"] = _num(_safe_corr(est, [r[4] for r in rows], "spearman"))
    files = {
        "loco.csv": render_csv(LOCO_HEADER, rows),
        "loco_summary.json": render_json(summary),
        "config.json": _config_file(cfg),
    }
    return Outcome(summary, files)


# ---------------------------------------------------------------- verify


def _floats_ok(cells) -> bool:
    try:
        return all(c == "" or math.isfinite(float(c)) for c in cells)
    except ValueError:
        return False


def check_artifact(path: Path) -> checks.CheckResult:
    """Parse one output file and confirm its header/keys and finite numbers."""
    name = f"artifact:{path.name}"
    headers = {
        "scatter.csv": DeviationComparison.CSV_HEADER,
        "sweep.csv": SWEEP_HEADER,
        "evolve.csv": EVOLVE_HEADER,
        "loco.csv": LOCO_HEADER,
    }
    ok = True
    count = 0
    try:
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".csv":
            rows = list(csv.reader(io.StringIO(text)))
            ok = bool(rows) and tuple(rows[0]) == tuple(headers.get(path.name, rows[0]))
            # scatter ids are dash-joined indices, not numbers
            skip = 1 if path.name == "scatter.csv" else 0
            ok = ok and all(len(r) == len(rows[0]) and _floats_ok(r[skip:]) for r in rows[1:])
            count = len(rows) - 1
        elif path.suffix == ".jsonl":
            recs = [json.loads(line) for line in text.splitlines()]
            ok = all(set(TRACK_KEYS) <= set(r) for r in recs)
            count = len(recs)
        else:
            json.loads(text)
            count = 1
    except (OSError, ValueError):
        ok = False
    return checks.CheckResult(name, float(count), 0.0, bool(ok))


ARTIFACTS = (
    "scatter.csv",
    "scatter_summary.json",
    "sweep.csv",
    "sweep_summary.json",
    "track.jsonl",
    "track_summary.json",
    "evolve.csv",
    "loco.csv",
    "loco_summary.json",
)


def run_verify(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Outcome:
    """Invariant suite, plus a parse of any artifacts already in ``out_dir``."""
    v = cfg.verify
    results = checks.run_all(v.n_beta, v.n_ridge, v.iblr_steps, v.mc_samples, cfg.seed)
    if v.check_artifacts and out_dir is not None:
        for name in ARTIFACTS:
            p = Path(out_dir) / name
            if p.exists():
                results.append(check_artifact(p))
    passed = all(r.passed for r in results)
    summary = {
        "command": "verify",
        "passed": passed,
        "checks": {r.name: {k: _num(x) for k, x in r.to_json().items()} for r in results},
        "seed": cfg.seed,
    }
    return Outcome(summary, {"verify.json": render_json(summary)}, passed)


RUNNERS = {
    "scatter": run_scatter,
    "sweep": run_sweep,
    "track": run_track,
    "evolve": run_evolve,
    "loco": run_loco,
}


def run(command: str, cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Outcome:
    if command == "verify":
        return run_verify(cfg, out_dir)
    if command not in RUNNERS:
        raise InvalidParameter(f"unknown command {command!r}")
    return RUNNERS[command](cfg)
