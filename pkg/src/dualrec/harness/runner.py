"""Experiment execution: data generation, strategy grids, theory checks and MI estimation."""
from __future__ import annotations

import datetime
import re
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..mi_estimator import PerturbationParams, estimate_mi, perturb_corpus
from ..space import Categorical, enumerate_space
from ..synth import build_ground_truth, sample_corpora
from ..theory import InfeasibleError, check_lemma1, construct_optimum, verify_optimum
from ..trainers import make_models, pretrain_supervised, run_strategy
from . import io as rio
from .config import ConfigError, ExperimentConfig, parse_distribution
from .report import AggregationError, aggregate, final_metrics, svg_chart, table_csv


class VerificationFailure(RuntimeError):
    pass


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", label).strip("-")


def _data(cfg: ExperimentConfig, seed: int):
    gt = build_ground_truth(cfg.task_spec())
    try:
        return gt, sample_corpora(gt, seed=seed, **cfg.corpus_sizes())
    except (TypeError, ValueError) as e:
        raise ConfigError(f"corpus: {e}") from None


def gen_data(cfg: ExperimentConfig, out: Path) -> list:
    written = []
    for seed in cfg.seeds:
        _, corpora = _data(cfg, seed)
        d = out / "data" / f"seed-{seed}"
        rio.write_corpora(corpora, d)
        written.append(str(d))
    return written


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, strategies=None) -> list:
    """All requested strategies for one seed, sharing a single pretraining run."""
    strategies = cfg.strategies if strategies is None else strategies
    gt, corpora = _data(cfg, seed)
    rio.write_corpora(corpora, out / "data" / f"seed-{seed}")
    base = cfg.train_config("supervised", seed)
    pre = None
    paths = []
    for entry in strategies:
        tc = cfg.train_config(entry, seed)
        if pre is None and tc.kind != "ExactDualAscent":
            pre = pretrain_supervised(make_models(gt.src_space, gt.dst_space, base), corpora, base, gt)
        result = run_strategy(corpora, tc, gt=gt, pretrained=None if tc.kind == "ExactDualAscent" else pre)
        d = out / "runs" / slug(tc.label) / f"seed-{seed}"
        rows = result.curve_rows()
        rio.write_curves(rows, d / "curves.csv")
        rio.write_json({"strategy": tc.label, "seed": seed, "task": cfg.task_id(), "config": tc.as_dict(),
                        "final": result.final, "wall_seconds": result.wall_seconds}, d / "run.json")
        rio.save_checkpoint(d / "checkpoint.npz", result.p_theta, result.q_phi,
                            {"strategy": tc.label, "seed": seed, "task": cfg.task_id()})
        paths.append(str(d))
    return paths


def _seed_job(args):
    cfg, seed, out = args
    return run_seed(cfg, seed, Path(out))


def run_grid(cfg: ExperimentConfig, out: Path, workers: int = 1) -> list:
    jobs = [(cfg, s, str(out)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    return [p for r in results for p in r]


def _theory_cases(cfg: ExperimentConfig):
    cases = cfg.theory.get("cases") or [
        {"q": "uniform:8", "p": "uniform:8", "i_max": [0.0, 0.52, 1.04, 1.56, 2.079]}
    ]
    for case in cases:
        q = parse_distribution(case["q"])
        p = parse_distribution(case.get("p", case["q"]))
        levels = case.get("i_max", [min(_h(q), _h(p))])
        for i_max in (levels if isinstance(levels, list) else [levels]):
            yield case, q, p, float(i_max)


def _h(v):
    v = v[v > 0]
    return float(-(v * np.log(v)).sum())


def _categorical(probs):
    space = enumerate_space(tuple(f"s{i}" for i in range(len(probs))), 1)
    return Categorical(space, probs)


def verify_theory(cfg: ExperimentConfig, out: Path) -> dict:
    records = []
    for case, qv, pv, i_max in _theory_cases(cfg):
        q, p = _categorical(qv), _categorical(pv)
        rec = {"q": case["q"], "p": case.get("p", case["q"]), "i_max": i_max}
        try:
            rep = verify_optimum(construct_optimum(q, p, i_max), q, p, i_max)
            rec.update(rep.as_record())
        except InfeasibleError as e:
            rec.update(passed=False, error=str(e))
        records.append(rec)
    rng = np.random.default_rng(int(cfg.theory.get("seed", 0)))
    n = int(cfg.theory.get("lemma1_trials", 1000))
    lemma_fail = 0
    for _ in range(n):
        pa, qa = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
        c = rng.uniform(0.5, 2.0)
        r = check_lemma1(pa, pa * c / np.sum(pa * c), qa, qa)
        lemma_fail += not r.passed
    summary = {"cases": records, "lemma1": {"trials": n, "failures": lemma_fail},
               "passed": all(r["passed"] for r in records) and lemma_fail == 0}
    rio.write_json(summary, out / "theory" / "verification.json")
    return summary


def _run_dirs(out: Path):
    root = out / "runs"
    if not root.is_dir():
        return []
    return sorted(d for d in root.glob("*/seed-*") if (d / "curves.csv").exists())


def estimate_mi_runs(cfg: ExperimentConfig, out: Path) -> list:
    """MI of each checkpoint's forward model on its test split, with a perturbed target corpus."""
    dirs = _run_dirs(out)
    if not dirs:
        raise FileNotFoundError(f"no runs found under {out / 'runs'}")
    params = PerturbationParams(**{k: v for k, v in cfg.mi.items() if k in PerturbationParams.__dataclass_fields__})
    n = int(cfg.mi.get("n_samples", 10_000))
    mode = cfg.mi.get("mode", "sample")
    records = []
    for d in dirs:
        p, _, meta = rio.load_checkpoint(d / "checkpoint.npz")
        seed = int(meta.get("seed", 0))
        corpora = rio.read_corpora(out / "data" / f"seed-{seed}")
        src = [s for s, _ in corpora.test]
        tgt = [t for _, t in corpora.test]
        tilde = perturb_corpus(tgt, params)
        est = estimate_mi(p, src, tilde, n, seed=seed, mode=mode, corpus_size=len(tgt))
        records.append({"run": str(d.relative_to(out)), "strategy": meta.get("strategy"), "seed": seed,
                        **est.as_record(), "in_range": est.in_range})
    rio.write_json({"estimates": records, "perturbation": params.__dict__}, out / "mi" / "estimates.json")
    return records


def build_report(out: Path, formats) -> dict:
    dirs = _run_dirs(out)
    if not dirs:
        raise AggregationError("no runs found")
    records, all_rows = [], []
    for d in dirs:
        meta = rio.read_json(d / "run.json")
        rows = rio.read_curves(d / "curves.csv")
        all_rows.extend(rows)
        records.append({"strategy": meta["strategy"], "seed": meta["seed"], "task": meta["task"],
                        "final": final_metrics(rows)})
    table = aggregate(records)
    rep = out / "report"
    outputs = []
    if "csv" in formats:
        rio._write_text(rep / "summary.csv", table_csv(table))
        outputs.append("report/summary.csv")
    if "json" in formats:
        rio.write_json({"table": table, "runs": records}, rep / "summary.json")
        outputs.append("report/summary.json")
    if "svg" in formats:
        task = records[0]["task"]
        rio._write_text(rep / f"curves-{task}.svg", svg_chart(all_rows, title=f"task {task}"))
        outputs.append(f"report/curves-{task}.svg")
    manifest = {
        "software": {"dualrec": __version__, "python": sys.version.split()[0], "numpy": np.__version__},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "runs": [{"path": str(d.relative_to(out)), **{k: r[k] for k in ("strategy", "seed", "task")}}
                 for d, r in zip(dirs, records)],
        "outputs": outputs,
    }
    cfg_path = out / "config.json"
    if cfg_path.exists():
        manifest["config"] = rio.read_json(cfg_path)
    rio.write_json(manifest, out / "manifest.json")
    return {"table": table, "outputs": outputs}
