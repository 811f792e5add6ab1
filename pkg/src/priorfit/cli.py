"""Command-line surface.

Subcommands: pretrain (prior fitting from a YAML run config), predict
(zero-shot prediction from CSVs), evaluate (seeded 80-20 splits over a suite
directory), analyze-prior (diversity diagnostics between ordinary and
adversarial generator collections). Failures exit non-zero with one
machine-parsable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .agents import AgentConfig, AgentState, ascend_or_reset
from .config import RunManifest, load_run_config
from .data_io import ingest_csv, ingest_features_with_schema, TARGET
from .diversity import prior_diversity_report
from .infer import (BATCH_CAP, BatchPlan, aggregate_classification,
                    aggregate_regression, permutation_ensemble, predict)
from .metrics import mse, rank_and_wins, roc_auc_ovo, score_summary
from .model import Episode, Model
from .prior import CLASSIFICATION, Dataset, generate_dataset, sample_generator
from .seeding import NS_EVAL, NS_MODEL_INIT, derive_rng, derive_seed
from .train import _forward_episode_losses, pretrain

log = logging.getLogger(__name__)


def _cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    checkpoint = outdir / "checkpoint.npz"
    manifest_path = outdir / "manifest.json"
    manifest = RunManifest.start(cfg, checkpoint)
    manifest.write(manifest_path)
    pretrain(cfg.train, cfg.model, cfg.space, cfg.agent,
             checkpoint_path=checkpoint,
             log_path=outdir / "train_log.ndjson",
             resume_from=Path(args.resume) if args.resume else None)
    manifest.complete(manifest_path)
    print(f"checkpoint written to {checkpoint}")
    return 0


def _predict_any(model, train_ds, test_x, test_missing, ensemble, seed):
    if ensemble > 1:
        return permutation_ensemble(model, train_ds, test_x, ensemble,
                                    derive_rng(seed, NS_EVAL, 1), test_missing)
    if train_ds.n > BATCH_CAP:
        plan = BatchPlan.build(train_ds.n, BATCH_CAP, derive_rng(seed, NS_EVAL, 2))
        if train_ds.task == CLASSIFICATION:
            return aggregate_classification(model, train_ds, test_x, plan,
                                            test_missing)
        mu = aggregate_regression(model, train_ds, test_x, plan, test_missing)
        from .model import Prediction
        return Prediction(task=train_ds.task, mu=mu, sigma=None)
    return predict(model, train_ds, test_x, test_missing,
                   feature_rng=derive_rng(seed, NS_EVAL, 3))


def _cmd_predict(args) -> int:
    model, _, _ = Model.load(args.checkpoint)
    train_ds, schemas = ingest_csv(args.train, args.target)
    test_x, test_missing = ingest_features_with_schema(args.test, schemas)
    pred = _predict_any(model, train_ds, test_x, test_missing,
                        args.ensemble, args.seed)
    out = Path(args.output) if args.output else None
    lines = []
    if pred.task == CLASSIFICATION:
        target_schema = next(s for s in schemas if s.kind == TARGET)
        names = {v: k for k, v in target_schema.categories.items()}
        header = "row," + ",".join(f"p_{names[int(c)]}" for c in pred.classes)
        lines.append(header)
        for i, row in enumerate(pred.probs):
            lines.append(f"{i}," + ",".join(repr(float(p)) for p in row))
    else:
        lines.append("row,estimate")
        for i, m in enumerate(pred.mu):
            lines.append(f"{i},{float(m)!r}")
    text = "\n".join(lines) + "\n"
    if out:
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _split_score(model, ds, rng, seed) -> float:
    """One seeded 80-20 split; OVO ROC-AUC for classification, MSE otherwise."""
    n = ds.n
    l = max(1, int(round(0.8 * n)))
    for _ in range(20):
        order = rng.permutation(n)
        test_labels = None
        if ds.task == CLASSIFICATION:
            test_labels = ds.y_labels[order[l:]]
            if np.unique(test_labels).size < 2:
                continue
        break
    train_rows, test_rows = order[:l], order[l:]
    sub = Dataset(
        X=Tensor(ds.X.data[train_rows]),
        y_values=Tensor(ds.y_values.data[train_rows]),
        y_labels=None if ds.y_labels is None else ds.y_labels[train_rows],
        cat_mask=ds.cat_mask, task=ds.task, n_classes=ds.n_classes,
        missing_mask=None if ds.missing_mask is None else ds.missing_mask[train_rows])
    test_x = ds.X.data[test_rows]
    test_missing = None if ds.missing_mask is None else ds.missing_mask[test_rows]
    pred = _predict_any(model, sub, test_x, test_missing, ensemble=1, seed=seed)
    if ds.task == CLASSIFICATION:
        return roc_auc_ovo(pred.probs, ds.y_labels[test_rows], classes=pred.classes)
    return mse(pred.mu, ds.y_values.data[test_rows])


def _cmd_evaluate(args) -> int:
    model, _, _ = Model.load(args.checkpoint)
    suite = sorted(Path(args.suite).glob("*.csv"))
    if not suite:
        raise ValueError(f"no CSV files under {args.suite}")
    records = []
    matrix = []
    names = []
    t0 = time.time()
    for di, path in enumerate(suite):
        header = path.read_text().splitlines()[0].split(",")
        target = args.target or header[-1]
        ds, _ = ingest_csv(path, target)
        scores = []
        for s in range(args.splits):
            rng = derive_rng(args.seed, NS_EVAL, di, s)
            try:
                scores.append(_split_score(model, ds, rng, args.seed))
            except ValueError as err:
                log.warning("%s split %d skipped: %s", path.name, s, err)
                scores.append(float("nan"))
        matrix.append(scores)
        names.append(path.stem)
        records.append({"dataset": path.stem, "task": ds.task,
                        "scores": scores,
                        "mean": float(np.nanmean(scores)),
                        "std": float(np.nanstd(scores))})
    elapsed = time.time() - t0
    matrix = np.array(matrix)
    summary = score_summary(np.nan_to_num(matrix, nan=0.5))
    report = rank_and_wins(np.nanmean(matrix, axis=1)[:, None], ["priorfit"],
                           datasets=names, timing={"total_seconds": elapsed})
    out = {"datasets": records, "summary": summary,
           "rank": report.rank_summary(), "timing": report.timing}
    if args.output:
        Path(args.output).write_text(
            "\n".join(json.dumps(r, sort_keys=True) for r in records)
            + "\n" + json.dumps({"summary": summary}, sort_keys=True) + "\n")
    width = max(len(n) for n in names)
    print(f"{'dataset':<{width}}  task            mean    std")
    for rec in records:
        print(f"{rec['dataset']:<{width}}  {rec['task']:<14}"
              f"{rec['mean']:>8.4f}{rec['std']:>8.4f}")
    print(f"overall mean {summary['mean']:.4f}  "
          f"std of mean {summary['std_of_mean']:.4f}  "
          f"mean of std {summary['mean_of_std']:.4f}  "
          f"({elapsed:.1f}s)")
    return 0


def build_adversarial_collection(model: Model, space, agent_cfg: AgentConfig,
                                 run_seed: int, count: int, n_rows: int
                                 ) -> list[Dataset]:
    """Record the dataset an adversarial agent emits after each consecutive
    backpropagation against the model."""
    agent = AgentState(agent_cfg, space, run_seed, slot=0)
    out: list[Dataset] = []
    i = 0
    while len(out) < count:
        ep_seed = derive_seed(run_seed, NS_EVAL, 40, i)
        i += 1
        try:
            with T.Tape() as tape:
                ds = generate_dataset(agent.generator, n_rows, ep_seed, soft=True)
                ep = Episode(ds, l=max(2, n_rows // 2))
                loss = _forward_episode_losses(model, [ep], ep.l, None)
                tape.backward(loss)
            ascend_or_reset(agent)
            T.zero_grads(model.parameters())
        except RuntimeError:
            agent.reset(reason="degenerate")
            continue
        except T.GradientNaN:
            T.zero_grads(model.parameters() + agent.parameters())
            agent.reset(reason="nan-gradients")
            continue
        out.append(Dataset(X=Tensor(ds.X.data.copy()),
                           y_values=Tensor(ds.y_values.data.copy()),
                           y_labels=None if ds.y_labels is None else ds.y_labels.copy(),
                           cat_mask=ds.cat_mask.copy(), task=ds.task,
                           n_classes=ds.n_classes))
        agent.maybe_reset()
    return out


def ordinary_collection(space, run_seed: int, namespace: int, count: int,
                        n_rows: int) -> list[Dataset]:
    out = []
    i = 0
    while len(out) < count:
        seed = derive_seed(run_seed, namespace, i)
        i += 1
        try:
            g = sample_generator(space, seed)
            out.append(generate_dataset(g, n_rows, derive_seed(run_seed, namespace, i, 1)))
        except RuntimeError:
            continue
    return out


def _cmd_analyze_prior(args) -> int:
    cfg = load_run_config(args.config)
    space = dataclasses.replace(cfg.space, feature_count=(2, 2))
    if args.checkpoint:
        model, _, _ = Model.load(args.checkpoint)
    else:
        model = Model(cfg.model, seed=derive_seed(cfg.train.seed, NS_MODEL_INIT))
    agent_cfg = cfg.agent or AgentConfig()
    seed = cfg.train.seed
    n_rows = args.rows
    ordinary_a = ordinary_collection(space, seed, 41, args.datasets, n_rows)
    ordinary_b = ordinary_collection(space, seed, 42, args.datasets, n_rows)
    adversarial = build_adversarial_collection(model, space, agent_cfg, seed,
                                               args.datasets, n_rows)
    baseline = prior_diversity_report(ordinary_a, ordinary_b)
    shifted = prior_diversity_report(ordinary_a, adversarial)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {
        "datasets_per_collection": args.datasets,
        "rows_per_dataset": n_rows,
        "kl_ordinary_vs_ordinary": baseline["kl_ab"],
        "kl_ordinary_vs_adversarial": shifted["kl_ab"],
        "pearson_ordinary": baseline["pearson_a"],
        "pearson_adversarial": shifted["pearson_b"],
    }
    (outdir / "diversity.json").write_text(json.dumps(summary, indent=2,
                                                      sort_keys=True) + "\n")
    np.savez(outdir / "density_grids.npz",
             ordinary_a=baseline["grid_a"], ordinary_b=baseline["grid_b"],
             adversarial=shifted["grid_b"])
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorfit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="prior-fit a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", default="priorfit-run")
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("predict", help="zero-shot prediction from CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ensemble", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="seeded 80-20 splits over a suite directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--target", default=None,
                   help="target column (default: last header column per file)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("analyze-prior", help="diversity diagnostics")
    p.add_argument("--config", required=True)
    p.add_argument("--datasets", type=int, required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--rows", type=int, default=50)
    p.add_argument("--output", default="prior-analysis")
    p.set_defaults(fn=_cmd_analyze_prior)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # one-line machine-parsable failure record
        sys.stderr.write(json.dumps(
            {"error": type(err).__name__, "message": str(err)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
