"""Command-line entry point: ``ctrscope <command> [options]``.

Every command reads the same experiment config (YAML); ``--set a.b=value``
and the dedicated flags override its keys.  Outputs land under the
experiment's output directory::

    data/         schema.yaml, day0.tsv .. dayN.tsv
    checkpoints/  init.ckpt, best.ckpt, final.ckpt, step_<n>.ckpt
    reports/      CSV files, SVG figures and report.html
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import html
import io
import logging
import os
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import plotting
from .data import Dataset, FeatureSchema, dataset_filename, read_dataset, write_dataset
from .errors import CompatibilityError, CtrScopeError, DataParseError, NumericError, SchemaError
from .experiment import ExperimentConfig, apply_override, generate_datasets, run_ablation, run_training
from .introspection import avg_abs_correlation, avg_std, capture, dead_fraction, neuron_stats
from .metrics import auc, logloss, score_histogram
from .net import Parameters, load_checkpoint, predict, save_checkpoint
from .probes import ProbeConfig, eval_probes, train_probes
from .saliency import group_saliency
from .train import MetricTimeline
from .tsne import TsneConfig, sample_for_projection, tsne

log = logging.getLogger("ctrscope")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_OUTPUT = "CTRSCOPE_OUTPUT_DIR"
ENV_THREADS = "CTRSCOPE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# output handling


class Outputs:
    """Stage files as ``*.tmp`` and move them into place only on success."""

    def __init__(self, root: Path):
        self.root = root
        self.staged: list[tuple[Path, Path]] = []

    def path(self, rel: str) -> Path:
        final = self.root / rel
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(final.name + ".tmp")
        self.staged.append((tmp, final))
        return tmp

    def write_text(self, rel: str, text: str) -> None:
        self.path(rel).write_text(text, encoding="utf-8")

    def write_csv(self, rel: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
        self.write_text(rel, buf.getvalue())

    def commit(self) -> None:
        for tmp, final in self.staged:
            os.replace(tmp, final)
        self.staged.clear()

    def discard(self) -> None:
        for tmp, _ in self.staged:
            with contextlib.suppress(FileNotFoundError):
                tmp.unlink()
        self.staged.clear()


# --------------------------------------------------------------------------
# loading


def load_config(args) -> ExperimentConfig:
    import yaml

    d: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise SchemaError(f"cannot parse config {path}: {e}") from e
    if os.environ.get(ENV_OUTPUT):
        d["output_dir"] = os.environ[ENV_OUTPUT]
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        apply_override(d, key, value)
    if args.out:
        d["output_dir"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    exp = ExperimentConfig.from_dict(d)
    exp.validate()
    return exp


def data_dir(exp: ExperimentConfig) -> Path:
    return Path(exp.output_dir) / "data"


def load_days(exp: ExperimentConfig, which: Iterable[int] | None = None) -> tuple[FeatureSchema, dict[int, Dataset]]:
    ddir = data_dir(exp)
    schema_path = ddir / "schema.yaml"
    if not schema_path.exists():
        raise FileNotFoundError(f"{schema_path} not found; run `ctrscope gen` first")
    schema = FeatureSchema.load(schema_path)
    if schema.schema_hash != exp.generator.schema.schema_hash:
        raise CompatibilityError("data directory schema differs from the configured schema")
    days = {}
    for d in which if which is not None else range(exp.n_days + 1):
        days[d] = read_dataset(ddir / dataset_filename(d), schema)
    return schema, days


def load_params(exp: ExperimentConfig, schema: FeatureSchema, checkpoint: str | None) -> tuple[Parameters, dict]:
    path = Path(checkpoint) if checkpoint else Path(exp.output_dir) / "checkpoints" / "best.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run `ctrscope train` first")
    return load_checkpoint(path, schema)


def day_name(d: int) -> str:
    return "train" if d == 0 else f"test{d}"


# --------------------------------------------------------------------------
# commands


def cmd_gen(exp: ExperimentConfig, args, out: Outputs) -> None:
    _, days = generate_datasets(exp)
    exp.generator.schema.save(out.path("data/schema.yaml"))
    for d, data in days.items():
        write_dataset(data, out.path(f"data/{dataset_filename(d)}"))
        log.info("day %d: %d instances, CTR %.4f", d, len(data), data.positive_rate())
    exp.dump(out.path("config.yaml"))


def _hook_registry(exp: ExperimentConfig, schema: FeatureSchema, days: dict[int, Dataset]):
    cap = exp.reports.sample_cap
    train = days[0]

    def correlation(step, params):
        L = params.n_hidden
        mats = capture(params, train, range(1, L + 1), "both", cap)
        pre = {m.layer: m for m in mats if m.kind == "pre"}
        post = {m.layer: m for m in mats if m.kind == "post"}
        return [
            (k, avg_abs_correlation(pre[k]).avg_abs_corr, avg_std(neuron_stats(post[k])))
            for k in range(1, L + 1)
        ]

    def saliency(step, params):
        rep = group_saliency(params, train, cap, schema=schema)
        return list(zip(rep.group_ids, rep.group_names, rep.scores.tolist()))

    return {"correlation": correlation, "saliency": saliency}


def cmd_train(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp)
    ckpt = Path("checkpoints")
    hooks = _hook_registry(exp, schema, days)
    unknown = set(exp.train.hooks) - set(hooks)
    if unknown:
        raise UsageError(f"unknown hooks {sorted(unknown)}; available: {sorted(hooks)}")

    def on_eval(step, params, result):
        if exp.checkpoint_every and step % exp.checkpoint_every == 0:
            save_checkpoint(params, out.path(str(ckpt / f"step_{step}.ckpt")), schema.schema_hash, step)

    from .experiment import initial_params

    save_checkpoint(initial_params(exp), out.path(str(ckpt / "init.ckpt")), schema.schema_hash, 0)
    res = run_training(exp, days, {h: hooks[h] for h in exp.train.hooks}, on_eval)
    save_checkpoint(res.params, out.path(str(ckpt / "final.ckpt")), schema.schema_hash, res.steps_done)
    best = res.best_params if res.best_params is not None else res.params
    best_step = res.best_step if res.best_params is not None else res.steps_done
    save_checkpoint(best, out.path(str(ckpt / "best.ckpt")), schema.schema_hash, best_step)
    out.write_text("reports/timeline.csv", res.timeline.to_csv())
    names = ["train"] + [f"test{d}" for d in (exp.timeline_days or range(1, exp.n_days + 1))]
    if len(res.timeline):
        plotting.timeline(
            {n: res.timeline.series(n, "auc") for n in names},
            out.path("reports/timeline.svg"),
            best_step=res.best_step,
        )
    for name, by_step in res.timeline.hook_results.items():
        if name == "correlation":
            rows = [(s, k, c, sd) for s, vals in sorted(by_step.items()) for k, c, sd in vals]
            out.write_csv("reports/hook_correlation.csv", ["step", "layer", "avg_abs_corr", "avg_std"], rows)
        elif name == "saliency":
            rows = [(s, g, n, v) for s, vals in sorted(by_step.items()) for g, n, v in vals]
            out.write_csv("reports/hook_saliency.csv", ["step", "group_id", "group_name", "score"], rows)
    log.info("trained %d steps; best step %s (test AUC %.4f)", res.steps_done, res.best_step, res.best_value)


def cmd_eval(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp)
    params, meta = load_params(exp, schema, args.checkpoint)
    normalizer = float(days[0].labels.mean())
    rows, hists = [], {}
    for d, data in days.items():
        p = predict(params, data)
        rows.append((day_name(d), auc(p, data.labels), logloss(p, data.labels), float(p.mean()), data.positive_rate()))
        h = score_histogram(p, data.labels, normalizer, exp.reports.histogram_bins)
        hists[day_name(d)] = h
        if exp.reports.histograms:
            out.write_csv(f"reports/hist_{day_name(d)}.csv", ["bin_lo", "bin_hi", "pos_count", "neg_count"], h.rows())
    out.write_csv("reports/eval.csv", ["dataset", "auc", "logloss", "mean_pctr", "ctr"], rows)
    if exp.reports.histograms:
        shown = {k: hists[k] for k in ("train", "test1", "test5") if k in hists}
        plotting.score_histograms(shown, out.path("reports/histograms.svg"))


def cmd_stats(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp)
    params, _ = load_params(exp, schema, args.checkpoint)
    L = params.n_hidden
    cap = exp.reports.sample_cap
    summary, corr_by_ds, std_by_day = [], {}, {}
    keep = {}
    for d, data in days.items():
        name = day_name(d)
        mats = capture(params, data, range(1, L + 1), "both", cap, source=name)
        pre = {m.layer: m for m in mats if m.kind == "pre"}
        post = {m.layer: m for m in mats if m.kind == "post"}
        stats = {k: neuron_stats(post[k]) for k in range(1, L + 1)}
        out.write_csv(
            f"reports/stats_{name}.csv",
            ["layer", "neuron", "mean", "std"],
            ((k, j, float(s.mean[j]), float(s.std[j])) for k, s in stats.items() for j in range(len(s.mean))),
        )
        corr = {k: avg_abs_correlation(pre[k]).avg_abs_corr for k in range(1, L + 1)}
        out.write_csv(f"reports/correlation_{name}.csv", ["layer", "avg_abs_corr"], sorted(corr.items()))
        corr_by_ds[name] = corr
        for k, s in stats.items():
            summary.append((name, k, avg_std(s), dead_fraction(s), float(s.mean.mean())))
            std_by_day.setdefault(f"layer {k}", {})[d] = avg_std(s)
        if d in (0, 1):
            keep[name] = stats
    # label-free monitoring summary
    out.write_csv("reports/monitor.csv", ["dataset", "layer", "avg_std", "dead_fraction", "avg_mean"], summary)
    for k in range(1, L + 1):
        sel = {n: keep[n][k] for n in keep}
        plotting.neuron_bars(sel, out.path(f"reports/neuron_mean_layer{k}.svg"), "mean")
        plotting.neuron_bars(sel, out.path(f"reports/neuron_std_layer{k}.svg"), "std")
    plotting.layer_lines(corr_by_ds, out.path("reports/correlation.svg"), "average |correlation|")
    plotting.layer_lines(std_by_day, out.path("reports/avg_std.svg"), "average neuron std", xlabel="day")


def cmd_probe(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp)
    params, meta = load_params(exp, schema, args.checkpoint)
    t = exp.resolved().train
    cfg = ProbeConfig(t.learning_rate, t.init_accumulator, t.batch_size, seed=t.seed)
    layers = range(1, params.n_hidden + 1)
    probes = train_probes(params, layers, days[0], cfg, meta.get("step"))
    tests = {day_name(d): days[d] for d in days if d > 0}
    result = eval_probes(params, probes, tests)
    out.write_csv("reports/probes.csv", ["layer", "day", "auc"], result.rows())
    plotting.probe_lines(result, out.path("reports/probes.svg"))


def cmd_saliency(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp, [0, 1])
    params, meta = load_params(exp, schema, args.checkpoint)
    reports = {}
    for d, data in days.items():
        rep = group_saliency(params, data, exp.reports.sample_cap, schema=schema, step=meta.get("step"))
        reports[day_name(d)] = rep
        header = ["group_id", "group_name", "score"] + (["logit_score"] if exp.reports.logit_saliency else [])
        rows = (
            [g, n, float(s)] + ([float(ls)] if exp.reports.logit_saliency else [])
            for g, n, s, ls in zip(rep.group_ids, rep.group_names, rep.scores, rep.logit_scores)
        )
        out.write_csv(f"reports/saliency_{day_name(d)}.csv", header, rows)
    plotting.saliency_bars(reports, out.path("reports/saliency.svg"))


def cmd_tsne(exp: ExperimentConfig, args, out: Outputs) -> None:
    schema, days = load_days(exp, [0])
    params, _ = load_params(exp, schema, args.checkpoint)
    r = exp.reports
    seed = exp.resolved().train.seed
    sub = sample_for_projection(days[0], r.tsne_pos, r.tsne_neg, seed)
    mats = capture(params, sub, r.tsne_layers, "post", len(sub))
    embs = {}
    for m in mats:
        cfg = TsneConfig(perplexity=r.tsne_perplexity, iterations=r.tsne_iterations, seed=seed)
        e = tsne(m.values, cfg, labels=sub.labels)
        embs[f"layer {m.layer}"] = e
        out.write_csv(
            f"reports/tsne_layer{m.layer}.csv",
            ["x", "y", "label"],
            ((float(x), float(y), int(lab)) for (x, y), lab in zip(e.points, sub.labels)),
        )
    plotting.tsne_scatter(embs, out.path("reports/tsne.svg"))


def cmd_ablate(exp: ExperimentConfig, args, out: Outputs) -> None:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [exp.seed]
    rep = run_ablation(exp, args.variant, seeds)
    slug = args.variant.replace("=", "_")
    out.write_csv(f"reports/ablation_{slug}.csv", ["arm", "seed", "day", "best_step", "auc"], rep.rows())
    deltas = rep.paired_deltas()
    out.write_csv(
        f"reports/ablation_{slug}_summary.csv",
        ["seed", "baseline_mean_auc", "variant_mean_auc", "delta"],
        [(s, rep.mean_auc("baseline", s), rep.mean_auc("variant", s), dv) for s, dv in zip(seeds, deltas)],
    )
    print(f"{args.variant}: mean paired AUC delta {np.mean(deltas):+.5f} over seeds {seeds}")


def _csv_table(path: Path, limit: int = 40) -> str:
    with path.open() as f:
        rows = list(csv.reader(f))
    head, body = rows[0], rows[1:]
    more = len(body) - limit
    cells = "".join(f"<th>{html.escape(h)}</th>" for h in head)
    lines = [f"<tr>{cells}</tr>"]
    for r in body[:limit]:
        lines.append("<tr>" + "".join(f"<td>{html.escape(c)}</td>" for c in r) + "</tr>")
    note = f"<p>({more} more rows in {path.name})</p>" if more > 0 else ""
    return f"<table>{''.join(lines)}</table>{note}"


def cmd_report(exp: ExperimentConfig, args, out: Outputs) -> None:
    rdir = Path(exp.output_dir) / "reports"
    if not rdir.exists():
        raise FileNotFoundError(f"{rdir} not found; run the analysis commands first")
    parts = [
        "<!DOCTYPE html><html><head><meta charset='utf-8'><title>ctrscope report</title>",
        "<style>body{font-family:sans-serif;max-width:1000px;margin:auto}"
        "table{border-collapse:collapse;font-size:12px}td,th{border:1px solid #ccc;padding:2px 6px}</style>",
        "</head><body><h1>ctrscope report</h1>",
    ]
    for svg in sorted(rdir.glob("*.svg")):
        text = svg.read_text(encoding="utf-8")
        text = text[text.index("<svg") :]
        parts.append(f"<h2>{html.escape(svg.stem)}</h2>{text}")
    for c in sorted(rdir.glob("*.csv")):
        parts.append(f"<h2>{html.escape(c.name)}</h2>{_csv_table(c)}")
    parts.append("</body></html>")
    out.write_text("reports/report.html", "\n".join(parts))


COMMANDS = {
    "gen": (cmd_gen, "generate the training day and test days"),
    "train": (cmd_train, "train the model, write checkpoints and the metric timeline"),
    "eval": (cmd_eval, "per-day AUC/logloss and score histograms for a checkpoint"),
    "stats": (cmd_stats, "neuron mean/std, dead fraction and layer correlations"),
    "probe": (cmd_probe, "train and evaluate per-layer linear probes"),
    "saliency": (cmd_saliency, "gradient saliency per feature group"),
    "tsne": (cmd_tsne, "t-SNE projection of hidden layers"),
    "ablate": (cmd_ablate, "train a model variant against the baseline"),
    "report": (cmd_report, "collate all reports into report.html"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="experiment config (YAML)")
    common.add_argument("-o", "--out", help="output directory (overrides config and $" + ENV_OUTPUT + ")")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.max_steps=500")
    common.add_argument("--checkpoint", help="checkpoint to analyse (default: checkpoints/best.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="ctrscope", description="Glass-box CTR model laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "ablate":
            p.add_argument("--variant", required=True, help="e.g. remove-layer-4, user-bias, l2=1e-4, dropout=0.9")
            p.add_argument("--seeds", help="comma-separated root seeds (default: the config seed)")
    return parser


def _limit_threads():
    n = os.environ.get(ENV_THREADS)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    fn, _ = COMMANDS[args.command]
    out = None
    try:
        exp = load_config(args)
        out = Outputs(Path(exp.output_dir))
        with _limit_threads():
            fn(exp, args, out)
        out.commit()
        return EXIT_OK
    except UsageError as e:
        print(f"ctrscope: error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except NumericError as e:
        print(f"ctrscope: numeric failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (CtrScopeError, FileNotFoundError, ValueError, IndexError, KeyError) as e:
        print(f"ctrscope: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_DATA
    if out is not None:
        out.discard()
    return code


if __name__ == "__main__":
    sys.exit(main())
