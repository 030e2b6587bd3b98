"""Command-line entry point wiring the pipeline together."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
from click.core import ParameterSource

from . import definitions as defs_mod
from . import ftexport, metrics
from .corpus import downsample as downsample_corpus
from .corpus import load_corpus, save_corpus
from .errors import ColtypeError
from .gateway import HttpBackend, MockBackend, RecordingBackend, ReplayBackend, load_cassette
from .ledger import PriceSheet, breakeven_columns, cost_per_column, read_usage, total_cost
from .mockmodel import make_offline_rule
from .prompts import PromptVariant
from .reviewer import self_correct
from .runner import annotate, annotate_self_consistency, load_run, save_run
from .serialize import SerializationOptions

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


def with_config(f):
    """Add --config; TOML keys mirror flags, explicit flags win."""

    @click.option(
        "--config",
        "config_file",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="TOML config whose keys mirror the flags of this command.",
    )
    @click.pass_context
    @functools.wraps(f)
    def wrapper(ctx, config_file, **kwargs):
        if config_file:
            raw = tomllib.loads(Path(config_file).read_text(encoding="utf-8"))
            section = raw.get(ctx.command.name, {})
            values = {k: v for k, v in raw.items() if not isinstance(v, dict)}
            values.update(section)
            for key, value in values.items():
                if key in kwargs and ctx.get_parameter_source(key) == ParameterSource.DEFAULT:
                    kwargs[key] = value
        return f(**kwargs)

    return wrapper


def backend_options(f):
    options = [
        click.option(
            "--backend",
            "backend_kind",
            type=click.Choice(["mock", "replay", "http"]),
            default="mock",
            show_default=True,
            help="mock answers offline (gold labels / canned definitions).",
        ),
        click.option("--cassette", type=click.Path(), default=None),
        click.option("--record", "record_path", type=click.Path(), default=None),
        click.option("--model", "model_id", default="mock", show_default=True),
        click.option(
            "--endpoint",
            default="https://api.openai.com/v1/chat/completions",
            show_default=True,
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def make_backend(backend_kind, corpus, opts, cassette, record_path, model_id, endpoint):
    if backend_kind == "mock":
        backend = MockBackend(rule=make_offline_rule(corpus, opts), model_id=model_id)
    elif backend_kind == "replay":
        if not cassette:
            raise click.UsageError("--backend replay requires --cassette")
        backend = ReplayBackend(cassette, model_id=model_id)
    else:
        backend = HttpBackend(endpoint=endpoint, model_id=model_id)
    if record_path:
        backend = RecordingBackend(backend, record_path)
    return backend


@click.group()
def cli():
    """LLM-based column type annotation workflows."""


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@with_config
def ingest(corpus_dir):
    """Load and validate a corpus directory."""
    corpus = load_corpus(corpus_dir)
    counts = {split: len(corpus.split(split)) for split in ("train", "validation", "test")}
    click.echo(f"corpus {corpus.name}: {len(corpus.tables)} tables {counts}")
    click.echo(f"labels: {len(corpus.vocabulary.labels)}"
               f" multi_label: {corpus.vocabulary.multi_label}")


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--cap", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@with_config
def downsample(corpus_dir, out_dir, cap, seed):
    """Cap annotated train columns per label and write the reduced corpus."""
    corpus = load_corpus(corpus_dir)
    reduced = downsample_corpus(corpus, max_columns_per_label=cap, seed=seed)
    save_corpus(reduced, out_dir)
    before = len(corpus.split("train"))
    after = len(reduced.split("train"))
    click.echo(f"train tables: {before} -> {after}; written to {out_dir}")


def _load_defs(defs_path, defs_kind):
    if not defs_path:
        return None
    loaded = defs_mod.load_definitions(defs_path)
    if defs_kind:
        loaded = [d for d in loaded if d.kind == defs_kind]
    return loaded or None


@cli.command("annotate")
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="test", show_default=True)
@click.option(
    "--strategy",
    type=click.Choice(["zero-shot", "few-shot", "self-consistency", "with-defs"]),
    default="zero-shot",
    show_default=True,
)
@click.option("--defs", "defs_path", type=click.Path(exists=True), default=None)
@click.option("--defs-kind", default=None, help="Filter the definitions file by kind.")
@click.option("--defs-topk", type=int, default=None,
              help="Include only the K definitions most similar to each table.")
@click.option("--hierarchy/--no-hierarchy", default=False, show_default=True)
@click.option("--instructions/--no-instructions", default=True, show_default=True)
@click.option("--k", "few_shot_k", default=5, show_default=True)
@click.option("--temperatures", default="0,0.5,0.7", show_default=True)
@click.option("--workers", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--workdir", type=click.Path(), default=".", show_default=True)
@click.option("--run-id", default=None)
@backend_options
@with_config
def annotate_cmd(
    corpus_dir, split, strategy, defs_path, defs_kind, defs_topk, hierarchy,
    instructions, few_shot_k, temperatures, workers, seed, workdir, run_id,
    backend_kind, cassette, record_path, model_id, endpoint,
):
    """Annotate a corpus split and persist the run."""
    corpus = load_corpus(corpus_dir)
    opts = SerializationOptions()
    backend = make_backend(
        backend_kind, corpus, opts, cassette, record_path, model_id, endpoint
    )
    loaded_defs = _load_defs(defs_path, defs_kind)
    if strategy == "with-defs" and not loaded_defs:
        raise click.UsageError("--strategy with-defs requires --defs")
    variant = PromptVariant(
        strategy={"zero-shot": "zero_shot", "few-shot": "few_shot",
                  "self-consistency": "zero_shot", "with-defs": "with_definitions"}[strategy],
        include_instructions=instructions,
        include_hierarchy=hierarchy,
        definitions=loaded_defs if strategy == "with-defs" else None,
    )
    common = dict(
        opts=opts, few_shot_k=few_shot_k, defs_topk=defs_topk,
        workers=workers, run_id=run_id,
    )
    if strategy == "self-consistency":
        temps = [float(t) for t in temperatures.split(",")]
        run = annotate_self_consistency(corpus, split, variant, backend, temps, **common)
    else:
        run = annotate(corpus, split, variant, backend, **common)
    path = save_run(run, Path(workdir) / "runs")
    status = "partial" if run.partial else "complete"
    click.echo(f"run {run.run_id} ({status}) -> {path}")
    if run.partial:
        click.echo(f"failures: {len(run.failures)} tables", err=True)
        sys.exit(1)


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--kind",
    type=click.Choice(["initial", "demonstration", "comparative"]),
    default="demonstration",
    show_default=True,
)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--prior", "prior_path", type=click.Path(exists=True), default=None,
              help="Validation run to collect errors from (comparative only).")
@click.option("--n-demos", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@backend_options
@with_config
def defgen(
    corpus_dir, kind, out_path, prior_path, n_demos, seed,
    backend_kind, cassette, record_path, model_id, endpoint,
):
    """Generate label definitions."""
    corpus = load_corpus(corpus_dir)
    opts = SerializationOptions()
    backend = make_backend(
        backend_kind, corpus, opts, cassette, record_path, model_id, endpoint
    )
    if kind == "initial":
        result = defs_mod.generate_initial(corpus.vocabulary, backend)
    elif kind == "demonstration":
        result = defs_mod.generate_demonstration(
            corpus.vocabulary, corpus, backend, n_demos=n_demos, seed=seed
        )
    else:
        if not prior_path:
            raise click.UsageError("--kind comparative requires --prior")
        prior = load_run(prior_path)
        errors = defs_mod.collect_errors(prior, corpus)
        result = defs_mod.generate_comparative(
            errors, corpus, backend, n_demos=n_demos, seed=seed
        )
    defs_mod.save_definitions(result.definitions, out_path)
    click.echo(f"{len(result.definitions)} {kind} definitions -> {out_path}")
    if result.failures:
        click.echo(f"failed labels: {sorted(result.failures)}", err=True)
        sys.exit(1)


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--defs", "defs_path", type=click.Path(exists=True), required=True)
@click.option("--prior", "prior_path", type=click.Path(exists=True), required=True,
              help="Validation run that used these definitions.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--rounds", default=1, show_default=True)
@click.option("--n-demos", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@backend_options
@with_config
def refine(
    corpus_dir, defs_path, prior_path, out_path, rounds, n_demos, seed,
    backend_kind, cassette, record_path, model_id, endpoint,
):
    """Error-based refinement of demonstration definitions."""
    corpus = load_corpus(corpus_dir)
    opts = SerializationOptions()
    backend = make_backend(
        backend_kind, corpus, opts, cassette, record_path, model_id, endpoint
    )
    loaded = defs_mod.load_definitions(defs_path)
    prior = load_run(prior_path)
    errors = defs_mod.collect_errors(prior, corpus)

    def classify(current):
        variant = PromptVariant(strategy="with_definitions", definitions=current)
        return annotate(corpus, prior.split, variant, backend, opts=opts, phase="generation")

    result = defs_mod.refine(
        loaded, errors, corpus, backend,
        n_demos=n_demos, rounds=rounds, seed=seed,
        classify=classify if rounds > 1 else None,
    )
    defs_mod.save_definitions(result.definitions, out_path)
    click.echo(f"{len(result.definitions)} refined definitions -> {out_path}")
    if result.failures:
        click.echo(f"failed labels: {sorted(result.failures)}", err=True)
        sys.exit(1)


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--prior", "prior_path", type=click.Path(exists=True), required=True)
@click.option(
    "--scenario",
    type=click.Choice(["plain", "demo-defs", "selected-comparative"]),
    default="plain",
    show_default=True,
)
@click.option("--defs", "defs_path", type=click.Path(exists=True), default=None)
@click.option("--workdir", type=click.Path(), default=".", show_default=True)
@click.option("--run-id", default=None)
@backend_options
@with_config
def review(
    corpus_dir, prior_path, scenario, defs_path, workdir, run_id,
    backend_kind, cassette, record_path, model_id, endpoint,
):
    """Two-step self-correction over a prior run."""
    corpus = load_corpus(corpus_dir)
    opts = SerializationOptions()
    backend = make_backend(
        backend_kind, corpus, opts, cassette, record_path, model_id, endpoint
    )
    prior = load_run(prior_path)
    loaded_defs = defs_mod.load_definitions(defs_path) if defs_path else None
    run = self_correct(
        prior, corpus, backend,
        scenario=scenario.replace("-", "_"),
        defs=loaded_defs, opts=opts, run_id=run_id,
    )
    path = save_run(run, Path(workdir) / "runs")
    click.echo(f"run {run.run_id} -> {path}")


@cli.command("eval")
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--run", "run_path", type=click.Path(exists=True), required=True)
@click.option("--diff", "diff_path", type=click.Path(exists=True), default=None)
@click.option("--error-threshold", default=5, show_default=True)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@with_config
def eval_cmd(corpus_dir, run_path, diff_path, error_threshold, csv_path):
    """Score a run against gold."""
    corpus = load_corpus(corpus_dir)
    run = load_run(run_path)
    report = metrics.score(run, corpus)
    click.echo(report.to_text())
    if csv_path:
        Path(csv_path).write_text(report.per_label_csv(), encoding="utf-8")
        click.echo(f"per-label counts -> {csv_path}")
    errors = metrics.error_table(run, corpus, threshold=error_threshold)
    if errors:
        click.echo(f"labels with more than {error_threshold} errors:")
        for label, count in errors:
            click.echo(f"  {label}  {count}")
    if diff_path:
        other = load_run(diff_path)
        click.echo("per-label error delta (other - run):")
        for label, ea, eb, delta in metrics.diff_runs(run, other, corpus):
            click.echo(f"  {label}  {ea}  {eb}  {delta:+d}")


@cli.command()
@click.option("--run", "run_path", type=click.Path(exists=True), default=None)
@click.option("--usage", "usage_path", type=click.Path(exists=True), default=None)
@click.option("--prices", "prices_path", type=click.Path(exists=True), default=None)
@click.option("--columns", "n_columns", type=int, default=None,
              help="Also report inference cost per column.")
@click.option("--breakeven", nargs=4, type=str, default=None,
              help="FIXED_A PER_COL_A FIXED_B PER_COL_B")
@with_config
def cost(run_path, usage_path, prices_path, n_columns, breakeven):
    """Token cost reports and breakeven analysis."""
    if breakeven:
        result = breakeven_columns(*breakeven)
        if result.columns is None:
            click.echo("breakeven: none" + (" (dominated)" if result.dominated else ""))
        else:
            click.echo(f"breakeven: {result.columns}")
    if not (run_path or usage_path):
        if not breakeven:
            raise click.UsageError("need --run, --usage or --breakeven")
        return
    if not prices_path:
        raise click.UsageError("cost reports need --prices")
    prices = PriceSheet.load(prices_path)
    entries = read_usage(usage_path) if usage_path else load_run(run_path).usage
    breakdown = total_cost(entries, prices)
    for phase, amount in sorted(breakdown.by_phase.items()):
        click.echo(f"{phase:<11} ${amount}")
    click.echo(f"total       ${breakdown.total}")
    if n_columns:
        per_col = cost_per_column(entries, prices, n_columns)
        click.echo(f"cost/column ${per_col}")


@cli.command()
@click.argument("corpus_dir", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--set",
    "set_name",
    type=click.Choice(["simple", "definitions", "multitask"]),
    default="simple",
    show_default=True,
)
@click.option("--defs", "defs_path", type=click.Path(exists=True), default=None)
@click.option("--with-demos", is_flag=True, default=False)
@click.option("--n-demos", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--instructions", is_flag=True, default=False, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--manifest", "manifest_class", type=click.Choice(["open", "hosted"]), default=None)
@click.option("--manifest-out", type=click.Path(), default=None)
@with_config
def ftset(
    corpus_dir, set_name, defs_path, with_demos, n_demos, seed,
    instructions, out_path, manifest_class, manifest_out,
):
    """Build a fine-tuning training set and export chat JSONL."""
    corpus = load_corpus(corpus_dir)
    opts = ftexport.ExportOptions(include_instructions=instructions)
    if set_name == "simple":
        records = ftexport.build_simple_set(corpus, opts)
    else:
        if not defs_path:
            raise click.UsageError(f"--set {set_name} requires --defs")
        loaded = defs_mod.load_definitions(defs_path)
        if set_name == "definitions":
            records, failures = ftexport.build_definitions_set(corpus, loaded, opts)
            if failures:
                click.echo(f"skipped tables: {sorted(failures)}", err=True)
        else:
            records = ftexport.build_multitask_set(
                corpus, loaded, with_demonstrations=with_demos,
                n_demos=n_demos, seed=seed, opts=opts,
            )
    ftexport.export_jsonl(records, out_path)
    click.echo(f"{len(records)} training records -> {out_path}")
    if manifest_class:
        target = manifest_out or str(Path(out_path).with_suffix(".manifest.json"))
        ftexport.export_hyperparameter_manifest(manifest_class, target)
        click.echo(f"hyperparameter manifest -> {target}")


@cli.command()
@click.option("--cassette", type=click.Path(exists=True), required=True)
@with_config
def replay(cassette):
    """Inspect a cassette and verify it parses."""
    entries = load_cassette(cassette)
    tokens_in = sum(e.input_tokens for e in entries.values())
    tokens_out = sum(e.output_tokens for e in entries.values())
    click.echo(
        f"{len(entries)} entries; {tokens_in} input tokens, {tokens_out} output tokens"
    )


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)
    except ColtypeError as exc:
        click.echo(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True
        )
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    main()
