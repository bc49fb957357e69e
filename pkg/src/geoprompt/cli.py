"""Command-line entry point wiring all modules.

Subcommands: probe, zeroshot, train, eval, fewshot-curve, analyze, synth.
Global flags (valid on every subcommand): --config, --workdir, --seed,
--mock-fixtures. Exit codes: 0 success, 1 config/input error, 2 partial
success. Every run writes its fully-resolved configuration next to its
outputs; all paths resolve inside --workdir.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, plotting, zeroshot as zs
from .config import load_run_config, write_resolved_config
from .encoder import EmbeddingStore, ToyTextEncoder, load_embedding_store
from .errors import ConfigError, GeopromptError
from .evalmetrics import (
    EvalReport,
    SampleMeta,
    build_report,
    delta_table,
    difficulty_strata,
    group_report,
    load_manifest,
    strata_rows_to_json,
    write_group_csv,
    write_strata_csv,
)
from .knowledge import (
    DescriptorSet,
    GeographySet,
    HttpTransport,
    LlmClientConfig,
    MockTransport,
    acquire,
    build_target_knowledge,
)
from .prompting import ClassConfig, PromptStrategy, Vocab
from .softprompt import (
    KnowledgeTargets,
    TrainConfig,
    kgcoop_targets,
    load_checkpoint,
    save_checkpoint,
    train,
    write_training_log,
)
from .synthdata import SynthConfig, generate, load_vocab_table, write_world

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON run config merged over defaults")
    common.add_argument("--workdir", type=Path, default=Path("."),
                        help="root for all inputs and outputs")
    common.add_argument("--seed", type=int, default=None,
                        help="override every seed in the config")
    common.add_argument("--mock-fixtures", type=Path, default=None,
                        help="directory of <class>__<country>.txt completions")
    common.add_argument("--no-plot", action="store_true",
                        help="skip figure rendering")

    parser = argparse.ArgumentParser(prog="geoprompt",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("probe", parents=[common],
                   help="acquire LLM descriptors for the class x geography grid")
    sub.add_parser("zeroshot", parents=[common],
                   help="zero-shot evaluation per prompting strategy")
    sub.add_parser("train", parents=[common],
                   help="train knowledge-regularized soft prompts")
    p_eval = sub.add_parser("eval", parents=[common],
                            help="evaluate a trained checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, default=None)
    p_eval.add_argument("--baseline-recalls", type=Path, default=None,
                        help="JSON class->recall file for difficulty strata")
    sub.add_parser("fewshot-curve", parents=[common],
                   help="target-trained few-shot curve vs. the regularized reference")
    sub.add_parser("analyze", parents=[common],
                   help="statistic correlations, descriptor topics, embedding export")
    sub.add_parser("synth", parents=[common],
                   help="generate a synthetic geo-shift dataset")
    return parser


def _override_seeds(config: dict, seed: int | None) -> dict:
    if seed is None:
        return config
    config["train"]["seed"] = seed
    config["synth"]["seed"] = seed
    config["fewshot"]["seed"] = seed
    return config


class Workspace:
    """Resolves config paths inside the workdir and lazy-loads assets."""

    def __init__(self, config: dict, workdir: Path):
        self.config = config
        self.workdir = workdir

    def path(self, key: str) -> Path:
        return self.workdir / self.config["paths"][key]

    def manifest(self) -> list[SampleMeta]:
        return load_manifest(self.path("manifest"))

    def store(self) -> EmbeddingStore:
        return load_embedding_store(self.path("store"))

    def class_config(self) -> ClassConfig:
        return ClassConfig.load(self.path("classes"))

    def descriptors(self) -> DescriptorSet:
        return DescriptorSet.load(self.path("descriptors"))

    def encoder_and_vocab(self) -> tuple[ToyTextEncoder, Vocab]:
        vocab, table = load_vocab_table(self.path("vocab"))
        return ToyTextEncoder.from_table(table), vocab

    def split_samples(self, split: str) -> list[SampleMeta]:
        samples = self.manifest()
        if split == "all":
            return samples
        return [s for s in samples if s.split == split]

    def geography_sets(self) -> tuple[list[str], list[str]]:
        """(source countries, target countries), inferred from the manifest
        when the config lists are empty."""
        source = list(self.config["geography"]["source"])
        target = list(self.config["geography"]["target"])
        if not source or not target:
            samples = self.manifest()
            inferred_source = sorted({s.country for s in samples
                                      if s.split.startswith("source")})
            inferred_target = sorted({s.country for s in samples
                                      if s.split == "target"})
            source = source or inferred_source
            target = target or inferred_target
        return source, target


def _strategy(name: str) -> PromptStrategy:
    return PromptStrategy(name)


def _continent_balanced(report_groups: dict[str, EvalReport],
                        total: float) -> dict[str, float]:
    out = {"total": total}
    for g, rep in report_groups.items():
        out[g] = rep.balanced_acc[1]
    return out


def cmd_synth(ws: Workspace) -> int:
    cfg = dict(ws.config["synth"])
    synth_config = SynthConfig(**cfg)
    world = generate(synth_config)
    paths = write_world(world, ws.workdir)
    write_resolved_config(ws.config, ws.workdir, "synth")
    counts = {}
    for s in world.samples:
        counts[s.split] = counts.get(s.split, 0) + 1
    print(f"classes={len(world.class_names)} geographies={len(world.geo_names)} "
          f"samples={len(world.samples)}")
    for geo, delta in zip(world.geo_names, world.deltas):
        role = "source" if geo in world.source_geographies else "target"
        print(f"  {geo}: delta={delta:g} role={role} "
              f"continent={world.continents[geo]}")
    print("splits: " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print("wrote: " + " ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_probe(ws: Workspace, mock_fixtures: Path | None) -> int:
    kcfg = ws.config["knowledge"]
    class_config = ws.class_config()
    source, target = ws.geography_sets()
    countries = sorted(set(source) | set(target))
    if not countries:
        raise ConfigError("no geographies configured or inferable for probing")
    if mock_fixtures is not None:
        transport = MockTransport(mock_fixtures)
    else:
        client_config = LlmClientConfig(
            endpoint=kcfg["endpoint"], model=kcfg["model"],
            max_tokens=kcfg["max_tokens"], temperature=kcfg["temperature"],
            max_attempts=kcfg["max_attempts"],
            backoff_seconds=kcfg["backoff_seconds"],
            response_path=tuple(kcfg["response_path"]),
        )
        transport = HttpTransport(client_config)
    result = acquire(class_config.names, GeographySet(tuple(countries), role="all"),
                     transport, ws.path("descriptors"), model=kcfg["model"],
                     class_config=class_config,
                     include_general=kcfg["include_general"])
    failures = [{"class": f.class_name, "country": f.country, "error": f.error}
                for f in result.failures]
    with open(ws.workdir / "probe_failures.json", "w", encoding="utf-8") as fh:
        json.dump(failures, fh, indent=2)
        fh.write("\n")
    write_resolved_config(ws.config, ws.workdir, "probe")
    n_pairs = len(result.descriptor_set.geo)
    print(f"descriptor cache: {n_pairs} (class, country) entries, "
          f"{len(result.descriptor_set.general)} general entries, "
          f"{result.transport_calls} transport calls, {len(failures)} failures")
    if failures:
        for f in failures:
            print(f"  failed: {f['class']} / {f['country']}: {f['error']}",
                  file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_zeroshot(ws: Workspace, plot: bool) -> int:
    zcfg = ws.config["zeroshot"]
    samples = ws.split_samples(zcfg["split"])
    if not samples:
        raise ConfigError(f"no samples in split {zcfg['split']!r}")
    store = ws.store()
    class_config = ws.class_config()
    enc, vocab = ws.encoder_and_vocab()
    dset = ws.descriptors()
    fallback = tuple(zcfg["fallback"])
    ks = tuple(ws.config["eval"]["ks"])

    strategies = [_strategy(s) for s in zcfg["strategies"]]
    if PromptStrategy.DEFAULT not in strategies:
        strategies = [PromptStrategy.DEFAULT] + strategies

    reports: dict[str, dict] = {}
    balanced: dict[str, float] = {}
    continent_tables: dict[str, dict[str, float]] = {}
    for strategy in strategies:
        predictions = zs.predict_dataset(
            samples, store, class_config.names, strategy, dset, enc, vocab,
            tau_zs=zcfg["tau_zs"], class_config=class_config, fallback=fallback,
        )
        report = zs.zeroshot_report(samples, predictions, strategy, ks=ks)
        reports[strategy.value] = report
        balanced[strategy.value] = report["balanced_top1"]
        groups = group_report([p.ranked for p in predictions], samples,
                              "continent", ks=ks)
        continent_tables[strategy.value] = _continent_balanced(
            groups, report["balanced_top1"])
        out = ws.workdir / f"zeroshot_report_{strategy.value}.json"
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")

    default_table = continent_tables[PromptStrategy.DEFAULT.value]
    for name, table in continent_tables.items():
        if name == PromptStrategy.DEFAULT.value:
            continue
        deltas = delta_table(default_table, table)
        out = ws.workdir / f"zeroshot_delta_{name}_vs_default.csv"
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write("group,acc,delta\n")
            for group in ["total"] + sorted(g for g in table if g != "total"):
                acc = table[group] * 100.0
                d = deltas[group]
                fh.write(f"{group},{acc:.1f},"
                         f"{'' if d is None else format(d * 100.0, '+.1f')}\n")
    if plot:
        plotting.plot_strategy_summary(balanced, ws.workdir / "zeroshot_summary.png")
    write_resolved_config(ws.config, ws.workdir, "zeroshot")
    for name, value in balanced.items():
        print(f"{name}: balanced_top1={value * 100.0:.1f}")
    return EXIT_OK


def _build_targets(ws: Workspace, mode: str, classes: list[str],
                   enc: ToyTextEncoder, vocab: Vocab,
                   class_config: ClassConfig) -> KnowledgeTargets | None:
    if mode == "none":
        return None
    if mode == "kgcoop":
        return kgcoop_targets(classes, enc, vocab, class_config)
    source, target = ws.geography_sets()
    choice = ws.config["geography"]["knowledge_source"]
    if choice == "target":
        ids = target
    elif choice == "source":
        ids = source
    else:
        ids = sorted(set(source) | set(target))
    if not ids:
        raise ConfigError("no geographies available for knowledge targets")
    geo_set = GeographySet(tuple(ids), role=choice)
    vectors = build_target_knowledge(classes, geo_set, _strategy(mode),
                                     ws.descriptors(), enc, vocab, class_config)
    return KnowledgeTargets(vectors=vectors)


def cmd_train(ws: Workspace) -> int:
    tcfg = dict(ws.config["train"])
    mode = tcfg.pop("mode")
    train_config = TrainConfig(**tcfg)
    class_config = ws.class_config()
    enc, vocab = ws.encoder_and_vocab()
    source_samples = ws.split_samples("source-train")
    if not source_samples:
        raise ConfigError("source-train split is empty")
    targets = _build_targets(ws, mode, class_config.names, enc, vocab, class_config)
    state = train(train_config, source_samples, ws.store(), class_config.names,
                  targets, enc, vocab)
    save_checkpoint(state, ws.workdir / "checkpoint.json")
    write_training_log(state.history, ws.workdir / "training_log.csv")
    write_resolved_config(ws.config, ws.workdir, "train")
    last = state.history[-1]
    print(f"trained mode={mode} epochs={train_config.epochs} "
          f"final ce={last['ce']:.4f} gkr={last['gkr']:.4f} total={last['total']:.4f}")
    return EXIT_OK


def _rank_with_embeddings(class_embs: np.ndarray, classes: list[str],
                          samples: list[SampleMeta],
                          store: EmbeddingStore) -> list[list[str]]:
    ranked = []
    for s in samples:
        scores = class_embs @ store.get(s.id)
        order = sorted(range(len(classes)), key=lambda i: (-scores[i], classes[i]))
        ranked.append([classes[i] for i in order])
    return ranked


def cmd_eval(ws: Workspace, checkpoint: Path | None,
             baseline_recalls: Path | None, plot: bool) -> int:
    from .softprompt import class_embeddings

    ckpt_path = checkpoint or (ws.workdir / "checkpoint.json")
    state = load_checkpoint(ckpt_path)
    class_config = ws.class_config()
    classes = class_config.names
    enc, vocab = ws.encoder_and_vocab()
    store = ws.store()
    class_embs = class_embeddings(state.context, classes, enc, vocab)
    ks = tuple(ws.config["eval"]["ks"])

    outputs = {}
    for split in ("source-test", "target"):
        samples = ws.split_samples(split)
        if not samples:
            log.warning("split %r is empty; skipped", split)
            continue
        ranked = _rank_with_embeddings(class_embs, classes, samples, store)
        report = build_report(ranked, [s.label for s in samples], ks=ks)
        payload = report.to_json_dict()
        payload["split"] = split
        payload["groups"] = {}
        tag = split.replace("-", "_")
        for key in ws.config["eval"]["groups"]:
            groups = group_report(ranked, samples, key, ks=ks)
            payload["groups"][key] = {g: r.to_json_dict() for g, r in groups.items()}
            write_group_csv(ws.workdir / f"eval_{tag}_{key}.csv", groups)
        with open(ws.workdir / f"eval_report_{tag}.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        outputs[split] = (report, ranked, samples)
        print(f"{split}: balanced_top1={report.balanced_acc[1] * 100.0:.1f} "
              f"n={report.n_samples}")

    if baseline_recalls is not None and "target" in outputs:
        with open(baseline_recalls, "r", encoding="utf-8") as fh:
            baseline = {str(k): float(v) for k, v in json.load(fh).items()}
        report = outputs["target"][0]
        rows = difficulty_strata(baseline, report.per_class_recall[1],
                                 thresholds=ws.config["eval"]["thresholds"])
        write_strata_csv(ws.workdir / "eval_strata.csv", rows)
        with open(ws.workdir / "eval_strata.json", "w", encoding="utf-8") as fh:
            json.dump(strata_rows_to_json(rows), fh, indent=1)
            fh.write("\n")

    if plot and "target" in outputs:
        report, ranked, samples = outputs["target"]
        groups = group_report(ranked, samples, "continent", ks=ks)
        plotting.plot_group_bars(
            {g: r.balanced_acc[1] for g, r in groups.items()},
            ws.workdir / "eval_target_continents.png",
            title="Target balanced accuracy by continent",
        )
    write_resolved_config(ws.config, ws.workdir, "eval")
    return EXIT_OK


def cmd_fewshot_curve(ws: Workspace, plot: bool) -> int:
    from .embedcore import Rng

    fcfg = ws.config["fewshot"]
    tcfg = dict(ws.config["train"])
    mode = tcfg.pop("mode")
    class_config = ws.class_config()
    classes = class_config.names
    enc, vocab = ws.encoder_and_vocab()
    store = ws.store()

    target_samples = ws.split_samples("target")
    if not target_samples:
        raise ConfigError("target split is empty")
    carve_rng = Rng(fcfg["seed"], 900)
    by_class: dict[str, list[SampleMeta]] = {}
    for s in target_samples:
        by_class.setdefault(s.label, []).append(s)
    pool, test = [], []
    for cls in sorted(by_class):
        items = by_class[cls]
        order = carve_rng.permutation(len(items))
        n_test = max(1, round(fcfg["test_fraction"] * len(items)))
        if n_test >= len(items):
            raise ConfigError(f"class {cls!r} too small to carve train+test")
        test.extend(items[i] for i in order[:n_test])
        pool.extend(items[i] for i in order[n_test:])
    max_shots = max(fcfg["shots_list"])
    pool_per_class = min(len([s for s in pool if s.label == c]) for c in classes)
    if pool_per_class < max_shots:
        log.warning("few-shot pool has %d per class < max shots %d",
                    pool_per_class, max_shots)

    def target_accuracy(state) -> float:
        from .softprompt import class_embeddings
        class_embs = class_embeddings(state.context, classes, enc, vocab)
        ranked = _rank_with_embeddings(class_embs, classes, test, store)
        return build_report(ranked, [s.label for s in test], ks=(1,)).balanced_acc[1]

    rows: list[tuple[str, int, float]] = []
    for shots in fcfg["shots_list"]:
        coop_config = TrainConfig(**{**tcfg, "shots": shots, "reg_weight": 0.0,
                                     "seed": fcfg["seed"]})
        state = train(coop_config, pool, store, classes, None, enc, vocab)
        acc = target_accuracy(state)
        rows.append(("target_coop", shots, acc))
        print(f"target shots={shots}: balanced_top1={acc * 100.0:.1f}")

    source_samples = ws.split_samples("source-train")
    if not source_samples:
        raise ConfigError("source-train split is empty")
    targets = _build_targets(ws, mode, classes, enc, vocab, class_config)
    ref_state = train(TrainConfig(**tcfg), source_samples, store, classes,
                      targets, enc, vocab)
    ref_acc = target_accuracy(ref_state)
    rows.append(("source_regularized_reference", ref_state.config.shots, ref_acc))
    print(f"reference (source-only, regularized): "
          f"balanced_top1={ref_acc * 100.0:.1f}")

    with open(ws.workdir / "fewshot_curve.csv", "w", encoding="utf-8",
              newline="") as fh:
        fh.write("kind,shots,balanced_top1\n")
        for kind, shots, acc in rows:
            fh.write(f"{kind},{shots},{acc!r}\n")
    if plot:
        curve = [(s, a) for kind, s, a in rows if kind == "target_coop"]
        plotting.plot_fewshot_curve([s for s, _ in curve], [a for _, a in curve],
                                    ref_acc, ws.workdir / "fewshot_curve.png")
    write_resolved_config(ws.config, ws.workdir, "fewshot-curve")
    return EXIT_OK


def cmd_analyze(ws: Workspace, plot: bool) -> int:
    acfg = ws.config["analyze"]
    enc, vocab = ws.encoder_and_vocab()
    dset = ws.descriptors()
    class_config = ws.class_config()
    stats_path = ws.workdir / acfg["stats"]
    stats, stat_names = analysis.load_country_stats(stats_path)
    countries = dset.countries()

    from .knowledge import class_knowledge

    rows_by_strategy = {}
    export: dict[str, np.ndarray] = {}
    for name in acfg["strategies"]:
        strategy = _strategy(name)
        embeddings: dict[str, dict[str, np.ndarray]] = {}
        for country in countries:
            table = {}
            for cls in class_config.names:
                if strategy.uses_descriptors and not dset.has(cls, country):
                    continue
                table[cls] = class_knowledge(
                    cls, country, strategy, dset, enc, vocab,
                    plural=class_config.is_plural(cls))
                export[analysis.export_id(cls, country, name)] = table[cls]
            if table:
                embeddings[country] = table
        rows_by_strategy[name] = analysis.stat_correlation(
            stats, embeddings, stat_names, alpha=acfg["alpha"])
        n_pairs = rows_by_strategy[name][0].n_pairs if rows_by_strategy[name] else 0
        print(f"{name}: {len(embeddings)} countries, {n_pairs} pairs, "
              f"{len(rows_by_strategy[name])} statistics")

    analysis.write_correlation_csv(rows_by_strategy, ws.workdir / "correlation.csv")

    keywords_path = ws.workdir / acfg["keywords"]
    if keywords_path.exists():
        keywords = analysis.load_keywords(keywords_path)
        continent_map = {s.country: s.continent for s in ws.manifest()}
        topic_rows = analysis.topic_counts(dset, keywords, continent_map)
        analysis.write_topic_csv(topic_rows, ws.workdir / "topics.csv")
    else:
        log.warning("keywords file %s missing; topic report skipped", keywords_path)

    analysis.export_embeddings(export, ws.workdir / "embeddings_export.tsv")
    if plot:
        plotting.plot_correlations(rows_by_strategy, ws.workdir / "correlation.png")
    write_resolved_config(ws.config, ws.workdir, "analyze")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_run_config(args.config)
        config = _override_seeds(config, args.seed)
        workdir: Path = args.workdir
        workdir.mkdir(parents=True, exist_ok=True)
        ws = Workspace(config, workdir)
        plot = config["plot"] and not args.no_plot
        if args.command == "synth":
            return cmd_synth(ws)
        if args.command == "probe":
            return cmd_probe(ws, args.mock_fixtures)
        if args.command == "zeroshot":
            return cmd_zeroshot(ws, plot)
        if args.command == "train":
            return cmd_train(ws)
        if args.command == "eval":
            return cmd_eval(ws, args.checkpoint, args.baseline_recalls, plot)
        if args.command == "fewshot-curve":
            return cmd_fewshot_curve(ws, plot)
        if args.command == "analyze":
            return cmd_analyze(ws, plot)
        parser.error(f"unknown command {args.command!r}")
    except (GeopromptError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
