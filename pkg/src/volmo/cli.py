"""Single ``volmo`` entry point covering the full pipeline.

Subcommands: ``extract`` (JATS corpus), ``revise`` (caption revision),
``convert`` (instruction schema), ``dialogues`` (case dialogues),
``eval-text``, ``eval-classify``, ``compare`` (bootstrap + signed-rank),
``emit-train-config``. Every run writes its outputs plus a run manifest
(config snapshot, input content digests, output list, timestamps) into
the run directory; manifest writes are atomic.

Exit codes: 0 success, 1 usage error, 2 input or validation error,
3 external-service error. Failures also leave a structured ``error.json``
in the run directory when one exists.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import uuid
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .errors import ExternalServiceError, InputError, VolmoError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_SERVICE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def _atomic_write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


class RunContext:
    """Collects inputs/outputs during a run and writes the manifest."""

    def __init__(self, command: str, argv: list[str], out_dir: Path, config: dict):
        self.command = command
        self.argv = argv
        self.out_dir = out_dir
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.started = _utc_now()
        self.run_id = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime()) + "-" + uuid.uuid4().hex[:8]
        out_dir.mkdir(parents=True, exist_ok=True)

    def track_input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise InputError(f"input does not exist: {path}")
        if path.is_file():
            self.inputs[str(path)] = _sha256_file(path)
        else:
            for sub in sorted(path.rglob("*")):
                if sub.is_file():
                    self.inputs[str(sub)] = _sha256_file(sub)
        return path

    def track_output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def finish(self) -> Path:
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise VolmoError(f"run finished but outputs are missing: {missing}")
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": _utc_now(),
            "tool_version": __version__,
            **({"stats": self.extra} if self.extra else {}),
        }
        path = self.out_dir / "run_manifest.json"
        _atomic_write_json(path, manifest)
        return path

    def fail(self, exc: BaseException) -> None:
        _atomic_write_json(
            self.out_dir / "error.json",
            {"run_id": self.run_id, "command": self.command,
             "error": type(exc).__name__, "message": str(exc), "at": _utc_now()},
        )


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{line_no}: bad JSON ({exc})") from exc
    return rows


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _load_config_file(path: str | None, command: str) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file does not exist: {p}")
    with open(p, "rb") as fh:
        data = tomllib.load(fh)
    section = data.get(command)
    return section if isinstance(section, dict) else data


def _effective(ns: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config-file value, else built-in default."""
    value = getattr(ns, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_extract(ns, config, ctx: RunContext) -> None:
    from .jats_corpus import extract_corpus, load_journal_whitelist

    input_path = ctx.track_input(ns.input)
    whitelist = load_journal_whitelist() if _effective(ns, config, "journal_whitelist", False) else None
    articles = ctx.track_output(ctx.out_dir / "articles.jsonl")
    figures = ctx.track_output(ctx.out_dir / "figures.jsonl")
    stats = extract_corpus(input_path, articles, figures, journal_whitelist=whitelist)
    ctx.extra = {
        "articles": stats.articles,
        "figures": stats.figures,
        "skipped_figures": stats.skipped_figures,
        "filtered_articles": stats.filtered_articles,
        "errors": stats.errors,
    }


def _cmd_revise(ns, config, ctx: RunContext) -> None:
    from .caption_revision import LLM_URL_ENV, ProviderConfig, revise_figures_file

    figures_in = ctx.track_input(ns.input)
    figures_out = ctx.track_output(ctx.out_dir / "figures.revised.jsonl")
    offline = bool(_effective(ns, config, "offline", False))
    provider = None
    if not offline:
        endpoint = _effective(ns, config, "endpoint_url", os.environ.get(LLM_URL_ENV))
        if not endpoint:
            raise ExternalServiceError(
                f"no chat endpoint configured; set {LLM_URL_ENV} or pass --endpoint-url, "
                "or run with --offline"
            )
        provider = ProviderConfig(
            endpoint_url=endpoint,
            model_name=_effective(ns, config, "model", "default"),
            temperature=float(_effective(ns, config, "temperature", 0.0)),
            max_attempts=int(_effective(ns, config, "max_attempts", 3)),
            timeout=float(_effective(ns, config, "timeout", 60.0)),
            api_key=os.environ.get("VOLMO_LLM_KEY"),
        )
    stats = revise_figures_file(
        figures_in,
        figures_out,
        provider=provider,
        offline_fallback=not ns.no_fallback,
        offline_only=offline,
        concurrency=int(_effective(ns, config, "concurrency", 4)),
    )
    if not offline and stats["revised"] == 0 and stats["failed"] > 0:
        unreachable = sum(1 for e in stats["errors"] if e["error"] == "ProviderUnreachable")
        if unreachable == stats["failed"]:
            raise ExternalServiceError("provider unreachable for every figure")
    ctx.extra = stats


def _cmd_convert(ns, config, ctx: RunContext) -> None:
    from .instruction_schema import ConversionSpec, convert_benchmark, read_label_table, write_conversion

    table = ctx.track_input(ns.input)
    spec_config = dict(config)
    spec_config.pop("out_dir", None)
    if ns.seed is not None:
        spec_config["split_seed"] = ns.seed
    if not spec_config:
        raise InputError("convert needs a --config TOML with the column mapping")
    spec = ConversionSpec.from_dict(spec_config)
    result = convert_benchmark(read_label_table(table), spec)
    paths = write_conversion(result, ctx.out_dir)
    for p in paths.values():
        ctx.track_output(p)
    ctx.extra = {
        "instances": len(result.instances),
        "rejects": len(result.rejects),
        "image_count": result.manifest.image_count,
    }


def _cmd_dialogues(ns, config, ctx: RunContext) -> None:
    from .case_dialogue import build_dialogues_file

    cases = ctx.track_input(ns.input)
    out = ctx.track_output(ctx.out_dir / "dialogues.jsonl")
    ctx.extra = build_dialogues_file(cases, out)


def _make_provider(ns, config, ctx: RunContext):
    from .providers import HttpProvider, OneHotProvider, PrecomputedProvider

    kind = _effective(ns, config, "provider", "one-hot")
    if kind == "one-hot":
        return OneHotProvider()
    if kind == "precomputed":
        emb = _effective(ns, config, "embeddings", None)
        if not emb:
            raise InputError("provider=precomputed needs --embeddings FILE")
        return PrecomputedProvider(ctx.track_input(emb))
    if kind == "http":
        return HttpProvider(
            base_url=_effective(ns, config, "embed_url", None),
            model=_effective(ns, config, "model", "default"),
        )
    raise InputError(f"unknown provider {kind!r}; expected one-hot, precomputed, or http")


def _cmd_eval_text(ns, config, ctx: RunContext) -> None:
    from .metrics_text import ScoreConfig, score_corpus

    pairs_path = ctx.track_input(ns.input)
    rows = _read_jsonl(pairs_path)
    pairs = []
    for i, row in enumerate(rows):
        if "candidate" not in row or "reference" not in row:
            raise InputError(f"{pairs_path}: row {i + 1} needs candidate and reference fields")
        pairs.append((str(row.get("id", i)), row["candidate"], row["reference"]))

    provider = _make_provider(ns, config, ctx)
    score_config = ScoreConfig(
        policy=_effective(ns, config, "policy", "default"),
        rouge_beta=float(_effective(ns, config, "beta", 1.0)),
    )
    scored, errors = score_corpus(pairs, provider, score_config)

    scores_path = ctx.track_output(ctx.out_dir / "text_scores.jsonl")
    _write_jsonl(scores_path, ({"id": pid, **s.to_json_dict()} for pid, s in scored))
    errors_path = ctx.track_output(ctx.out_dir / "eval_errors.jsonl")
    _write_jsonl(errors_path, errors)

    summary_path = ctx.track_output(ctx.out_dir / "text_summary.json")
    summary = {"pairs_scored": len(scored), "pairs_failed": len(errors)}
    if scored:
        n = len(scored)
        summary["means"] = {
            **{f"bleu{k}": sum(s.bleu[k] for _, s in scored) / n for k in (1, 2, 3, 4)},
            "rouge_l_f": sum(s.rouge_l["f"] for _, s in scored) / n,
            "bertscore_f": sum(s.bertscore["f"] for _, s in scored) / n,
            "sbert": sum(s.sbert for _, s in scored) / n,
        }
        summary["policy_id"] = score_config.policy
        summary["provider_model"] = provider.model_id
    _atomic_write_json(summary_path, summary)
    ctx.extra = {"pairs_scored": len(scored), "pairs_failed": len(errors)}


def _screening_instance_id(row: dict) -> str:
    return f"{row['image_ref']}::{row['condition']}"


def _staging_instance_id(row: dict) -> str:
    return f"{row['image_ref']}::{row['disease']}"


def _cmd_eval_classify(ns, config, ctx: RunContext) -> None:
    from .metrics_classification import (
        ParsedLabel,
        INVALID,
        macro_over_conditions,
        parse_binary_label,
        parse_stage_label,
        score_binary,
        score_stages,
    )
    from .instruction_schema import STAGE_SETS, STAGING_DISEASES

    instances = _read_jsonl(ctx.track_input(ns.instances))
    predictions = _read_jsonl(ctx.track_input(ns.predictions))
    if not instances:
        raise InputError("no instances to score")

    task = ns.task or ("screening" if "condition" in instances[0] else "staging")
    id_of = _screening_instance_id if task == "screening" else _staging_instance_id

    by_model: dict[str, dict[str, str]] = {}
    for row in predictions:
        by_model.setdefault(str(row.get("model_id", "model")), {})[
            str(row["instance_id"])
        ] = str(row.get("raw_output", ""))

    result: dict = {"task": task, "models": {}}
    for model_id, outputs in sorted(by_model.items()):
        missing = 0
        if task == "screening":
            grouped: dict[str, list[tuple[str, ParsedLabel]]] = {}
            for row in instances:
                raw = outputs.get(id_of(row))
                if raw is None:
                    missing += 1
                    label = ParsedLabel("", INVALID, "missing_prediction")
                else:
                    label = parse_binary_label(raw)
                grouped.setdefault(row["condition"], []).append((row["gold"], label))
            per_condition = {}
            score_objects = {}
            for condition, pairs in sorted(grouped.items()):
                counts, scores, invalid_rate = score_binary(
                    [g for g, _ in pairs], [p for _, p in pairs]
                )
                score_objects[condition] = scores
                per_condition[condition] = {
                    "counts": vars(counts),
                    "precision": scores.precision,
                    "sensitivity": scores.recall,
                    "specificity": scores.specificity,
                    "f1": scores.f1,
                    "class_macro_f1": scores.class_macro_f1,
                    "invalid_rate": invalid_rate,
                    "n": len(pairs),
                }
            result["models"][model_id] = {
                "per_condition": per_condition,
                "macro_f1": macro_over_conditions(score_objects, "f1"),
                "macro_class_macro_f1": macro_over_conditions(score_objects, "class_macro_f1"),
                "missing_predictions": missing,
            }
        else:
            by_disease: dict[str, list[tuple[int, ParsedLabel]]] = {}
            for row in instances:
                disease = row["disease"]
                stages = STAGE_SETS[STAGING_DISEASES[disease]]
                raw = outputs.get(id_of(row))
                if raw is None:
                    missing += 1
                    label = ParsedLabel("", INVALID, "missing_prediction")
                else:
                    label = parse_stage_label(raw, stages)
                by_disease.setdefault(disease, []).append((int(row["gold"]), label))
            per_disease = {}
            for disease, pairs in sorted(by_disease.items()):
                stages = STAGE_SETS[STAGING_DISEASES[disease]]
                staged = score_stages([g for g, _ in pairs], [p for _, p in pairs], stages)
                per_disease[disease] = {
                    "per_stage": {str(s): vars(sc) for s, sc in staged.per_stage.items()},
                    "overall": vars(staged.overall),
                    "invalid_rate": staged.invalid_rate,
                    "n": len(pairs),
                }
            result["models"][model_id] = {
                "per_disease": per_disease,
                "missing_predictions": missing,
            }

    scores_path = ctx.track_output(ctx.out_dir / "scores.json")
    _atomic_write_json(scores_path, result)
    ctx.extra = {"models": sorted(by_model), "instances": len(instances)}


def _cmd_compare(ns, config, ctx: RunContext) -> None:
    from .stats import BootstrapConfig, bootstrap, format_comparison, format_mean_std, format_p, wilcoxon_signed_rank

    path_a = ctx.track_input(ns.a)
    path_b = ctx.track_input(ns.b)
    rows_a = {str(r["id"]): float(r["value"]) for r in _read_jsonl(path_a)}
    rows_b = {str(r["id"]): float(r["value"]) for r in _read_jsonl(path_b)}
    if set(rows_a) != set(rows_b):
        only_a = sorted(set(rows_a) - set(rows_b))[:5]
        only_b = sorted(set(rows_b) - set(rows_a))[:5]
        raise InputError(
            f"instance ids differ between models (a-only {only_a}, b-only {only_b})"
        )
    ids = sorted(rows_a)
    values_a = [rows_a[i] for i in ids]
    values_b = [rows_b[i] for i in ids]

    cfg = BootstrapConfig(
        sample_size=int(_effective(ns, config, "sample_size", 30)),
        repeats=int(_effective(ns, config, "repeats", 100)),
        seed=int(_effective(ns, config, "seed", 0)),
    )
    metric_id = _effective(ns, config, "metric", "mean")
    percent = bool(_effective(ns, config, "percent", False))

    def mean_metric(sample):
        return sum(sample) / len(sample)

    summary_a = bootstrap(values_a, mean_metric, cfg, metric_id=metric_id)
    summary_b = bootstrap(values_b, mean_metric, cfg, metric_id=metric_id)
    test = wilcoxon_signed_rank(summary_a.replicate_values, summary_b.replicate_values)

    comparison = {
        "metric_id": metric_id,
        "instances": len(ids),
        "a": {"source": path_a.name, **summary_a.to_json_dict()},
        "b": {"source": path_b.name, **summary_b.to_json_dict()},
        "wilcoxon": test.to_json_dict(),
        "formatted": {
            "a": format_mean_std(summary_a.mean, summary_a.std, percent),
            "b": format_mean_std(summary_b.mean, summary_b.std, percent),
            "p": format_p(test.p_value),
            "a_with_p": format_comparison(summary_a, summary_b, test, percent),
        },
    }
    out = ctx.track_output(ctx.out_dir / "comparison.json")
    _atomic_write_json(out, comparison)
    ctx.extra = {"p_value": test.p_value}


def _cmd_emit_train_config(ns, config, ctx: RunContext) -> None:
    from .train_manifest import validate_training_config, write_training_config

    stages = (1, 2, 3) if ns.stage == "all" else (int(ns.stage),)
    for stage in stages:
        path = write_training_config(stage, ctx.out_dir)
        ctx.track_output(path)
        ok, diffs = validate_training_config(path.read_text(encoding="utf-8"))
        if not ok:
            raise VolmoError(f"emitted config failed validation: {diffs}")
    ctx.extra = {"stages": list(stages)}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="volmo", description=__doc__)
    parser.add_argument("--version", action="version", version=f"volmo {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p):
        p.add_argument("--out-dir", required=True, help="run directory for outputs + manifest")
        p.add_argument("--config", help="TOML config file; flags take precedence")

    p = sub.add_parser("extract", help="parse JATS XML into articles/figures JSONL")
    common(p)
    p.add_argument("--input", required=True, help=".xml/.nxml file or directory tree")
    p.add_argument("--journal-whitelist", action="store_true", default=None,
                   help="keep only articles from the shipped ophthalmology journal list")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("revise", help="revise figure captions via LLM or offline cleaner")
    common(p)
    p.add_argument("--input", required=True, help="figures.jsonl from extract")
    p.add_argument("--offline", action="store_true", default=None,
                   help="skip the provider entirely; use the deterministic cleaner")
    p.add_argument("--no-fallback", action="store_true", default=False,
                   help="fail instead of falling back to the offline cleaner")
    p.add_argument("--endpoint-url", help="chat-completions URL (default: $VOLMO_LLM_URL)")
    p.add_argument("--model", help="provider model name")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-attempts", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=_cmd_revise)

    p = sub.add_parser("convert", help="convert benchmark label tables into instances")
    common(p)
    p.add_argument("--input", required=True, help="CSV or JSONL label table")
    p.add_argument("--seed", type=int, help="seed for the generated 80/20 split")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("dialogues", help="render cases.jsonl into five-turn dialogues")
    common(p)
    p.add_argument("--input", required=True, help="cases.jsonl of clinical profiles")
    p.set_defaults(func=_cmd_dialogues)

    p = sub.add_parser("eval-text", help="score candidate/reference pairs")
    common(p)
    p.add_argument("--input", required=True, help="JSONL with id/candidate/reference")
    p.add_argument("--provider", choices=("one-hot", "precomputed", "http"))
    p.add_argument("--embeddings", help="precomputed-embedding JSONL (provider=precomputed)")
    p.add_argument("--embed-url", help="embedding service URL (default: $VOLMO_EMBED_URL)")
    p.add_argument("--model", help="embedding model name (provider=http)")
    p.add_argument("--policy", help="tokenization policy id")
    p.add_argument("--beta", type=float, help="LCS F-measure beta")
    p.set_defaults(func=_cmd_eval_text)

    p = sub.add_parser("eval-classify", help="score screening/staging predictions")
    common(p)
    p.add_argument("--instances", required=True, help="instances JSONL from convert")
    p.add_argument("--predictions", required=True,
                   help="JSONL of {instance_id, model_id, raw_output}")
    p.add_argument("--task", choices=("screening", "staging"))
    p.set_defaults(func=_cmd_eval_classify)

    p = sub.add_parser("compare", help="bootstrap two models and run the signed-rank test")
    common(p)
    p.add_argument("--a", required=True, help="per-instance values JSONL for model A")
    p.add_argument("--b", required=True, help="per-instance values JSONL for model B")
    p.add_argument("--metric", help="metric id recorded in the comparison")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--percent", action="store_true", default=None,
                   help="format as a percentage metric (2 decimals)")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("emit-train-config", help="write canonical training configs")
    common(p)
    p.add_argument("--stage", default="all", choices=("1", "2", "3", "all"))
    p.set_defaults(func=_cmd_emit_train_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(ns, "command", None) or not hasattr(ns, "func"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    ctx = None
    try:
        config = _load_config_file(ns.config, ns.command)
        ctx = RunContext(ns.command, argv, Path(ns.out_dir), config)
        ns.func(ns, config, ctx)
        ctx.finish()
        return EXIT_OK
    except ExternalServiceError as exc:
        if ctx:
            ctx.fail(exc)
        print(f"external service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (InputError, FileNotFoundError, VolmoError) as exc:
        if ctx:
            ctx.fail(exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
