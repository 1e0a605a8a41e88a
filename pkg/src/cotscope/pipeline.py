"""Subcommand implementations: each reads upstream artifacts, computes, and
writes its declared outputs under the run's out_dir.

Stages compose through files only. A missing upstream artifact raises
:class:`MissingArtifactError` naming the file and the stage that produces
it.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

from . import __version__
from .annotator import (
    LEXICAL_METRIC_NAMES,
    label_activity,
    label_motivation,
    lexical_metrics,
)
from .chunker import DEFAULT_KEYWORDS, Chunk, load_keyword_table, segment
from .config import RunConfig, write_resolved_config
from .corpus import Corpus, char_length, grade_corpus, ingest_jsonl, load_corpus, save_corpus
from .extractor import ExtractionResult, NodeSpan, align_quotes, extract
from .graph import GRAPH_METRIC_NAMES, compute_graph_metrics, parse_dot
from .interventions import (
    Candidate,
    InterventionError,
    bootstrap_pass1,
    continuation_accuracy,
    make_summarizer,
    plan_edit,
    truncation_entropy,
)
from .llm_client import ChatClient, HttpTransport, ResponseCache, RetryPolicy
from .report import read_csv, read_jsonl, svg_heatmap, write_csv, write_jsonl
from .stats import (
    GlmmFit,
    ObservationSet,
    Observation,
    StatsError,
    concordance_report,
    conditional_correlation,
    fit_glmm,
    stratified_correlation,
)

logger = logging.getLogger(__name__)

CORPUS_JSON = "corpus.json"
CHUNKS_JSONL = "chunks.jsonl"
ANNOTATIONS_JSONL = "annotations.jsonl"
EXTRACTIONS_JSONL = "extractions.jsonl"
GRAPHS_JSONL = "graphs.jsonl"
METRICS_CSV = "metrics.csv"
CORRELATIONS_CSV = "correlations.csv"
HEATMAP_JSON = "heatmap.json"
GLMM_CSV = "glmm.csv"
SELECTION_CSV = "selection.csv"
EDITS_JSONL = "edits.jsonl"
EDITS_SUMMARY_CSV = "edits_summary.csv"
ENTROPY_CSV = "entropy.csv"

METRIC_COLUMNS = tuple(LEXICAL_METRIC_NAMES) + tuple(GRAPH_METRIC_NAMES)


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, produced_by: str):
        super().__init__(f"missing upstream artifact {path} (run '{produced_by}' first)")
        self.path = path
        self.produced_by = produced_by


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out, __version__)
    return out


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, produced_by)
    return path


def make_client(cfg: RunConfig) -> ChatClient:
    cache = ResponseCache(cfg.cache_dir)
    transport = None
    if not cfg.offline:
        if not cfg.endpoint:
            from .config import ConfigError

            raise ConfigError("endpoint: required unless running with --offline")
        transport = HttpTransport(cfg.endpoint, api_key=cfg.api_key())
    return ChatClient(
        cache=cache,
        transport=transport,
        max_concurrency=cfg.concurrency,
        retry=RetryPolicy(cfg.retry.max_attempts, cfg.retry.backoff_s),
    )


def _keyword_table(cfg: RunConfig):
    return load_keyword_table(cfg.keywords) if cfg.keywords else DEFAULT_KEYWORDS


def _load_corpus(cfg: RunConfig, out: Path) -> Corpus:
    return load_corpus(_require(out / CORPUS_JSON, "ingest"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> dict:
    from .config import ConfigError

    if not cfg.questions or not cfg.traces:
        raise ConfigError("questions/traces: both corpus paths are required for ingest")
    out = _out(cfg)
    corpus = Corpus()
    q_report = ingest_jsonl(corpus, cfg.questions, "questions")
    t_report = ingest_jsonl(corpus, cfg.traces, "traces")
    summary = grade_corpus(corpus)
    save_corpus(corpus, out / CORPUS_JSON)
    info = {"questions": q_report.n_added, "traces": t_report.n_added, **summary}
    logger.info("ingest: %s", info)
    return info


def cmd_chunk(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    table = _keyword_table(cfg)
    rows = []
    for trace in corpus.traces:
        chunks = segment(trace.cot, table)
        rows.append(
            {
                "trace_id": trace.id,
                "spans": [[c.start, c.end] for c in chunks],
            }
        )
    write_jsonl(out / CHUNKS_JSONL, rows)
    return {"traces": len(rows), "chunks": sum(len(r["spans"]) for r in rows)}


def _chunks_for(trace, spans) -> list[Chunk]:
    return [
        Chunk(index=i, start=s, end=e, text=trace.cot[s:e])
        for i, (s, e) in enumerate(spans)
    ]


def cmd_annotate(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    chunk_rows = {r["trace_id"]: r["spans"] for r in read_jsonl(_require(out / CHUNKS_JSONL, "chunk"))}
    client = make_client(cfg)
    rows = []
    n_flagged = 0
    for trace in corpus.traces:
        spans = chunk_rows.get(trace.id)
        if spans is None:
            raise MissingArtifactError(out / CHUNKS_JSONL, "chunk")
        chunks = _chunks_for(trace, spans)
        annotations = label_activity(chunks, client, cfg.models.judge, cfg.context_window)
        annotations = label_motivation(chunks, annotations, client, cfg.models.judge, cfg.context_window)
        for ann in annotations:
            row = {
                "trace_id": trace.id,
                "chunk_index": ann.chunk_index,
                "activity": ann.activity,
            }
            if ann.motivation is not None:
                row["motivation"] = ann.motivation
            if ann.flag is not None:
                row["flag"] = ann.flag
                n_flagged += 1
            rows.append(row)
    write_jsonl(out / ANNOTATIONS_JSONL, rows)
    return {"annotations": len(rows), "flagged_defaults": n_flagged}


def cmd_extract_graph(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    client = make_client(cfg)
    extraction_rows = []
    graph_rows = []
    n_failed = 0
    from .extractor import ExtractionError

    for trace in corpus.traces:
        try:
            result = extract(trace.cot, client, cfg.models.extractor)
        except ExtractionError as exc:
            # Unusable reply after the retry budget: exclude and report.
            # Provider/replay failures are not caught; they abort the stage.
            n_failed += 1
            extraction_rows.append(
                {"trace_id": trace.id, "extraction_failed": True, "error": str(exc)}
            )
            continue
        spans, unaligned = align_quotes(trace.cot, result.node_quotes)
        extraction_rows.append(
            {
                "trace_id": trace.id,
                "dot": result.dot,
                "node_quotes": result.node_quotes,
                "branches": [
                    {
                        "failed_node_id": b.failed_node_id,
                        "branch_start_node_id": b.branch_start_node_id,
                    }
                    for b in result.branches
                ],
                "spans": [
                    {
                        "node_id": s.node_id,
                        "start": s.start,
                        "end": s.end,
                        "match_score": s.match_score,
                    }
                    for s in spans
                ],
                "unaligned": unaligned,
            }
        )
        graph_rows.append(
            {
                "trace_id": trace.id,
                "dot": result.dot,
                "parse_warnings": result.graph.warnings,
            }
        )
    write_jsonl(out / EXTRACTIONS_JSONL, extraction_rows)
    write_jsonl(out / GRAPHS_JSONL, graph_rows)
    return {
        "extracted": len(graph_rows),
        "failed": n_failed,
        "failure_rate": n_failed / max(len(corpus.traces), 1),
    }


def cmd_metrics(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    chunk_rows = {r["trace_id"]: r["spans"] for r in read_jsonl(_require(out / CHUNKS_JSONL, "chunk"))}
    ann_rows = read_jsonl(_require(out / ANNOTATIONS_JSONL, "annotate"))
    ext_rows = {r["trace_id"]: r for r in read_jsonl(_require(out / EXTRACTIONS_JSONL, "extract-graph"))}

    from .annotator import ChunkAnnotation

    anns_by_trace: dict[str, list[ChunkAnnotation]] = {}
    for row in ann_rows:
        anns_by_trace.setdefault(row["trace_id"], []).append(
            ChunkAnnotation(
                chunk_index=row["chunk_index"],
                activity=row["activity"],
                motivation=row.get("motivation"),
                flag=row.get("flag"),
            )
        )

    header = ["trace_id", "question_id", "model_id", "difficulty", "correct"] + list(METRIC_COLUMNS)
    rows = []
    for trace in corpus.traces:
        question = corpus.questions[trace.question_id]
        values: dict = {name: None for name in METRIC_COLUMNS}
        spans = chunk_rows.get(trace.id)
        anns = anns_by_trace.get(trace.id, [])
        if spans is None or len(anns) != len(spans):
            raise MissingArtifactError(out / ANNOTATIONS_JSONL, "annotate")
        chunks = _chunks_for(trace, spans)
        anns.sort(key=lambda a: a.chunk_index)
        lex = lexical_metrics(chunks, anns)
        values.update(lex.as_dict())
        values["length"] = char_length(trace)

        ext = ext_rows.get(trace.id)
        if ext is not None and not ext.get("extraction_failed"):
            graph = parse_dot(ext["dot"])
            values.update(compute_graph_metrics(graph).as_dict())

        rows.append(
            [trace.id, trace.question_id, trace.model_id, question.difficulty,
             1 if trace.correct else 0]
            + [values[name] for name in METRIC_COLUMNS]
        )
    write_csv(out / METRICS_CSV, header, rows)
    return {"rows": len(rows), "metrics": len(METRIC_COLUMNS)}


def load_observations(out: Path) -> dict[str, ObservationSet]:
    """metrics.csv -> one ObservationSet per model (within-model analyses)."""
    rows = read_csv(_require(out / METRICS_CSV, "metrics"))
    by_model: dict[str, list[Observation]] = {}
    for row in rows:
        metrics = {}
        for name in METRIC_COLUMNS:
            raw = row.get(name, "")
            metrics[name] = float(raw) if raw not in ("", None) else None
        by_model.setdefault(row["model_id"], []).append(
            Observation(
                question_id=row["question_id"],
                trace_id=row["trace_id"],
                model_id=row["model_id"],
                correct=int(row["correct"]),
                difficulty=row["difficulty"] or None,
                metrics=metrics,
            )
        )
    return {model: ObservationSet(rows=obs) for model, obs in sorted(by_model.items())}


def cmd_correlate(cfg: RunConfig, *, spearman: bool = False, stratify: bool = False) -> dict:
    out = _out(cfg)
    observations = load_observations(out)
    header = ["model_id", "metric", "stratum", "r", "p", "stars", "n_used", "q_used",
              "computable", "reason"]
    rows = []
    heat: dict = {}
    for model, obs in observations.items():
        heat[model] = {}
        for metric in METRIC_COLUMNS:
            res = conditional_correlation(obs, metric, spearman=spearman)
            rows.append(
                [model, metric, "", res.r, res.p, res.stars, res.n_used, res.q_used,
                 res.computable, res.reason]
            )
            heat[model][metric] = {
                "r": res.r, "p": res.p, "stars": res.stars, "n": res.n_used,
                "computable": res.computable,
            }
            if stratify:
                strat = stratified_correlation(obs, metric, min_rows=cfg.min_rows, spearman=spearman)
                for sres in strat.results:
                    rows.append(
                        [model, metric, sres.stratum, sres.r, sres.p, sres.stars,
                         sres.n_used, sres.q_used, sres.computable, sres.reason]
                    )
                for stratum, n in strat.skipped:
                    rows.append(
                        [model, metric, stratum, None, None, None, n, 0, False,
                         f"stratum below min_rows={cfg.min_rows}"]
                    )
    write_csv(out / CORRELATIONS_CSV, header, rows)
    payload = {
        "analysis": "conditional_correlation",
        "spearman": spearman,
        "models": sorted(heat),
        "metrics": list(METRIC_COLUMNS),
        "cells": heat,
    }
    with open(out / HEATMAP_JSON, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, sort_keys=True, indent=1)
        fh.write("\n")
    return {"rows": len(rows), "models": len(observations)}


def cmd_glmm(cfg: RunConfig) -> dict:
    out = _out(cfg)
    observations = load_observations(out)
    header = ["model_id", "metric", "beta0", "beta1", "se1", "p_wald", "sigma_u",
              "converged", "n", "q", "error"]
    rows = []
    for model, obs in observations.items():
        for metric in METRIC_COLUMNS:
            try:
                fit = fit_glmm(obs, metric)
            except StatsError as exc:
                rows.append([model, metric, None, None, None, None, None, False, 0, 0, str(exc)])
                continue
            rows.append(
                [model, metric, fit.beta0, fit.beta1, fit.se1, fit.p_wald, fit.sigma_u,
                 fit.converged, fit.n, fit.q, None]
            )
    write_csv(out / GLMM_CSV, header, rows)
    return {"rows": len(rows)}


def cmd_select(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    observations = load_observations(out)
    header = ["model_id", "selector", "direction", "pass1_mean", "pass1_sd", "replicates",
              "pool_size", "n_problems", "seed"]
    rows = []
    for model, obs in observations.items():
        pools: dict[str, list[Candidate]] = {}
        for r in obs.rows:
            pools.setdefault(r.question_id, []).append(
                Candidate(trace_id=r.trace_id, correct=bool(r.correct), metrics=r.metrics)
            )
        for selector in cfg.selectors:
            direction = cfg.selector_direction(selector, model)
            entry = bootstrap_pass1(
                pools,
                selector,
                direction,
                B=cfg.bootstrap.replicates,
                seed=cfg.seed,
                pool_cap=cfg.bootstrap.pool_size,
            )
            rows.append(
                [model, selector, entry.direction, entry.pass1_mean, entry.pass1_sd,
                 entry.replicates, entry.pool_size, entry.n_problems, entry.seed]
            )
    write_csv(out / SELECTION_CSV, header, rows)
    return {"rows": len(rows)}


def _extraction_from_row(row: dict) -> tuple[ExtractionResult, list[NodeSpan]]:
    from .extractor import Branch

    graph = parse_dot(row["dot"])
    result = ExtractionResult(
        dot=row["dot"],
        node_quotes=row.get("node_quotes", {}),
        branches=[
            Branch(
                failed_node_id=b["failed_node_id"],
                branch_start_node_id=b["branch_start_node_id"],
            )
            for b in row.get("branches", [])
        ],
        raw_reply="",
        graph=graph,
    )
    spans = [
        NodeSpan(
            node_id=s["node_id"], start=s["start"], end=s["end"],
            match_score=s["match_score"],
        )
        for s in row.get("spans", [])
    ]
    return result, spans


def cmd_edit(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    ext_rows = {r["trace_id"]: r for r in read_jsonl(_require(out / EXTRACTIONS_JSONL, "extract-graph"))}
    client = make_client(cfg)
    summarizer = make_summarizer(client, cfg.models.judge)

    eligible = [
        t for t in corpus.traces
        if t.correct is False
        and t.id in ext_rows
        and not ext_rows[t.id].get("extraction_failed")
        and ext_rows[t.id].get("branches")
    ]
    eligible.sort(key=lambda t: t.id)
    if cfg.edit.limit:
        eligible = eligible[: cfg.edit.limit]

    rows = []
    skipped = []
    stats: dict[tuple, list[float]] = {}
    for trace in eligible:
        question = corpus.questions[trace.question_id]
        extraction, spans = _extraction_from_row(ext_rows[trace.id])
        trace_rows = []
        try:
            for branch_choice in cfg.edit.branches:
                for variant in cfg.edit.variants:
                    plan = plan_edit(
                        trace, extraction, spans, branch_choice, variant,
                        summarizer=summarizer,
                    )
                    outcome = continuation_accuracy(
                        plan, question, client, cfg.models.continuation,
                        k=cfg.continuation.k,
                        template=cfg.continuation.template_for(trace.model_id),
                        temperature=cfg.continuation.temperature,
                    )
                    trace_rows.append(
                        {
                            "trace_id": trace.id,
                            "model_id": trace.model_id,
                            "branch_choice": branch_choice,
                            "variant": variant,
                            "cut_span": list(plan.cut_span),
                            "failed_node_id": plan.failed_node_id,
                            "branch_start_node_id": plan.branch_start_node_id,
                            "summary_text": plan.summary_text,
                            "partial_chars": len(plan.partial_cot),
                            "accuracy": outcome.accuracy,
                            "n_correct": outcome.n_correct,
                            "n_graded": outcome.n_graded,
                            "n_failed": outcome.n_failed,
                        }
                    )
        except InterventionError as exc:
            # No aligned branch (or an empty one): the trace is excluded
            # from every setting and reported.
            skipped.append({"trace_id": trace.id, "reason": str(exc)})
            continue
        rows.extend(trace_rows)
        for row in trace_rows:
            stats.setdefault(
                (row["model_id"], row["branch_choice"], row["variant"]), []
            ).append(row["accuracy"])
    write_jsonl(out / EDITS_JSONL, rows + [{"skipped": s} for s in skipped])

    summary_rows = []
    for (model, branch_choice, variant), accs in sorted(stats.items()):
        mean = math.fsum(accs) / len(accs)
        if len(accs) > 1:
            var = math.fsum((a - mean) ** 2 for a in accs) / (len(accs) - 1)
            sd = math.sqrt(var)
        else:
            sd = 0.0
        summary_rows.append([model, branch_choice, variant, mean, sd, len(accs)])
    write_csv(
        out / EDITS_SUMMARY_CSV,
        ["model_id", "branch_choice", "variant", "accuracy_mean", "accuracy_sd", "n_plans"],
        summary_rows,
    )
    return {"plans": len(rows), "skipped": len(skipped)}


def cmd_entropy(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corpus = _load_corpus(cfg, out)
    client = make_client(cfg)
    traces = sorted(corpus.traces, key=lambda t: t.id)
    if cfg.entropy.limit:
        traces = traces[: cfg.entropy.limit]
    fractions = tuple(cfg.entropy.fractions)
    header = (
        ["trace_id", "model_id"]
        + [f"H_{f:g}" for f in fractions]
        + ["progressiveness"]
    )
    rows = []
    for trace in traces:
        question = corpus.questions[trace.question_id]
        profile = truncation_entropy(
            trace, question, client, cfg.models.continuation,
            fractions=fractions,
            k=cfg.entropy.k,
            template=cfg.continuation.template_for(trace.model_id),
            temperature=cfg.continuation.temperature,
        )
        rows.append(
            [trace.id, trace.model_id] + list(profile.entropies) + [profile.progressiveness]
        )
    write_csv(out / ENTROPY_CSV, header, rows)
    return {"profiles": len(rows)}


def cmd_report(cfg: RunConfig) -> dict:
    out = _out(cfg)
    corr_rows = read_csv(_require(out / CORRELATIONS_CSV, "correlate"))
    heat_path = _require(out / HEATMAP_JSON, "correlate")
    outputs = {"svg": []}

    with open(heat_path, encoding="utf-8") as fh:
        heat = json.load(fh)
    models = list(heat["models"])
    metrics = list(heat["metrics"])
    svg = svg_heatmap(
        models, metrics, heat["cells"],
        title="Conditional correlation with correctness (question fixed effects)",
        value_key="r", vmax=1.0,
    )
    (out / "correlations.svg").write_text(svg, encoding="utf-8")
    outputs["svg"].append("correlations.svg")

    overall = [r for r in corr_rows if not r["stratum"]]

    glmm_path = out / GLMM_CSV
    if glmm_path.exists():
        glmm_rows = read_csv(glmm_path)
        gcells: dict = {m: {} for m in models}
        for row in glmm_rows:
            converged = row["converged"] == "true"
            beta1 = float(row["beta1"]) if row["beta1"] and converged else None
            gcells.setdefault(row["model_id"], {})[row["metric"]] = {
                "beta1": beta1,
                "p": float(row["p_wald"]) if row["p_wald"] and converged else None,
                "stars": None,
            }
        from .stats import significance_stars

        for model_cells in gcells.values():
            for cell in model_cells.values():
                if cell["p"] is not None:
                    cell["stars"] = significance_stars(cell["p"])
        gmodels = sorted(gcells)
        svg = svg_heatmap(
            gmodels, metrics, gcells,
            title="Mixed-model slope per metric SD (question random intercepts)",
            value_key="beta1",
        )
        (out / "glmm.svg").write_text(svg, encoding="utf-8")
        outputs["svg"].append("glmm.svg")

        # Concordance table per model.
        from .stats import CorrelationResult

        conc_rows = []
        for model in models:
            corrs = []
            for row in overall:
                if row["model_id"] != model:
                    continue
                computable = row["computable"] == "true"
                corrs.append(
                    CorrelationResult(
                        metric_name=row["metric"],
                        r=float(row["r"]) if row["r"] else None,
                        p=float(row["p"]) if row["p"] else None,
                        n_used=int(row["n_used"]),
                        q_used=int(row["q_used"]),
                        stars=row["stars"] or None,
                        computable=computable,
                    )
                )
            fits = []
            for row in glmm_rows:
                if row["model_id"] != model or row["converged"] != "true":
                    continue
                fits.append(
                    GlmmFit(
                        metric_name=row["metric"],
                        beta0=float(row["beta0"]),
                        beta1=float(row["beta1"]),
                        se1=float(row["se1"]),
                        p_wald=float(row["p_wald"]),
                        sigma_u=float(row["sigma_u"]),
                        converged=True,
                        n=int(row["n"]),
                        q=int(row["q"]),
                    )
                )
            rep = concordance_report(corrs, fits)
            for crow in rep.rows:
                conc_rows.append(
                    [model, crow.metric_name, crow.corr_significant, crow.corr_sign,
                     crow.glmm_significant, crow.glmm_sign, crow.concordant]
                )
            conc_rows.append([model, "__rate__", None, None, None, None, rep.rate])
        write_csv(
            out / "concordance.csv",
            ["model_id", "metric", "corr_significant", "corr_sign", "glmm_significant",
             "glmm_sign", "concordant"],
            conc_rows,
        )
        outputs["concordance"] = "concordance.csv"
    return outputs
