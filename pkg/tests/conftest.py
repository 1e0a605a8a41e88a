from unittest import mock

import pytest


@pytest.fixture(scope="session")
def e2e_fixture(tmp_path_factory):
    """Build the fixture corpus and record the full pipeline once with the
    scripted model, populating a replay cache for offline runs."""
    from pipeline_fixture import ScriptedTransport, build_plans, write_corpus_files
    from cotscope import pipeline
    from cotscope.config import config_from_dict
    from cotscope.llm_client import ChatClient, ResponseCache

    root = tmp_path_factory.mktemp("e2e")
    questions, plans = build_plans()
    qpath, tpath = write_corpus_files(root, questions, plans)
    cache_dir = root / "cache"
    transport = ScriptedTransport(plans)

    cfg_dict = {
        "questions": str(qpath),
        "traces": str(tpath),
        "out_dir": str(root / "out-record"),
        "cache_dir": str(cache_dir),
        "seed": 7,
        "edit": {"limit": 4},
        "entropy": {"limit": 4},
    }
    cfg = config_from_dict(cfg_dict)

    def scripted_client(c):
        return ChatClient(
            cache=ResponseCache(c.cache_dir),
            transport=transport,
            max_concurrency=c.concurrency,
        )

    with mock.patch.object(pipeline, "make_client", scripted_client):
        pipeline.cmd_ingest(cfg)
        pipeline.cmd_chunk(cfg)
        pipeline.cmd_annotate(cfg)
        pipeline.cmd_extract_graph(cfg)
        pipeline.cmd_metrics(cfg)
        pipeline.cmd_correlate(cfg, stratify=True)
        pipeline.cmd_glmm(cfg)
        pipeline.cmd_select(cfg)
        pipeline.cmd_edit(cfg)
        pipeline.cmd_entropy(cfg)
        pipeline.cmd_report(cfg)

    return {
        "root": root,
        "questions": qpath,
        "traces": tpath,
        "cache": cache_dir,
        "record_out": root / "out-record",
        "config": cfg_dict,
        "plans": plans,
    }
