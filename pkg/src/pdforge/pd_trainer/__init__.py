"""Corpus generation, configuration, training pipelines and reports."""

from .config import DESK_LR, CorpusSpec, OnlineOverride, RunConfig, config_hash
from .corpus import Corpus, MarkovChain, chain_for, gen_corpus, generate, load_corpus
from .report import EvalRecord, RunReport, compare, comparison_csv
from .trainer import (
    DataOrder,
    EvalResult,
    LiveTeacher,
    ShardTeacher,
    dump_offline_logits,
    evaluate,
    load_manifest,
    run_online_pipeline,
    select_window,
    train_student,
    train_teacher,
)

__all__ = [
    "DESK_LR", "CorpusSpec", "OnlineOverride", "RunConfig", "config_hash",
    "Corpus", "MarkovChain", "chain_for", "gen_corpus", "generate", "load_corpus",
    "EvalRecord", "RunReport", "compare", "comparison_csv",
    "DataOrder", "EvalResult", "LiveTeacher", "ShardTeacher", "dump_offline_logits", "evaluate",
    "load_manifest", "run_online_pipeline", "select_window", "train_student", "train_teacher",
]
