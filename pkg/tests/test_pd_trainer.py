import dataclasses
import json
import math

import numpy as np
import pytest

from conftest import TINY_CORPUS, TINY_STUDENT, TINY_TEACHER, tiny_run
from pdforge.distill_losses import LossKind, PackedTeacher, kd_kld
from pdforge.errors import ConfigError, CorruptionError, StorageError, TrainingDivergenceError, ValidationError
from pdforge.logits_codec import AdaH, StaticTemperature, TruncationSpec, process_logits_rows
from pdforge.logits_store import ShardHeader, ShardReader, ShardWriter
from pdforge.pd_trainer.config import CorpusSpec, OnlineOverride, RunConfig
from pdforge.pd_trainer.corpus import (
    HELDOUT_FILE,
    TRAIN_FILE,
    chain_for,
    gen_corpus,
    generate,
    load_corpus,
)
from pdforge.pd_trainer.report import (
    RunReport,
    compare,
    comparison_csv,
    make_record,
    parse_comparison_csv,
    parse_csv,
)
from pdforge.pd_trainer.trainer import (
    DataOrder,
    LiveTeacher,
    ShardTeacher,
    dump_offline_logits,
    evaluate,
    load_manifest,
    run_online_pipeline,
    train_student,
    train_teacher,
)
from pdforge.schedulers import StaticAlpha
from pdforge.tiny_lm import forward, init_model, load_checkpoint, save_checkpoint

# ---- corpus ----------------------------------------------------------------------


def test_corpus_files_byte_identical(tmp_path):
    gen_corpus(TINY_CORPUS, tmp_path / "a")
    gen_corpus(TINY_CORPUS, tmp_path / "b")
    for name in (TRAIN_FILE, HELDOUT_FILE, "corpus.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corpus_header_and_reload(tmp_path):
    c = gen_corpus(TINY_CORPUS, tmp_path)
    raw = (tmp_path / TRAIN_FILE).read_bytes()
    assert raw[:4] == b"PDCO"
    back = load_corpus(tmp_path)
    assert np.array_equal(back.train, c.train) and np.array_equal(back.heldout, c.heldout)
    assert back.entropy_rate == c.entropy_rate
    assert c.train.shape == (64, 9) and c.heldout.shape == (16, 9)


def test_corrupt_corpus_detected(tmp_path):
    gen_corpus(TINY_CORPUS, tmp_path)
    path = tmp_path / TRAIN_FILE
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(CorruptionError):
        load_corpus(tmp_path)
    with pytest.raises(StorageError):
        load_corpus(tmp_path / "missing")


def test_uniform_chain_entropy_is_log_v():
    spec = CorpusSpec(vocab_size=32, skew=0.0, sequence_count=8, chunk_len=4)
    assert generate(spec).entropy_rate == pytest.approx(math.log(32), abs=1e-12)


def test_skewed_chain_empirical_entropy():
    spec = CorpusSpec()
    chain = chain_for(spec)
    rate = chain.entropy_rate()
    seqs = chain.sample(10_000, 102, np.random.default_rng(99))  # 1e6 scored positions
    assert abs(chain.empirical_entropy(seqs) / rate - 1) < 0.02


@pytest.mark.parametrize(
    "kw", [dict(train_ratio=0.5, heldout_ratio=0.4), dict(chunk_len=0), dict(vocab_size=1), dict(skew=-1.0)]
)
def test_corpus_spec_validation(kw):
    with pytest.raises(ConfigError):
        CorpusSpec(**kw)


# ---- config ----------------------------------------------------------------------


def test_run_config_round_trip_and_hash():
    run = tiny_run(temperature=AdaH(), loss=LossKind.KLD)
    back = RunConfig.from_dict(json.loads(json.dumps(run.to_dict())))
    assert back == run
    assert back.config_hash() == run.config_hash()
    assert len(run.config_hash()) == 40
    assert tiny_run(seed=1).config_hash() != run.config_hash()


@pytest.mark.parametrize(
    "d",
    [{"bogus": 1}, {"truncation": {"p": 0.9, "k": 5, "q": 1}}, {"mode": "sideways"}, {"batch_size": 0},
     {"teacher": {"vocab_size": 99}}],
)
def test_run_config_rejects(d):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_online_override_preset():
    run = OnlineOverride().apply(RunConfig())
    assert run.alpha == StaticAlpha(0.1) and run.truncation == TruncationSpec(0.95, 50)
    assert RunConfig().alpha == StaticAlpha(0.9)


# ---- data order and evaluation -------------------------------------------------------


def test_data_order_is_stateless_and_covers_epoch():
    order = DataOrder(10, 4, 7)
    first = np.concatenate([order.batch(s) for s in range(5)])
    assert sorted(first[:10].tolist()) == list(range(10))
    assert np.array_equal(DataOrder(10, 4, 7).batch(3), order.batch(3))


def test_evaluate_untrained_uniform_chain():
    spec = CorpusSpec(vocab_size=256, skew=0.0, sequence_count=64, chunk_len=32)
    c = generate(spec)
    res = evaluate(init_model(dataclasses.replace(TINY_STUDENT, vocab_size=256, max_seq_len=32)), c.heldout)
    assert abs(res.cross_entropy - math.log(256)) < 0.05
    assert abs(res.perplexity - math.exp(res.cross_entropy)) <= 1e-9


def test_evaluate_empty_split():
    with pytest.raises(ValidationError):
        evaluate(init_model(TINY_STUDENT), np.zeros((0, 9), dtype=int))


# ---- student training ------------------------------------------------------------


def test_alpha_zero_is_inert(tiny_corpus, tiny_teacher):
    run = tiny_run(alpha=StaticAlpha(0.0))
    src = LiveTeacher(tiny_teacher, run.truncation, run.temperature)
    with_src, rep_a = train_student(run, tiny_corpus, src)
    without, rep_b = train_student(run, tiny_corpus, None)
    assert rep_a.to_csv() == rep_b.to_csv()
    for k in with_src.params:
        assert with_src.params[k].tobytes() == without.params[k].tobytes()


def test_kd_run_needs_a_source(tiny_corpus):
    with pytest.raises(ValidationError):
        train_student(tiny_run(), tiny_corpus, None)


def test_self_distillation_kld_is_zero():
    model = init_model(TINY_TEACHER)
    tokens = np.random.default_rng(0).integers(0, 16, size=(2, 8))
    logits, _ = forward(model, tokens)
    teacher = process_logits_rows(logits, TruncationSpec(1.0, 16))
    assert kd_kld(logits, PackedTeacher.from_distributions(teacher)).value < 1e-9


def test_runs_are_byte_deterministic(tiny_corpus, tiny_teacher, tmp_path):
    run = tiny_run()
    src = LiveTeacher(tiny_teacher, run.truncation, run.temperature)
    train_student(run, tiny_corpus, src, tmp_path / "a")
    train_student(run, tiny_corpus, src, tmp_path / "b")
    for name in ("report.csv", "report.json", "student.pdck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_split_equals_unsplit(tiny_corpus, tiny_teacher, tmp_path):
    run = tiny_run(checkpoint_every=4, total_steps=12)
    src = LiveTeacher(tiny_teacher, run.truncation, AdaH())
    run = run.with_overrides(temperature=AdaH())
    full, rep_full = train_student(run, tiny_corpus, src, tmp_path / "full")
    for split in (4, 8):
        ckpt = tmp_path / "full" / "checkpoints" / f"step_{split:06d}.pdck"
        resumed, rep = train_student(run, tiny_corpus, src, tmp_path / f"r{split}", resume_from=ckpt)
        assert rep.to_json() == rep_full.to_json()
        for k in full.params:
            assert resumed.params[k].tobytes() == full.params[k].tobytes()


def test_stop_and_resume_in_process(tiny_corpus, tiny_teacher, tmp_path):
    run = tiny_run(checkpoint_every=5, total_steps=12)
    src = LiveTeacher(tiny_teacher, run.truncation, run.temperature)
    _, rep_full = train_student(run, tiny_corpus, src)
    train_student(run, tiny_corpus, src, tmp_path / "part", stop_at=5)
    _, rep = train_student(run, tiny_corpus, src, tmp_path / "rest",
                           resume_from=tmp_path / "part" / "checkpoints" / "step_000005.pdck")
    assert rep.to_csv() == rep_full.to_csv()


class _NaNSource:
    def check(self, vocab, chunk):
        pass

    def rows(self, items, inputs):
        n = inputs.size
        return PackedTeacher(np.zeros((n, 1), dtype=np.int64), np.full((n, 1), np.nan), np.ones((n, 1), dtype=bool))

    def describe(self):
        return {"kind": "nan"}


def test_divergence_aborts_with_step(tiny_corpus):
    with pytest.raises(TrainingDivergenceError) as info:
        train_student(tiny_run(), tiny_corpus, _NaNSource())
    assert info.value.step == 0


# ---- offline logits --------------------------------------------------------------


def test_dump_k1_is_one_hot(tiny_corpus, tiny_teacher, tmp_path):
    stats = dump_offline_logits(tiny_teacher, tiny_corpus.train[:6], TruncationSpec(0.95, 1),
                                StaticTemperature(1.0), tmp_path / "k1.pdlg")
    assert stats.avg_kept_entries == 1.0 and stats.total_tokens == 48
    with ShardReader(tmp_path / "k1.pdlg") as r:
        for i in range(len(r)):
            for ids, probs in r.read_arrays(i):
                assert ids.size == 1 and probs[0] == 1.0


def test_dump_without_truncation_keeps_vocab(tiny_corpus, tiny_teacher, tmp_path):
    stats = dump_offline_logits(tiny_teacher, tiny_corpus.train[:3], TruncationSpec(1.0, 16),
                                StaticTemperature(1.0), tmp_path / "full.pdlg")
    assert stats.avg_kept_entries == 16.0


def test_dump_equals_live_processing_at_32_bit(tiny_corpus, tiny_teacher, tmp_path):
    spec = TruncationSpec(0.95, 100)
    dump_offline_logits(tiny_teacher, tiny_corpus.train, spec, StaticTemperature(1.0), tmp_path / "s.pdlg", 16)
    logits, _ = forward(tiny_teacher, tiny_corpus.train[:, :-1])
    live = process_logits_rows(logits, spec)
    with ShardReader(tmp_path / "s.pdlg") as r:
        stored = [row for i in range(len(r)) for row in r.read_arrays(i)]
    assert len(stored) == len(live)
    for (ids, probs), d in zip(stored, live):
        assert np.array_equal(ids, d.kept_ids)
        assert probs.tobytes() == d.probs.astype(np.float32).tobytes()


def test_shard_temperature_rules(tiny_corpus, tiny_teacher, tmp_path):
    spec = TruncationSpec(0.95, 8)
    dump_offline_logits(tiny_teacher, tiny_corpus.train[:2], spec, StaticTemperature(2.0), tmp_path / "t2.pdlg")
    dump_offline_logits(tiny_teacher, tiny_corpus.train[:2], spec, AdaH(), tmp_path / "ada.pdlg")
    with ShardReader(tmp_path / "t2.pdlg") as r:
        assert r.header.base_temperature == 2.0
        ShardTeacher(r, StaticTemperature(2.0))
        with pytest.raises(ValidationError):
            ShardTeacher(r, StaticTemperature(1.0))
    with ShardReader(tmp_path / "ada.pdlg") as r:
        assert r.header.base_temperature == 0.0
        with pytest.raises(ValidationError):
            ShardTeacher(r, AdaH())


def test_shard_retemperatured_on_read_matches_live(tiny_corpus, tiny_teacher, tmp_path):
    spec = TruncationSpec(0.9, 6)
    dump_offline_logits(tiny_teacher, tiny_corpus.train[:4], spec, StaticTemperature(1.0), tmp_path / "s.pdlg")
    items = np.arange(4)
    inputs = tiny_corpus.train[:4, :-1]
    live = LiveTeacher(tiny_teacher, spec, AdaH()).rows(items, inputs)
    with ShardReader(tmp_path / "s.pdlg") as r:
        stored = ShardTeacher(r, AdaH()).rows(items, inputs)
    assert np.array_equal(live.ids, stored.ids)
    assert np.max(np.abs(live.probs - stored.probs)) < 1e-5


def test_shard_mismatch_rejected(tiny_corpus, tmp_path):
    with ShardWriter(tmp_path / "v.pdlg", ShardHeader(32, 8)):
        pass
    with ShardReader(tmp_path / "v.pdlg") as r:
        with pytest.raises(ValidationError):
            train_student(tiny_run(), tiny_corpus, ShardTeacher(r, StaticTemperature(1.0)))
    with ShardWriter(tmp_path / "c.pdlg", ShardHeader(16, 5)):
        pass
    with ShardReader(tmp_path / "c.pdlg") as r:
        with pytest.raises(ValidationError):
            train_student(tiny_run(), tiny_corpus, ShardTeacher(r, StaticTemperature(1.0)))


def test_offline_trace_matches_live(tiny_corpus, tiny_teacher, tmp_path):
    run = tiny_run()
    dump_offline_logits(tiny_teacher, tiny_corpus.train, run.truncation, run.temperature, tmp_path / "s.pdlg")
    with ShardReader(tmp_path / "s.pdlg") as r:
        _, rep_shard = train_student(run, tiny_corpus, ShardTeacher(r, run.temperature))
    _, rep_live = train_student(run, tiny_corpus, LiveTeacher(tiny_teacher, run.truncation, run.temperature))
    for a, b in zip(rep_shard.records, rep_live.records):
        assert abs(a.train_loss - b.train_loss) <= 1e-4 * abs(b.train_loss)


# ---- online pipeline -----------------------------------------------------------------


def test_online_windows_and_manifest(tiny_corpus, tmp_path):
    run = tiny_run(mode="online_early", teacher_steps=10, window_steps=4)
    report = run_online_pipeline(run, tiny_corpus, tmp_path)
    windows = load_manifest(tmp_path / "online")
    assert [(w["step_start"], w["step_end"]) for w in windows] == [(0, 4), (4, 8), (8, 10)]
    assert [len(w["sequence_ids"]) for w in windows] == [16, 16, 8]
    assert report.summary["online_window"]["index"] == 0
    with ShardReader(tmp_path / "online" / windows[2]["shard"]) as r:
        assert len(r) == 8
    late = run_online_pipeline(run.with_overrides(mode="online_late"), tiny_corpus, tmp_path / "late")
    assert late.summary["online_window"]["index"] == 2
    assert (tmp_path / "late" / "report.csv").exists()


def test_online_late_last_window_equals_offline_dump(tiny_corpus, tmp_path):
    total = 9
    run = tiny_run(mode="online_late", teacher_steps=total, window_steps=1, checkpoint_every=total - 1)
    run_online_pipeline(run, tiny_corpus, tmp_path)
    last = load_manifest(tmp_path / "online")[-1]
    assert (last["step_start"], last["step_end"]) == (total - 1, total)
    teacher = load_checkpoint(tmp_path / "teacher" / "checkpoints" / f"step_{total - 1:06d}.pdck")
    seqs = tiny_corpus.train[np.array(last["sequence_ids"])]
    dump_offline_logits(teacher, seqs, run.truncation, StaticTemperature(1.0), tmp_path / "off.pdlg",
                        batch_size=run.batch_size)
    online = (tmp_path / "online" / last["shard"])
    assert online.read_bytes() == (tmp_path / "off.pdlg").read_bytes()


def test_online_mode_required(tiny_corpus, tmp_path):
    with pytest.raises(ValidationError):
        run_online_pipeline(tiny_run(), tiny_corpus, tmp_path)


# ---- reports --------------------------------------------------------------------------


def _report(ces):
    recs = [make_record(i + 1, 2.0, ce, 0.9, 1e-3) for i, ce in enumerate(ces)]
    return RunReport(recs, {}, {}, "")


def test_report_perplexity_and_csv_round_trip():
    rep = _report([1.2345678901234567, 0.1 + 0.2])
    for r in rep.records:
        assert abs(r.perplexity - math.exp(r.held_out_ce)) <= 1e-9
    assert parse_csv(rep.to_csv()) == rep.records
    assert RunReport.from_json(rep.to_json()) == rep


def test_compare_examples():
    rows = compare({"base": _report([1.00]), "pd": _report([0.95])}, "base")
    assert rows[0]["delta_pct"] == 0.0
    assert rows[1]["delta_pct"] == pytest.approx(5.0, abs=1e-12)
    assert parse_comparison_csv(comparison_csv(rows)) == rows


def test_report_load_errors(tmp_path):
    with pytest.raises(StorageError):
        RunReport.load(tmp_path)
    (tmp_path / "report.json").write_text("{not json")
    with pytest.raises(CorruptionError):
        RunReport.load(tmp_path)


def test_teacher_report_and_checkpoint_written(tiny_corpus, tmp_path):
    _, rep = train_teacher(tiny_run(teacher_steps=4), tiny_corpus, tmp_path)
    assert (tmp_path / "teacher.pdck").exists()
    assert [r.step for r in rep.records] == [4]
    assert rep.summary["corpus_entropy_rate"] == tiny_corpus.entropy_rate
    assert rep.config["run"]["teacher"] == TINY_TEACHER.to_dict()


# ---- desk scale --------------------------------------------------------------------------


@pytest.mark.slow
def test_desk_teacher_near_entropy_rate(desk_experiment):
    ce = evaluate(desk_experiment.teacher, desk_experiment.corpus.heldout).cross_entropy
    rate = desk_experiment.corpus.entropy_rate
    print(f"teacher held-out CE {ce:.4f}, entropy rate {rate:.4f}, ratio {ce / rate:.4f}")
    assert ce >= rate - 0.05
    assert ce <= 1.05 * rate
