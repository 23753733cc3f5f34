import numpy as np
import pytest

from mmdpu import student as st
from mmdpu import teacher as te
from mmdpu.datamodel import ConfigError, SplitSpec, split_dataset
from mmdpu.ingest import PreprocessConfig, SyntheticCorpusSpec, generate_synthetic_corpus, load_imd, load_mmd
from mmdpu.trainer import (
    VARIANTS,
    EarlyStopping,
    TrainConfig,
    apply_variant,
    compare,
    load_student,
    run_multiseed,
    save_student,
    train,
)

SIZE = 16
VOCAB = 500


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    corpus = generate_synthetic_corpus(
        SyntheticCorpusSpec(n_articles=60, n_imd=24, image_size=SIZE, vocab_size=VOCAB, seed=5), root)
    pc = PreprocessConfig(image_size=SIZE, resize_size=SIZE, vocab_size=VOCAB)
    arts = load_mmd(corpus.mmd_manifest, pc)
    imd = load_imd(corpus.imd_manifest, pc)
    tr, va, test = split_dataset(arts, SplitSpec(seed=1))
    return tr, va, test, imd


def cfgs():
    return (te.TeacherConfig(stage_channels=(4, 8), attn_dim=8, attn_heads=2, image_size=SIZE, warmup_epochs=1),
            st.StudentConfig(dim=8, vocab_size=VOCAB, image_channels=(4, 8), fusion_heads=2))


def run(data, variant="full", **kw):
    tr, va, _, imd = data
    tcfg, scfg = cfgs()
    base = dict(batch_size=8, max_epochs=2, patience_epochs=5)
    base.update(kw)
    return train(tr, va, imd, TrainConfig(**base), seed=1, teacher_cfg=tcfg, student_cfg=scfg, variant=variant)


class TestEarlyStopping:
    def test_peak_at_round_three(self):
        scores = [0.5, 0.6, 0.7] + [0.69 - 0.01 * k for k in range(20)]
        es = EarlyStopping(10)
        for s in scores:
            es.update(s)
            if es.should_stop:
                break
        assert es.round == 13 and es.best_round == 3 and es.best == 0.7

    def test_equal_score_is_not_improvement(self):
        es = EarlyStopping(2)
        es.update(0.5)
        assert not es.update(0.5)
        es.update(0.5)
        assert es.should_stop


def test_zero_iterations(data):
    tr, va, _, imd = data
    tcfg, scfg = cfgs()
    res = train(tr, va, imd, TrainConfig(batch_size=8, max_iters=0), seed=1, teacher_cfg=tcfg, student_cfg=scfg)
    assert res.record.stop_reason == "max_iters"
    assert res.record.iterations == []
    assert res.teacher.warmed and res.teacher.n_adapt_steps == 0
    fresh = st.init_student(res.student.config, seed=1)
    for a, b in zip(fresh.net.state_dict().values(), res.student.net.state_dict().values()):
        assert (a == b).all()


def test_ordering_and_warmup(data):
    res = run(data, max_iters=10)
    ev = res.record.events
    assert ev[0]["event"] == "warmup_done"
    teacher = {e["iteration"]: e for e in ev if e["event"] == "teacher_update"}
    student = {e["iteration"]: e for e in ev if e["event"] == "student_update"}
    assert sorted(teacher) == sorted(student) == list(range(1, 11))
    for i in teacher:
        assert teacher[i]["t_ns"] < student[i]["t_ns"]
        assert teacher[i]["t_ns"] > ev[0]["t_ns"]


def test_determinism(data):
    a = run(data, max_iters=8).record.scalars()
    b = run(data, max_iters=8).record.scalars()
    assert len(a) == len(b) and len(a) > 0
    assert max(abs(x - y) for x, y in zip(a, b)) < 1e-9


def test_best_checkpoint_returned(data):
    res = run(data, max_epochs=4)
    rec = res.record
    best = max(v["macro_f1"] for v in rec.validations)
    assert rec.validations[rec.best_round - 1]["macro_f1"] == best
    iters = [v["iteration"] for v in rec.validations]
    assert iters == sorted(iters)


def test_small_dataset_warns(data):
    tr, va, _, imd = data
    tcfg, scfg = cfgs()
    with pytest.warns(UserWarning, match="smaller than batch size"):
        train(tr[:3], va, imd, TrainConfig(batch_size=8, max_iters=2), seed=1, teacher_cfg=tcfg, student_cfg=scfg)


def test_missing_imd(data):
    tr, va, _, _ = data
    tcfg, scfg = cfgs()
    with pytest.raises(ConfigError):
        train(tr, va, [], TrainConfig(max_iters=1), teacher_cfg=tcfg, student_cfg=scfg)


def test_basic_variant_skips_teacher(data):
    res = run(data, variant="no_eM_eE", max_iters=3)
    assert res.teacher is None
    assert not any(e["event"] == "teacher_update" for e in res.record.events)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_configure(variant):
    tc, sc = apply_variant(variant, TrainConfig(), st.StudentConfig())
    if variant == "no_Lpu":
        assert tc.weights.delta == 0
    if variant == "no_Lkd_Lir":
        assert tc.weights.alpha == tc.weights.beta == 0
    if variant == "no_Lpre":
        assert not tc.use_pre
    assert sc.use_manip_feature == (variant not in ("no_eM", "no_eM_eE"))
    assert sc.use_intent_feature == (variant not in ("no_eE", "no_eM_eE"))


def test_unknown_variant():
    with pytest.raises(ValueError):
        apply_variant("nope", TrainConfig(), st.StudentConfig())


def test_multiseed_report(data):
    tcfg, scfg = cfgs()
    cfg = TrainConfig(batch_size=8, max_epochs=1)
    one = run_multiseed(cfg, data, teacher_cfg=tcfg, student_cfg=scfg, seeds=[1])
    assert one.aggregate()["macro_f1"]["std"] == 0.0
    two = run_multiseed(cfg, data, variant="no_eM_eE", teacher_cfg=tcfg, student_cfg=scfg, seeds=[1, 2])
    assert len(two.rows) == 2
    vals = two.values("macro_f1")
    assert two.aggregate()["macro_f1"]["mean"] == pytest.approx(np.mean(vals))
    p = compare(two, two)["macro_f1"]
    assert p == 1.0


def test_student_checkpoint(data, tmp_path):
    res = run(data, max_iters=2)
    save_student(res.student, tmp_path / "s.pt")
    back = load_student(tmp_path / "s.pt")
    _, va, _, _ = data
    a = st.infer(res.student, va).probs
    b = st.infer(back, va).probs
    assert (a == b).all()
