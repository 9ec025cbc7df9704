import numpy as np
import pytest

from hybridlab import tensor as T
from hybridlab.attention import ConfigurationError, LayerKind
from hybridlab.healing import (LOG_FIELDS, DataUnderflowError, HealingConfig, HealingTrainer, PairingError,
                               TeacherStudentPair, frozen_hash, heal, healing_losses, lr_at, make_student,
                               mean_attention_kl, write_heal_log)
from hybridlab.model import (HybridPlan, LoraConfig, ModelConfig, build_model, load_checkpoint, parameter_hash)
from hybridlab.tasks import corpus

from conftest import check_gradients, reference_teacher

S, I = LayerKind.softmax(), LayerKind.identity()
W = LayerKind.sliding
TINY = ModelConfig(layer_count=3, hidden_dim=8, head_count=2, ffn_dim=16, vocab_size=24, max_seq_len=16)


def tiny_pair(seed=0, plan=None, rank=2, dropout=0.0):
    teacher = build_model(ModelConfig(**{**TINY.__dict__, "rng_seed": seed}), HybridPlan.all_softmax(3))
    student = make_student(teacher, plan or HybridPlan((S, W(2), S), 2),
                           LoraConfig(rank=rank, alpha=4.0, dropout=dropout, seed=seed))
    r = np.random.default_rng(seed + 100)
    for ad in student.adapters.values():
        ad.b.data[...] = r.standard_normal(ad.b.shape) * 0.3
    return TeacherStudentPair(teacher, student)


def toy_batch(seed, rows=2, n=7):
    return np.random.default_rng(seed).integers(0, TINY.vocab_size, size=(rows, n))


@pytest.mark.parametrize("seed", range(5))
def test_combined_loss_gradient_matches_central_differences(seed):
    pair = tiny_pair(seed)
    batch = toy_batch(seed)
    names = ["layers.0.wq", "layers.1.wv", "layers.2.wk"]
    ads = [pair.student.adapters[n] for n in names]
    arrays = [x for ad in ads for x in (ad.a.data.copy(), ad.b.data.copy())]

    def build(*ts):
        for ad, a, b in zip(ads, ts[0::2], ts[1::2]):
            ad.a, ad.b = a, b
        return healing_losses(pair, batch, 0.5)[0]

    check_gradients(build, arrays)


def test_kl_term_has_gradient_through_shared_layers():
    pair = tiny_pair(1)
    _, _, attn = healing_losses(pair, toy_batch(1), 0.5)
    assert attn.item() > 1e-4
    attn.backward()
    assert pair.student.adapters["layers.0.wq"].a.grad is not None


def test_loss_decomposes_exactly():
    for lam in (0.0, 0.3, 2.0):
        pair = tiny_pair(2)
        total, ce, attn = healing_losses(pair, toy_batch(3), lam)
        assert total.item() == pytest.approx(ce.item() + lam * attn.item(), rel=1e-10, abs=1e-14)
    total, ce, _ = healing_losses(tiny_pair(2), toy_batch(3), 0.0)
    assert total.item() == ce.item()


def test_summed_layer_reduction_scales_with_shared_layers():
    pair = tiny_pair(5)
    batch = toy_batch(6)
    mean = healing_losses(pair, batch, 0.5)[2].item()
    summed = healing_losses(pair, batch, 0.5, reduction="sum")[2].item()
    assert len(pair.shared_layers) == 2
    assert summed == pytest.approx(2 * mean, rel=1e-12)
    with pytest.raises(ConfigurationError):
        HealingConfig(layer_reduction="max")


def test_attention_kl_is_zero_at_initialisation():
    teacher = build_model(TINY, HybridPlan.all_softmax(3))
    same = make_student(teacher, HybridPlan.all_softmax(3), LoraConfig(rank=2, dropout=0.0))
    _, _, attn = healing_losses(TeacherStudentPair(teacher, same), toy_batch(0), 0.5)
    assert abs(attn.item()) < 1e-12
    # a shared layer before any changed layer sees identical inputs
    front = make_student(teacher, HybridPlan((S, I, I), 1), LoraConfig(rank=2, dropout=0.0))
    _, _, attn = healing_losses(TeacherStudentPair(teacher, front), toy_batch(0), 0.5)
    assert abs(attn.item()) < 1e-12


def test_attention_kl_ignores_batch_order():
    pair = tiny_pair(4)
    batch = toy_batch(5, rows=4)
    a = healing_losses(pair, batch, 0.5)[2].item()
    b = healing_losses(pair, batch[::-1], 0.5)[2].item()
    assert a == pytest.approx(b, rel=1e-12)


def test_no_shared_layers_gives_zero_kl():
    pair = tiny_pair(0, plan=HybridPlan((I, W(2), I), 0))
    total, ce, attn = healing_losses(pair, toy_batch(0), 0.5)
    assert attn.item() == 0.0 and total.item() == ce.item()


def test_lr_endpoints():
    cfg = HealingConfig(learning_rate=1e-3, warmup_steps=10, batch_size=2, grad_accum_steps=1, seq_len=8,
                        token_budget=16 * 50)
    assert cfg.total_steps == 50
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == 1e-3
    assert abs(lr_at(50, cfg)) < 1e-12


def test_config_validation():
    with pytest.raises(ConfigurationError):
        HealingConfig(distill_weight=-0.1)
    with pytest.raises(ConfigurationError):
        HealingConfig(grad_clip_norm=0.0)
    with pytest.raises(ConfigurationError):
        HealingConfig(token_budget=0)


def test_pairing_errors():
    teacher = build_model(TINY, HybridPlan.all_softmax(3))
    wider = build_model(ModelConfig(**{**TINY.__dict__, "hidden_dim": 16}), HybridPlan.all_softmax(3))
    student = make_student(wider, HybridPlan((S, I, I), 1), LoraConfig(rank=2))
    with pytest.raises(PairingError, match="hidden_dim"):
        TeacherStudentPair(teacher, student)
    hybrid_teacher = build_model(TINY, HybridPlan((S, W(2), S), 2))
    with pytest.raises(PairingError, match="softmax"):
        TeacherStudentPair(hybrid_teacher, make_student(teacher, HybridPlan((S, I, I), 1), LoraConfig(rank=2)))


# trainer ----------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(distill_weight=0.5, learning_rate=1e-2, warmup_steps=2, grad_clip_norm=0.05, batch_size=2,
                grad_accum_steps=2, seq_len=8, token_budget=8 * 4 * 6, checkpoint_token_marks=(64, 160))
    base.update(kw)
    return HealingConfig(**base)


def test_step_updates_adapters_only_and_respects_clip():
    pair = tiny_pair(0, dropout=0.1)
    base = parameter_hash(pair.student.params)
    teacher = parameter_hash(pair.teacher.params)
    trainer = HealingTrainer(pair, small_cfg())
    before = [p.data.copy() for p in trainer.params]
    rep = trainer.step(toy_batch(0, rows=4, n=8))
    assert rep.grad_norm <= 0.05 + 1e-6
    assert rep.tokens_seen == 32 and rep.step == 1
    assert any(not np.array_equal(b, p.data) for b, p in zip(before, trainer.params))
    assert parameter_hash(pair.student.params) == base
    assert parameter_hash(pair.teacher.params) == teacher
    assert all(p.grad is None for p in pair.student.params.values())


def test_accumulation_equals_one_large_batch():
    batch = toy_batch(7, rows=4, n=8)
    results = []
    for accum in (1, 2):
        pair = tiny_pair(3)
        trainer = HealingTrainer(pair, small_cfg(batch_size=4 // accum, grad_accum_steps=accum, grad_clip_norm=1e6))
        trainer.step(batch)
        results.append([p.data.copy() for p in trainer.params])
    for a, b in zip(*results):
        assert np.allclose(a, b, atol=1e-12)


def test_heal_writes_marks_and_keeps_base_frozen(tmp_path):
    pair = tiny_pair(0)
    cfg = small_cfg()
    base = frozen_hash(pair.student)
    teacher = frozen_hash(pair.teacher)
    data = toy_batch(1, rows=4 * 6, n=8)
    result = heal(pair, data, cfg, checkpoint_dir=tmp_path)
    assert len(result.log) == 6
    assert [c.token_mark for c in result.checkpoints] == [64, 160]
    assert [c.tokens_seen for c in result.checkpoints] == [64, 160]
    for c in result.checkpoints:
        assert c.frozen_hash == base
        assert parameter_hash(load_checkpoint(c.path).params) == base
    assert frozen_hash(pair.teacher) == teacher
    write_heal_log(result.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 7


def test_marks_beyond_budget_are_not_written():
    result = heal(tiny_pair(0), toy_batch(1, rows=24, n=8), small_cfg(checkpoint_token_marks=(64, 10_000)))
    assert [c.token_mark for c in result.checkpoints] == [64]


def test_underflow_names_tokens_consumed():
    with pytest.raises(DataUnderflowError, match="after 96 tokens"):
        heal(tiny_pair(0), toy_batch(1, rows=13, n=8), small_cfg())


def test_heal_rejects_wrong_sequence_length():
    with pytest.raises(ConfigurationError):
        heal(tiny_pair(0), toy_batch(1, rows=24, n=9), small_cfg())


def test_total_loss_descends_on_the_toy_pipeline():
    teacher = reference_teacher()
    pair = TeacherStudentPair(teacher, make_student(teacher, HybridPlan.parse("S,W8,S,I,I,I"),
                                                    LoraConfig(rank=8, alpha=8.0, dropout=0.05)))
    cfg = HealingConfig(learning_rate=1e-3, warmup_steps=20, batch_size=8, grad_accum_steps=1, seq_len=32,
                        token_budget=200 * 8 * 32, checkpoint_token_marks=())
    data = corpus(200 * 8, 32, seed=11, grammar_seed=1234)
    log = heal(pair, data, cfg).log
    assert len(log) == 200
    totals = [r.loss_total for r in log]
    assert np.mean(totals[100:]) < np.mean(totals[:100])
    assert all(r.grad_norm <= cfg.grad_clip_norm + 1e-6 for r in log)
    probe = corpus(64, 32, seed=12, grammar_seed=1234)
    assert mean_attention_kl(pair, probe) >= -1e-9
