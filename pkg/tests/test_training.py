"""Loss, GTAS, distillation, and training-loop tests."""

import math

import numpy as np
import pytest

from dualground import autodiff as ad
from dualground import scenegen as sg
from dualground import training as tr
from dualground.autodiff import ContractError, Tensor
from dualground.config import (
    CATEGORIES,
    COLORS,
    GenConfig,
    ModelConfig,
    RunConfig,
    ScheduleConfig,
    StageConfig,
)
from dualground.data import make_dataset
from dualground.langparse import Vocabulary
from dualground.model import GroundingModel


def micro_cfg():
    return ModelConfig(d=16, stack_layers=2, heads=2, text_layers=1,
                       max_tokens=12, point_hidden=16)


def micro_corpus(n_scenes=6, seed=0, k=4):
    gen = GenConfig(k_min=k, k_max=k)
    scenes, records = sg.generate_corpus(gen, seed=seed, n_scenes=n_scenes)
    return {s.id: s for s in scenes}, records, gen


def micro_setup(role="teacher", n_scenes=6, seed=0):
    scenes, records, gen = micro_corpus(n_scenes=n_scenes, seed=seed)
    vocab = Vocabulary.default()
    model = GroundingModel(micro_cfg(), vocab, CATEGORIES, COLORS, role, seed)
    examples = make_dataset(scenes, records, vocab, CATEGORIES, COLORS, gen,
                            with_points=True, points_seed=seed)
    return model, examples


class TestGtAttributeScores:
    def test_forced_values(self):
        # categories [chair, chair, table], target object 0
        got = tr.gt_attribute_scores([0, 0, 1], 0)
        np.testing.assert_array_equal(got, [1.0, 1.0, -1.0])

    def test_all_same_category(self):
        np.testing.assert_array_equal(tr.gt_attribute_scores([2, 2, 2], 1),
                                      [1.0, 1.0, 1.0])

    def test_unique_target_category(self):
        got = tr.gt_attribute_scores([3, 1, 2], 1)
        np.testing.assert_array_equal(got, [-1.0, 1.0, -1.0])
        assert got[1] == 1.0

    def test_bad_target(self):
        with pytest.raises(ContractError):
            tr.gt_attribute_scores([0, 1], 5)


class TestLossRef:
    def test_saturated(self):
        loss = tr.loss_ref(Tensor(np.array([10.0, -10.0])), 0, 1.0)
        assert loss.item() < 1e-8

    def test_uniform_is_log_k(self):
        for k in (2, 5, 8):
            loss = tr.loss_ref(Tensor(np.zeros(k)), 1 % k, 7.0)
            assert abs(loss.item() - math.log(k)) < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.normal(size=6)
            temp = rng.uniform(0.5, 12.0)
            t = int(rng.integers(6))
            got = tr.loss_ref(Tensor(s), t, temp).item()
            z = [math.exp(temp * v) for v in s]
            want = -math.log(z[t] / sum(z))
            assert abs(got - want) < 1e-12

    def test_bad_index(self):
        with pytest.raises(ContractError):
            tr.loss_ref(Tensor(np.zeros(3)), 3, 1.0)


class TestLossFgText:
    def test_saturated_one_hot(self):
        logits = np.full((2, 4), -30.0)
        logits[0, 1] = 30.0
        logits[1, 2] = 30.0
        w = Tensor(np.eye(4))
        b = Tensor(np.zeros(4))
        loss = tr.loss_fg(Tensor(logits), [1, 2], w, b)
        assert loss.item() < 1e-6

    def test_uniform_is_log_c(self):
        c = 5
        loss = tr.loss_fg(Tensor(np.zeros((3, c))), [0, 1, 2],
                          Tensor(np.eye(c)), Tensor(np.zeros(c)))
        assert abs(loss.item() - math.log(c)) < 1e-12
        tloss = tr.loss_text(Tensor(np.zeros((2, c))), 3,
                             Tensor(np.eye(c)), Tensor(np.zeros(c)))
        assert abs(tloss.item() - math.log(c)) < 1e-12

    def test_gradient_through_head_and_stack(self):
        model, examples = micro_setup()
        ex = examples[0]

        def f(ps):
            out = model.forward(ex)
            total, _ = tr.main_loss(model, out, ex, gtas=False)
            return total

        model.store.zero_grad()
        loss = f(model.store)
        ad.backward(loss)
        rng = np.random.default_rng(3)
        eps = 1e-5
        for name in ("head.fg.w", "head.text.w", "stack.layer0.att.ffn.w1",
                     "score.att.w_obj"):
            p = model.store[name]
            an = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=3, replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                with ad.no_grad():
                    up = f(model.store).item()
                flat[i] = orig - eps
                with ad.no_grad():
                    dn = f(model.store).item()
                flat[i] = orig
                fd = (up - dn) / (2 * eps)
                assert abs(an.reshape(-1)[i] - fd) / max(1.0, abs(fd)) < 1e-4, name


class TestDistillation:
    def test_identical_outputs_zero_loss(self):
        model, examples = micro_setup()
        ex = examples[0]
        ref = tr.teacher_reference(model, ex, model.cfg.kd_inverse_temperature)
        with ad.no_grad():
            out = model.forward(ex)
        loss = tr.loss_distill(out, ref, model.cfg.kd_inverse_temperature)
        assert loss.item() < 1e-12

    def test_nonnegative(self):
        teacher, examples = micro_setup(seed=1)
        student, _ = micro_setup(role="student", seed=2)
        ex = examples[0]
        ref = tr.teacher_reference(teacher, ex, 10.0)
        with ad.no_grad():
            out = student.forward(ex)
        assert tr.loss_distill(out, ref, 10.0).item() >= 0.0

    def test_gradient_only_into_student(self):
        teacher, examples = micro_setup(seed=3)
        student, _ = micro_setup(role="student", seed=4)
        ex = examples[0]
        ref = tr.teacher_reference(teacher, ex, 10.0)
        teacher.store.zero_grad()
        student.store.zero_grad()
        out = student.forward(ex)
        ad.backward(tr.loss_distill(out, ref, 10.0))
        assert all(t.grad is None for t in teacher.store.tensors())
        assert any(t.grad is not None and np.abs(t.grad).max() > 0
                   for t in student.store.tensors())

    def test_shared_encoder_copy_gives_zero(self):
        # two teacher-type models with identical parameters: distilling one
        # against the other is exactly zero
        a, examples = micro_setup(seed=5)
        b, _ = micro_setup(seed=6)
        b.store.copy_from(a.store)
        ex = examples[0]
        ref = tr.teacher_reference(a, ex, 10.0)
        with ad.no_grad():
            out = b.forward(ex)
        assert tr.loss_distill(out, ref, 10.0).item() == 0.0


class TestGtasBlocking:
    def test_ref_gradient_exactly_zero_for_attribute_scoring(self):
        model, examples = micro_setup(seed=7)
        worst = tr.measure_gtas_ref_blocking(model, examples[0])
        assert worst == 0.0

    def test_without_gtas_gradient_flows(self):
        model, examples = micro_setup(seed=8)
        ex = examples[0]
        model.store.zero_grad()
        out = model.forward(ex)
        ad.backward(tr.loss_ref(out.s, ex.target_index, 10.0))
        g = model.store["score.att.w_obj"].grad
        assert g is not None and np.abs(g).max() > 0.0


class TestTrainStage:
    def test_smoke_loss_decreases_all_four_stages(self):
        model, examples = micro_setup(seed=9, n_scenes=10)
        student, _ = micro_setup(role="student", seed=10, n_scenes=10)
        stages = [
            StageConfig("gtas_spatial", "teacher", epochs=2, learning_rate=3e-3,
                        batch_size=5, seed=1),
            StageConfig("fine_tune", "teacher", epochs=2, learning_rate=3e-3,
                        batch_size=5, seed=2),
            StageConfig("gtas_spatial", "student", epochs=2, learning_rate=3e-3,
                        batch_size=5, seed=3),
            StageConfig("fine_tune", "student", epochs=2, learning_rate=3e-3,
                        batch_size=5, seed=4),
        ]
        for stage in stages:
            target = model if stage.role == "teacher" else student
            teacher = model if stage.role == "student" else None
            report = tr.train_stage(target, examples, stage, teacher=teacher)
            assert report["epochs"][-1]["total"] < report["init_loss"]["total"], \
                f"{stage.role}/{stage.stage_kind}"
            if stage.stage_kind == "gtas_spatial":
                assert report["gtas_blocking_max_abs_grad"] == 0.0

    def test_empty_corpus_rejected(self):
        model, _ = micro_setup(seed=11)
        with pytest.raises(ContractError):
            tr.train_stage(model, [], StageConfig("fine_tune", "teacher"))

    def test_student_without_teacher_rejected(self):
        model, examples = micro_setup(role="student", seed=12)
        with pytest.raises(ContractError):
            tr.train_stage(model, examples,
                           StageConfig("fine_tune", "student", epochs=1))


class TestNoDeadTextSubnetwork:
    def test_all_text_tensors_get_gradient_from_main_loss(self):
        model, examples = micro_setup(seed=20, n_scenes=6)
        model.store.zero_grad()
        for ex in examples:
            out = model.forward(ex)
            total, _ = tr.main_loss(model, out, ex, gtas=False)
            ad.backward(total)
        for name, t in model.store.items():
            if name.startswith("text."):
                assert t.grad is not None and np.abs(t.grad).max() > 0.0, name


class TestEvaluate:
    def test_oracle_as_model_is_perfect(self):
        scenes, records, gen = micro_corpus(n_scenes=8, seed=13)
        for rec in records:
            got = sg.oracle_satisfiers(scenes[rec.scene_id], rec.relation_kind,
                                       rec.anchor_ids, rec.attribute_filter, gen,
                                       secondary_relation=rec.secondary_relation)
            assert got == {rec.target_id}

    def test_untrained_model_near_chance(self):
        scenes, records, gen = micro_corpus(n_scenes=60, seed=14, k=4)
        vocab = Vocabulary.default()
        model = GroundingModel(micro_cfg(), vocab, CATEGORIES, COLORS, "teacher", 99)
        examples = make_dataset(scenes, records, vocab, CATEGORIES, COLORS, gen)
        metrics = tr.evaluate(model, examples)
        p = 1.0 / 4
        sigma = math.sqrt(p * (1 - p) / len(examples))
        assert abs(metrics["overall"] - p) <= 4 * sigma + 0.02

    def test_strata_reported_absent_when_empty(self):
        model, examples = micro_setup(seed=15)
        only_easy = [ex for ex in examples if ex.distractor_count <= 2]
        metrics = tr.evaluate(model, only_easy)
        assert metrics["hard"] is None
        assert metrics["overall"] is not None

    def test_checkpoint_round_trip_identical_metrics(self, tmp_path):
        model, examples = micro_setup(seed=16)
        stage = StageConfig("fine_tune", "teacher", epochs=1, batch_size=4, seed=5)
        tr.train_stage(model, examples, stage)
        before = tr.evaluate(model, examples)
        path = tmp_path / "t.ckpt"
        model.store.save(path, meta=model.checkpoint_meta())
        loaded = GroundingModel.from_checkpoint(path, model.vocab)
        after = tr.evaluate(loaded, examples)
        assert before == after


class TestSchedule:
    def test_four_stage_reports_and_determinism(self):
        scenes, records, gen = micro_corpus(n_scenes=8, seed=17)
        vocab = Vocabulary.default()
        train, test = sg.split_corpus(records, 0.75, seed=0)
        run = RunConfig(seed=3, model=micro_cfg(),
                        schedule=ScheduleConfig(teacher_gtas_epochs=1,
                                                teacher_ft_epochs=1,
                                                student_gtas_epochs=1,
                                                student_ft_epochs=1,
                                                batch_size=4),
                        gen=GenConfig(k_min=4, k_max=4))
        def build(with_points):
            tr_ex = make_dataset(scenes, train, vocab, CATEGORIES, COLORS, run.gen,
                                 with_points=with_points, points_seed=run.seed)
            te_ex = make_dataset(scenes, test, vocab, CATEGORIES, COLORS, run.gen,
                                 with_points=with_points, points_seed=run.seed)
            return tr_ex, te_ex

        t_train, t_test = build(False)
        s_train, s_test = build(True)
        teacher, student, reports = tr.run_schedule(run, vocab, t_train, s_train,
                                                    t_test, s_test)
        assert len(reports) == 4
        assert [r["stage"]["role"] for r in reports] == \
            ["teacher", "teacher", "student", "student"]
        assert student is not None
        # repeat run must match exactly
        teacher2, student2, reports2 = tr.run_schedule(run, vocab, t_train, s_train,
                                                       t_test, s_test)
        assert reports == reports2
        for name, t in teacher.store.items():
            assert t.data.tobytes() == teacher2.store[name].data.tobytes()

    def test_teacher_only_two_reports(self):
        scenes, records, gen = micro_corpus(n_scenes=6, seed=18)
        vocab = Vocabulary.default()
        train, test = sg.split_corpus(records, 0.7, seed=0)
        run = RunConfig(seed=4, model=micro_cfg(),
                        schedule=ScheduleConfig(teacher_gtas_epochs=1,
                                                teacher_ft_epochs=1,
                                                use_gtas=False,
                                                teacher_only=True, batch_size=4),
                        gen=GenConfig(k_min=4, k_max=4))
        t_train = make_dataset(scenes, train, vocab, CATEGORIES, COLORS, run.gen)
        t_test = make_dataset(scenes, test, vocab, CATEGORIES, COLORS, run.gen)
        teacher, student, reports = tr.run_schedule(run, vocab, t_train, None,
                                                    t_test, None)
        assert student is None
        assert len(reports) == 2
        assert all(not r["gtas_active"] for r in reports)
