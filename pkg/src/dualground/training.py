"""Losses, the two-stage score-substitution schedule, teacher-student
distillation, the Adam loop, and stratified evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericalError, Tensor
from .config import StageConfig
from .model import GroundingModel


def gt_attribute_scores(category_ids, target_index: int) -> np.ndarray:
    """+1 for objects sharing the target's category, -1 otherwise."""
    cats = np.asarray(category_ids)
    if not (0 <= target_index < cats.shape[0]):
        raise ContractError(f"target index {target_index} outside {cats.shape[0]} objects")
    return np.where(cats == cats[target_index], 1.0, -1.0)


def loss_ref(scores: Tensor, target_index: int, inverse_temperature: float) -> Tensor:
    if scores.data.ndim != 1 or scores.data.shape[0] < 1:
        raise ContractError(f"loss_ref: bad score shape {scores.shape}")
    return ad.softmax_cross_entropy(ad.scale(scores, inverse_temperature), target_index)


def loss_fg(fhat_att: Tensor, category_ids, head_w: Tensor, head_b: Tensor) -> Tensor:
    return ad.softmax_cross_entropy_rows(ad.affine(fhat_att, head_w, head_b),
                                         category_ids)


def loss_text(text: Tensor, target_category: int, head_w: Tensor, head_b: Tensor) -> Tensor:
    cls = ad.row(text, 0)
    return ad.softmax_cross_entropy(ad.affine(cls, head_w, head_b), target_category)


def main_loss(model: GroundingModel, out, example, gtas: bool):
    """L_ref + L_fg + L_text; under GTAS the reference loss sees the
    ground-truth attribute scores in place of the predicted ones."""
    st = model.store
    if gtas:
        g_att = Tensor(gt_attribute_scores(example.cat_ids, example.target_index))
        combined = ad.add(g_att, out.s_spa)
    else:
        combined = out.s
    ref = loss_ref(combined, example.target_index, model.cfg.inverse_temperature)
    fg = loss_fg(out.fhat_att, example.cat_ids, st["head.fg.w"], st["head.fg.b"])
    txt = loss_text(out.text, example.target_category_id,
                    st["head.text.w"], st["head.text.b"])
    total = ad.add(ad.add(ref, fg), txt)
    return total, {"ref": ref.item(), "fg": fg.item(), "text": txt.item()}


def teacher_reference(teacher: GroundingModel, example, kd_inverse_temperature: float):
    """Frozen teacher outputs for distillation (plain arrays, no graph)."""
    with ad.no_grad():
        out = teacher.forward(example)
    return {"fhat_att": out.fhat_att.data.copy(),
            "fhat_spa": out.fhat_spa.data.copy(),
            "logits": out.s.data * kd_inverse_temperature}


def _mse(a: Tensor, target: np.ndarray) -> Tensor:
    d = ad.sub(a, Tensor(target))
    return ad.mean_all(ad.mul(d, d))


def loss_distill(student_out, ref: dict, kd_inverse_temperature: float) -> Tensor:
    """Feature matching plus tempered score-distribution matching."""
    mse = ad.add(_mse(student_out.fhat_att, ref["fhat_att"]),
                 _mse(student_out.fhat_spa, ref["fhat_spa"]))
    kl = ad.kl_divergence_logits(ref["logits"],
                                 ad.scale(student_out.s, kd_inverse_temperature))
    return ad.add(mse, kl)


def measure_gtas_ref_blocking(model: GroundingModel, example) -> float:
    """Max |dL_ref/dW| over the attribute scoring projections under GTAS.

    The substitution removes the attribute score from the reference loss
    entirely, so the measured value must be exactly zero.
    """
    model.store.zero_grad()
    out = model.forward(example)
    g_att = Tensor(gt_attribute_scores(example.cat_ids, example.target_index))
    ref = loss_ref(ad.add(g_att, out.s_spa), example.target_index,
                   model.cfg.inverse_temperature)
    ad.backward(ref)
    worst = 0.0
    for name in ("score.att.w_obj", "score.att.w_txt"):
        g = model.store[name].grad
        if g is not None:
            worst = max(worst, float(np.abs(g).max()))
    model.store.zero_grad()
    return worst


class Adam:
    """Adaptive moment estimation with global-norm gradient clipping."""

    def __init__(self, store, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, grad_clip: float = 5.0, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self) -> None:
        grads = [(name, p.grad) for name, p in self.store.items() if p.grad is not None]
        if not grads:
            return
        if self.grad_clip > 0:
            sq = sum(float((g ** 2).sum()) for _, g in grads)
            norm = math.sqrt(sq)
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
                grads = [(name, g * factor) for name, g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads:
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = self.store[name]
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def _corpus_loss(model, examples, gtas, teacher_refs) -> dict:
    sums = {"ref": 0.0, "fg": 0.0, "text": 0.0, "distill": 0.0, "total": 0.0}
    with ad.no_grad():
        for i, ex in enumerate(examples):
            out = model.forward(ex)
            total, parts = main_loss(model, out, ex, gtas)
            val = total.item()
            if teacher_refs is not None:
                dl = loss_distill(out, teacher_refs[i],
                                  model.cfg.kd_inverse_temperature).item()
                sums["distill"] += dl
                val += dl
            for k, v in parts.items():
                sums[k] += v
            sums["total"] += val
    return {k: v / len(examples) for k, v in sums.items()}


def train_stage(model: GroundingModel, examples, stage: StageConfig,
                teacher: GroundingModel | None = None, log=None) -> dict:
    if not examples:
        raise ContractError("train_stage: empty corpus")
    if stage.stage_kind not in ("gtas_spatial", "fine_tune"):
        raise ContractError(f"unknown stage kind {stage.stage_kind!r}")
    gtas = stage.gtas and stage.stage_kind == "gtas_spatial"
    teacher_refs = None
    if stage.role == "student":
        if teacher is None:
            raise ContractError("student stages need the frozen teacher")
        teacher_refs = [
            teacher_reference(teacher, ex, model.cfg.kd_inverse_temperature)
            for ex in examples
        ]

    report = {
        "stage": asdict(stage),
        "gtas_active": gtas,
        "epochs": [],
        "gtas_blocking_max_abs_grad": None,
    }
    if gtas:
        report["gtas_blocking_max_abs_grad"] = measure_gtas_ref_blocking(
            model, examples[0])
    report["init_loss"] = _corpus_loss(model, examples, gtas, teacher_refs)

    opt = Adam(model.store, stage.learning_rate, stage.adam_beta1,
               stage.adam_beta2, stage.adam_eps, stage.grad_clip,
               stage.weight_decay)
    for epoch in range(stage.epochs):
        order = _epoch_rng(stage.seed, epoch).permutation(len(examples))
        sums = {"ref": 0.0, "fg": 0.0, "text": 0.0, "distill": 0.0, "total": 0.0}
        for start in range(0, len(order), stage.batch_size):
            batch = order[start:start + stage.batch_size]
            model.store.zero_grad()
            for idx in batch:
                ex = examples[idx]
                out = model.forward(ex)
                total, parts = main_loss(model, out, ex, gtas)
                if teacher_refs is not None:
                    dl = loss_distill(out, teacher_refs[idx],
                                      model.cfg.kd_inverse_temperature)
                    if stage.distill_weight != 1.0:
                        dl = ad.scale(dl, stage.distill_weight)
                    sums["distill"] += dl.item()
                    total = ad.add(total, dl)
                val = total.item()
                if not math.isfinite(val):
                    raise NumericalError(
                        f"non-finite loss in {stage.role}/{stage.stage_kind} "
                        f"epoch {epoch} (scene {ex.scene_id})")
                for k, v in parts.items():
                    sums[k] += v
                sums["total"] += val
                ad.backward(ad.scale(total, 1.0 / len(batch)))
            opt.step()
        epoch_report = {k: v / len(examples) for k, v in sums.items()}
        epoch_report["epoch"] = epoch
        report["epochs"].append(epoch_report)
        if log:
            log(f"  {stage.role}/{stage.stage_kind} epoch {epoch}: "
                f"loss {epoch_report['total']:.4f}")
    return report


def evaluate(model: GroundingModel, examples, collect_details: bool = False):
    """Stratified grounding accuracy; empty strata are reported as absent."""
    if not examples:
        raise ContractError("evaluate: empty partition")
    rows = []
    for ex in examples:
        res = model.predict(ex)
        rows.append({
            "correct": res.predicted_index == ex.target_index,
            "att_correct": int(np.argmax(res.triple.s_att)) == ex.target_index,
            "spa_correct": int(np.argmax(res.triple.s_spa)) == ex.target_index,
            "hard": ex.distractor_count > 2,
            "view_dependent": ex.view_dependent,
            "example": ex,
            "result": res,
        })

    def acc(subset):
        subset = list(subset)
        if not subset:
            return None
        return sum(r["correct"] for r in subset) / len(subset)

    metrics = {
        "overall": acc(rows),
        "easy": acc(r for r in rows if not r["hard"]),
        "hard": acc(r for r in rows if r["hard"]),
        "view_dep": acc(r for r in rows if r["view_dependent"]),
        "view_indep": acc(r for r in rows if not r["view_dependent"]),
        "att_branch": sum(r["att_correct"] for r in rows) / len(rows),
        "spa_branch": sum(r["spa_correct"] for r in rows) / len(rows),
        "n": len(rows),
        "n_hard": sum(r["hard"] for r in rows),
        "n_view_dep": sum(r["view_dependent"] for r in rows),
    }
    if collect_details:
        return metrics, rows
    return metrics


def build_stages(schedule, run_seed: int) -> list:
    stages = [
        StageConfig("gtas_spatial", "teacher", epochs=schedule.teacher_gtas_epochs,
                    learning_rate=schedule.learning_rate,
                    batch_size=schedule.batch_size, seed=run_seed + 101,
                    gtas=schedule.use_gtas),
        StageConfig("fine_tune", "teacher", epochs=schedule.teacher_ft_epochs,
                    learning_rate=schedule.learning_rate,
                    batch_size=schedule.batch_size, seed=run_seed + 102),
    ]
    if not schedule.teacher_only:
        stages += [
            StageConfig("gtas_spatial", "student", epochs=schedule.student_gtas_epochs,
                        learning_rate=schedule.learning_rate,
                        batch_size=schedule.batch_size, seed=run_seed + 103,
                        gtas=schedule.use_gtas),
            StageConfig("fine_tune", "student", epochs=schedule.student_ft_epochs,
                        learning_rate=schedule.learning_rate,
                        batch_size=schedule.batch_size, seed=run_seed + 104),
        ]
    return stages


def run_schedule(run_cfg, vocab, train_teacher, train_student, test_teacher,
                 test_student, log=None):
    """Teacher GTAS -> teacher fine-tune -> student GTAS -> student fine-tune.

    Returns (teacher, student | None, stage_results) where each stage result
    carries the train report and the held-out evaluation after the stage.
    """
    from .config import CATEGORIES, COLORS

    teacher = GroundingModel(run_cfg.model, vocab, CATEGORIES, COLORS,
                             "teacher", run_cfg.seed)
    student = None
    stage_results = []
    for stage in build_stages(run_cfg.schedule, run_cfg.seed):
        if stage.role == "teacher":
            model, train_set, test_set, frozen = teacher, train_teacher, test_teacher, None
        else:
            if student is None:
                student = GroundingModel(run_cfg.model, vocab, CATEGORIES, COLORS,
                                         "student", run_cfg.seed + 1)
                # fresh student except the text encoder, which starts from the
                # trained teacher's
                student.store.copy_from(teacher.store, prefix="text.")
            model, train_set, test_set, frozen = (student, train_student,
                                                  test_student, teacher)
        if log:
            log(f"stage {stage.role}/{stage.stage_kind} "
                f"({stage.epochs} epochs, gtas={stage.gtas})")
        report = train_stage(model, train_set, stage, teacher=frozen, log=log)
        report["final_eval"] = evaluate(model, test_set)
        stage_results.append(report)
    return teacher, student, stage_results
