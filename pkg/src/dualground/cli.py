"""Command-line pipeline: gen-data, train, eval, inspect, gradcheck.

Exit codes: 0 success, 1 contract/validation error, 2 I/O error,
3 numerical failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericalError
from .config import (
    CATEGORIES,
    COLORS,
    GenConfig,
    ModelConfig,
    RunConfig,
    ScheduleConfig,
    config_hash,
)
from .data import make_dataset, make_example
from .langparse import ParseError, Vocabulary
from .model import GroundingModel
from .params import ParamStore
from .scenegen import (
    GenerationError,
    ObjectInstance,
    Scene,
    classify_difficulty,
    generate_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from .training import evaluate, main_loss, run_schedule

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def _default_out() -> str:
    return os.environ.get("DUALGROUND_OUT", "out")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    gen = GenConfig(k_min=args.k, k_max=args.k)
    seed = args.seed
    corpus_cfg = {"gen": asdict(gen), "seed": seed, "n_scenes": args.scenes,
                  "train_fraction": args.train_fraction}
    chash = config_hash(corpus_cfg)
    scenes, records = generate_corpus(gen, seed, args.scenes)
    train, test = split_corpus(records, args.train_fraction, seed)
    os.makedirs(args.out, exist_ok=True)
    save_corpus(args.out, gen, seed, scenes, records)
    Vocabulary.default().save(os.path.join(args.out, "vocab.txt"))
    manifest = {
        "config_hash": chash,
        "seed": seed,
        "n_scenes": len(scenes),
        "n_records": len(records),
        "n_train": len(train),
        "n_test": len(test),
        "train_scene_ids": sorted({r.scene_id for r in train}),
        "test_scene_ids": sorted({r.scene_id for r in test}),
        "difficulty": {
            "easy": sum(classify_difficulty(r) == "easy" for r in records),
            "hard": sum(classify_difficulty(r) == "hard" for r in records),
        },
        "gen": asdict(gen),
        "train_fraction": args.train_fraction,
        # view-dependence labels follow a fixed relation-kind rule rather
        # than human judgments; see README
        "vd_rule": "relation-kind",
    }
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    print(f"wrote {len(scenes)} scenes / {len(records)} records to {args.out} "
          f"(config {chash})")
    return EXIT_OK


def _load_corpus_dir(corpus_dir):
    scenes, records, header = load_corpus(corpus_dir)
    with open(os.path.join(corpus_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    vocab = Vocabulary.load(os.path.join(corpus_dir, "vocab.txt"))
    gen = GenConfig(**{k: tuple(v) if isinstance(v, list) else v
                       for k, v in manifest["gen"].items()})
    train_ids = set(manifest["train_scene_ids"])
    train = [r for r in records if r.scene_id in train_ids]
    test = [r for r in records if r.scene_id not in train_ids]
    return scenes, train, test, vocab, gen, manifest


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    scenes, train, test, vocab, gen, manifest = _load_corpus_dir(args.corpus)
    epochs = [int(e) for e in args.epochs.split(",")]
    if len(epochs) != 4:
        raise ContractError("--epochs expects four comma-separated counts")
    run = RunConfig(
        seed=args.seed,
        n_scenes=manifest["n_scenes"],
        train_fraction=manifest["train_fraction"],
        gen=gen,
        model=ModelConfig(d=args.d, stack_layers=args.layers, heads=args.heads,
                          fusion=args.fusion,
                          inverse_temperature=args.inverse_temperature),
        schedule=ScheduleConfig(
            teacher_gtas_epochs=epochs[0], teacher_ft_epochs=epochs[1],
            student_gtas_epochs=epochs[2], student_ft_epochs=epochs[3],
            learning_rate=args.lr, batch_size=args.batch_size,
            use_gtas=not args.no_gtas, teacher_only=args.mode == "teacher-only"),
    )
    rhash = config_hash(run)
    os.makedirs(args.out, exist_ok=True)
    with_points = not run.schedule.teacher_only
    t_train = make_dataset(scenes, train, vocab, CATEGORIES, COLORS, gen,
                           with_points=False, points_seed=run.seed)
    t_test = make_dataset(scenes, test, vocab, CATEGORIES, COLORS, gen,
                          with_points=False, points_seed=run.seed)
    s_train = s_test = None
    if with_points:
        s_train = make_dataset(scenes, train, vocab, CATEGORIES, COLORS, gen,
                               with_points=True, points_seed=run.seed)
        s_test = make_dataset(scenes, test, vocab, CATEGORIES, COLORS, gen,
                              with_points=True, points_seed=run.seed)

    log = print if not args.quiet else None
    teacher, student, reports = run_schedule(run, vocab, t_train, s_train,
                                             t_test, s_test, log=log)

    stage_names = []
    for i, report in enumerate(reports, start=1):
        stage = report["stage"]
        name = f"{i}_{stage['role']}_{stage['stage_kind']}"
        stage_names.append(name)
        report_payload = dict(report)
        report_payload["config_hash"] = rhash
        report_payload["run"] = run.to_dict()
        _write_json(os.path.join(args.out, f"report_{name}.json"), report_payload)
        model = teacher if stage["role"] == "teacher" else student
        meta = dict(model.checkpoint_meta(), config_hash=rhash, run_seed=run.seed)
        model.store.save(os.path.join(args.out, f"checkpoint_{name}.ckpt"), meta=meta)
    summary = {
        "config_hash": rhash,
        "stages": stage_names,
        "final": {r["stage"]["role"]: r["final_eval"] for r in reports},
    }
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(f"wrote {len(reports)} stage reports and checkpoints to {args.out} "
          f"(config {rhash})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    scenes, train, test, vocab, gen, manifest = _load_corpus_dir(args.corpus)
    model = GroundingModel.from_checkpoint(args.checkpoint, vocab)
    records = {"train": train, "test": test, "all": train + test}[args.split]
    examples = make_dataset(scenes, records, vocab, model.categories, model.colors,
                            gen, with_points=model.role == "student",
                            points_seed=args.points_seed)
    metrics = evaluate(model, examples)
    payload = {
        "checkpoint": os.path.basename(args.checkpoint),
        "corpus_config_hash": manifest["config_hash"],
        "split": args.split,
        "role": model.role,
        "metrics": metrics,
    }
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote metrics to {args.out}")
    print(json.dumps(payload["metrics"], sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    scenes, train, test, vocab, gen, manifest = _load_corpus_dir(args.corpus)
    records = train + test
    if not (0 <= args.description_id < len(records)):
        raise ContractError(f"description id {args.description_id} out of range "
                            f"(0..{len(records) - 1})")
    record = records[args.description_id]
    if args.scene_id is not None and record.scene_id != args.scene_id:
        raise ContractError(
            f"description {args.description_id} belongs to scene "
            f"{record.scene_id}, not {args.scene_id}")
    scene = scenes.get(record.scene_id)
    if scene is None:
        raise ContractError(f"unknown scene id {record.scene_id}")
    model = GroundingModel.from_checkpoint(args.checkpoint, vocab)
    example = make_example(scene, record, vocab, model.categories, model.colors,
                           gen, with_points=model.role == "student",
                           points_seed=args.points_seed)
    result = model.predict(example)
    triple = result.triple
    triple.assert_consistent()
    lines = ["object_id,category,color,s_att,s_spa,s,is_target,is_distractor"]
    target_cat = scene.object_by_id(record.target_id).category
    for i, obj in enumerate(scene.objects):
        is_target = obj.id == record.target_id
        is_distractor = (not is_target) and obj.category == target_cat
        lines.append(
            f"{obj.id},{obj.category},{obj.color},{float(triple.s_att[i])!r},"
            f"{float(triple.s_spa[i])!r},{float(triple.s[i])!r},"
            f"{int(is_target)},{int(is_distractor)}")
    lines.append(f"# description: {' '.join(record.surface_tokens)}")
    lines.append(f"# predicted {result.predicted_id} target {record.target_id} "
                 f"corpus {manifest['config_hash']} seed {manifest['seed']}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(f"wrote score dump to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def micro_model_and_example(seed: int = 5):
    """The fixed verification micro-model: d=16, 2 layers, 2 heads, K=4, n=8."""
    cfg = ModelConfig(d=16, stack_layers=2, heads=2, text_layers=2,
                      max_tokens=10, point_hidden=16)
    vocab = Vocabulary.default()
    model = GroundingModel(cfg, vocab, CATEGORIES, COLORS, "teacher", seed)
    gen = GenConfig(k_min=4, k_max=4)
    scene = Scene(id=0, room_min=(0, 0, 0), room_max=(9, 9, 3),
                  view_direction=(1.0, 0.0, 0.0))

    def obj(i, cat, color, x, y, ext):
        return ObjectInstance(id=i, category=cat, color=color, size_class="small",
                              bbox=(x, y, ext[2] / 2, ext[2], ext[1], ext[0]))

    scene.objects = [
        obj(0, "chair", "red", 2.0, 3.0, (0.5, 0.5, 1.0)),
        obj(1, "box", "blue", 7.0, 6.5, (0.6, 0.55, 0.55)),
        obj(2, "chair", "green", 6.5, 2.0, (0.52, 0.48, 1.05)),
        obj(3, "table", "brown", 4.5, 7.5, (1.5, 0.95, 0.72)),
    ]
    from .scenegen import DescriptionRecord

    record = DescriptionRecord(
        scene_id=0, target_id=0,
        surface_tokens="the red chair closest to the blue box".split(),
        relation_kind="closest_to", anchor_ids=[1], distractor_count=1,
        view_dependent=False, attribute_filter={"category": "chair", "color": "red"},
        anchor_filters=[{"category": "box", "color": "blue"}])
    assert len(record.surface_tokens) == 8
    example = make_example(scene, record, vocab, CATEGORIES, COLORS, gen)
    return model, example


def cmd_gradcheck(args) -> int:
    model, example = micro_model_and_example()

    def f(params):
        out = model.forward(example)
        total, _ = main_loss(model, out, example, gtas=False)
        return total

    if args.corrupt:
        ad.set_grad_corruption(1e-3)
    t0 = time.time()
    try:
        if args.sample:
            worst, errors = _sampled_gradcheck(f, model.store, args.sample)
        else:
            worst, errors = ad.finite_diff_check(f, model.store, epsilon=1e-5)
    finally:
        ad.set_grad_corruption(0.0)
    elapsed = time.time() - t0

    groups = {}
    for name, err in errors.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    print(f"checked {model.store.n_entries()} parameter entries in "
          f"{len(errors)} tensors ({elapsed:.1f}s)")
    for group in sorted(groups):
        print(f"  {group:<8} worst relative error {groups[group]:.3e}")
    status = "PASS" if worst < 1e-4 else "FAIL"
    print(f"max relative error {worst:.3e} vs tolerance 1e-4: {status}")
    if args.out:
        _write_json(args.out, {"max_relative_error": worst, "groups": groups,
                               "entries": model.store.n_entries(),
                               "status": status})
    return EXIT_OK if status == "PASS" else EXIT_NUMERICAL


def _sampled_gradcheck(f, store, per_tensor: int):
    """Spot-check a few entries per tensor (quick mode for tests)."""
    store.zero_grad()
    loss = f(store)
    ad.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in store.items()}
    rng = np.random.default_rng(0)
    eps = 1e-5
    errors = {}
    worst = 0.0
    with ad.no_grad():
        for name, p in store.items():
            flat = p.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            err = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = f(store).item()
                flat[i] = orig - eps
                dn = f(store).item()
                flat[i] = orig
                fd = (up - dn) / (2 * eps)
                an = analytic[name].reshape(-1)[i]
                err = max(err, abs(an - fd) / max(1.0, abs(fd)))
            errors[name] = err
            worst = max(worst, err)
    return worst, errors


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualground",
                                description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", default=os.path.join(_default_out(), "corpus"))
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--scenes", type=int, default=2500)
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", default=os.path.join(_default_out(), "run"))
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--epochs", default="30,10,15,5",
                   help="teacher-gtas,teacher-ft,student-gtas,student-ft")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--d", type=int, default=64)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--inverse-temperature", type=float, default=20.0)
    t.add_argument("--fusion", choices=["add", "concat_project"], default="add")
    t.add_argument("--no-gtas", action="store_true",
                   help="ablation: train both stages on predicted scores")
    t.add_argument("--mode", choices=["full", "teacher-only"], default="full")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="stratified accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    e.add_argument("--points-seed", type=int, default=7)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="per-object score dump for one description")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--corpus", required=True)
    i.add_argument("--description-id", type=int, required=True)
    i.add_argument("--scene-id", type=int, default=None)
    i.add_argument("--points-seed", type=int, default=7)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("gradcheck", help="finite-difference check of the micro-model")
    c.add_argument("--corrupt", action="store_true",
                   help="negative control: corrupt one backward rule")
    c.add_argument("--sample", type=int, default=0,
                   help="entries per tensor (0 = every entry)")
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, ParseError, GenerationError, ad.ShapeError,
            ad.DegenerateInputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
