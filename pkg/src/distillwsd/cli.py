"""Command-line pipeline: gen-data, train-teacher, distill, eval, ablate.

All randomness derives from one --seed flag; submodules get fixed offsets so
reruns with the same seed and config reproduce every output byte (timestamps
live only in report metadata).
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import fastops
from .checkpoint import load_student, load_teacher, save_student, save_teacher
from .config import Config, default_config, dump_config, load_config
from .dataset import ArrayDataset, load_split
from .datagen import SceneSpec, class_names, generate_dataset
from .distill import DistillConfig, TemperatureBank, build_teacher_cache, run_stage1, run_stage2
from .errors import DistillwsdError, StateError
from .metrics import PredictionRecord, evaluate, mean_average_precision, write_per_class_csv
from .student import StudentConfig, StudentModel
from .student import predict_scores as student_predict
from .teacher import TeacherConfig, TeacherModel, train_teacher
from .teacher import predict_scores as teacher_predict

logger = logging.getLogger("distillwsd")

SEED_DATA = 0
SEED_TEACHER = 101
SEED_STUDENT = 301
SEED_ARM_STRIDE = 17


def _setup_logging():
    level = os.environ.get("DISTILLWSD_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _scene_spec(cfg: Config, seed: int) -> SceneSpec:
    data = cfg["data"]
    k = data["num_classes"]
    ratio = data["longtail_ratio"]
    affinity = None
    if ratio != 1.0:
        w = ratio ** np.arange(k)
        affinity = np.outer(w, w)
    return SceneSpec(num_classes=k, image_size=data["image_size"],
                     objects_per_image=(data["objects_min"], data["objects_max"]),
                     cooccurrence=affinity, occlusion_prob=data["occlusion_prob"],
                     seed=seed + SEED_DATA)


def _teacher_config(cfg: Config, seed: int) -> TeacherConfig:
    t = cfg["teacher"]
    return TeacherConfig(num_classes=cfg["data"]["num_classes"],
                         input_size=cfg["data"]["image_size"],
                         channels=t["channels"], roi_out=(t["roi_out"], t["roi_out"]),
                         fc_width=t["fc_width"], top_n=t["top_n"], epochs=t["epochs"],
                         batch_size=t["batch_size"], lr=t["lr"], momentum=t["momentum"],
                         weight_decay=t["weight_decay"], input_scales=t["input_scales"],
                         seed=seed + SEED_TEACHER)


def _student_config(cfg: Config) -> StudentConfig:
    s = cfg["student"]
    return StudentConfig(num_classes=cfg["data"]["num_classes"],
                         input_size=cfg["data"]["image_size"], channels=s["channels"],
                         teacher_channels=cfg["teacher"]["channels"], fc_width=s["fc_width"])


def _distill_config(cfg: Config, seed: int, **overrides) -> DistillConfig:
    d = cfg["distill"]
    kwargs = dict(lambda_weight=d["lambda"], nms_thresh=d["nms_thresh"],
                  top_after_nms=d["top_after_nms"], distill_layers=d["distill_layers"],
                  stage1_lr=d["stage1_lr"], stage1_epochs=d["stage1_epochs"],
                  stage1_stop_window=d["stage1_stop_window"], stage1_rel_tol=d["stage1_rel_tol"],
                  stage2_lr=d["stage2_lr"], stage2_epochs=d["stage2_epochs"],
                  plateau_epochs=d["plateau_epochs"], plateau_min_delta=d["plateau_min_delta"],
                  lr_decay=d["lr_decay"], batch_size=d["batch_size"], momentum=d["momentum"],
                  weight_decay=d["weight_decay"], cache_teacher=d["cache_teacher"],
                  require_stage1=d["require_stage1"], seed=seed + SEED_STUDENT)
    kwargs.update(overrides)
    return DistillConfig(**kwargs)


def _load_datasets(data_dir: str, cfg: Config, splits=("train", "val", "test")):
    k = cfg["data"]["num_classes"]
    return {split: load_split(data_dir, split, k) for split in splits}


def cmd_gen_data(args) -> int:
    cfg = _get_config(args)
    spec = _scene_spec(cfg, args.seed)
    counts = {s: cfg["data"][s] for s in ("train", "val", "test")}
    manifests = generate_dataset(spec, counts, args.out)
    logger.info("wrote %s", {s: len(m) for s, m in manifests.items()})
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _get_config(args)
    tcfg = _teacher_config(cfg, args.seed)
    data = _load_datasets(args.data, cfg, splits=("train", "val"))
    model, report = train_teacher(data["train"], tcfg)
    model.freeze()
    os.makedirs(args.out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(args.out, "teacher.ckpt")
    save_teacher(ckpt, model)
    val_map, _ = mean_average_precision(teacher_predict(model, data["val"]), data["val"].labels)
    _write_json(os.path.join(args.out, "teacher_report.json"), {
        "losses": report.losses, "val_map": val_map, "seed": tcfg.seed,
        "wall_time": report.wall_time,
    })
    logger.info("teacher val mAP %.4f -> %s", val_map, ckpt)
    return 0


def cmd_distill(args) -> int:
    cfg = _get_config(args)
    teacher = load_teacher(args.teacher)
    teacher.freeze()
    data = _load_datasets(args.data, cfg, splits=("train", "val"))
    os.makedirs(args.out, exist_ok=True)
    dcfg = _distill_config(cfg, args.seed)

    if args.stage == 1:
        student = StudentModel(_student_config(cfg), np.random.default_rng(args.seed + SEED_STUDENT))
        report = run_stage1(teacher, student, data["train"], dcfg)
        ckpt = args.checkpoint or os.path.join(args.out, "student_stage1.ckpt")
        save_student(ckpt, student)
        _write_json(os.path.join(args.out, "stage1_report.json"), _stage_report_dict(report))
        logger.info("stage 1 final loss %.6f -> %s", report.losses["total"][-1], ckpt)
        return 0

    if dcfg.require_stage1:
        stage1_ckpt = args.student_in or os.path.join(args.out, "student_stage1.ckpt")
        if not os.path.exists(stage1_ckpt):
            raise StateError(f"stage 2 requires the stage-1 checkpoint: missing {stage1_ckpt}")
        student = load_student(stage1_ckpt)
    else:
        student = StudentModel(_student_config(cfg), np.random.default_rng(args.seed + SEED_STUDENT))
    temps = TemperatureBank(cfg["data"]["num_classes"], cfg["teacher"]["top_n"])
    report = run_stage2(teacher, student, data["train"], data["val"], dcfg, temps)
    ckpt = args.checkpoint or os.path.join(args.out, "student.ckpt")
    save_student(ckpt, student, temps=temps)
    _write_json(os.path.join(args.out, "stage2_report.json"), _stage_report_dict(report))
    logger.info("stage 2 val loss %.4f -> %s", report.losses["val_hard"][-1], ckpt)
    return 0


def cmd_eval(args) -> int:
    cfg = _get_config(args)
    os.makedirs(args.out, exist_ok=True)
    k = cfg["data"]["num_classes"]
    split = args.split
    data = _load_datasets(args.data, cfg, splits=(split, "val"))

    if args.predictions:
        records = _read_predictions(args.predictions, data[split])
    else:
        kind = _checkpoint_kind(args.checkpoint)
        if kind == "teacher":
            model = load_teacher(args.checkpoint)
            scores = teacher_predict(model, data[split])
        else:
            model = load_student(args.checkpoint)
            scores = student_predict(model, data[split], batch_size=cfg["eval"]["batch_size"])
        records = [PredictionRecord(image_id=i, scores=s, labels=l)
                   for i, s, l in zip(data[split].ids, scores, data[split].labels)]
        _write_predictions(os.path.join(args.out, "predictions.jsonl"), records)

    val_records = None
    if split != "val":
        val_records = _score_validation(args, cfg, data["val"])
    report = evaluate(records, records_val=val_records, top_k=cfg["eval"]["top_k"])
    _write_json(os.path.join(args.out, "metrics.json"), report.to_dict())
    write_per_class_csv(report, class_names(k), os.path.join(args.out, "per_class_ap.csv"))
    logger.info("mAP %.4f F1-C %.4f F1-O %.4f (tau %.2f)",
                report.map, report.f1_c, report.f1_o, report.tuned_tau)
    return 0


def _score_validation(args, cfg, val_ds):
    if args.predictions:
        return None  # tuning falls back to the provided records
    kind = _checkpoint_kind(args.checkpoint)
    if kind == "teacher":
        scores = teacher_predict(load_teacher(args.checkpoint), val_ds)
    else:
        scores = student_predict(load_student(args.checkpoint), val_ds,
                                 batch_size=cfg["eval"]["batch_size"])
    return [PredictionRecord(image_id=i, scores=s, labels=l)
            for i, s, l in zip(val_ds.ids, scores, val_ds.labels)]


def cmd_ablate(args) -> int:
    """Teacher once, then {baseline, class-aware only, feature+class} per seed."""
    cfg = _get_config(args)
    os.makedirs(args.out, exist_ok=True)
    data_dir = args.data or os.path.join(args.out, "data")
    if not os.path.exists(os.path.join(data_dir, "train.jsonl")):
        spec = _scene_spec(cfg, args.seed)
        counts = {s: cfg["data"][s] for s in ("train", "val", "test")}
        generate_dataset(spec, counts, data_dir)
        logger.info("generated dataset under %s", data_dir)
    data = _load_datasets(data_dir, cfg)

    tcfg = _teacher_config(cfg, args.seed)
    for split in data.values():
        split.ensure_proposals(tcfg.proposal_cfg)
    teacher, _ = train_teacher(data["train"], tcfg)
    teacher.freeze()
    save_teacher(os.path.join(args.out, "teacher.ckpt"), teacher)
    teacher_map, _ = mean_average_precision(teacher_predict(teacher, data["test"]),
                                            data["test"].labels)
    logger.info("teacher test mAP %.4f", teacher_map)

    cache = build_teacher_cache(teacher, data["train"],
                                _distill_config(cfg, args.seed, require_stage1=False))
    num_seeds = cfg["eval"]["ablate_seeds"]
    arms = {
        "baseline": dict(lambda_weight=0.0, require_stage1=False, run_stage1_first=False),
        "class_aware": dict(lambda_weight=cfg["distill"]["lambda"], require_stage1=False,
                            run_stage1_first=False),
        "feature_class_aware": dict(lambda_weight=cfg["distill"]["lambda"], require_stage1=True,
                                    run_stage1_first=True),
    }
    results = {name: [] for name in arms}
    start = time.time()
    for i in range(num_seeds):
        arm_seed = args.seed + SEED_ARM_STRIDE * (i + 1)
        for name, arm in arms.items():
            dcfg = _distill_config(cfg, arm_seed, lambda_weight=arm["lambda_weight"],
                                   require_stage1=arm["require_stage1"])
            student = StudentModel(_student_config(cfg),
                                   np.random.default_rng(arm_seed + SEED_STUDENT))
            if arm["run_stage1_first"]:
                run_stage1(teacher, student, data["train"], dcfg, cache=cache)
            temps = TemperatureBank(cfg["data"]["num_classes"], cfg["teacher"]["top_n"])
            run_stage2(teacher, student, data["train"], data["val"], dcfg, temps,
                       cache=cache if arm["lambda_weight"] > 0 else None)
            m, _ = mean_average_precision(
                student_predict(student, data["test"], batch_size=cfg["eval"]["batch_size"]),
                data["test"].labels)
            results[name].append(m)
            save_student(os.path.join(args.out, f"student_{name}_seed{i}.ckpt"), student,
                         temps=temps)
            logger.info("seed %d %s mAP %.4f", i, name, m)

    summary = {
        "teacher_map": teacher_map,
        "arms": {name: {"maps": vals, "mean_map": float(np.mean(vals))}
                 for name, vals in results.items()},
        "num_seeds": num_seeds,
        "base_seed": args.seed,
        "wall_time": time.time() - start,
    }
    _write_json(os.path.join(args.out, "ablate_summary.json"), summary)
    _write_table(os.path.join(args.out, "ablate_table.txt"), summary)
    for name, vals in results.items():
        logger.info("%s mean mAP %.4f (%s)", name, float(np.mean(vals)),
                    ", ".join(f"{v:.4f}" for v in vals))
    return 0


def _write_table(path, summary):
    lines = ["arm                   mean_mAP  per-seed mAPs",
             "teacher               %8.4f" % summary["teacher_map"]]
    for name, arm in summary["arms"].items():
        lines.append("%-21s %8.4f  %s" % (name, arm["mean_map"],
                                          " ".join(f"{v:.4f}" for v in arm["maps"])))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _stage_report_dict(report):
    return {"stage": report.stage, "losses": report.losses, "epochs_run": report.epochs_run,
            "wall_time": report.wall_time, "seed": report.seed,
            "final_temperatures": {k: v.tolist() for k, v in report.final_temperatures.items()}}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_predictions(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"image": rec.image_id,
                                 "scores": [float(v) for v in rec.scores]}) + "\n")


def _read_predictions(path, dataset: ArrayDataset):
    by_id = {i: l for i, l in zip(dataset.ids, dataset.labels)}
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(PredictionRecord(image_id=obj["image"],
                                            scores=np.asarray(obj["scores"]),
                                            labels=by_id[obj["image"]]))
    return records


def _checkpoint_kind(path):
    from .checkpoint import load_checkpoint

    kind, _, _ = load_checkpoint(path)
    return kind


def _get_config(args) -> Config:
    if args.config:
        return load_config(args.config)
    return default_config()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillwsd",
                                     description="Detection-to-classification distillation at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--checkpoint", default=None, help="checkpoint path override")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (manifests + images)")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train and freeze the detection teacher")
    common(p, data=True)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="run one knowledge-transfer stage")
    common(p, data=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--teacher", required=True, help="frozen teacher checkpoint")
    p.add_argument("--student-in", default=None, help="stage-1 checkpoint for stage 2")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction dump")
    common(p, data=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--predictions", default=None, help="existing predictions.jsonl to score")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the three-arm comparison across seeds")
    common(p)
    p.add_argument("--data", default=None, help="existing dataset directory (generated if absent)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-config", help="print the default configuration")
    p.set_defaults(fn=lambda a: print(dump_config(default_config())) or 0)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    fastops.tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DistillwsdError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
