"""Command line entry point: ``mmdpu <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import student as st
from . import teacher as te
from . import trainer
from .config import dump_config, load_config
from .datamodel import split_dataset
from .ingest import (
    SyntheticCorpusSpec,
    _read_jsonl,
    generate_synthetic_corpus,
    load_imd,
    load_mmd,
    write_jsonl,
)
from .manip_synth import copy_move
from .metrics import TABLE_COLUMNS

log = logging.getLogger("mmdpu")


def _write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def cmd_gen_synthetic(args, cfg):
    overrides = {}
    for f in fields(SyntheticCorpusSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = v
    corpus = generate_synthetic_corpus(SyntheticCorpusSpec(**overrides), args.out)
    print(json.dumps({"mmd_manifest": str(corpus.mmd_manifest), "imd_manifest": str(corpus.imd_manifest),
                      "sidecar": str(corpus.sidecar)}))


def cmd_prepare_data(args, cfg):
    manifest = Path(args.manifest)
    failures: list = []
    articles = load_mmd(manifest, cfg.data, failures=failures)
    for f in failures:
        log.warning("skipped: %s", f)
    rows = {str(r.get("id", n)): r for n, r in _read_jsonl(manifest)}
    splits = split_dataset(articles, cfg.split)
    out = {}
    for name, part in zip(("train", "valid", "test"), splits):
        path = manifest.with_name(f"{manifest.stem}.{name}.jsonl")
        write_jsonl(path, [rows[a.id] for a in part])
        out[name] = {"path": str(path), "n": len(part), "n_fake": sum(a.veracity for a in part)}
    out["skipped"] = len(failures)
    print(json.dumps(out, indent=2))


def cmd_synth(args, cfg):
    src = Path(args.input)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    else:
        paths = [src.parent / r["image_path"] for _, r in _read_jsonl(src)]
    rng = np.random.default_rng(cfg.copy_move.seed)
    records = []
    for p in paths:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"))
        fake, rec = copy_move(arr, cfg.copy_move, rng)
        name = f"{p.stem}_cm.png"
        Image.fromarray(fake).save(out / "images" / name)
        records.append({"source": str(p), "image_path": f"images/{name}", **rec.to_dict()})
    write_jsonl(out / "regions.jsonl", records)
    print(json.dumps({"n": len(records), "sidecar": str(out / "regions.jsonl")}))


def cmd_pretrain_teacher(args, cfg):
    imd = load_imd(args.imd, cfg.data, train=True, seed=args.seed)
    tcfg = cfg.teacher
    epochs = args.epochs if args.epochs is not None else tcfg.warmup_epochs
    state = te.init_teacher(tcfg, seed=args.seed)
    te.warmup(state, imd, epochs, rng=np.random.default_rng(args.seed), batch_size=cfg.train.batch_size)
    scores = te.teacher_forward(state, [s.image for s in imd]).numpy()
    acc = float(np.mean((scores >= 0.5) == np.array([s.manip_label for s in imd])))
    te.save_teacher(state, args.out)
    print(json.dumps({"checkpoint": args.out, "epochs_warmed": state.epochs_warmed, "train_accuracy": acc}))


def _load_splits(args, cfg):
    tr = load_mmd(args.train, cfg.data, train=True, seed=args.seed)
    va = load_mmd(args.valid, cfg.data)
    tst = load_mmd(args.test, cfg.data) if getattr(args, "test", None) else None
    imd = load_imd(args.imd, cfg.data, train=True, seed=args.seed) if args.imd else []
    return tr, va, tst, imd


def cmd_train(args, cfg):
    tr, va, tst, imd = _load_splits(args, cfg)
    res = trainer.train(tr, va, imd, cfg.train, seed=args.seed, teacher_cfg=cfg.teacher, student_cfg=cfg.student,
                        copy_move_params=cfg.copy_move, variant=args.variant)
    rep = trainer.validate(res.student, tst if tst else va)
    out = trainer.save_run(res, args.out, rep)
    dump_config(cfg, out / "config.yaml")
    print(json.dumps({"out": str(out), "stop_reason": res.record.stop_reason, **rep.flat()}, indent=2))


def cmd_eval(args, cfg):
    state = trainer.load_student(args.checkpoint)
    arts = load_mmd(args.test, cfg.data)
    rep = trainer.validate(state, arts)
    text = json.dumps(rep.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.csv:
        _write_csv(args.csv, [rep.flat()], TABLE_COLUMNS)
    if args.dump_features:
        st.dump_features(state, arts, args.dump_features)
    print(text)


def cmd_ablate(args, cfg):
    tr, va, tst, imd = _load_splits(args, cfg)
    seeds = args.seeds or cfg.train.seeds
    reports = {}
    for v in args.variants:
        reports[v] = trainer.run_multiseed(cfg.train, (tr, va, tst, imd), variant=v, teacher_cfg=cfg.teacher,
                                           student_cfg=cfg.student, copy_move_params=cfg.copy_move, seeds=seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for v, r in reports.items():
        agg = r.aggregate()
        table.append({"variant": v, **{m: f"{agg[m]['mean']:.4f}±{agg[m]['std']:.4f}" for m in TABLE_COLUMNS}})
    _write_csv(out / "ablation.csv", table, ["variant"] + TABLE_COLUMNS)
    summary = {v: r.to_dict() for v, r in reports.items()}
    if "full" in reports and len(seeds) >= 2:
        summary["p_values_vs_full"] = {v: trainer.compare(reports["full"], r) for v, r in reports.items() if v != "full"}
    (out / "ablation.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print((out / "ablation.csv").read_text(encoding="utf-8"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdpu", description=__doc__)
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic article corpus and IMD set")
    g.add_argument("--out", required=True)
    g.add_argument("--n-articles", dest="n_articles", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--n-imd", dest="n_imd", type=int)
    g.add_argument("--frac-fake", dest="frac_fake", type=float)
    g.add_argument("--frac-fake-manip", dest="frac_fake_manip", type=float)
    g.add_argument("--frac-real-manip", dest="frac_real_manip", type=float)
    g.add_argument("--frac-harmful", dest="frac_harmful_given_fake_manip", type=float)
    g.set_defaults(func=cmd_gen_synthetic)

    d = sub.add_parser("prepare-data", help="validate a manifest and write stratified split manifests")
    d.add_argument("--manifest", required=True)
    d.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("synth", help="copy-move every image of a directory or manifest")
    s.add_argument("--input", required=True, help="image directory or JSON-lines manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("pretrain-teacher", help="warm up the manipulation teacher on an IMD manifest")
    t.add_argument("--imd", required=True)
    t.add_argument("--out", required=True, help="checkpoint file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=1)
    t.set_defaults(func=cmd_pretrain_teacher)

    for name, func, help_ in (("train", cmd_train, "train one run"),
                              ("ablate", cmd_ablate, "multi-seed ablation table")):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--train", required=True)
        a.add_argument("--valid", required=True)
        a.add_argument("--test", required=name == "ablate")
        a.add_argument("--imd")
        a.add_argument("--out", required=True)
        a.add_argument("--seed", type=int, default=1)
        if name == "train":
            a.add_argument("--variant", default="full", choices=trainer.VARIANTS)
        else:
            a.add_argument("--variants", nargs="+", default=list(trainer.VARIANTS), choices=trainer.VARIANTS)
            a.add_argument("--seeds", nargs="+", type=int)
        a.set_defaults(func=func)

    e = sub.add_parser("eval", help="score a student checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out")
    e.add_argument("--csv")
    e.add_argument("--dump-features", dest="dump_features")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = load_config(args.config)
    args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
