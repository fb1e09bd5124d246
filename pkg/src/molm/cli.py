"""Command line entry point: ``python -m molm <command> ...``.

Exit codes::

    0  success
    1  other failure (missing file, bad argument value)
    2  configuration error
    3  checkpoint mismatch (config hash, key length)
    4  detection negative (verify / attribute found no watermark)
    5  report found no results
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import attacks as A
from . import engine as E
from .config import ExperimentConfig, load_config
from .evaluation import make_eval_set
from .generator import ConfigError, GeneratorModel, backbone_manifest, sample_inputs
from .images import load_png, save_png
from .keycodec import KeyFormatError, WatermarkKey, sample_key
from .shapes import pretrain_backbone
from .system import CheckpointMismatch, build_system, config_hash, load_system
from .training import Trainer, train
from .verification import DetectionReport, KeyDatabase, VerificationError, attribute, detect

log = logging.getLogger("molm")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_NEGATIVE = 4
EXIT_NO_RESULTS = 5


class CliFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _backbone_hash(cfg: ExperimentConfig) -> str:
    return config_hash(backbone_manifest(cfg.backbone, cfg.seeds.backbone))


def _key_from_args(args, M: int) -> WatermarkKey:
    if getattr(args, "key", None):
        key = WatermarkKey.from_hex(args.key)
    elif getattr(args, "key_seed", None) is not None:
        key = sample_key(M, args.key_seed)
    else:
        raise CliFailure("give --key M:hex or --key-seed N")
    if key.M != M:
        raise CheckpointMismatch(f"key has {key.M} bits, checkpoint encodes {M}")
    return key


def _load(path):
    if not Path(path).exists():
        raise CliFailure(f"checkpoint {path} not found")
    system, manifest, _ = load_system(path)
    return system, manifest


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain_backbone(args) -> int:
    cfg = _config(args)
    model = GeneratorModel(cfg.backbone, cfg.seeds.backbone)
    losses = pretrain_backbone(model, steps=args.steps, seed=args.seed, log_every=max(1, args.steps // 10))
    manifest = {"kind": "backbone", **backbone_manifest(cfg.backbone, cfg.seeds.backbone),
                "config_hash": _backbone_hash(cfg), "pretrain_steps": args.steps, "final_mse": losses[-1]}
    E.save_checkpoint(args.out, E.module_entries(model, "generator"), manifest)
    print(f"backbone written to {args.out} (final mse {losses[-1]:.5f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = Path(args.records) if args.records else out.with_suffix(".csv")
    fresh = build_system(cfg.backbone, cfg.markers, cfg.extractor_config(), cfg.seeds.backbone, cfg.seeds.bank,
                         cfg.seeds.extractor)
    if args.resume and out.exists():
        trainer = Trainer.resume(out, train_cfg)
        if trainer.system.config_hash() != fresh.config_hash():
            raise CheckpointMismatch("checkpoint architecture differs from the config")
        system = trainer.system
        log.info("resuming at step %d", trainer.step)
    else:
        system = fresh
        if args.backbone:
            entries, manifest = E.load_checkpoint(args.backbone)
            if manifest.get("config_hash") != _backbone_hash(cfg):
                raise CheckpointMismatch("backbone checkpoint was built for another backbone config or seed")
            E.load_module_entries(system.generator, entries, "generator")
            system.generator.freeze()
        if records.exists():
            records.unlink()
        trainer = None
    trainer, recs = train(system, train_cfg, out_path=out, records_csv=records,
                          log_every=args.log_every, trainer=trainer)
    last = recs[-1] if recs else None
    msg = f"checkpoint {out} at step {trainer.step}, config hash {system.config_hash()}"
    if last:
        msg += f"; last step l_ver={last.l_ver:.4f} bit_acc={last.bit_acc:.3f} psnr={last.psnr:.1f}"
    print(msg)
    return EXIT_OK


def cmd_generate(args) -> int:
    system, _ = _load(args.ckpt)
    key = _key_from_args(args, system.M)
    path = system.bank.route(key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([args.seed, 3003])
    q, t = sample_inputs(system.generator.config, args.n, rng)
    if args.cls is not None:
        t = torch.full_like(t, args.cls)
    with torch.no_grad():
        images = system.generator(q, t, bank=None if args.clean else system.bank, path=None if args.clean else path)
    chash = system.config_hash()
    entries = []
    for i, img in enumerate(images):
        name = f"img_{i:04d}.png"
        text = {"molm_config_hash": chash}
        if not args.clean:
            text["molm_key"] = key.to_hex()
        save_png(out / name, img, text)
        entries.append({"file": name, "index": i, "class": int(t[i])})
    manifest = {
        "config_hash": chash, "seed": args.seed, "latent_rng": f"numpy default_rng([{args.seed}, 3003])",
        "key": None if args.clean else key.to_hex(), "path": None if args.clean else list(path.indices),
        "watermarked": not args.clean, "images": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def _images(paths, chash: str) -> list[tuple[str, torch.Tensor]]:
    out = []
    for p in paths:
        if not Path(p).exists():
            raise CliFailure(f"image {p} not found")
        img, text = load_png(p)
        stamped = text.get("molm_config_hash")
        if stamped and stamped != chash:
            raise CheckpointMismatch(f"{p} was generated under config {stamped}, checkpoint is {chash}")
        out.append((str(p), img))
    return out


def _write_reports(path, rows: list[tuple[str, str, DetectionReport]], chash: str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("image", "owner") + DetectionReport.CSV_HEADER + ("config_hash",))
        for name, owner, rep in rows:
            w.writerow([name, owner] + rep.csv_row() + [chash])


def cmd_verify(args) -> int:
    system, _ = _load(args.ckpt)
    key = _key_from_args(args, system.extractor.M)
    chash = system.config_hash()
    rows = []
    for name, img in _images(args.images, chash):
        rep = detect(system.extractor, img, key, args.fpr)
        rows.append((name, "", rep))
        print(f"{name}\n{rep.text()}\n")
    if args.csv:
        _write_reports(args.csv, rows, chash)
    return EXIT_OK if all(r.watermarked for _, _, r in rows) else EXIT_NEGATIVE


def cmd_attribute(args) -> int:
    system, _ = _load(args.ckpt)
    db = KeyDatabase.load(args.db)
    if db.M != system.extractor.M:
        raise CheckpointMismatch(f"database keys have {db.M} bits, extractor emits {system.extractor.M}")
    chash = system.config_hash()
    rows = []
    for name, img in _images(args.images, chash):
        owner, rep = attribute(system.extractor, img, db, args.fpr)
        rows.append((name, owner if rep.watermarked else "", rep))
        verdict = f"owner {owner}" if rep.watermarked else f"no owner (nearest {owner})"
        print(f"{name}: {verdict}\n{rep.text()}\n")
    if args.csv:
        _write_reports(args.csv, rows, chash)
    return EXIT_OK if all(r.watermarked for _, _, r in rows) else EXIT_NEGATIVE


SUITES = ("distortions", "regeneration", "pgd", "averaging")


def cmd_attack(args) -> int:
    cfg = _config(args)
    system, _ = _load(args.ckpt)
    if args.workers is None:
        torch.set_num_threads(max(1, cfg.eval.workers))
    suites = [s.strip() for s in args.suite.split(",") if s.strip()]
    bad = [s for s in suites if s not in SUITES]
    if bad:
        raise ConfigError(f"unknown attack suites {bad}; choose from {SUITES}")
    ev_cfg = cfg.eval
    ev = make_eval_set(system, ev_cfg.n_images, ev_cfg.seed)
    rows: list[A.AttackRow] = []
    if "distortions" in suites:
        rows += A.distortion_rows(system, ev, ev_cfg.distortions(), ev_cfg.seed, ev_cfg.target_fpr)
    if "regeneration" in suites:
        rows += A.regeneration_rows(system, ev, ev_cfg.regen_levels, ev_cfg.seed, ev_cfg.target_fpr)
    if "pgd" in suites:
        sub = make_eval_set(system, ev_cfg.pgd_images, ev_cfg.seed)
        rows += A.pgd_rows(system, sub, ev_cfg.pgd_epsilons, ev_cfg.pgd_steps, ev_cfg.seed, ev_cfg.target_fpr)
    if "averaging" in suites:
        key = sample_key(system.M, ev_cfg.seed) if not args.key else _key_from_args(args, system.M)
        for mode in ("removal", "forgery"):
            for access in ("grey", "black"):
                rows += A.averaging_experiment(system, key, ev_cfg.averaging_ks, mode, access, True,
                                               ev_cfg.averaging_targets, ev_cfg.seed, ev_cfg.target_fpr)
    out = A.write_rows(Path(args.out), rows)
    for r in rows:
        print(f"{r.attack:28s} {r.params:10s} bit_acc={r.bit_acc:.3f} detect={r.detect_rate:.3f} psnr={r.psnr:.1f}")
    print(f"results written to {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    system, _ = _load(args.ckpt)
    key = _key_from_args(args, system.M)
    rng = np.random.default_rng([args.seed, 4004])
    q, t = sample_inputs(system.generator.config, args.prompts, rng)
    fm = A.flip_probe(system, key, q, t, args.seed)
    fm.to_csv(args.out)
    acc = A.randomize_all_accuracy(system, key, q, t, args.seed)
    print(f"flip frequencies written to {args.out}")
    print(f"bits flipped (freq > {args.threshold:g}) by >= 2 sites: {int((fm.blocks_per_bit(args.threshold) >= 2).sum())}")
    print(f"bit accuracy with every active marker randomised: {acc:.3f}")
    return EXIT_OK


# columns of the summary table: family -> attack rows averaged into it
FAMILIES = (
    ("clean", ("none",)), ("crop", ("crop",)), ("rot", ("rotate",)), ("res", ("resize",)),
    ("bright", ("brightness",)), ("jpeg_proxy", ("jpeg_proxy",)), ("regen_proxy", ("regeneration_proxy",)),
    ("pgd", ("pgd",)),
)


def summarize(results_dir) -> list[dict]:
    rows = []
    for path in sorted(Path(results_dir).glob("*.csv")):
        try:
            data = A.read_rows(path)
        except (A.AttackError, KeyError):
            continue
        if not data:
            continue
        line = {"run": path.stem, "config_hash": data[0]["config_hash"]}
        for fam, kinds in FAMILIES:
            vals = [float(r["bit_acc"]) for r in data if r["attack"] in kinds]
            line[fam] = sum(vals) / len(vals) if vals else None
        rows.append(line)
    return rows


def format_summary(rows: list[dict]) -> str:
    cols = ["run", "config_hash"] + [f for f, _ in FAMILIES]
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [r["run"], r["config_hash"]] + ["-" if r[f] is None else f"{r[f]:.3f}" for f, _ in FAMILIES]
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out)


def cmd_report(args) -> int:
    rows = summarize(args.results) if Path(args.results).is_dir() else []
    if not rows:
        print(f"no results in {args.results}", file=sys.stderr)
        return EXIT_NO_RESULTS
    table = format_summary(rows)
    table += "\n\nBit accuracy; each distortion column averages its two strengths. "
    table += "jpeg_proxy and regen_proxy are proxies for JPEG and diffusion regeneration.\n"
    if args.out:
        Path(args.out).write_text(table)
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="molm", description="Watermarking a frozen generator with key-routed LoRA markers.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, help="torch intra-op threads (default: torch's choice)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment config (defaults if omitted)")

    def with_key(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--key", help="key as M:hex")
        g.add_argument("--key-seed", type=int, help="draw the key from this seed")

    sp = sub.add_parser("pretrain-backbone", help="fit the backbone to the procedural shapes renderer")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pretrain_backbone)

    sp = sub.add_parser("train", help="train the marker bank and extractor")
    with_config(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--backbone", help="pretrained backbone checkpoint")
    sp.add_argument("--records", help="CSV of per-step records (default: next to the checkpoint)")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="render watermarked PNGs plus a manifest")
    sp.add_argument("--ckpt", required=True)
    with_key(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--class", dest="cls", type=int)
    sp.add_argument("--clean", action="store_true", help="render without markers")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("verify", help="test images for a given key")
    sp.add_argument("--ckpt", required=True)
    with_key(sp)
    sp.add_argument("--fpr", type=float, default=0.01)
    sp.add_argument("--csv")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("attribute", help="find the owner of images in a key database")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--db", required=True, help="owner<TAB>M:hex per line")
    sp.add_argument("--fpr", type=float, default=0.01)
    sp.add_argument("--csv")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_attribute)

    sp = sub.add_parser("attack", help="run the robustness battery")
    with_config(sp)
    sp.add_argument("--ckpt", required=True)
    with_key(sp)
    sp.add_argument("--suite", default=",".join(SUITES), help=f"comma list from {SUITES}")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("probe", help="flip-matrix probe over randomised markers")
    sp.add_argument("--ckpt", required=True)
    with_key(sp)
    sp.add_argument("--prompts", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threshold", type=float, default=0.05)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("report", help="summarise attack CSVs into one table")
    sp.add_argument("--results", required=True, help="directory of attack CSVs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers is not None:
        torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (CliFailure, KeyFormatError, VerificationError, E.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
