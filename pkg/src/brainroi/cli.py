"""Command-line entry point: ``brainroi <subcommand> [--config run.json] ...``.

Subcommands: atlas-build, train, ipo, decode, eval, print-config. Failures
exit non-zero with a single ``error: <Kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import captioning, config as config_mod, decoding, encoder as enc, fileio, ipo, metrics, training
from .volume_atlas import (
    build_global_label_space,
    build_membership_matrix,
    extract_mask_voxels,
    resample_nearest,
)

log = logging.getLogger("brainroi")


class CLIError(RuntimeError):
    pass


def _meta(cfg: config_mod.RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _jsonl(records) -> str:
    return "".join(json.dumps(r) + "\n" for r in records)


def _csv(rows: list[dict], columns, comment: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in columns])
    return buf.getvalue()


def _comment(cfg) -> str:
    return f"config_hash={cfg.config_hash()} seed={cfg.seed}"


# -- atlas ----------------------------------------------------------------------

def write_synthetic_atlas_inputs(cfg: config_mod.RunConfig, root: Path) -> list[dict]:
    """Dump the synthetic subjects' masks and template atlases as gridvol files."""
    ds = training.generate_synthetic_dataset(cfg.data, (cfg.encoder.L, cfg.encoder.D_out))
    subjects = []
    atlas_paths = {}
    for a, tmpl in enumerate(ds.templates):
        path = root / f"atlas{a}.gvol"
        fileio.save_label_volume(path, tmpl)
        atlas_paths[f"atlas{a}"] = str(path)
    for subj in ds.subjects:
        mpath = root / f"{subj.name}_mask.gvol"
        fileio.save_mask(mpath, subj.mask)
        subjects.append({"id": subj.name, "mask": str(mpath), "atlases": dict(atlas_paths)})
    return subjects


def atlas_build(subjects: list[dict], out_dir: Path, extra: dict) -> list[Path]:
    if not subjects:
        raise CLIError("no atlas inputs configured (atlas.subjects is empty; try --synthetic)")
    atlas_ids = sorted(subjects[0]["atlases"])
    for s in subjects:
        if sorted(s["atlases"]) != atlas_ids:
            raise CLIError(f"subject {s['id']} does not provide atlases {atlas_ids}")
    prepared = []
    for s in subjects:
        mask = fileio.load_mask(s["mask"])
        voxels = extract_mask_voxels(mask)
        vols = {a: resample_nearest(fileio.load_label_volume(s["atlases"][a]), mask.grid) for a in atlas_ids}
        prepared.append((s["id"], mask, voxels, vols))
    written = []
    for a in atlas_ids:
        space = build_global_label_space(a, [vols[a].label_set(mask) for _, mask, _, vols in prepared])
        for sid, _, voxels, vols in prepared:
            path = out_dir / sid / f"{a}.memb"
            fileio.save_membership(path, build_membership_matrix(vols[a], voxels, space), **extra)
            written.append(path)
    for sid, _, voxels, _ in prepared:
        path = out_dir / sid / "voxel_indices.vidx"
        fileio.save_voxel_index(path, voxels, **extra)
        written.append(path)
    return written


def cmd_atlas_build(cfg, args) -> None:
    subjects = cfg.atlas.subjects
    if args.synthetic:
        subjects = write_synthetic_atlas_inputs(cfg, cfg.out / "atlas_inputs")
    for path in atlas_build(subjects, cfg.out / "atlas", _meta(cfg)):
        print(path)


# -- training -------------------------------------------------------------------

def _dataset(cfg):
    return training.generate_synthetic_dataset(cfg.data, (cfg.encoder.L, cfg.encoder.D_out))


def load_params(cfg, stage: int | None = None) -> tuple[dict, dict]:
    stages = [stage] if stage else [2, 1]
    for s in stages:
        path = cfg.checkpoint_path(s)
        if path.exists():
            return fileio.load_checkpoint(path)
    tried = ", ".join(str(cfg.checkpoint_path(s)) for s in stages)
    raise CLIError(f"missing checkpoint: none of {tried} exists (run `train --stage 1` first)")


def train(cfg, stage: int) -> training.StageResult:
    ds = _dataset(cfg)
    stage_cfg = training.preset_config(cfg.preset, stage, seed=cfg.seed)
    if stage == 1:
        params = enc.init_params(cfg.encoder, ds.n_labels, cfg.seed)
    else:
        params, _ = load_params(cfg, 1)
    result = training.run_stage(stage_cfg, ds, params, cfg.encoder)
    manifest = {**_meta(cfg), "stage": stage, "best_epoch": result.best_epoch,
                "best_macro_val_mse": result.best_macro_val, "encoder": cfg.encoder.to_dict(),
                "train": training.train_config_dict(stage_cfg), "n_labels": ds.n_labels,
                "label_spaces": [list(s.label_ids) for s in ds.label_spaces]}
    fileio.save_checkpoint(cfg.checkpoint_path(stage), result.best_params, manifest)
    _write_text(cfg.out / f"loss_stage{stage}.csv", training.curve_csv(result.curve, _comment(cfg)))
    return result


def cmd_train(cfg, args) -> None:
    result = train(cfg, args.stage)
    first = result.curve[0]["macro_val_mse"]
    print(f"stage {args.stage}: macro-val MSE {first:.6g} -> {result.best_macro_val:.6g} "
          f"(best epoch {result.best_epoch}) seed={cfg.seed} config_hash={cfg.config_hash()}")


# -- prompt optimization / decoding -------------------------------------------------

def _world(cfg):
    return captioning.build_world(cfg.encoder.D_out, cfg.lm.ctx_dim, cfg.lm.seed, cfg.lm.temperature,
                                  cfg.lm.max_new_tokens)


def _generator(cfg):
    if cfg.ipo.generator == "http":
        if not cfg.ipo.endpoint:
            raise CLIError("ipo.generator is 'http' but ipo.endpoint is empty")
        return ipo.HTTPGenerator(cfg.ipo.endpoint, cfg.ipo.instruction or ipo.DEFAULT_INSTRUCTION, cfg.ipo.timeout)
    return ipo.MockGenerator(cfg.seed)


def run_ipo(cfg) -> ipo.IPOResult:
    params, _ = load_params(cfg)
    ds = _dataset(cfg)
    world = _world(cfg)
    val = captioning.caption_samples(ds, world, [cfg.ipo.val_subject], cfg.ipo.val_samples)
    decode_cfg = replace(cfg.decode, max_new_tokens=cfg.lm.max_new_tokens)

    def scorer(prompt):
        return captioning.score_prompt(prompt, val, params, cfg.encoder, world, decode_cfg)

    result = ipo.ipo_loop(ipo.SEED_PROMPTS, _generator(cfg), scorer, cfg.ipo.generation, cfg.ipo.pool_capacity)
    out = cfg.out / "ipo"
    _write_text(out / "trace.jsonl", result.trace.to_jsonl())
    _write_text(out / "best_prompt.txt", result.best.text + "\n")
    _write_json(out / "meta.json", {**_meta(cfg), **result.meta, "best_score": result.best.score,
                                    "best_per_iteration": result.trace.best_per_iteration(),
                                    "events": result.trace.events, "val_samples": [s.sample_id for s in val]})
    return result


def cmd_ipo(cfg, args) -> None:
    result = run_ipo(cfg)
    print(f"best prompt ({result.best.score:.4f}): {result.best.text}")


def best_prompt(cfg) -> str:
    path = cfg.out / "ipo" / "best_prompt.txt"
    return path.read_text().strip() if path.exists() else ipo.SEED_PROMPTS[0]


def cmd_decode(cfg, args) -> None:
    params, _ = load_params(cfg)
    ds = _dataset(cfg)
    world = _world(cfg)
    prompt = args.prompt or best_prompt(cfg)
    dcfg = cfg.decode
    records = []
    for subj in ds.subjects:
        for j in subj.val_idx:
            z = enc.encode(subj.batch(int(j)), params, cfg.encoder)
            text, toks, score, fb = world.caption(z, prompt, dcfg)
            records.append({"sample_id": f"{subj.name}-{int(j)}", "config_name": "cli", "tokens": toks,
                            "text": text, "norm_score": score, "fallback_used": fb, **_meta(cfg)})
    path = cfg.out / "decode" / "generations.jsonl"
    _write_text(path, _jsonl(records))
    print(path)


# -- evaluation -----------------------------------------------------------------------

PER_SUBJECT_COLUMNS = ("Subject", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr")


def run_eval(cfg) -> dict:
    params, _ = load_params(cfg)
    ds = _dataset(cfg)
    world = _world(cfg)
    prompt = best_prompt(cfg)
    prompt_tokens = world.tokenizer(prompt)
    samples = captioning.caption_samples(ds, world)
    by_subject: dict[str, list] = {}
    for s in samples:
        by_subject.setdefault(s.sample_id.split("-")[0], []).append(s)

    def contexts(group):
        return [world.context(enc.encode(s.batch, params, cfg.encoder)) for s in group]

    first = ds.subjects[0].name
    group = by_subject[first]
    rows, gens = decoding.run_ablation_grid(world.lm, contexts(group), prompt_tokens, [s.refs for s in group],
                                            cfg.lm.max_new_tokens, world.lm.eos_token,
                                            [s.sample_id for s in group])
    full = dict(zip(("name", "nb", "ng", "lp"), decoding.ABLATION_GRID[-1]))
    full_cfg = decoding.DecodeConfig(full["nb"], full["ng"], full["lp"], cfg.lm.max_new_tokens, world.lm.eos_token)
    per_subject = []
    report = None
    for name, group in by_subject.items():
        texts = [world.caption(z, prompt, full_cfg)[0] for z in (enc.encode(s.batch, params, cfg.encoder) for s in group)]
        ev = metrics.evaluate_corpus(texts, [s.refs for s in group])
        per_subject.append(dict(zip(PER_SUBJECT_COLUMNS, (name, *ev.bleu, ev.rouge_l, ev.cider))))
        if name == first:
            report = ev.report()

    out = cfg.out / "eval"
    cols = list(decoding.TABLE_COLUMNS) + ["num_beams", "no_repeat_ngram_size", "length_penalty"]
    _write_text(out / "ablation.csv", _csv(rows, cols, _comment(cfg)))
    _write_json(out / "ablation.json", {**_meta(cfg), "prompt": prompt, "subject": first,
                                        "length_penalty_formula": decoding.LENGTH_PENALTY_FORMULA, "rows": rows})
    _write_text(out / "per_subject.csv", _csv(per_subject, PER_SUBJECT_COLUMNS, _comment(cfg)))
    _write_json(out / "report.json", {**report, **_meta(cfg), "subject": first, "config_name": "Full constraints"})
    _write_text(out / "generations.jsonl", _jsonl({**g, **_meta(cfg)} for g in gens))
    return {"rows": rows, "per_subject": per_subject, "report": report}


def cmd_eval(cfg, args) -> None:
    res = run_eval(cfg)
    w = max(len(r["Method"]) for r in res["rows"])
    print(f"{'Method':<{w}}  BLEU-1 BLEU-2 BLEU-3 BLEU-4 ROUGE-L  CIDEr")
    for r in res["rows"]:
        print(f"{r['Method']:<{w}}  " + " ".join(f"{r[c]:.4f}" for c in decoding.TABLE_COLUMNS[1:5])
              + f"  {r['ROUGE-L']:.4f} {r['CIDEr']:.4f}")


def cmd_print_config(cfg, args) -> None:
    print(json.dumps({**cfg.to_dict(), "_config_hash": cfg.config_hash()}, indent=2, sort_keys=True))


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brainroi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config (defaults used when omitted)")
        p.add_argument("--out-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=("desk", "paper"))
        p.set_defaults(func=func)
        return p

    p = add("atlas-build", cmd_atlas_build, "build voxel-index and membership files")
    p.add_argument("--synthetic", action="store_true", help="generate input volumes from the synthetic dataset")
    p = add("train", cmd_train, "train the encoder (one stage)")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p = add("ipo", cmd_ipo, "run prompt optimization")
    p.add_argument("--generator", choices=("mock", "http"))
    p.add_argument("--endpoint")
    p = add("decode", cmd_decode, "caption validation samples")
    p.add_argument("--num-beams", type=int)
    p.add_argument("--no-repeat-ngram-size", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--prompt")
    add("eval", cmd_eval, "decoding ablation grid and per-subject metrics")
    add("print-config", cmd_print_config, "print the resolved config")
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config)
    top = {k: getattr(args, k) for k in ("seed", "preset") if getattr(args, k, None) is not None}
    if getattr(args, "out_dir", None):
        top["out_dir"] = args.out_dir
    cfg = replace(cfg, **top)
    dec = {k: getattr(args, k) for k in ("num_beams", "no_repeat_ngram_size", "length_penalty", "max_new_tokens")
           if getattr(args, k, None) is not None}
    if dec:
        cfg = replace(cfg, decode=replace(cfg.decode, **dec))
    ip = {k: getattr(args, k) for k in ("generator", "endpoint") if getattr(args, k, None) is not None}
    if ip:
        cfg = replace(cfg, ipo=replace(cfg.ipo, **ip))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(cfg, args)
    except Exception as exc:  # one machine-parseable line, no traceback
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
