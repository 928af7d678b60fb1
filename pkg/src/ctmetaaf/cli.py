"""Command line entry point.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import kalman, scenes as sc
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .dsp import write_wav
from .errors import ConfigurationError, CTMetaAFError, UsageError
from .evaluation import ExperimentSpec, compare, format_table, relabel, run_experiment, swap_matrix
from .kws import KwsConfig
from .training import (TrainConfig, clean_signal, kws_from_checkpoint, macro_f1, mel_features, noisy_signal,
                       phi_from_checkpoint, train_joint, train_kws, train_optimizer)

log = logging.getLogger("ctmetaaf")


# ---------------------------------------------------------------- helpers

def settings_from(cfg: RunConfig) -> sc.SceneSettings:
    d = cfg["data"]
    return sc.SceneSettings(seed=cfg["run"]["seed"], rir_taps=d["rir_taps"],
                            rt60_range=(d["rt60_min"], d["rt60_max"]), noise_snr_db=d["noise_snr_db"])


def train_config(cfg: RunConfig, mode: str, **over) -> TrainConfig:
    t, f, o, k = cfg["train"], cfg["filter"], cfg["optimizer"], cfg["kws"]
    common = dict(seed=cfg["run"]["seed"], K=f["K"], B=f["B"], constrained_grad=f["constrained_grad"],
                  hidden=o["hidden"], layers=o["layers"], group_size=o["group_size"], group_hop=o["group_hop"],
                  beta2=t["beta2"], adam_eps=t["adam_eps"], clip_norm=t["clip_norm"],
                  L_range=(t["L_min"], t["L_max"]))
    if mode == "kws-pretrain":
        common.update(lr=k["lr"], batch_size=k["batch_size"], max_epochs=k["epochs"])
    elif mode == "meta-frozen":
        common.update(lam=t["lam"], lr=t["lr"], beta1=t["beta1"], batch_size=t["batch_size"],
                      lr_patience=t["lr_patience"], stop_patience=t["stop_patience"], max_epochs=t["max_epochs"])
    else:
        common.update(lam=t["lam"], lr=t["joint_lr"], beta1=t["beta1"], batch_size=t["batch_size"],
                      kws_lr=t["kws_lr"], kws_beta1=t["kws_beta1"], lr_patience=t["lr_patience"],
                      stop_patience=t["joint_stop_patience"], max_epochs=t["max_epochs"])
    common.update(over)
    return TrainConfig.for_mode(mode, **common)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def run_dir(cfg: RunConfig, name: str, inputs: dict, out: str | None = None) -> Path:
    """Create the run directory and record the config snapshot and input hashes."""
    d = Path(out) if out else cfg.path("out_dir") / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.ini").write_text(cfg.to_ini())
    meta = {"seed": cfg["run"]["seed"], "command": name,
            "inputs": {k: file_hash(v) for k, v in sorted(inputs.items())}}
    (d / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return d


def load_folds(cfg: RunConfig, manifest: str | None = None) -> dict:
    path = _require(manifest or cfg.path("manifest"), "manifest")
    return sc.load_corpus(path, settings_from(cfg))


def kws_vocab(ckpt: Checkpoint) -> list:
    return list(ckpt.meta["vocab"])


def task_scenes(scenes, vocab, strict: bool = True) -> list:
    scenes = list(scenes)
    if not strict:
        scenes = [s for s in scenes if s.c in vocab]
    return relabel(scenes, vocab)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg["data"]
    counts = {"train": d["train"], "val": d["val"], "test": d["test"]}
    if sum(counts.values()) == 0:
        raise ConfigurationError("config asks for zero scenes")
    rows = sc.build_toy_manifest(cfg["run"]["seed"], counts, list(d["classes"]), d["len_s"],
                                 d["test_len_s"], (d["ser_min"], d["ser_max"]))
    manifest = Path(args.manifest) if args.manifest else cfg.path("manifest")
    settings = settings_from(cfg)
    # render and verify every scene before writing anything
    rendered = []
    for r in rows:
        s = sc.render_scene(r, settings)
        if not np.allclose(s.echo + s.s + s.n, s.d, rtol=0, atol=1e-12):
            raise CTMetaAFError(f"scene {r.id}: mixture decomposition check failed")
        if abs(sc.measured_ser(s) - r.ser_db) > 1e-6:
            raise CTMetaAFError(f"scene {r.id}: SER check failed")
        rendered.append(s)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    if d["write_audio"]:
        audio = manifest.parent / "audio"
        audio.mkdir(exist_ok=True)
        new_rows = []
        for r, s in zip(rows, rendered):
            u_name, s_name = f"audio/{r.id}_u.wav", f"audio/{r.id}_s.wav"
            write_wav(manifest.parent / u_name, s.u)
            write_wav(manifest.parent / s_name, sc.surrogate_keyword(r.c, int(r.s_src)))
            new_rows.append(replace(r, u_src=u_name, s_src=s_name))
        rows = new_rows
    sc.write_manifest(manifest, rows)
    for fold in sc.FOLDS:
        print(f"{fold}: {sum(1 for r in rows if r.fold == fold)} scenes")
    print(f"manifest: {manifest} sha256={file_hash(manifest)[:16]}")
    return 0


def cmd_train_kws(cfg: RunConfig, args) -> int:
    folds = load_folds(cfg, args.manifest)
    train, val = list(folds["train"]), list(folds["val"])
    if not train:
        raise UsageError("training fold is empty")
    vocab = sorted({s.c for s in train})
    k = cfg["kws"]
    kcfg = KwsConfig(n_classes=len(vocab), width=k["width"], bottleneck=k["bottleneck"], kernel=k["kernel"])
    out = run_dir(cfg, args.name or "kws", {"manifest": args.manifest or cfg.path("manifest")}, args.out)
    tc = train_config(cfg, "kws-pretrain")
    signal = noisy_signal(k["noise_snr"], cfg["run"]["seed"]) if k["noise_snr"] else clean_signal
    res = train_kws(tc, task_scenes(train, vocab), task_scenes(val, vocab, strict=False), kcfg,
                    signal=signal, out_dir=out, log_path=out / "log.jsonl")
    for c in (res.best, res.last):
        c.meta["vocab"] = vocab
    save_checkpoint(out / "best.ckpt", res.best)
    save_checkpoint(out / "last.ckpt", res.last)
    print(out / "best.ckpt")
    return 0


def _load_kws(path):
    ckpt = load_checkpoint(_require(path, "checkpoint"), "kws")
    return ckpt, kws_from_checkpoint(ckpt)


def cmd_train_meta(cfg: RunConfig, args) -> int:
    over = {} if args.lam is None else {"lam": args.lam}
    tc = train_config(cfg, "meta-frozen", **over)
    inputs = {"manifest": args.manifest or cfg.path("manifest")}
    kp, vocab = None, None
    if args.kws:
        inputs["kws"] = args.kws
        kckpt, kp = _load_kws(args.kws)
        vocab = kws_vocab(kckpt)
    elif tc.lam > 0:
        raise UsageError("--kws is required when lam > 0")
    folds = load_folds(cfg, args.manifest)
    train, val = list(folds["train"]), list(folds["val"])
    if vocab is not None:
        train, val = task_scenes(train, vocab), task_scenes(val, vocab)
    out = run_dir(cfg, args.name or f"meta-lam{tc.lam:g}", inputs, args.out)
    res = train_optimizer(tc, train, val, kp, out_dir=out, log_path=out / "log.jsonl")
    save_checkpoint(out / "best.ckpt", res.best)
    save_checkpoint(out / "last.ckpt", res.last)
    print(out / "best.ckpt")
    return 0


def cmd_train_joint(cfg: RunConfig, args) -> int:
    over = {} if args.lam is None else {"lam": args.lam}
    if args.freeze_phi:
        over["lr"] = 0.0
    tc = train_config(cfg, "joint", **over)
    pckpt = load_checkpoint(_require(args.phi, "checkpoint"), "meta-optimizer")
    kckpt, kp = _load_kws(args.kws)
    vocab = kws_vocab(kckpt)
    folds = load_folds(cfg, args.manifest)
    train, val = task_scenes(folds["train"], vocab), task_scenes(folds["val"], vocab)
    out = run_dir(cfg, args.name or "joint", {"manifest": args.manifest or cfg.path("manifest"),
                                              "phi": args.phi, "kws": args.kws}, args.out)
    best_phi, best_kws, res = train_joint(tc, train, val, phi_from_checkpoint(pckpt), kp,
                                          out_dir=out, log_path=out / "log.jsonl")
    best_kws.meta["vocab"] = vocab
    save_checkpoint(out / "best.ckpt", best_phi)
    save_checkpoint(out / "best_kws.ckpt", best_kws)
    save_checkpoint(out / "last.ckpt", res.last)
    print(out / "best.ckpt")
    return 0


def cmd_tune_kf(cfg: RunConfig, args) -> int:
    kckpt, kp = _load_kws(args.kws)
    vocab = kws_vocab(kckpt)
    folds = load_folds(cfg, args.manifest)
    val = task_scenes(folds["val"], vocab)
    k = cfg["kalman"]
    grid = {"A": k["grid_A"], "q": k["grid_q"], "smoothing": k["grid_smoothing"]}
    K, B = cfg["filter"]["K"], cfg["filter"]["B"]

    def score(e, scenes):
        from .metrics import scene_erle
        f1 = macro_f1(kp, mel_features(list(e)), [s.c for s in scenes])
        er = [scene_erle(s, e[i], B * K // 2) for i, s in enumerate(scenes)]
        er = [x for x in er if x is not None]
        return f1, float(np.mean(er)) if er else None

    best, table = kalman.grid_search_kf(grid, val, score, K, B)
    out = run_dir(cfg, args.name or "kf", {"manifest": args.manifest or cfg.path("manifest"), "kws": args.kws},
                  args.out)
    (out / "grid.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in table))
    result = {"A": best.A, "q": best.q, "smoothing": best.smoothing}
    (out / "kf.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    for r in table:
        print(f"A={r['A']:<6g} q={r['q']:<7g} smoothing={r['smoothing']:<5g} "
              f"F1={r['macro_f1']:.3f} ERLE={r['erle'] if r['erle'] is None else round(r['erle'], 2)}")
    print(f"best: {result}")
    return 0


def _kf_params(cfg: RunConfig, path) -> kalman.KalmanParams:
    if path:
        d = json.loads(_require(path, "Kalman settings").read_text())
        return kalman.KalmanParams(A=d["A"], q=d["q"], smoothing=d["smoothing"])
    k = cfg["kalman"]
    return kalman.KalmanParams(A=k["A"], q=k["q"], smoothing=k["smoothing"])


def cmd_eval(cfg: RunConfig, args) -> int:
    # resolve every input before doing any work
    cancellers = cfg["eval"]["cancellers"]
    need = {"meta": args.phi, "ct-meta": args.ct_phi}
    for c in cancellers:
        if c in need and not need[c]:
            raise UsageError(f"canceller {c!r} needs --{'phi' if c == 'meta' else 'ct-phi'}")
    kckpt, kp = _load_kws(args.kws)
    phis = {c: phi_from_checkpoint(load_checkpoint(_require(p, "checkpoint"), "meta-optimizer"))
            for c, p in need.items() if c in cancellers}
    kf = _kf_params(cfg, args.kf)
    folds = load_folds(cfg, args.manifest)
    scenes = task_scenes(folds[cfg["eval"]["fold"]], kws_vocab(kckpt))
    K, B, hop = cfg["filter"]["K"], cfg["filter"]["B"], cfg["optimizer"]["group_hop"]
    specs = [ExperimentSpec(c, kp, scenes, K, B, phi=phis.get(c), kf_params=kf, group_hop=hop,
                            constrained_grad=cfg["filter"]["constrained_grad"], kws_name=Path(args.kws).stem)
             for c in cancellers]
    from .evaluation import check_compatible
    for s in specs:
        check_compatible(s)
    reports = [run_experiment(s) for s in specs]
    sig = {}
    names = [r.name for r in reports]
    for a, b in (("ct-meta", "meta"), ("ct-meta", "diag-kf"), ("meta", "diag-kf")):
        if a in names and b in names:
            sig[(a, b)] = compare(reports[names.index(a)], reports[names.index(b)], cfg["eval"]["trials"],
                                  cfg["run"]["seed"])
    inputs = {"manifest": args.manifest or cfg.path("manifest"), "kws": args.kws}
    inputs.update({k: v for k, v in (("phi", args.phi), ("ct_phi", args.ct_phi), ("kf", args.kf)) if v})
    out = run_dir(cfg, args.name or "eval", inputs, args.out)
    table = format_table(reports, sig)
    (out / "report.txt").write_text(table)
    lines = "".join(r.jsonl() for r in reports)
    lines += "".join(json.dumps({"record": "significance", "a": a, "b": b, "p": p, "test": "paired-permutation"},
                                sort_keys=True) + "\n" for (a, b), p in sig.items())
    (out / "report.jsonl").write_text(lines)
    print(table, end="")
    return 0


def cmd_swap_matrix(cfg: RunConfig, args) -> int:
    if len(args.pair) < 2:
        raise UsageError("swap matrix needs at least two --pair PHI KWS entries")
    pairs = []
    for phi_path, kws_path in args.pair:
        pckpt = load_checkpoint(_require(phi_path, "checkpoint"), "meta-optimizer")
        kckpt, kp = _load_kws(kws_path)
        pairs.append((Path(phi_path).parent.name or phi_path, phi_from_checkpoint(pckpt),
                      Path(kws_path).parent.name or kws_path, kp, kws_vocab(kckpt)))
    folds = load_folds(cfg, args.manifest)
    fold = folds[cfg["eval"]["fold"]]
    models = {f"{m}#{i}": phi for i, (m, phi, _, _, _) in enumerate(pairs)}
    heads = {f"{h}#{i}": (kp, task_scenes(fold, vocab, strict=False)) for i, (_, _, h, kp, vocab) in enumerate(pairs)}
    matched = dict(zip(models, heads))
    K, B, hop = cfg["filter"]["K"], cfg["filter"]["B"], cfg["optimizer"]["group_hop"]
    sm = swap_matrix(models, heads, matched, K, B, hop)
    inputs = {"manifest": args.manifest or cfg.path("manifest")}
    for i, (p, k) in enumerate(args.pair):
        inputs[f"phi{i}"], inputs[f"kws{i}"] = p, k
    out = run_dir(cfg, args.name or "swap", inputs, args.out)
    (out / "swap.txt").write_text(sm.table())
    (out / "swap.jsonl").write_text(sm.jsonl())
    print(sm.table(), end="")
    return 0


def cmd_selfcheck(cfg: RunConfig, args) -> int:
    from .selfcheck import run_selfcheck
    results = run_selfcheck()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-kws": cmd_train_kws,
    "train-meta": cmd_train_meta,
    "train-joint": cmd_train_joint,
    "tune-kf": cmd_tune_kf,
    "eval": cmd_eval,
    "swap-matrix": cmd_swap_matrix,
    "selfcheck": cmd_selfcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctmetaaf", description="Classification-trained meta-adaptive echo cancellation.")
    p.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, ordered reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--preset", choices=("paper", "toy"), help="defaults to start from")
        if name == "selfcheck":
            continue
        s.add_argument("--manifest", help="override the manifest path")
        s.add_argument("--out", help="output directory (default: <out_dir>/<name>)")
        s.add_argument("--name", help="run name under out_dir")
        if name in ("train-meta", "train-joint"):
            s.add_argument("--lam", type=float, default=None, help="classification weight override")
        if name in ("train-meta", "train-joint", "tune-kf", "eval"):
            s.add_argument("--kws", required=name != "train-meta", help="classifier checkpoint")
        if name == "train-joint":
            s.add_argument("--phi", required=True, help="pretrained optimizer checkpoint")
            s.add_argument("--freeze-phi", action="store_true", help="only fine-tune the classifier")
        if name == "eval":
            s.add_argument("--phi", help="optimizer checkpoint for the meta canceller")
            s.add_argument("--ct-phi", help="optimizer checkpoint for the ct-meta canceller")
            s.add_argument("--kf", help="Kalman settings from tune-kf (kf.json)")
        if name == "swap-matrix":
            s.add_argument("--pair", nargs=2, action="append", default=[], metavar=("PHI", "KWS"),
                           help="optimizer checkpoint and the classifier it was trained with")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("no command given; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args.preset) if args.config else parse_config("", preset=args.preset)
        threads = 1 if args.deterministic else args.threads
        if threads is not None and threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return 2
    except (CTMetaAFError, ArithmeticError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
