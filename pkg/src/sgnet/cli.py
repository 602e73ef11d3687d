"""Command-line entry point: ``sgnet {train,eval,predict,gradcheck,synth}``.

Exit codes: 0 success, 1 a run that completed but failed (training
divergence, gradient check failure), 2 bad input (config, data, checkpoint).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import autograd as ag
from . import checkpoint as ckpt
from .config import RunConfig
from .data import ParseError, SplitError, SplitPlan, load_path, make_windows, split, synth_generate, write_bev_text
from .gradcheck import model_gradcheck, tiny_model
from .model import ConfigError, SGNet
from .training import TrainingError, evaluate, model_from_checkpoint, predict, train, worker_count

CHECKPOINT_NAME = "checkpoint.sgn"
BEST_NAME = "best.sgn"


class UsageError(Exception):
    """Bad input detected before any compute; exit code 2."""


# ----------------------------------------------------------------------------
# shared helpers


def load_tracks(cfg: RunConfig, path: str | None = None):
    data = cfg.data
    if data.format == "synthetic" and path is None:
        return synth_generate(data.synth_kind, data.synth_n, data.synth_seed, data.synth_noise,
                              length=cfg.model.obs_len + cfg.model.pred_len, goal_every=data.synth_goal_every,
                              fps=data.fps)
    spec = cfg.data.dataset_spec(cfg.model)
    if spec.format == "synthetic":
        # exported synthetic tracks are stored as bev-text
        spec.format = "bev-text"
    return load_path(path or data.path, spec)


def infer_widths(cfg: RunConfig, tracks) -> RunConfig:
    """Fill model widths from the data unless the config pins them."""
    if not tracks:
        return cfg
    d = tracks[0].states.shape[1]
    aux = 0 if tracks[0].aux is None else tracks[0].aux.shape[1]
    width = d * (3 if cfg.data.motion_features else 1) + aux
    sets = []
    for key, value in (("model.output_dim", d), ("model.aux_dim", aux), ("model.input_dim", width)):
        if key not in cfg.explicit:
            sets.append(f"{key} = {value}")
    return cfg.with_overrides(sets) if sets else cfg


def check_widths(model_cfg, windows):
    if not windows:
        return
    x, y = windows[0].X.shape[1], windows[0].Y.shape[1]
    if x != model_cfg.input_dim or y != model_cfg.output_dim:
        raise ConfigError(f"data has input width {x} and output width {y}; the model expects "
                          f"{model_cfg.input_dim} and {model_cfg.output_dim}")


def parse_horizons(text: str | None, fps: float, pred_len: int) -> list[int]:
    """Comma-separated steps, or seconds with an ``s`` suffix converted via ``fps``."""
    if not text:
        return [pred_len]
    out = []
    for item in text.split(","):
        item = item.strip()
        try:
            if item.endswith("s"):
                steps = float(item[:-1]) * fps
                if abs(steps - round(steps)) > 1e-6:
                    raise UsageError(f"--horizons: {item} is not a whole number of steps at {fps:g} fps")
                steps = int(round(steps))
            else:
                steps = int(item)
        except ValueError:
            raise UsageError(f"--horizons: cannot parse {item!r}") from None
        if not 1 <= steps <= pred_len:
            raise UsageError(f"--horizons: {item} is {steps} steps, outside 1..{pred_len}")
        out.append(steps)
    return out


def config_from_checkpoint(ck: ckpt.Checkpoint, overrides: list[str]) -> RunConfig:
    pairs = [(f"model.{k}", _plain(v)) for k, v in ck.model_config.items()]
    pairs += [(k, _plain(v)) for k, v in ck.extra.items() if k.split(".")[0] in ("data", "split", "train")]
    cfg = RunConfig.from_pairs(pairs)
    return cfg.with_overrides(overrides) if overrides else cfg


def _plain(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def eval_windows(args, cfg: RunConfig):
    """Windows to score: every window of ``--data``, else the recorded test partition."""
    spec = cfg.data.dataset_spec(cfg.model)
    if args.data:
        tracks = load_tracks(cfg, args.data)
    else:
        tracks = split(load_tracks(cfg), cfg.split.plan())["test"]
    windows = make_windows(tracks, spec)
    if not windows:
        raise UsageError("evaluation set is empty (no track is long enough for one window)")
    check_widths(cfg.model, windows)
    return windows


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return ckpt.load(path)


# ----------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    if args.ablation is not None:
        overrides.append(f"model.ablation = {args.ablation}")
    cfg = RunConfig.from_file(args.config, overrides)
    if cfg.data.format != "synthetic" and not Path(cfg.data.path).exists():
        raise FileNotFoundError(f"data.path: {cfg.data.path} does not exist")
    tracks = load_tracks(cfg)
    cfg = infer_widths(cfg, tracks)
    spec = cfg.data.dataset_spec(cfg.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.split.leave_one_out:
        scenes = sorted({t.scene_id for t in tracks})
        folds = [(s, split(tracks, _fold_plan(scenes, s))) for s in scenes]
    else:
        folds = [(None, split(tracks, cfg.split.plan()))]
    for scene, parts in folds:
        fold_out = out if scene is None else out / scene
        fold_out.mkdir(parents=True, exist_ok=True)
        fold_cfg = cfg if scene is None else cfg.with_overrides(
            [f"split.test = {scene}", f"split.train = {','.join(s for s in scenes if s != scene)}",
             "split.leave_one_out = false"])
        train_w = make_windows(parts["train"], spec)
        val_w = make_windows(parts["val"], spec)
        if not train_w:
            raise UsageError(f"training partition{'' if scene is None else ' for fold ' + scene} has no windows")
        check_widths(fold_cfg.model, train_w)
        (fold_out / "effective_config.txt").write_text(fold_cfg.to_text(), encoding="utf-8")
        model = SGNet(fold_cfg.model, seed=fold_cfg.train.seed)
        resume = _load_checkpoint(args.resume) if args.resume else None
        extra = {k: v for k, v in fold_cfg.pairs() if not k.startswith("model.")}
        result = train(model, train_w, val_w, fold_cfg.train, resume=resume, extra=extra, dump_dir=fold_out,
                       on_epoch=lambda row: print(
                           f"epoch {row['epoch']:>3}  train {row['train_loss']:.5f}  val {row['val_loss']:.5f}  "
                           f"lr {row['lr']:.2e}", file=sys.stderr))
        ckpt.save(result.last, fold_out / CHECKPOINT_NAME)
        if result.best is not None:
            ckpt.save(result.best, fold_out / BEST_NAME)
        (fold_out / "epochs.csv").write_text(result.log_csv(), encoding="utf-8")
        print(f"{'fold ' + scene + ': ' if scene else ''}{len(train_w)} train / {len(val_w)} val windows; "
              f"checkpoint written to {fold_out / CHECKPOINT_NAME}")
    return 0


def _fold_plan(scenes, held_out):
    return SplitPlan(train=[s for s in scenes if s != held_out], test=[held_out])


def _model_for(args, ck, cfg):
    model = model_from_checkpoint(ck)
    k = args.k
    if k is not None and cfg.model.mode == "deterministic":
        print("warning: deterministic checkpoint emits one proposal; --k ignored", file=sys.stderr)
        k = 1
    if k is not None and k < 1:
        raise UsageError("--k must be >= 1")
    return model, k


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    cfg = config_from_checkpoint(ck, args.set or [])
    model, k = _model_for(args, ck, cfg)
    horizons = parse_horizons(args.horizons, cfg.data.fps, cfg.model.pred_len)
    windows = eval_windows(args, cfg)
    report = evaluate(model, windows, k=k, horizons=horizons, seed=args.seed, workers=worker_count())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return 0


def prediction_rows(windows, preds) -> list[str]:
    d = preds.shape[-1]
    header = "scene,agent,window_start,proposal,step,x,y" + (",x2,y2" if d == 4 else "")
    rows = [header]
    for w, p in zip(windows, preds):
        for k in range(p.shape[0]):
            for s in range(p.shape[1]):
                coords = ",".join(repr(float(v)) for v in p[k, s])
                rows.append(f"{w.scene},{w.agent},{w.start},{k},{s + 1},{coords}")
    return rows


def cmd_predict(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    cfg = config_from_checkpoint(ck, args.set or [])
    model, k = _model_for(args, ck, cfg)
    windows = eval_windows(args, cfg)
    preds = predict(model, windows, k=k, seed=args.seed, workers=worker_count())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(prediction_rows(windows, preds)) + "\n", encoding="utf-8")
    print(f"{len(windows)} windows x {preds.shape[1]} proposals x {preds.shape[2]} steps written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    overrides = {"sge_variant": args.variant, "mode": args.mode, "ablation": args.ablation}
    model = tiny_model(args.seed, **{k: v for k, v in overrides.items() if v is not None})
    if args.inject_fault:
        with ag.inject_fault(args.inject_fault):
            report = model_gradcheck(model, probes=args.probes, seed=args.seed)
    else:
        report = model_gradcheck(model, probes=args.probes, seed=args.seed)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    tracks = synth_generate(args.kind, args.n, args.seed, noise=args.noise, length=args.length,
                            goal_every=args.goal_every, scene=Path(args.out).stem, fps=args.fps)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_bev_text(tracks, args.out)
    print(f"{len(tracks)} {args.kind} agents x {args.length} frames written to {args.out}")
    return 0


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgnet", description="Stepwise goal-driven trajectory prediction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="key = value config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--ablation", choices=["E", "D", "ED"], help="overrides model.ablation")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("predict", cmd_predict, "write proposals as CSV")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", help="file or directory to use; default is the recorded test partition")
        e.add_argument("--k", type=int, help="proposals per window (stochastic models)")
        e.add_argument("--seed", type=int, default=0, help="latent noise seed")
        e.add_argument("--set", action="append", metavar="KEY=VALUE", help="data.* override, repeatable")
        if name == "eval":
            e.add_argument("--horizons", help="steps, or seconds with an s suffix, e.g. 15,30,45 or 0.5s,1s")
            e.add_argument("--out", default=".", help="directory for metrics.csv and metrics.json")
        else:
            e.add_argument("--out", required=True, help="prediction CSV path")
        e.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    g.add_argument("--size", choices=["tiny"], default="tiny")
    g.add_argument("--probes", type=int, default=120)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variant", choices=["recurrent", "feedforward", "convolutional"])
    g.add_argument("--mode", choices=["stochastic", "deterministic"])
    g.add_argument("--ablation", choices=["E", "D", "ED"])
    g.add_argument("--inject-fault", choices=["tanh", "relu"], help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate synthetic tracks as bev-text")
    s.add_argument("kind", choices=["constant-velocity", "piecewise-goal", "circular"])
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--length", type=int, default=20)
    s.add_argument("--goal-every", type=int, default=6)
    s.add_argument("--fps", type=float, default=2.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, ParseError, SplitError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
