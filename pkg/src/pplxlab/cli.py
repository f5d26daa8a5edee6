"""Command-line entry point: ``pplxlab <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
Every subcommand that takes ``--out`` writes its tables there together with a
``manifest.json`` listing command, resolved config, seeds and file digests.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, experiments as ex
from . import io
from .isoppl import fit_gamma, iso_curve, pplx_model
from .model import ModelConfig
from .numerics import EPS_FLOOR

log = logging.getLogger("pplxlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


# -- configuration ---------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _dataclass_from(cls, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    return cls(**kw)


def _floor(args, cfg) -> float:
    return args.epsilon_floor if args.epsilon_floor is not None else cfg.get("epsilon_floor", EPS_FLOOR)


def _n_list(args, cfg) -> list[int]:
    if args.n_list:
        return [int(x) for x in args.n_list.split(",")]
    return list(cfg.get("sweep", {}).get("n_list", ex.DEFAULT_N_LIST))


def _manifest(args, resolved: dict) -> io.RunManifest:
    return io.RunManifest(command=list(args.argv), config=resolved, seeds={"seed": args.seed},
                          started=io._now())


def _out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command}: --out is required")
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands -----------------------------------------------------------------

def cmd_train_copy(args, cfg) -> int:
    out = _out(args)
    model_cfg = ModelConfig(**cfg.get("model", {}))
    train = _dataclass_from(ex.CopyTrainConfig, cfg.get("copy_train", {}))
    if args.epsilon_floor is not None:
        train.epsilon_floor = args.epsilon_floor
    res = ex.run_copy_training(model_cfg, args.seed, train)
    files = [io.save_checkpoint(res.params, model_cfg, res.steps, out / "checkpoint.pplx", res.meta()),
             io.write_csv(out / "loss_trace.csv", ["step", "loss"],
                          ((i + 1, l) for i, l in enumerate(res.losses)))]
    if args.plot:
        from .plotting import emit_plot
        files.append(emit_plot(out / "loss_trace.csv", out / "loss_trace.svg", "line", "step", "loss",
                               logy=True, title="copy training loss"))
    resolved = {"model": model_cfg.to_dict(), "copy_train": asdict(train), "result": res.meta()}
    io.write_manifest(out, _manifest(args, resolved), files)
    print(f"steps={res.steps} converged={res.converged} exact={res.held_out.exact_match:.3f} "
          f"min_conf={res.held_out.min_confidence:.6f}")
    return 0


def _sweep_settings(args, cfg) -> dict:
    sw = dict(cfg.get("sweep", {}))
    pattern = args.pattern if args.pattern is not None else sw.get("pattern", "0")
    flip = args.flip_pos if args.flip_pos is not None else sw.get("flip_pos")
    return {"n_list": _n_list(args, cfg), "pattern": pattern, "flip_pos": flip,
            "regime_threshold": sw.get("regime_threshold", 0.1), "epsilon_floor": _floor(args, cfg)}


def cmd_copy_sweep(args, cfg) -> int:
    out = _out(args)
    ck = io.load_checkpoint(args.checkpoint)
    s = _sweep_settings(args, cfg)
    sweep = ex.run_copy_sweep(ck.params, ck.config, s["n_list"], s["pattern"], s["flip_pos"],
                              s["epsilon_floor"], s["regime_threshold"])
    files = [io.write_csv(out / "copy_sweep.csv", ex.COPY_SWEEP_COLUMNS,
                          (ex.sweep_row_values(r) for r in sweep.rows))]
    trows = []
    for (n, which), tr in sweep.traces.items():
        for k in range(len(tr)):
            d = tr.distributions[k]
            trows.append([n, which, k, *d.tolist(), int(tr.emitted[k]), int(tr.bits[k])])
    vocab = ["p0", "p1", "p_stop"][:ck.config.vocab_size]
    files.append(io.write_csv(out / "traces.csv", ["N", "sequence", "position", *vocab, "emitted", "target"], trows))
    if args.plot:
        from .plotting import emit_plot
        t = out / "copy_sweep.csv"
        files += [emit_plot(t, out / "linf_gap.svg", "line", "N", "linf_gap", logx=True, title="L-inf gap alpha vs beta"),
                  emit_plot(t, out / "confidence.svg", "line", "N", ["min_prob_alpha", "flip_prob_beta"], logx=True,
                            title="confidence"),
                  emit_plot(t, out / "log_perplexity.svg", "line", "N", ["pplx_alpha", "pplx_beta"], logx=True,
                            title="log-perplexity")]
    resolved = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": io.sha256_file(args.checkpoint),
                "model": ck.config.to_dict(), "sweep": s}
    io.write_manifest(out, _manifest(args, resolved), files)
    for r in sweep.rows:
        print(f"N={r.N:5d} gap={r.linf_gap:.4g} min_alpha={r.min_prob_alpha:.4f} flip_beta={r.flip_prob_beta:.4f} "
              f"pplx_a={r.pplx_alpha:.4g} pplx_b={r.pplx_beta:.4g} beta_correct={r.beta_correct} {r.regime}")
    return 0


def cmd_grad_sweep(args, cfg) -> int:
    out = _out(args)
    ck = io.load_checkpoint(args.checkpoint)
    s = _sweep_settings(args, cfg)
    rows = ex.run_grad_norm_sweep(ck.params, ck.config, s["n_list"], s["pattern"], s["flip_pos"], s["epsilon_floor"])
    files = [io.write_csv(out / "grad_sweep.csv", ex.GRAD_SWEEP_COLUMNS,
                          ([r.N, r.grad_norm_alpha, r.loss_alpha, r.grad_norm_beta, r.loss_beta] for r in rows))]
    if args.plot:
        from .plotting import emit_plot
        files.append(emit_plot(files[0], out / "grad_sweep.svg", "line", "N", ["grad_norm_alpha", "grad_norm_beta"],
                               logx=True, logy=True, title="gradient norm"))
    resolved = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": io.sha256_file(args.checkpoint),
                "model": ck.config.to_dict(), "sweep": s}
    io.write_manifest(out, _manifest(args, resolved), files)
    for r in rows:
        print(f"N={r.N:5d} grad_beta={r.grad_norm_beta:.4g} loss_beta={r.loss_beta:.4g}")
    return 0


def cmd_train_parity(args, cfg) -> int:
    out = _out(args)
    model_cfg = ex.parity_config(**cfg.get("model", {}))
    train = _dataclass_from(ex.ParityTrainConfig, cfg.get("parity_train", {}))
    if args.epsilon_floor is not None:
        train.epsilon_floor = args.epsilon_floor
    files = []
    meta = {"task": "parity", "seed": args.seed, "train": asdict(train)}

    def save(ck):
        files.append(io.save_checkpoint(ck.params, model_cfg, ck.step,
                                        out / "checkpoints" / f"step_{ck.step:05d}.pplx", meta))

    ckpts, losses = ex.run_parity_training(model_cfg, args.seed, train, on_checkpoint=save)
    files.append(io.write_csv(out / "loss_trace.csv", ["step", "loss"], ((i + 1, l) for i, l in enumerate(losses))))
    resolved = {"model": model_cfg.to_dict(), "parity_train": asdict(train)}
    io.write_manifest(out, _manifest(args, resolved), files)
    print(f"checkpoints={len(ckpts)} final_loss={losses[-1]:.5f}")
    return 0


def cmd_eval_checkpoints(args, cfg) -> int:
    out = _out(args)
    paths = sorted(Path(args.checkpoints).glob("*.pplx"))
    if not paths:
        raise ValueError(f"no checkpoints under {args.checkpoints}")
    loaded = [io.load_checkpoint(p) for p in paths]
    loaded.sort(key=lambda c: c.step)
    config = loaded[0].config
    ev = dict(cfg.get("eval", {}))
    scoring = args.scoring or ev.get("scoring", "all_positions")
    sets = ex.parity_eval_sets(args.seed, ev.get("iid_count", 512), ev.get("ood_count", 128),
                               tuple(ev.get("iid_range", (1, 16))), ev.get("ood_length", 128))
    ckpts = [ex.ParityCheckpoint(c.step, c.params) for c in loaded]
    evals, summary, preds = ex.eval_checkpoints(ckpts, config, sets.iid, sets.ood, scoring, _floor(args, cfg))
    files = [io.write_csv(out / "checkpoint_evals.csv", ["step", "split", "L", "f1", "entropy"],
                          ([e.step, e.split, e.L, e.f1, e.entropy] for e in evals))]
    prow = []
    for sp in preds:
        for i, (p, t) in enumerate(zip(sp.preds, sp.targets)):
            prow.append([sp.step, sp.split, i, "".join(map(str, p)), "".join(map(str, t))])
    files.append(io.write_csv(out / "predictions.csv", ["step", "split", "instance", "preds", "targets"], prow))
    summ = {k: asdict(v) for k, v in summary.items()}
    spath = out / "summary.json"
    spath.write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(spath)
    if args.plot:
        from .plotting import emit_plot
        for split in ("IID", "OOD"):
            t = io.write_csv(out / f"evals_{split.lower()}.csv", ["L", "f1", "entropy", "step"],
                             ([e.L, e.f1, e.entropy, e.step] for e in evals if e.split == split))
            r = summary[split].r
            files += [t, emit_plot(t, out / f"scatter_{split.lower()}.svg", "scatter", "L", "f1", color="entropy",
                                   star="max:f1", title=f"{split}: r = {r:.3f}" if r is not None else split)]
    resolved = {"checkpoints": [str(p) for p in paths],
                "checkpoint_sha256": {p.name: io.sha256_file(p) for p in paths},
                "model": config.to_dict(), "eval": {**ev, "scoring": scoring}}
    io.write_manifest(out, _manifest(args, resolved), files)
    for split, s in summary.items():
        print(f"{split}: r={s.r} best_f1_step={s.best_f1_step} best_L_step={s.best_L_step} "
              f"best_f1_entropy_quantile={s.best_f1_entropy_quantile:.3f}")
    return 0


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",")]


def cmd_isoppl_curve(args, cfg) -> int:
    out = _out(args)
    rows = []
    for a in _floats(args.a):
        for g in _floats(args.gamma):
            grid = np.linspace(0.0, 0.999 * g, args.points)
            for pt in iso_curve(a, g, grid):
                rows.append([pt.delta_over_gamma, pt.a_prime, pt.a, pt.gamma, pt.pplx])
    files = [io.write_csv(out / "isoppl_curve.csv", ["delta_over_gamma", "a_prime", "a", "gamma", "pplx"], rows)]
    if args.plot:
        from .plotting import emit_plot
        group = "gamma" if len(_floats(args.gamma)) > 1 else "a"
        files.append(emit_plot(files[0], out / "isoppl_curve.svg", "line", "delta_over_gamma", "a_prime",
                               group=group, title="iso-perplexity"))
    resolved = {"a": _floats(args.a), "gamma": _floats(args.gamma), "points": args.points}
    io.write_manifest(out, _manifest(args, resolved), files)
    print(f"rows={len(rows)}")
    return 0


def cmd_isoppl_fit(args, cfg) -> int:
    res = fit_gamma(args.L, args.a)
    if not res.feasible:
        print("INFEASIBLE")
    else:
        alts = ", ".join(f"{g:.12g}" for g in res.solutions)
        print(f"gamma={res.gamma:.12g} solutions=[{alts}] pplx={pplx_model(args.a, res.gamma):.12g}")
    return 0


def cmd_ingest(args, cfg) -> int:
    seqs = io.ingest_logprobs(args.input)
    floor = _floor(args, cfg)
    rows = []
    for s in seqs:
        r = s.to_report(floor)
        rows.append([s.sequence_id, len(s.logprobs), r.mean_neg, r.correct])
        print(f"{s.sequence_id}: steps={len(s.logprobs)} L={r.mean_neg:.6g} correct={r.correct}")
    if args.out:
        out = _out(args)
        files = [io.write_csv(out / "ingest_reports.csv", ["sequence_id", "steps", "L", "correct"], rows)]
        io.write_manifest(out, _manifest(args, {"input": str(args.input),
                                                "input_sha256": io.sha256_file(args.input),
                                                "epsilon_floor": floor}), files)
    return 0


def cmd_plot(args, cfg) -> int:
    from .plotting import emit_plot

    star = args.star
    if star is not None and star.lstrip("-").isdigit():
        star = int(star)
    ys = args.y.split(",") if args.y else None
    emit_plot(args.table, args.out, args.kind, args.x, ys, args.color, args.group, star, args.title,
              args.logx, args.logy)
    print(args.out)
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0, help="64-bit seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--epsilon-floor", type=float, default=None, help=f"log clamp floor (default {EPS_FLOOR})")
    common.add_argument("--plot", action="store_true", help="also render SVG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pplxlab", description="Perplexity versus accuracy on copy and parity tasks.")
    p.add_argument("--version", action="version", version=f"pplxlab {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train-copy", parents=[common], help="train the copy model")
    s.set_defaults(fn=cmd_train_copy)

    for name, fn, hlp in (("copy-sweep", cmd_copy_sweep, "alpha/beta sweep over N"),
                          ("grad-sweep", cmd_grad_sweep, "gradient norms on alpha/beta over N")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--n-list", help="comma-separated lengths (default 16,...,512)")
        s.add_argument("--pattern", help="alpha pattern to tile (default 0)")
        s.add_argument("--flip-pos", type=int, help="bit to flip for beta (default last)")
        s.set_defaults(fn=fn)

    s = sub.add_parser("train-parity", parents=[common], help="train parity and save checkpoints")
    s.set_defaults(fn=cmd_train_parity)

    s = sub.add_parser("eval-checkpoints", parents=[common], help="evaluate parity checkpoints IID/OOD")
    s.add_argument("--checkpoints", required=True, help="directory of .pplx files")
    s.add_argument("--scoring", choices=["all_positions", "final_only"])
    s.set_defaults(fn=cmd_eval_checkpoints)

    s = sub.add_parser("isoppl-curve", parents=[common], help="iso-perplexity curve(s) to CSV")
    s.add_argument("--a", required=True, help="base accuracy (comma-separated for several)")
    s.add_argument("--gamma", required=True, help="base gamma (comma-separated for several)")
    s.add_argument("--points", type=int, default=512)
    s.set_defaults(fn=cmd_isoppl_curve)

    s = sub.add_parser("isoppl-fit", parents=[common], help="solve for gamma from (L, a)")
    s.add_argument("--L", type=float, required=True)
    s.add_argument("--a", type=float, required=True)
    s.set_defaults(fn=cmd_isoppl_fit)

    s = sub.add_parser("ingest-logprobs", parents=[common], help="log-perplexity of external per-token logprobs")
    s.add_argument("--input", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("plot", help="render a CSV table to SVG")
    s.add_argument("--table", required=True)
    s.add_argument("--out", required=True, help="SVG path")
    s.add_argument("--kind", choices=["line", "scatter"], default="line")
    s.add_argument("--x")
    s.add_argument("--y", help="comma-separated columns")
    s.add_argument("--color")
    s.add_argument("--group")
    s.add_argument("--star", help="row index, or max:<col> / min:<col>")
    s.add_argument("--title")
    s.add_argument("--logx", action="store_true")
    s.add_argument("--logy", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(fn=cmd_plot, config=None, epsilon_floor=None, seed=0)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        print(parser.format_help(), file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if not getattr(args, "command", None):
        print(parser.format_help(), file=sys.stderr)
        return 1
    args.argv = ["pplxlab", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
