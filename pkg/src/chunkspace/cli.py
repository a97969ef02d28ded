"""``chunkspace`` command line: corpus generation, training, evaluation, planning and RL runs.

Exit codes: 0 success, 2 configuration error (including unknown flags),
3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model, save_checkpoint, save_model
from .corpus import chunk_arrays, save_corpus
from .model import FrozenDecoder
from .mpc import MODES, Planner, budget_sweep, run_episode, summarize
from .nn import configure_threads
from .pipeline import ConfigError, RunConfig, build_corpus, load_config, reach_env, tracking_env
from .rl import train_policy
from .training import code_usage, evaluate_l1, train

log = logging.getLogger("chunkspace")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _int_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", help="directory for outputs and the resolved config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="chunkspace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic motion corpus as CSV")
    g.add_argument("--minutes", type=float)
    g.add_argument("--rate", type=float, help="frame rate in Hz")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a chunk autoencoder")
    t.add_argument("--variant", choices=["vq", "kl"])
    t.add_argument("--conditional", type=_on_off, metavar="on|off")
    t.add_argument("--epochs", type=int)
    t.add_argument("--corpus", help="CSV corpus instead of the synthetic generator")

    for name, helptext in (("eval-recon", "validation reconstruction L1 of a checkpoint"),
                           ("codebook-stats", "code usage and spacing of a checkpoint")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint")

    m = sub.add_parser("mpc", parents=[common], help="run one planning episode on the tracking task")
    m.add_argument("--mode", choices=MODES)
    m.add_argument("--checkpoint")
    m.add_argument("--n-traj", type=int)
    m.add_argument("--episode-seed", type=int, default=0)

    s = sub.add_parser("sweep", parents=[common], help="episode cost versus sample budget")
    s.add_argument("--n-traj", type=_int_list, default=[5, 10, 20, 40, 80])
    s.add_argument("--seeds", type=int, default=5, help="number of seeds (0..S-1)")
    s.add_argument("--modes", default="latent_vq,baseline_spline")
    s.add_argument("--checkpoint", help="vq checkpoint for latent_vq")
    s.add_argument("--kl-checkpoint", help="kl checkpoint for latent_kl_spline")
    s.add_argument("--out", help="CSV path (default: OUT_DIR/sweep.csv)")

    r = sub.add_parser("rl", parents=[common], help="PPO on the reach-and-hold task")
    r.add_argument("--chunked", type=_on_off, metavar="on|off", default=True)
    r.add_argument("--checkpoint", help="trained vq model (needed for --chunked on)")
    r.add_argument("--steps", type=int, help="environment steps")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = cfg.planner.seed = cfg.rl.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args, cfg: RunConfig, name: str = "model.ckpt") -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / name
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return path


def _config_from_checkpoint(meta: dict, fallback: RunConfig) -> RunConfig:
    from .pipeline import config_from_dict

    stored = meta.get("extra", {}).get("run_config")
    return config_from_dict(stored) if stored else fallback


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    if args.minutes is not None:
        cfg.corpus.minutes = args.minutes
    if args.rate is not None:
        cfg.corpus.rate_hz = args.rate
    if args.seed is not None:
        cfg.corpus.seed = args.seed
    if not cfg.corpus.minutes > 0 or not cfg.corpus.rate_hz > 0:
        raise ConfigError("minutes and rate must be positive")
    cfg.corpus.path = None
    seq = build_corpus(cfg.corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(seq, out)
    cfg.save(out.with_suffix(".config.json"))
    print(f"wrote {len(seq)} frames x {seq.dof} joints at {seq.rate_hz:g} Hz to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    if args.variant:
        cfg.model.quantization = args.variant
    if args.conditional is not None:
        cfg.model.conditional = args.conditional
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.corpus:
        cfg.corpus.path = args.corpus
    try:
        cfg.model = dataclasses.replace(cfg.model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    corpus = build_corpus(cfg.corpus)

    def report(rec: dict) -> None:
        log.info("epoch %d train_l1 %.5f val_l1 %.5f", rec["epoch"], rec["train_l1"], rec["val_l1"])

    result = train(cfg.model, corpus, cfg.train, metrics_path=out / "metrics.jsonl", on_epoch=report)
    save_model(out / "model.ckpt", result.model, result.normalizer, extra={"run_config": cfg.to_dict()})
    print(f"val_l1 {result.val_l1:.8f}")
    return EXIT_OK


def _validation_arrays(cfg: RunConfig, normalizer):
    corpus = build_corpus(cfg.corpus)
    _, val = corpus.split(cfg.train.holdout)
    q0, act = chunk_arrays(normalizer.apply(val), cfg.model.n, cfg.train.val_stride)
    return torch.tensor(q0, dtype=torch.float32), torch.tensor(act, dtype=torch.float32)


def cmd_eval_recon(args, cfg: RunConfig) -> int:
    model, norm, meta = load_model(_checkpoint(args, cfg))
    cfg = _config_from_checkpoint(meta, cfg)
    q0, act = _validation_arrays(cfg, norm)
    print(f"val_l1 {evaluate_l1(model, q0, act):.8f}")
    return EXIT_OK


def cmd_codebook_stats(args, cfg: RunConfig) -> int:
    model, norm, meta = load_model(_checkpoint(args, cfg))
    if model.codebook is None:
        raise ConfigError("checkpoint has no codebook (kl variant)")
    cfg = _config_from_checkpoint(meta, cfg)
    q0, act = _validation_arrays(cfg, norm)
    usage = code_usage(model, q0, act)
    codes = model.codebook.codes.double().numpy()
    dist = np.linalg.norm(codes[:, None] - codes[None], axis=-1)
    stats = {"usage": usage, "code_norms": np.linalg.norm(codes, axis=1).tolist(),
             "min_pairwise_distance": float(dist[np.triu_indices(len(codes), 1)].min())}
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def _decoder(path: Path) -> tuple[FrozenDecoder, object, RunConfig | None]:
    model, norm, meta = load_model(path)
    stored = meta.get("extra", {}).get("run_config")
    return FrozenDecoder(model), norm, stored


def _planning_setup(args, cfg: RunConfig, modes: list[str]):
    """Decoders per mode plus the tracking env normalized like the first trained model."""
    decoders, norm = {}, None
    paths = {"latent_vq": getattr(args, "checkpoint", None),
             "latent_kl_spline": getattr(args, "kl_checkpoint", None) or getattr(args, "checkpoint", None)}
    for mode in modes:
        if mode == "baseline_spline":
            continue
        if not paths[mode]:
            raise ConfigError(f"mode {mode} needs a checkpoint")
        path = Path(paths[mode])
        if not path.is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        dec, n, _ = _decoder(path)
        decoders[mode] = dec
        norm = norm or n
    if norm is None:
        from .corpus import Normalizer
        corpus = build_corpus(cfg.corpus)
        norm = Normalizer.fit(corpus.split(cfg.train.holdout)[0])
    return decoders, tracking_env(cfg, norm)


def cmd_mpc(args, cfg: RunConfig) -> int:
    if args.mode:
        cfg.planner.mode = args.mode
    if args.n_traj is not None:
        cfg.planner.n_samples = args.n_traj
    try:
        cfg.planner = dataclasses.replace(cfg.planner)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    decoders, env = _planning_setup(args, cfg, [cfg.planner.mode])
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    res = run_episode(env, Planner(env, cfg.planner, decoders.get(cfg.planner.mode)), args.episode_seed)
    record = {"mode": cfg.planner.mode, "n_traj": cfg.planner.n_samples, "seed": args.episode_seed,
              "episode_cost": res.cost, "success_rate": res.success_rate,
              "wall_ms_per_step": res.wall_ms_per_step, "elitism_violations": res.elitism_violations}
    (out / "mpc.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(record))
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise ConfigError(f"unknown mode(s): {', '.join(bad) or '(none)'}")
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    decoders, env = _planning_setup(args, cfg, modes)
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    csv_path = Path(args.out) if args.out else out / "sweep.csv"
    bases = [dataclasses.replace(cfg.planner, mode=m) for m in modes]
    rows = budget_sweep(env, bases, args.n_traj, range(args.seeds), decoders, out_csv=csv_path,
                        progress=lambda r: log.info("%s N=%d seed=%d cost %.4f", r["mode"], r["n_traj"],
                                                    r["seed"], r["episode_cost"]))
    for (mode, n), (mean, std) in sorted(summarize(rows).items()):
        print(f"{mode:16s} N={n:3d} mean {mean:10.4f} std {std:9.4f}")
    print(f"wrote {len(rows)} rows to {csv_path}")
    return EXIT_OK


def cmd_rl(args, cfg: RunConfig) -> int:
    if args.steps is not None:
        cfg.rl.total_steps = args.steps
    decoder, norm = None, None
    if args.chunked or args.checkpoint:
        decoder, norm, _ = _decoder(_checkpoint(args, cfg))
    if norm is None:
        from .corpus import Normalizer
        norm = Normalizer.fit(build_corpus(cfg.corpus).split(cfg.train.holdout)[0])
    env = reach_env(cfg, norm)
    out = _out_dir(cfg)
    cfg.save(out / "config.json")
    tag = "chunked" if args.chunked else "baseline"
    result = train_policy(env, cfg.rl, args.chunked, decoder, curve_path=out / f"rl_{tag}.jsonl",
                          on_iter=lambda rec: log.info("iter %d steps %d return %s eval success %s", rec["iter"],
                                                       rec["env_steps"], rec["mean_return"],
                                                       rec["eval_success_rate"]))
    save_checkpoint(out / f"policy_{tag}.ckpt", dict(result.policy.named_parameters()),
                    {"kind": "policy", "chunked": args.chunked, "rl_config": dataclasses.asdict(cfg.rl)})
    reached = {key: result.steps_to(key, 0.5) for key in ("eval_success_rate", "success_rate")}
    reached = {key: v if np.isfinite(v) else None for key, v in reached.items()}
    print(json.dumps({"chunked": args.chunked, "steps_to_half_success": reached["eval_success_rate"],
                      "steps_to_half_success_training": reached["success_rate"],
                      "final": result.curve[-1] if result.curve else None}))
    return EXIT_OK


COMMANDS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "eval-recon": cmd_eval_recon,
            "codebook-stats": cmd_codebook_stats, "mpc": cmd_mpc, "sweep": cmd_sweep, "rl": cmd_rl}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"chunkspace: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001  runtime aborts map to one exit code
        print(f"chunkspace: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
