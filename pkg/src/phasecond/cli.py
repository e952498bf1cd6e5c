"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 artifact compatibility error,
4 numerical failure.  Every failure prints one line ``error[<kind>]: <message>``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig
from .conditioning import AudioTrack, Vocabulary
from .experiments import (
    LOG_HEADER,
    ablation_cached,
    evaluate_latents,
    format_ablation,
    generate,
    log_row,
    make_dataset,
    make_schema,
)
from .model import ModelError, ModelParams, attention_probe, init_params
from .prompt import PromptError, parse_prompt, validate_and_normalize
from .sampling import SamplingError, initial_noise, sample
from .synthworld import DEFAULT_DURATION, SynthError, SyntheticSample, default_vocabulary, gen_sample
from .training import (
    InjectionError,
    NumericalError,
    TrainingError,
    build_inputs,
    encode_samples,
    extract_audio_adapter,
    inject_audio_adapter,
    new_state,
    train,
)

EXIT_INPUT = 2
EXIT_COMPAT = 3
EXIT_NUMERIC = 4


class InputError(Exception):
    pass


class CompatError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become a single-line input diagnostic."""

    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def _sample_files(data_dir: Path) -> list[Path]:
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise InputError(f"{data_dir}: no manifest.txt (not a dataset directory)")
    files = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            files.append(data_dir / line.split()[0])
    if not files:
        raise InputError(f"{data_dir}: dataset is empty")
    return files


def _load_dataset(data_dir) -> tuple[list[SyntheticSample], Vocabulary]:
    data_dir = Path(data_dir)
    samples = [io.load_sample(p) for p in _sample_files(data_dir)]
    vocab_path = data_dir / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else default_vocabulary()
    return samples, vocab


def _schedule_text(schedule) -> str:
    return ";".join(f"{a}:{s!r}-{e!r}" for a, (s, e) in schedule) or "-"


def _read_prompt(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    return text, validate_and_normalize(parse_prompt(text), DEFAULT_DURATION)


def _conditions(args, cfg: RunConfig) -> tuple[AudioTrack, np.ndarray]:
    """Audio track and reference latent from --synth-audio or --audio."""
    mc = cfg.model()
    if args.synth_audio is not None:
        s = gen_sample(args.synth_audio, make_schema(cfg), F=mc.F, K=0, N=mc.N, D=mc.D)
        return s.audio, s.ref
    if args.audio is None:
        raise InputError("one of --audio or --synth-audio is required")
    path = Path(args.audio)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from None
    if blob.startswith(io.MAGIC):
        s = io.load_sample(path)
        return s.audio, s.ref
    try:
        env = np.array([float(x) for x in blob.decode("utf-8").split()])
    except ValueError:
        raise InputError(f"{path}: expected one envelope value per line") from None
    if env.size < mc.F or not np.all(np.isfinite(env)):
        raise InputError(f"{path}: need at least {mc.F} finite envelope values, got {env.size}")
    return AudioTrack.from_envelope(env), np.zeros((mc.N, mc.D))


def _load_ckpt(args, cfg: RunConfig) -> tuple[ModelParams, dict, Vocabulary]:
    params, meta = io.load_checkpoint(args.checkpoint, cfg.model(), force=args.force)
    vocab = Vocabulary(meta["vocab"]) if "vocab" in meta else default_vocabulary()
    return params, meta, vocab


def _single_inputs(cfg: RunConfig, prompt_text: str, prompt, audio: AudioTrack, ref: np.ndarray, vocab: Vocabulary):
    mc = cfg.model()
    s = SyntheticSample(
        x0=np.zeros((mc.F, mc.N, mc.D)), audio=audio, prompt=prompt, prompt_text=prompt_text,
        caption="", schedule=[], ref=ref,
    )
    return [s], encode_samples([s], vocab, mc)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise InputError(f"{out}: directory is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("sample_*.pcnd"):
        stale.unlink()
    samples = make_dataset(cfg)
    schema = make_schema(cfg)
    lines = ["# file seed K schedule(action:start-end;...)\n"]
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.pcnd"
        io.save_sample(out / name, s)
        lines.append(f"{name} {s.seed} {s.K} {_schedule_text(s.schedule)}\n")
    (out / "manifest.txt").write_text("".join(lines), encoding="utf-8")
    default_vocabulary().save(out / "vocab.txt")
    gt = evaluate_latents([s.x0 for s in samples], samples, schema, cfg["eval.theta_hit"])
    print(f"generated {len(samples)} samples in {out}; ground truth H@S {gt.h_at_s:.3f} lip r {gt.lip_r:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    stage = args.stage
    mc = cfg.model()
    tcfg = cfg.train(stage)
    samples, vocab = _load_dataset(args.data)
    params = init_params(mc, cfg["model.seed"])
    if args.init_from:
        params, _ = io.load_checkpoint(args.init_from, mc, force=args.force)
    if stage == 2 and not args.no_adapter:
        if not args.init_adapter:
            raise CompatError("stage 2 needs --init-adapter (the stage-1 adapter) or --no-adapter")
        adapter, meta = io.load_adapter(args.init_adapter)
        params = inject_audio_adapter(params, adapter)
        if meta.get("config_hash") != io.config_hash(mc) and not args.force:
            raise CompatError(
                f"{args.init_adapter}: adapter config hash {meta.get('config_hash')} != {io.config_hash(mc)} (use --force)"
            )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"vocab": vocab.words}
    io.save_checkpoint(out / f"stage{stage}_init.ckpt", params, mc, stage, 0, extra)
    state = new_state(params, stage, [tcfg.seed, stage])
    every = cfg["train.checkpoint_every"]
    enc = encode_samples(samples, vocab, mc)
    with open(out / f"stage{stage}_log.csv", "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER)

        def on_step(step, loss, g, sec):
            fh.write(log_row(step, stage, loss, g, sec))
            if every and step % every == 0 and step < tcfg.steps:
                io.save_checkpoint(out / f"stage{stage}_step{step:06d}.ckpt", state.params, mc, stage, step, extra)

        train(state, enc, tcfg, mc, on_step=on_step, timing=cfg["train.timing"])
    io.save_checkpoint(out / f"stage{stage}_final.ckpt", state.params, mc, stage, state.step, extra)
    if stage == 1:
        io.save_adapter(out / "adapter.ckpt", extract_audio_adapter(state.params), mc, state.step)
    print(f"stage {stage}: {state.step} steps on {len(samples)} samples; checkpoints in {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    mc = cfg.model()
    params, meta, vocab = _load_ckpt(args, cfg)
    text, prompt = _read_prompt(args.prompt)
    audio, ref = _conditions(args, cfg)
    scfg = cfg.sample()
    _, enc = _single_inputs(cfg, text, prompt, audio, ref, vocab)
    noise = initial_noise((1, mc.F, mc.N, mc.D), scfg.seed)
    cond = build_inputs(enc, noise, np.ones(1), mc)
    x = sample(mc, params.arrays, cond, scfg, guidance=not args.single_branch, noise=noise)[0]
    info = {
        "config_hash": meta["config_hash"],
        "steps": scfg.steps,
        "cfg_text": scfg.cfg_text,
        "cfg_audio": scfg.cfg_audio,
        "seed": scfg.seed,
        "order": scfg.order,
        "guidance": not args.single_branch,
    }
    io.save_latent(args.out, x, text, info)
    print(f"wrote latent {x.shape} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples, _ = _load_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    schema = make_schema(cfg)
    if args.ground_truth:
        xs = [s.x0 for s in samples]
    else:
        if not args.checkpoint:
            raise InputError("--checkpoint is required unless --ground-truth is given")
        params, _, vocab = _load_ckpt(args, cfg)
        xs = generate(cfg.model(), params, samples, vocab, cfg.sample(), batch=cfg["eval.batch"])
    report = evaluate_latents(xs, samples, schema, cfg["eval.theta_hit"])
    if args.out:
        cols = ["seed", "h_at_s", "iou", "lip_r", "shuffled_prompt_h_at_s", "shuffled_audio_r"]
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in report.per_sample:
                w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
            w.writerow(["mean", *(repr(getattr(report, c)) for c in
                                  ("h_at_s", "iou", "lip_r", "shuffled_prompt_h_at_s", "shuffled_audio_abs_r"))])
    print(
        f"n={report.n} H@S {report.h_at_s:.3f} IoU {report.iou:.3f} lip r {report.lip_r:.3f} | "
        f"shuffled prompt H@S {report.shuffled_prompt_h_at_s:.3f} shuffled audio |r| {report.shuffled_audio_abs_r:.3f}"
    )
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args)
    mc = cfg.model()
    try:
        layers = [int(x) for x in args.layers.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--layers expects comma-separated integers, got {args.layers!r}") from None
    for l in layers:
        if not 1 <= l <= mc.L:
            raise InputError(f"layer {l} outside 1..{mc.L}")
    params, _, vocab = _load_ckpt(args, cfg)
    text, prompt = _read_prompt(args.prompt)
    audio, ref = _conditions(args, cfg)
    _, enc = _single_inputs(cfg, text, prompt, audio, ref, vocab)
    t = args.t
    if not 0 <= t <= 1:
        raise InputError(f"--t must lie in [0, 1], got {t}")
    x = initial_noise((1, mc.F, mc.N, mc.D), cfg["sample.seed"])
    masses = attention_probe(mc, params.arrays, build_inputs(enc, x, np.full(1, t), mc), layers, K=prompt.K)
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "frame", "block", "mass"])
    for l in layers:
        for f in range(mc.F):
            for k in range(prompt.K + 1):
                w.writerow([l, f, k, repr(float(masses[l][0, f, k]))])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise InputError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    out = Path(args.out)
    report = ablation_cached(cfg, out, seeds, eval_n=args.eval_samples, eval_seed=args.eval_seed,
                             progress=lambda m: print(m, flush=True))
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "h_at_s", "iou", "lip_r"])
        for r in report["rows"]:
            w.writerow([r["row"], repr(r["h_at_s"]), repr(r["iou"]), repr(r["lip_r"])])
    print(format_ablation(report["rows"]))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phasecond", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    def conditions(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--audio", help="sample file or text file with one envelope value per line")
        g.add_argument("--synth-audio", type=int, metavar="SEED", help="use a synthetic envelope and reference")

    sp = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="run one training stage"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--init-adapter", help="stage-1 adapter file to inject")
    sp.add_argument("--no-adapter", action="store_true", help="stage 2 without a stage-1 adapter (ablation)")
    sp.add_argument("--init-from", help="start from this checkpoint instead of a fresh initialization")
    sp.add_argument("--force", action="store_true", help="ignore config hash mismatches")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("sample", help="generate one latent video"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    conditions(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--single-branch", action="store_true", help="fully conditioned branch only, no guidance")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sample)

    sp = common(sub.add_parser("eval", help="score a checkpoint on a dataset"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--ground-truth", action="store_true", help="score the dataset latents themselves")
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--out", help="per-sample CSV")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("probe", help="text attention mass per layer, frame and block"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--layers", required=True, help="comma-separated 1-based layers")
    conditions(sp)
    sp.add_argument("--t", type=float, default=1.0, help="flow time of the probed input")
    sp.add_argument("--out")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_probe)

    sp = common(sub.add_parser("ablate", help="four-row component ablation"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--eval-samples", type=int, default=50)
    sp.add_argument("--eval-seed", type=int, default=100_000)
    sp.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, code: int, err) -> int:
    msg = " ".join(str(err).split())
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (InjectionError, CompatError, io.CompatibilityError) as e:
        return _fail("compat", EXIT_COMPAT, e)
    except (NumericalError, SamplingError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except (InputError, ConfigError, PromptError, io.FormatError, SynthError, ModelError, TrainingError, OSError) as e:
        return _fail("input", EXIT_INPUT, e)
    except ValueError as e:
        return _fail("input", EXIT_INPUT, e)


if __name__ == "__main__":
    sys.exit(main())
