"""Experiment orchestration: datasets, two-stage training, evaluation, probing, ablations."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io
from .config import RunConfig
from .conditioning import Vocabulary
from .model import ModelConfig, ModelParams, attention_probe, init_params
from .sampling import SampleConfig, initial_noise, sample
from .synthworld import (
    ActionSchema,
    SyntheticSample,
    concentration,
    default_vocabulary,
    eval_hit_at_segment,
    eval_lip_corr,
    eval_temporal_correctness,
    gen_sample,
)
from .training import (
    EncodedSample,
    TrainConfig,
    build_inputs,
    encode_samples,
    extract_audio_adapter,
    new_state,
    stage2_start,
    train,
)

log = logging.getLogger(__name__)

LOG_HEADER = "step,stage,loss,grad_norm,seconds\n"


def log_row(step: int, stage: int, loss: float, grad_norm: float, seconds: float) -> str:
    sec = "" if math.isnan(seconds) else f"{seconds:.3f}"
    return f"{step},{stage},{loss!r},{grad_norm!r},{sec}\n"


# ---------------------------------------------------------------------------
# data


def make_schema(cfg: RunConfig) -> ActionSchema:
    return ActionSchema.build(cfg["model.D"], n_actions=cfg["data.actions"])


def make_dataset(cfg: RunConfig, n: int | None = None, seed: int | None = None, split: str | None = None) -> list[SyntheticSample]:
    schema = make_schema(cfg)
    n = cfg["data.samples"] if n is None else n
    seed = cfg["data.seed"] if seed is None else seed
    split = cfg["data.split"] if split is None else split
    return [
        gen_sample(seed + i, schema, F=cfg["model.F"], K=cfg["data.phases"], N=cfg["model.N"], D=cfg["model.D"],
                   split=split, k_max=cfg["model.k_max"])
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# training


StepHook = Callable[[int, int, float, float, float], None]  # step, stage, loss, grad_norm, seconds


def run_stage(
    model_cfg: ModelConfig,
    params: ModelParams,
    data: Sequence[EncodedSample],
    tcfg: TrainConfig,
    on_step: StepHook | None = None,
    timing: bool = False,
) -> ModelParams:
    """Train ``params`` in place for one stage and return them."""
    state = new_state(params, tcfg.stage, [tcfg.seed, tcfg.stage])
    hook = None
    if on_step is not None:
        hook = lambda step, loss, g, sec: on_step(step, tcfg.stage, loss, g, sec)  # noqa: E731
    train(state, data, tcfg, model_cfg, on_step=hook, timing=timing)
    return state.params


def train_two_stage(
    model_cfg: ModelConfig,
    data: Sequence[EncodedSample],
    tcfg: TrainConfig,
    init_seed: int = 0,
    on_step: StepHook | None = None,
) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Stage 1 on the frozen initial backbone, then stage 2 from a fresh backbone plus the adapter."""
    p1 = run_stage(model_cfg, init_params(model_cfg, init_seed), data, _with(tcfg, stage=1), on_step)
    adapter = extract_audio_adapter(p1)
    p2 = stage2_start(model_cfg, init_seed, adapter)
    return run_stage(model_cfg, p2, data, _with(tcfg, stage=2), on_step), adapter


def train_single_stage(model_cfg, data, tcfg: TrainConfig, init_seed: int = 0, on_step: StepHook | None = None) -> ModelParams:
    return run_stage(model_cfg, init_params(model_cfg, init_seed), data, _with(tcfg, stage=2), on_step)


def _with(tcfg: TrainConfig, **kw) -> TrainConfig:
    d = asdict(tcfg)
    d.update(kw)
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    n: int
    h_at_s: float
    iou: float
    lip_r: float
    shuffled_prompt_h_at_s: float
    shuffled_audio_abs_r: float
    per_sample: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("per_sample")
        return d


def generate(
    model_cfg: ModelConfig,
    params: ModelParams,
    samples: Sequence[SyntheticSample],
    vocab: Vocabulary,
    scfg: SampleConfig,
    batch: int = 25,
    guidance: bool = True,
) -> np.ndarray:
    """Sample one latent per conditioning sample; sample i always gets noise stream i."""
    enc = encode_samples(samples, vocab, model_cfg)
    n = len(enc)
    shape = (n, model_cfg.F, model_cfg.N, model_cfg.D)
    noise = initial_noise(shape, scfg.seed)
    out = np.empty(shape)
    for lo in range(0, n, batch):
        hi = min(n, lo + batch)
        cond = build_inputs(enc[lo:hi], noise[lo:hi], np.ones(hi - lo), model_cfg)
        out[lo:hi] = sample(model_cfg, params.arrays, cond, scfg, guidance=guidance, noise=noise[lo:hi])
    return out


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def evaluate_latents(xs, samples: Sequence[SyntheticSample], schema: ActionSchema, theta_hit: float) -> EvalReport:
    """Metrics plus permutation baselines: latent i scored against sample i+1's prompt or audio."""
    n = len(samples)
    if n == 0:
        raise ValueError("empty evaluation set")
    rows = []
    for i, (x, s) in enumerate(zip(xs, samples)):
        other = samples[(i + 1) % n]
        rows.append(
            {
                "seed": s.seed,
                "h_at_s": eval_hit_at_segment(x, s.prompt, schema, theta_hit),
                "iou": eval_temporal_correctness(x, s.prompt, schema) if s.prompt.K else None,
                "lip_r": eval_lip_corr(x, s.audio),
                "shuffled_prompt_h_at_s": eval_hit_at_segment(x, other.prompt, schema, theta_hit) if n > 1 else None,
                "shuffled_audio_r": eval_lip_corr(x, other.audio) if n > 1 else None,
            }
        )
    return EvalReport(
        n=n,
        h_at_s=_mean(r["h_at_s"] for r in rows),
        iou=_mean(r["iou"] for r in rows),
        lip_r=_mean(r["lip_r"] for r in rows),
        shuffled_prompt_h_at_s=_mean(r["shuffled_prompt_h_at_s"] for r in rows),
        shuffled_audio_abs_r=_mean(None if r["shuffled_audio_r"] is None else abs(r["shuffled_audio_r"]) for r in rows),
        per_sample=rows,
    )


def evaluate_model(model_cfg, params, samples, vocab, scfg, schema, theta_hit, batch=25) -> tuple[EvalReport, np.ndarray]:
    xs = generate(model_cfg, params, samples, vocab, scfg, batch=batch)
    return evaluate_latents(xs, samples, schema, theta_hit), xs


# ---------------------------------------------------------------------------
# attention probe


def probe_inputs(model_cfg: ModelConfig, samples, vocab: Vocabulary, seed: int = 0, t: float = 1.0):
    """Inputs at flow time ``t`` on seeded noise (t=1: the first sampler step)."""
    enc = encode_samples(samples, vocab, model_cfg)
    shape = (len(enc), model_cfg.F, model_cfg.N, model_cfg.D)
    x = initial_noise(shape, seed)
    if t < 1.0:
        x = t * x + (1 - t) * np.stack([e.x0 for e in enc])
    return build_inputs(enc, x, np.full(len(enc), t), model_cfg)


def probe_concentration(model_cfg, params, samples, vocab, layers, seed: int = 0, t: float = 1.0) -> dict[int, list[float]]:
    """Per-sample phase concentration at each requested layer."""
    inp = probe_inputs(model_cfg, samples, vocab, seed, t)
    K = max(s.prompt.K for s in samples)
    masses = attention_probe(model_cfg, params.arrays, inp, layers, K=K)
    return {l: [concentration(masses[l][b], s.prompt) for b, s in enumerate(samples)] for l in layers}


def probe_layers(L: int) -> tuple[int, int]:
    """(early, late) layers compared for phase focus: ceil(L/6) and ceil(2L/3)."""
    return math.ceil(L / 6), math.ceil(2 * L / 3)


# ---------------------------------------------------------------------------
# ablation ladder

ABLATION_ROWS = (
    ("base", {"model.phase_embeddings": False, "model.audio_schedule": "constant"}, False),
    ("+paca", {"model.phase_embeddings": True, "model.audio_schedule": "constant"}, False),
    ("+progressive", {"model.phase_embeddings": True, "model.audio_schedule": "progressive"}, False),
    ("full", {"model.phase_embeddings": True, "model.audio_schedule": "progressive"}, True),
)


def run_ablation(
    cfg: RunConfig,
    train_samples: Sequence[SyntheticSample],
    eval_samples: Sequence[SyntheticSample],
    seeds: Sequence[int] = (0, 1, 2),
    progress: Callable[[str], None] | None = None,
) -> list[dict]:
    """One row per ladder rung with per-seed and median H@S, IoU and lip r."""
    vocab = default_vocabulary()
    schema = make_schema(cfg)
    rows = []
    for name, overrides, two_stage in ABLATION_ROWS:
        runs = []
        for seed in seeds:
            rc = RunConfig(dict(cfg.values))
            for k, v in overrides.items():
                rc.set(k, v)
            rc.set("train.seed", seed)
            rc.set("model.seed", seed)
            mc = rc.model()
            enc = encode_samples(train_samples, vocab, mc)
            tcfg = rc.train()
            if two_stage:
                params, _ = train_two_stage(mc, enc, tcfg, init_seed=seed)
            else:
                params = train_single_stage(mc, enc, tcfg, init_seed=seed)
            report, _ = evaluate_model(mc, params, eval_samples, vocab, rc.sample(), schema, rc["eval.theta_hit"], rc["eval.batch"])
            runs.append({"seed": seed, "h_at_s": report.h_at_s, "iou": report.iou, "lip_r": report.lip_r})
            if progress:
                progress(f"{name} seed {seed}: H@S {report.h_at_s:.3f} IoU {report.iou:.3f} r {report.lip_r:.3f}")
        rows.append(
            {
                "row": name,
                "runs": runs,
                **{m: float(np.median([r[m] for r in runs])) for m in ("h_at_s", "iou", "lip_r")},
            }
        )
    return rows


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_ablation(rows: Sequence[dict]) -> str:
    lines = [f"{'row':<14}{'H@S':>8}{'IoU':>8}{'lip r':>8}"]
    for r in rows:
        lines.append(f"{r['row']:<14}{r['h_at_s']:>8.3f}{r['iou']:>8.3f}{r['lip_r']:>8.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cached end-to-end runs


def _cached(out: Path, cfg_text: str):
    path = out / "report.json"
    if path.exists():
        report = json.loads(path.read_text(encoding="utf-8"))
        if report.get("config") == cfg_text:
            return report
    return None


def end_to_end(
    cfg: RunConfig,
    out_dir,
    eval_n: int = 50,
    eval_seed: int = 100_000,
    progress: Callable[[str], None] | None = None,
) -> dict:
    """Two-stage training, held-out evaluation and probe; reuses ``out_dir/report.json`` if the config matches."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text() + f"# eval {eval_n} from seed {eval_seed}\n"
    report = _cached(out, text)
    if report is not None:
        return report
    vocab = default_vocabulary()
    schema = make_schema(cfg)
    mc = cfg.model()
    train_samples = make_dataset(cfg, split="train")
    eval_samples = make_dataset(cfg, n=eval_n, seed=eval_seed, split="eval")
    enc = encode_samples(train_samples, vocab, mc)

    with open(out / "train_log.csv", "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER)

        def on_step(step, stage, loss, g, sec):
            fh.write(log_row(step, stage, loss, g, sec))
            if progress and step % 100 == 0:
                fh.flush()
                progress(f"stage {stage} step {step} loss {loss:.4f}")

        params, adapter = train_two_stage(mc, enc, cfg.train(), cfg["model.seed"], on_step)
    io.save_checkpoint(out / "final.ckpt", params, mc, stage=2, step=cfg["train.steps"])
    io.save_adapter(out / "adapter.ckpt", adapter, mc, step=cfg["train.steps"])
    ev, xs = evaluate_model(mc, params, eval_samples, vocab, cfg.sample(), schema, cfg["eval.theta_hit"], cfg["eval.batch"])
    early, late = probe_layers(mc.L)
    conc = probe_concentration(mc, params, eval_samples, vocab, (early, late), seed=cfg["sample.seed"])
    report = {
        "config": text,
        "eval": ev.summary(),
        "per_sample": ev.per_sample,
        "probe": {"early": early, "late": late, "early_conc": conc[early], "late_conc": conc[late]},
    }
    write_json(out / "report.json", report)
    return report


def ablation_cached(cfg: RunConfig, out_dir, seeds=(0, 1, 2), eval_n: int = 50, eval_seed: int = 100_000, progress=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text() + f"# ablation seeds {list(seeds)} eval {eval_n} from seed {eval_seed}\n"
    report = _cached(out, text)
    if report is not None:
        return report
    rows = run_ablation(
        cfg, make_dataset(cfg, split="train"), make_dataset(cfg, n=eval_n, seed=eval_seed, split="eval"), seeds, progress
    )
    report = {"config": text, "rows": rows}
    write_json(out / "report.json", report)
    return report
