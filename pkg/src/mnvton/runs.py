"""Run directories: train, evaluate, sample and analyse from a ``RunConfig``.

A run directory holds::

    config.json        the full config plus its content hash
    checkpoint.bin     parameters, header carries the config hash
    metrics.jsonl      a config-hash record, then one loss record per log interval
                       (bit-reproducible)
    timing.jsonl       the same header, then wall-clock per log interval
    reports/*.json     evaluation, label-swap, cost and PCA reports
    images/*.ppm       generated samples
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, io, toytask
from . import rng as rngmod
from .blocks import BlockStack, BlockVariant
from .config import RunConfig
from .diffusion import TrainConfig, train
from .errors import ConfigError, NumericalError
from .modality import ModalityLayout, TokenStream
from .model import Denoiser, ModelConfig
from .tensor import Tensor, grad_check_many, mean, mul, square, sub
from .toytask import EvalReport, TaskConfig

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"


def eval_threads() -> int:
    """Evaluation parallelism from ``MNVTON_THREADS`` (default 1)."""
    raw = os.environ.get("MNVTON_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MNVTON_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MNVTON_THREADS must be >= 1, got {n}")
    return n


def build_model(cfg: RunConfig) -> Denoiser:
    return Denoiser(cfg.model, cfg.variant, cfg.seed)


def _header(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash, "variant": cfg.variant, "seed": cfg.seed, **extra}


def write_config(cfg: RunConfig, out: Path) -> None:
    io.write_json(out / CONFIG_FILE, {**cfg.to_dict(), "config_hash": cfg.hash})


def read_config(out: Path) -> RunConfig:
    try:
        data = io.read_json(Path(out) / CONFIG_FILE)
    except ValueError as exc:
        raise ConfigError(f"{out / CONFIG_FILE}: {exc}") from exc
    stored = data.pop("config_hash", None)
    cfg = RunConfig.from_dict(data)
    if stored is not None and stored != cfg.hash:
        raise ConfigError(f"{out / CONFIG_FILE}: stored hash {stored} does not match contents {cfg.hash}")
    return cfg


@dataclass
class TrainSummary:
    out: Path
    config_hash: str
    final_loss: float
    steps: int


def train_run(cfg: RunConfig, out: Path | None = None) -> TrainSummary:
    """Train from scratch and persist everything needed to reproduce the run."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out)
    model = build_model(cfg)
    schedule = cfg.schedule.build()
    batches = toytask.training_batches(cfg.seed, cfg.train.batch, cfg.task, cfg.model.text_len)
    with open(out / METRICS_FILE, "w") as m, open(out / TIMING_FILE, "w") as t:
        for stream in (m, t):
            stream.write(json.dumps({"config_hash": cfg.hash}) + "\n")
        result = train(model, schedule, cfg.train, batches, rngmod.generator(cfg.seed, "train"), m, t)
    io.save_checkpoint(out / CHECKPOINT_FILE, model.state_dict(), _header(cfg, step=cfg.train.steps))
    return TrainSummary(out, cfg.hash, result.metrics[-1]["loss"], cfg.train.steps)


def load_run(out: Path) -> tuple[RunConfig, Denoiser]:
    """Config and trained model of a run directory; refuses mismatched checkpoints."""
    out = Path(out)
    cfg = read_config(out)
    state, header = io.load_checkpoint(out / CHECKPOINT_FILE)
    if header.get("config_hash") != cfg.hash:
        raise ConfigError(
            f"checkpoint hash {header.get('config_hash')} does not match config hash {cfg.hash}"
        )
    model = build_model(cfg)
    model.load_state_dict(state)
    return cfg, model


def eval_samples(cfg: RunConfig, n: int) -> list[toytask.ToySample]:
    return [toytask.gen_sample(s, cfg.task) for s in toytask.eval_seeds(cfg.seed, n)]


def _parallel_generate(model, samples, cfg: RunConfig) -> np.ndarray:
    schedule = cfg.schedule.build()
    workers = min(eval_threads(), max(len(samples), 1))

    def run(part):
        return toytask.generate(model, part, schedule, cfg.schedule.sample_steps, cfg.seed, cfg.model.text_len)

    if workers == 1:
        return run(samples)
    parts = [samples[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(workers) as pool:
        outs = list(pool.map(run, parts))
    # undo the strided split so outputs line up with ``samples``
    result = np.empty((len(samples),) + outs[0].shape[1:])
    for i, o in enumerate(outs):
        result[i::workers] = o
    return result


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def evaluate(cfg: RunConfig, model: Denoiser, n: int | None = None) -> EvalReport:
    samples = eval_samples(cfg, cfg.eval.n_samples if n is None else n)
    generated = _parallel_generate(model, samples, cfg)
    _check_finite(generated, "generated samples")
    return EvalReport(cfg.variant, cfg.hash, [toytask.score(g, s) for g, s in zip(generated, samples)])


def label_swap(cfg: RunConfig, model: Denoiser, n: int | None = None) -> dict:
    samples = eval_samples(cfg, cfg.eval.swap_samples if n is None else n)
    swapped = [toytask.swap_label(s, cfg.task) for s in samples]
    generated = _parallel_generate(model, swapped, cfg)
    _check_finite(generated, "label-swapped samples")
    rows = toytask.swap_rows(generated, samples, swapped)
    return {
        "config_hash": cfg.hash,
        "variant": cfg.variant,
        "relocated_fraction": float(np.mean([r["relocated"] for r in rows])),
        "samples": rows,
    }


def eval_dir(out: Path, swap: bool = True) -> tuple[EvalReport, dict | None]:
    out = Path(out)
    cfg, model = load_run(out)
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    report = evaluate(cfg, model)
    report.write(reports / "eval.json")
    swap_report = None
    if swap:
        swap_report = label_swap(cfg, model)
        io.write_json(reports / "label_swap.json", swap_report)
    return report, swap_report


def sample_dir(out: Path, n: int, scale: int = 4) -> list[Path]:
    """Generate ``n`` evaluation samples and write them as PPM frames."""
    out = Path(out)
    cfg, model = load_run(out)
    samples = eval_samples(cfg, n)
    generated = _parallel_generate(model, samples, cfg)
    _check_finite(generated, "generated samples")
    images = out / "images"
    images.mkdir(exist_ok=True)
    written = []
    for i, (g, s) in enumerate(zip(generated, samples)):
        for k in range(g.shape[0]):
            p = images / f"sample{i:03d}_{s.label}_f{k}.ppm"
            io.write_ppm(p, g[k], scale, comment=f"config_hash={cfg.hash}")
            written.append(p)
    io.write_json(images / "index.json", {
        "config_hash": cfg.hash,
        "samples": [{"index": i, "seed": s.seed, "label": s.label, "family": s.family} for i, s in enumerate(samples)],
    })
    return written


def gen_data(cfg: RunConfig, out: Path, n: int) -> list[Path]:
    data = Path(out) / "data"
    written = []
    for i, seed in enumerate(toytask.eval_seeds(cfg.seed, n)):
        sample = toytask.gen_sample(seed, cfg.task)
        written += toytask.export_sample(sample, data, f"sample{i:03d}", {"config_hash": cfg.hash})
    return written


# ablation ---------------------------------------------------------------------------------

ABLATION_VARIANTS = (BlockVariant.MN_V1.value, BlockVariant.MN_V2.value, BlockVariant.MN_V3.value)


def ablation_configs(base: RunConfig, variants, seeds, out: Path) -> list[RunConfig]:
    return [
        base.replace(variant=v, seed=s, out=str(Path(out) / f"{v}_s{s}"))
        for v in variants
        for s in seeds
    ]


def ablate(base: RunConfig, out: Path, variants=ABLATION_VARIANTS, seeds=range(5)) -> analysis.AblationTable:
    out = Path(out)
    configs = ablation_configs(base, variants, list(seeds), out)

    def run(cfg: RunConfig) -> EvalReport:
        train_run(cfg)
        report = evaluate(cfg, load_run(Path(cfg.out))[1])
        (Path(cfg.out) / "reports").mkdir(exist_ok=True)
        report.write(Path(cfg.out) / "reports" / "eval.json")
        return report

    table = analysis.variant_ablation(configs, run)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    io.write_json(out / "reports" / "ablation.json", {**table.to_dict(), "budget_hash": io.content_hash(base.budget())})
    return table


# gradient check -----------------------------------------------------------------------------

def tiny_model_config(**overrides) -> ModelConfig:
    """d=8, H=2, N=2 on an 8x8 target with a 4x4 garment: 1 + 4 + 16 = 21 tokens."""
    base = dict(d=8, heads=2, depth=2, patch=2, freq_dim=16, garment_size=4, height=8, width=8)
    base.update(overrides)
    return ModelConfig(**base)


def randomize(model: Denoiser, seed: int, scale: float = 0.3) -> None:
    """Overwrite every parameter, zero-initialised gates included, with seeded noise."""
    g = rngmod.generator(seed, "gradcheck-params")
    for _, p in model.named_parameters():
        p.data = g.normal(0.0, scale, size=p.shape)


def model_gradcheck(mcfg: ModelConfig, variant, seed: int = 0, batch: int = 2, h: float = 1e-5) -> float:
    """Worst relative gradient error of an MSE loss over every parameter of one variant."""
    model = Denoiser(mcfg, variant, seed)
    randomize(model, seed)
    task = TaskConfig(
        height=mcfg.height, width=mcfg.width, frames=mcfg.frames,
        channels=mcfg.channels, garment_size=mcfg.garment_size, max_shift=1,
    )
    tb = toytask.collate([toytask.gen_sample(seed * 1000 + i, task) for i in range(batch)], mcfg.text_len)
    g = rngmod.generator(seed, "gradcheck-data")
    noisy = tb.batch.with_noisy(tb.target + 0.5 * g.standard_normal(tb.target.shape))
    t = g.integers(0, 100, size=batch)
    target = Tensor(g.standard_normal((batch, mcfg.target_grid.tokens(mcfg.patch), mcfg.patch_dim)))

    def loss():
        return mean(square(sub(model(noisy, t), target)))

    return grad_check_many(loss, model.parameters(), h)


STACK_COUNTS = (1, 4, 16)  # text, garment, target tokens: L = 21


def stack_gradcheck(variant, d: int = 8, heads: int = 2, depth: int = 2, counts=STACK_COUNTS,
                    seed: int = 0, batch: int = 1, h: float = 1e-5) -> float:
    """Worst relative gradient error of a ``depth``-layer block stack.

    Leaves are the input tokens, the conditioning vector and every block
    parameter (gates randomised so no branch is silently zero).
    """
    g = rngmod.generator(seed, "gradcheck-stack", BlockVariant(variant).value)
    stack = BlockStack(g, variant, d, heads, depth)
    for _, p in stack.named_parameters():
        p.data = g.normal(0.0, 0.3, size=p.shape)
    layout = ModalityLayout.from_counts(*counts)
    x = Tensor(g.standard_normal((batch, layout.total, d)), requires_grad=True)
    cond = Tensor(g.normal(0.0, 0.3, size=(batch, 6 * d)), requires_grad=True)
    # fixed random readout; variants that drop garment tokens use its leading rows
    w = g.standard_normal((batch, layout.total, d))

    def loss():
        out = stack(TokenStream(x, layout), cond).tokens
        return mean(mul(out, Tensor(w[:, : out.shape[-2]])))

    return grad_check_many(loss, [x, cond, *stack.parameters()], h)


def gradcheck_all(d: int = 8, heads: int = 2, depth: int = 2, seed: int = 0) -> dict[str, float]:
    return {v.value: stack_gradcheck(v, d, heads, depth, seed=seed) for v in BlockVariant}


# misc reports -------------------------------------------------------------------------------

def pca_dir(out: Path, k: int = 3, t: int = 0, n_samples: int = 1, scale: int = 8) -> dict:
    out = Path(out)
    cfg, model = load_run(out)
    samples = eval_samples(cfg, n_samples)
    reports = out / "reports"
    images = out / "images"
    reports.mkdir(exist_ok=True)
    images.mkdir(exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        batch = toytask.collate([s], cfg.model.text_len).batch
        for proj in analysis.pca_project(model, batch, k, t):
            maps = proj.heatmaps()
            corr = [analysis.texture_correlation(m, s.garment[0], cfg.model.patch) for m in maps]
            for j, m in enumerate(maps):
                span = np.max(np.abs(m)) or 1.0
                io.write_ppm(images / f"pca_s{i}_b{proj.block}_c{j}.ppm", (m / span)[..., None], scale,
                             comment=f"config_hash={cfg.hash}")
            entries.append({
                "sample": i,
                "seed": s.seed,
                "block": proj.block,
                "explained_ratio": proj.explained_ratio.tolist(),
                "texture_correlation": corr,
                "heatmaps": maps.tolist(),
            })
    report = {"config_hash": cfg.hash, "variant": cfg.variant, "k": k, "t": t, "projections": entries}
    io.write_json(reports / "pca.json", report)
    return report


def cost(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash, **analysis.cost_report(cfg.model, cfg.seed)}


__all__ = [
    "TrainConfig", "TrainSummary", "ablate", "build_model", "cost", "eval_dir", "evaluate",
    "gen_data", "gradcheck_all", "label_swap", "load_run", "model_gradcheck", "pca_dir",
    "read_config", "sample_dir", "stack_gradcheck", "tiny_model_config", "train_run",
]
