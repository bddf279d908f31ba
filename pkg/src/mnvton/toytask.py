"""Synthetic try-on: paint a garment texture into the half of the target the label names.

Each sample has a seeded background gradient, a seeded garment texture
(stripes, checker or gradient), a label ``upper``/``lower`` selecting the
half to repaint, the binary mask of that half and the agnostic target with
the half zeroed. Ground truth tiles the garment texture across the masked
half; video samples translate the texture by a seeded integer offset per
frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io, metrics
from . import rng as rngmod
from .diffusion import DiffusionSchedule, EpsFn, TrainBatch, ddim_loop, model_eps_fn
from .errors import ConfigError
from .model import Batch, Denoiser, make_text_ids

FAMILIES = ("stripes", "checker", "gradient")
LABEL_NAMES = ("upper", "lower")


@dataclass(frozen=True)
class TaskConfig:
    height: int = 16
    width: int = 16
    frames: int = 1
    channels: int = 3
    garment_size: int = 8
    max_shift: int = 2

    def __post_init__(self):
        if self.height % 2:
            raise ConfigError(f"height must be even for half masks, got {self.height}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToySample:
    target: np.ndarray  # [f, h, w, c]
    agnostic: np.ndarray  # [f, h, w, c]
    mask: np.ndarray  # [f, h, w, 1]
    garment: np.ndarray  # [1, hg, wg, c]
    label: str
    seed: int
    family: str = ""

    def mask_rows(self) -> tuple[int, int]:
        h = self.target.shape[1]
        return (0, h // 2) if self.label == "upper" else (h // 2, h)


def _two_colours(rng: np.random.Generator, c: int, min_dist: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    while True:
        a, b = rng.uniform(-1.0, 1.0, size=(2, c))
        if np.linalg.norm(a - b) >= min_dist:
            return a, b


def make_texture(rng: np.random.Generator, size: int, c: int) -> tuple[np.ndarray, str]:
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    ca, cb = _two_colours(rng, c)
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if family == "stripes":
        period = int(rng.choice([2, 4, 8]))
        phase = int(rng.integers(period))
        coord = rr if rng.integers(2) == 0 else cc
        sel = ((coord + phase) // max(period // 2, 1)) % 2 == 0
    elif family == "checker":
        cell = int(rng.choice([1, 2, 4]))
        pr, pc = rng.integers(2 * cell, size=2)
        sel = ((rr + pr) // cell + (cc + pc) // cell) % 2 == 0
    else:
        direction = int(rng.integers(3))
        phase = rng.uniform(0.0, 1.0)
        coord = (rr, cc, (rr + cc) / 2.0)[direction]
        s = ((coord / size) + phase) % 1.0
        tex = ca[None, None] * (1.0 - s[..., None]) + cb[None, None] * s[..., None]
        return tex, family
    tex = np.where(sel[..., None], ca[None, None], cb[None, None])
    return tex, family


def make_background(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    ca, cb = (0.6 * x for x in _two_colours(rng, c))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    rr, cc = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    s = np.clip(0.5 + np.cos(angle) * rr + np.sin(angle) * cc, 0.0, 1.0)
    return ca[None, None] * (1.0 - s[..., None]) + cb[None, None] * s[..., None]


def gen_sample(seed: int, cfg: TaskConfig = TaskConfig(), label: str | None = None) -> ToySample:
    """Deterministic per seed; the label stream is independent of everything else."""
    if label is None:
        label = LABEL_NAMES[int(rngmod.generator(seed, "label").integers(2))]
    if label not in LABEL_NAMES:
        raise ValueError(f"unknown label {label!r}")
    f, h, w, c, g = cfg.frames, cfg.height, cfg.width, cfg.channels, cfg.garment_size
    texture, family = make_texture(rngmod.generator(seed, "texture"), g, c)
    background = make_background(rngmod.generator(seed, "background"), h, w, c)

    shift_rng = rngmod.generator(seed, "motion")
    shifts = np.zeros((f, 2), dtype=np.int64)
    if f > 1:
        steps = shift_rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(f - 1, 2))
        shifts[1:] = np.cumsum(steps, axis=0)

    r0 = 0 if label == "upper" else h // 2
    target = np.repeat(background[None], f, axis=0)
    mask = np.zeros((f, h, w, 1))
    ii, jj = np.meshgrid(np.arange(h // 2), np.arange(w), indexing="ij")
    for k in range(f):
        dy, dx = shifts[k]
        target[k, r0 : r0 + h // 2] = texture[(ii - dy) % g, (jj - dx) % g]
        mask[k, r0 : r0 + h // 2] = 1.0
    agnostic = target * (1.0 - mask)
    return ToySample(target, agnostic, mask, texture[None].copy(), label, int(seed), family)


def swap_label(sample: ToySample, cfg: TaskConfig = TaskConfig()) -> ToySample:
    other = "lower" if sample.label == "upper" else "upper"
    return gen_sample(sample.seed, cfg, label=other)


def collate(samples: list[ToySample], text_len: int = 1) -> TrainBatch:
    batch = Batch(
        text_ids=make_text_ids([s.label for s in samples], text_len),
        garment=np.stack([s.garment for s in samples]),
        noisy=np.stack([s.target for s in samples]),
        agnostic=np.stack([s.agnostic for s in samples]),
        mask=np.stack([s.mask for s in samples]),
    )
    return TrainBatch(batch, batch.noisy)


def sample_seed(run_seed: int, step: int, index: int) -> int:
    """Seed of the ``index``-th training sample at ``step``."""
    return rngmod.derive_seed(run_seed, "train-data", step, index) & 0x7FFFFFFF


def eval_seeds(run_seed: int, n: int) -> list[int]:
    return [rngmod.derive_seed(run_seed, "eval-data", i) & 0x7FFFFFFF for i in range(n)]


def training_batches(run_seed: int, batch: int, cfg: TaskConfig, text_len: int = 1):
    def get(step: int) -> TrainBatch:
        return collate([gen_sample(sample_seed(run_seed, step, i), cfg) for i in range(batch)], text_len)

    return get


# export ---------------------------------------------------------------------------------

def export_sample(sample: ToySample, directory: Path, stem: str, extra: dict | None = None) -> list[Path]:
    """One PPM per frame for target/agnostic/garment plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={extra['config_hash']}" if extra and "config_hash" in extra else None
    written = []
    for k in range(sample.target.shape[0]):
        for kind, arr in (("target", sample.target), ("agnostic", sample.agnostic)):
            p = directory / f"{stem}_{kind}_f{k}.ppm"
            io.write_ppm(p, arr[k], comment=comment)
            written.append(p)
    p = directory / f"{stem}_garment.ppm"
    io.write_ppm(p, sample.garment[0], comment=comment)
    written.append(p)
    r0, r1 = sample.mask_rows()
    side = {
        "label": sample.label,
        "seed": sample.seed,
        "family": sample.family,
        "mask": {"half": sample.label, "rows": [r0, r1], "frames": int(sample.target.shape[0])},
        **(extra or {}),
    }
    p = directory / f"{stem}.json"
    io.write_json(p, side)
    written.append(p)
    return written


# evaluation -----------------------------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    config_hash: str
    samples: list[dict] = field(default_factory=list)

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s["ssim"] for s in self.samples]))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s["psnr"] for s in self.samples]))

    @property
    def mean_masked_l2(self) -> float:
        return float(np.mean([s["masked_l2"] for s in self.samples]))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "config_hash": self.config_hash,
            "mean_ssim": self.mean_ssim,
            "mean_psnr": self.mean_psnr,
            "mean_masked_l2": self.mean_masked_l2,
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(d["variant"], d["config_hash"], list(d["samples"]))

    def write(self, path: Path) -> None:
        io.write_json(path, self.to_dict())

    @classmethod
    def read(cls, path: Path) -> EvalReport:
        return cls.from_dict(io.read_json(path))


def oracle_eps_fn(schedule: DiffusionSchedule, x0: np.ndarray) -> EpsFn:
    """Returns the exact noise that links ``x`` to the known clean target."""

    def eps_fn(x: np.ndarray, t: np.ndarray) -> np.ndarray:
        ab = schedule.alpha_bar[t].reshape((-1,) + (1,) * (x.ndim - 1))
        return (x - np.sqrt(ab) * schedule.signal_scale * x0) / np.sqrt(1.0 - ab)

    return eps_fn


def generate(
    model: Denoiser | EpsFn,
    samples: list[ToySample],
    schedule: DiffusionSchedule,
    steps: int,
    noise_seed: int,
    text_len: int = 1,
    chunk: int = 25,
) -> np.ndarray:
    """DDIM outputs ``[n, f, h, w, c]``; each sample's initial noise depends only on its seed."""
    outs = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        batch = collate(part, text_len).batch
        x_T = np.stack(
            [rngmod.generator(noise_seed, "ddim", s.seed, s.label).standard_normal(s.target.shape) for s in part]
        )
        eps_fn = model_eps_fn(model, batch) if isinstance(model, Denoiser) else model
        outs.append(ddim_loop(schedule, eps_fn, x_T, steps))
    return np.concatenate(outs, axis=0)


def score(generated: np.ndarray, sample: ToySample) -> dict:
    gen, gt = metrics.to_unit(generated), metrics.to_unit(sample.target)
    return {
        "seed": sample.seed,
        "label": sample.label,
        "ssim": metrics.ssim(gen, gt),
        "psnr": metrics.psnr(gen, gt),
        "masked_l2": metrics.masked_l2(gen, gt, sample.mask),
    }


def eval_run(
    model: Denoiser,
    samples: list[ToySample],
    schedule: DiffusionSchedule,
    steps: int,
    noise_seed: int,
    variant: str,
    config_hash: str,
    text_len: int = 1,
) -> EvalReport:
    generated = generate(model, samples, schedule, steps, noise_seed, text_len)
    return EvalReport(variant, config_hash, [score(g, s) for g, s in zip(generated, samples)])


def label_swap_check(
    model: Denoiser,
    samples: list[ToySample],
    schedule: DiffusionSchedule,
    steps: int,
    noise_seed: int,
    cfg: TaskConfig,
    text_len: int = 1,
) -> list[dict]:
    """Regenerate each sample with the label swapped.

    A sample passes when, over the swapped mask region, the output is closer
    to the swapped ground truth than to the original one.
    """
    swapped = [swap_label(s, cfg) for s in samples]
    generated = generate(model, swapped, schedule, steps, noise_seed, text_len)
    return swap_rows(generated, samples, swapped)


def swap_rows(generated: np.ndarray, originals: list[ToySample], swapped: list[ToySample]) -> list[dict]:
    rows = []
    for g, orig, sw in zip(generated, originals, swapped):
        gen = metrics.to_unit(g)
        to_swapped = metrics.masked_l2(gen, metrics.to_unit(sw.target), sw.mask)
        to_original = metrics.masked_l2(gen, metrics.to_unit(orig.target), sw.mask)
        rows.append({
            "seed": orig.seed,
            "label": sw.label,
            "l2_vs_swapped": to_swapped,
            "l2_vs_original": to_original,
            "relocated": bool(to_swapped < to_original),
        })
    return rows
