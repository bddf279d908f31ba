"""Parameter/FLOP accounting, PCA of garment features and variant ablation tables.

FLOP convention: one multiply-add counts as 2 FLOPs. Per layer the attention
cost is ``L_q*d^2`` (query projection) + ``2*L_kv*d^2`` (key/value
projections) + ``L_q*d^2`` (output projection) + ``2*L_q*L_kv*d`` (scores
and value mixing) multiply-adds. Heads only partition ``d`` and do not
change the count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockVariant
from .errors import ContractError
from .model import Batch, Denoiser, ModelConfig
from .modality import ModalityTag
from .tensor import no_grad

ALL_VARIANTS = tuple(BlockVariant)


def count_params(model) -> int:
    """Exact number of trainable scalars."""
    return int(model.num_parameters())


def _attn_macs(lq: int, lkv: int, d: int) -> int:
    return lq * d * d + 2 * lkv * d * d + lq * d * d + 2 * lq * lkv * d


def attention_flops(
    L_text: int, L_garment: int, L_target: int, d: int, H: int, N: int, variant: BlockVariant | str
) -> int:
    """Attention FLOPs for one forward pass of an ``N``-layer stack."""
    variant = BlockVariant(variant)
    if min(d, H, N) <= 0 or min(L_text, L_garment, L_target) < 0:
        raise ValueError("dimensions must be positive and lengths non-negative")
    L = L_text + L_garment + L_target
    main = L_text + L_target
    if variant.is_mn:
        macs = N * _attn_macs(L, L, d)
    elif variant is BlockVariant.NAIVE_SPLIT:
        # first layer: queries text+target over all keys; afterwards garment is gone
        macs = _attn_macs(main, L, d) + (N - 1) * _attn_macs(main, main, d)
    else:
        ref = _attn_macs(L_garment, L_garment, d) if L_garment else 0
        macs = N * (ref + _attn_macs(main, main + L_garment, d))
    return 2 * macs


def _layer_activations(lq: int, lkv_self: int, lkv: int, d: int, H: int, mlp_ratio: int) -> int:
    # normed input, q, k, v, two score-sized buffers, attention output, MLP hidden
    return lkv_self * d + lq * d + 2 * lkv * d + 2 * H * lq * lkv + lq * d + lq * mlp_ratio * d


def peak_activation_elements(
    L_text: int, L_garment: int, L_target: int, d: int, H: int, variant: BlockVariant | str, mlp_ratio: int = 4
) -> int:
    """Largest single-layer activation footprint (both stacks for the dual network)."""
    variant = BlockVariant(variant)
    L = L_text + L_garment + L_target
    main = L_text + L_target
    if variant.is_mn:
        return _layer_activations(L, L, L, d, H, mlp_ratio)
    if variant is BlockVariant.NAIVE_SPLIT:
        return _layer_activations(main, L, L, d, H, mlp_ratio)
    ref = _layer_activations(L_garment, L_garment, L_garment, d, H, mlp_ratio) if L_garment else 0
    return ref + _layer_activations(main, main, main + L_garment, d, H, mlp_ratio)


def sequence_lengths(cfg: ModelConfig) -> tuple[int, int, int]:
    return cfg.text_len, cfg.garment_grid.tokens(cfg.patch), cfg.target_grid.tokens(cfg.patch)


def cost_report(cfg: ModelConfig, seed: int = 0) -> dict:
    lt, lg, ltg = sequence_lengths(cfg)
    rows = {}
    for v in ALL_VARIANTS:
        rows[v.value] = {
            "trainable_params": count_params(Denoiser(cfg, v, seed)),
            "attention_flops": attention_flops(lt, lg, ltg, cfg.d, cfg.heads, cfg.depth, v),
            "peak_activation_elements": peak_activation_elements(lt, lg, ltg, cfg.d, cfg.heads, v, cfg.mlp_ratio),
        }
    single = rows[BlockVariant.MN_V3.value]
    dual = rows[BlockVariant.DUAL.value]
    return {
        "dims": {"d": cfg.d, "heads": cfg.heads, "depth": cfg.depth},
        "lengths": {"text": lt, "garment": lg, "target": ltg},
        "flop_convention": "1 multiply-add = 2 FLOPs",
        "variants": rows,
        "dual_over_single_params": dual["trainable_params"] / single["trainable_params"],
        "dual_over_single_flops": dual["attention_flops"] / single["attention_flops"],
    }


# PCA --------------------------------------------------------------------------------------

@dataclass
class PCAProjection:
    block: int
    components: np.ndarray  # [d, k], orthonormal columns
    scores: np.ndarray  # [L_garment, k]
    explained_ratio: np.ndarray  # [k]
    grid: tuple[int, int]  # garment token grid (rows, cols)

    def heatmaps(self) -> np.ndarray:
        """``[k, rows, cols]`` component scores on the garment patch grid."""
        return self.scores.T.reshape(-1, *self.grid)


def pca(features: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Channel-covariance PCA of ``[n, d]`` features.

    Returns ``(components [d, k], scores [n, k], explained ratios [k])``.
    Each component is signed so its largest-magnitude loading is positive.
    """
    n, d = features.shape
    if not 1 <= k <= min(n, d):
        raise ContractError(f"k={k} must be in [1, min(n={n}, d={d})]")
    centred = features - features.mean(axis=0, keepdims=True)
    cov = centred.T @ centred / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    ratios = evals / total if total > 0 else np.zeros_like(evals)
    comps = evecs[:, :k].copy()
    for j in range(k):
        i = int(np.argmax(np.abs(comps[:, j])))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    return comps, centred @ comps, ratios[:k]


def garment_features(model: Denoiser, batch: Batch, t: int) -> list[np.ndarray | None]:
    """Garment-token features ``[L_g, d]`` at each block's output (first sample).

    Dual-network features come from the reference stack; the naive split
    drops garment tokens after its first block, so those entries are None.
    """
    capture: list = []
    with no_grad():
        model(batch, np.full(len(batch), t), capture=capture)
    out = []
    for stream in capture:
        seg = stream.segment(ModalityTag.GARMENT)
        out.append(None if seg is None else seg.data[0])
    return out


def pca_project(model: Denoiser, batch: Batch, k: int, t: int = 0) -> list[PCAProjection]:
    cfg = model.cfg
    _, gh, gw = cfg.garment_grid.token_grid(cfg.patch)
    projections = []
    for i, feats in enumerate(garment_features(model, batch, t)):
        if feats is None:
            continue
        comps, scores, ratios = pca(feats, k)
        projections.append(PCAProjection(i, comps, scores, ratios, (gh, gw)))
    return projections


def patch_luminance(garment: np.ndarray, patch: int) -> np.ndarray:
    """Mean luminance per patch of a ``[hg, wg, c]`` garment."""
    lum = garment.mean(axis=-1)
    h, w = lum.shape
    return lum.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))


def texture_correlation(heatmap: np.ndarray, garment: np.ndarray, patch: int) -> float:
    """|normalised cross-correlation| between a component heatmap and garment luminance."""
    lum = patch_luminance(garment, patch)
    a = heatmap - heatmap.mean()
    b = lum - lum.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if den == 0.0:
        return 0.0
    return float(abs(np.sum(a * b)) / den)


# ablation ---------------------------------------------------------------------------------

class BudgetMismatch(ValueError):
    pass


@dataclass
class AblationTable:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for variant in dict.fromkeys(r["variant"] for r in self.rows):
            rs = [r for r in self.rows if r["variant"] == variant]
            out[variant] = {
                "seeds": [r["seed"] for r in rs],
                "mean_ssim": float(np.mean([r["mean_ssim"] for r in rs])),
                "mean_psnr": float(np.mean([r["mean_psnr"] for r in rs])),
                "mean_masked_l2": float(np.mean([r["mean_masked_l2"] for r in rs])),
            }
        return out

    def ssim_by_seed(self, variant: str) -> dict[int, float]:
        return {r["seed"]: r["mean_ssim"] for r in self.rows if r["variant"] == variant}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "summary": self.summary()}

    def render(self) -> str:
        lines = [f"{'variant':<12} {'seeds':>5} {'SSIM':>8} {'PSNR':>8} {'masked L2':>10}"]
        for variant, s in self.summary().items():
            lines.append(
                f"{variant:<12} {len(s['seeds']):>5} {s['mean_ssim']:>8.4f} "
                f"{s['mean_psnr']:>8.3f} {s['mean_masked_l2']:>10.5f}"
            )
        return "\n".join(lines)


def check_budgets(configs) -> None:
    """Refuse to compare runs whose budgets (dims, schedule, steps, data) differ."""
    budgets = [c.budget() for c in configs]
    for c, b in zip(configs[1:], budgets[1:]):
        if b != budgets[0]:
            diff = sorted(k for k in b if b[k] != budgets[0][k])
            raise BudgetMismatch(f"run {c.variant}/seed {c.seed} differs from the first run in {diff}")


def variant_ablation(configs, run_fn) -> AblationTable:
    """Train and evaluate every config with ``run_fn(config) -> EvalReport``."""
    check_budgets(configs)
    table = AblationTable()
    for cfg in configs:
        report = run_fn(cfg)
        table.rows.append({
            "variant": cfg.variant,
            "seed": cfg.seed,
            "config_hash": report.config_hash,
            "mean_ssim": report.mean_ssim,
            "mean_psnr": report.mean_psnr,
            "mean_masked_l2": report.mean_masked_l2,
        })
    return table
