"""``mnvton`` command line.

Every subcommand accepts ``--config`` (a RunConfig JSON file), ``--seed``
and ``--out`` overrides. Results go to stdout as JSON; failures print one
line ``{"error": <kind>, "message": ...}`` to stderr and exit with

    2  bad config or usage
    3  numerical failure (non-finite loss or samples)
    4  I/O failure
    1  a check that ran but did not pass (gradcheck above threshold)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import io, runs
from .blocks import BlockVariant
from .config import RunConfig
from .errors import ConfigError, NumericalError
from .tensor import NonFiniteError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="override the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mnvton", description="Toy modality-normalised try-on diffusion")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="export toy samples as PPM + JSON")
    _common(p)
    p.add_argument("-n", type=int, default=8)

    p = sub.add_parser("train", help="train one variant into a run directory")
    _common(p)
    p.add_argument("--eval", action="store_true", help="evaluate after training")

    p = sub.add_parser("sample", help="generate samples from a trained run")
    _common(p)
    p.add_argument("-n", type=int, default=4)
    p.add_argument("--scale", type=int, default=4, help="pixel upscaling of the PPMs")

    p = sub.add_parser("eval", help="metrics and label-swap report of a trained run")
    _common(p)
    p.add_argument("--no-swap", action="store_true")

    p = sub.add_parser("ablate", help="train and evaluate several variants over seeds")
    _common(p)
    p.add_argument("--variants", nargs="+", default=list(runs.ABLATION_VARIANTS),
                   choices=[v.value for v in BlockVariant])
    p.add_argument("--seeds", type=int, default=5, help="seeds 0..n-1 are used")

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    _common(p)

    p = sub.add_parser("cost", help="parameter, FLOP and activation report")
    _common(p)

    p = sub.add_parser("pca", help="PCA of garment-token features per block")
    _common(p)
    p.add_argument("-k", type=int, default=3)
    p.add_argument("-t", type=int, default=0, help="diffusion timestep of the probe")
    return parser


def _load_config(args) -> RunConfig:
    """Config file, else the run directory's config.json, else defaults; then overrides."""
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif args.out is not None and (args.out / runs.CONFIG_FILE).exists():
        cfg = runs.read_config(args.out)
    else:
        cfg = RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _trained_dir(args, cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    if not (out / runs.CHECKPOINT_FILE).exists():
        raise FileNotFoundError(f"no checkpoint in {out}; run `train` first")
    on_disk = runs.read_config(out)
    if on_disk.hash != cfg.hash:
        raise ConfigError(f"config hash {cfg.hash} differs from the run in {out} ({on_disk.hash})")
    return out


def _emit(obj) -> None:
    print(io.dumps(obj))


def run(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out)
    cmd = args.command

    if cmd == "gen-data":
        files = runs.gen_data(cfg, out, args.n)
        _emit({"config_hash": cfg.hash, "written": len(files), "dir": str(out / "data")})
    elif cmd == "train":
        summary = runs.train_run(cfg, out)
        result = {"config_hash": summary.config_hash, "final_loss": summary.final_loss,
                  "steps": summary.steps, "out": str(out)}
        if args.eval:
            report, swap = runs.eval_dir(out)
            result["mean_ssim"] = report.mean_ssim
            result["relocated_fraction"] = swap["relocated_fraction"]
        _emit(result)
    elif cmd == "sample":
        files = runs.sample_dir(_trained_dir(args, cfg), args.n, args.scale)
        _emit({"config_hash": cfg.hash, "written": len(files), "dir": str(out / "images")})
    elif cmd == "eval":
        report, swap = runs.eval_dir(_trained_dir(args, cfg), swap=not args.no_swap)
        result = {k: v for k, v in report.to_dict().items() if k != "samples"}
        if swap is not None:
            result["relocated_fraction"] = swap["relocated_fraction"]
        _emit(result)
    elif cmd == "ablate":
        table = runs.ablate(cfg, out, args.variants, range(args.seeds))
        print(table.render(), file=sys.stderr)
        _emit(table.summary())
    elif cmd == "gradcheck":
        m = cfg.model
        errs = runs.gradcheck_all(m.d, m.heads, m.depth, cfg.seed) if args.config else runs.gradcheck_all(seed=cfg.seed)
        worst = max(errs.values())
        _emit({"max_rel_err": worst, "per_variant": errs, "tolerance": GRADCHECK_TOL})
        return EXIT_OK if worst < GRADCHECK_TOL else EXIT_CHECK
    elif cmd == "cost":
        report = runs.cost(cfg)
        if args.out is not None:
            (out / "reports").mkdir(parents=True, exist_ok=True)
            io.write_json(out / "reports" / "cost.json", report)
        _emit(report)
    elif cmd == "pca":
        report = runs.pca_dir(_trained_dir(args, cfg), args.k, args.t)
        _emit({
            "config_hash": report["config_hash"],
            "blocks": [
                {"block": e["block"], "explained_ratio": e["explained_ratio"],
                 "texture_correlation": e["texture_correlation"]}
                for e in report["projections"]
            ],
        })
    return EXIT_OK


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
    print(json.dumps({"error": kind, "message": msg}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except (OSError, EOFError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (KeyError, ValueError) as exc:
        # malformed checkpoints and documents that parsed but do not fit
        return _fail("config", exc, EXIT_CONFIG)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
