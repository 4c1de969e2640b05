"""Command-line entry point: synth, train, eval, infer, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Outputs default to
``$MIRROR_UNET_OUT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import config as C
from .config import ConfigError

log = logging.getLogger("mirror_unet")

OUT_ENV = "MIRROR_UNET_OUT"
GRIDS = ("table2", "table2-v1v3", "table2-v4")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


@dataclass
class Command:
    name: str
    args: argparse.Namespace
    config: C.TrainConfig | None = None
    grid: list | None = None


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _parser() -> _Parser:
    p = _Parser(prog="mirror-unet", description="Twin-branch U-Net training and evaluation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="materialise a seeded phantom dataset")
    s.add_argument("--out", type=Path)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shape", default="64,64,64")
    s.add_argument("--p-healthy", type=float, default=0.5)
    s.add_argument("--brain", action="store_true")

    for name in ("train", "sweep"):
        t = sub.add_parser(name)
        t.add_argument("--config", type=Path)
        t.add_argument("--train", type=Path, help="training manifest")
        t.add_argument("--out", type=Path)
        if name == "train":
            t.add_argument("--val", type=Path, help="validation manifest")
        else:
            t.add_argument("--test", type=Path, help="test manifest")
            t.add_argument("--grid", default="table2", choices=GRIDS)
            t.add_argument("--seeds", default="0")
            t.add_argument("--dry-run", action="store_true")

    e = sub.add_parser("eval")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path)

    i = sub.add_parser("infer")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--out", type=Path)
    i.add_argument("--tau", type=float, default=0.5)

    r = sub.add_parser("report")
    r.add_argument("--sweep", type=Path, required=True)
    r.add_argument("--out", type=Path)
    r.add_argument("--eps", type=float, default=0.005)
    r.add_argument("--no-plots", action="store_true")
    return p


def _overrides(extra: list[str]) -> dict:
    flat = {}
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unknown flag {tok!r} (config overrides take the form --key=value)")
        key, _, value = tok[2:].partition("=")
        flat[key] = value
    return flat


def grid_cells(name: str):
    from .training import sweep_grid

    if name == "table2":
        return sweep_grid()
    if name == "table2-v1v3":
        return sweep_grid(("v1", "v2", "v3"))
    return sweep_grid(("v4",))


def parse_cli(argv) -> Command:
    """Parse argv into a command with a fully resolved config (file defaults, then flag overrides)."""
    args, extra = _parser().parse_known_args(argv)
    for attr in ("config", "checkpoint", "data", "sweep"):
        p = getattr(args, attr, None)
        if p is not None and not p.exists():
            raise ConfigError(f"missing required path {p}")
    if args.command in ("train", "sweep"):
        flat = C.load_config_file(args.config) if args.config else {}
        flat.update(_overrides(extra))
        cfg = C.from_flat(flat)
        grid = grid_cells(args.grid) if args.command == "sweep" else None
        return Command(args.command, args, cfg, grid)
    if extra:
        raise ConfigError(f"unknown flag(s) {extra}")
    return Command(args.command, args)


# ---------------------------------------------------------------- commands

def _require(path, what):
    if path is None:
        raise ConfigError(f"missing required path: {what}")
    if not Path(path).exists():
        raise ConfigError(f"missing required path {path}")
    return path


def _run(cmd: Command) -> None:
    from . import data as D

    a = cmd.args
    if cmd.name == "synth":
        shape = tuple(int(s) for s in a.shape.split(","))
        out = a.out or out_root() / "synth"
        if a.brain:
            from .corruption import philox

            rng = philox(a.seed)
            specs = [D.BrainPhantomSpec(shape=shape, seed=int(rng.integers(2**31))) for _ in range(a.n)]
        else:
            specs = D.make_phantom_specs(a.n, a.seed, a.p_healthy, shape=shape)
        print(D.write_phantom_dataset(out, specs, brain=a.brain))
        return

    if cmd.name == "train":
        from .training import train_model

        train_set = D.load_manifest(_require(a.train, "--train"))
        val_set = D.load_manifest(a.val) if a.val else None
        out = a.out or out_root() / "train"
        out.mkdir(parents=True, exist_ok=True)
        ckpt, hist = train_model(cmd.config, train_set, val_set, history_path=out / "history.csv")
        ckpt.save(out / "checkpoint.npz")
        print(out / "checkpoint.npz")
        return

    if cmd.name == "eval":
        from .metrics import write_metrics_csv
        from .training import Checkpoint, evaluate_model

        agg, records = evaluate_model(Checkpoint.load(a.checkpoint), D.load_manifest(a.data))
        out = a.out or out_root() / "eval_metrics.csv"
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(records, out)
        print(f"dice={agg.dice:.4f} fpv_ml={agg.fpv_ml:.4f} fnv_ml={agg.fnv_ml:.4f} -> {out}")
        return

    if cmd.name == "infer":
        from .inference import WindowSpec, binarize, predict_mask, probability_volume
        from .training import Checkpoint

        ckpt = Checkpoint.load(a.checkpoint)
        model = ckpt.build()
        window = WindowSpec(ckpt.config.model.in_patch, ckpt.config.overlap)
        out = a.out or out_root() / "infer"
        out.mkdir(parents=True, exist_ok=True)
        for s in D.load_manifest(a.data):
            probs, mask = predict_mask(model, s, window, a.tau)
            for k, p in enumerate(probs):
                suffix = "" if len(probs) == 1 else str(k)
                D.save_volume(probability_volume(p, s.x_A), out / f"{s.case_id}_prob{suffix}.nii.gz")
            D.save_mask(D.Volume(mask, s.spacing, s.x_A.origin), out / f"{s.case_id}_mask.nii.gz")
            if getattr(model, "version", "") in C.BRAIN_VERSIONS:
                # per-class masks next to the whole-tumour mask (edema channel 0, core channel 1)
                for name, ch in (("edema", 0), ("core", 1)):
                    D.save_mask(D.Volume(binarize(probs[ch], a.tau), s.spacing, s.x_A.origin),
                                out / f"{s.case_id}_{name}.nii.gz")
        print(out)
        return

    if cmd.name == "sweep":
        from .training import run_sweep

        seeds = [int(s) for s in a.seeds.split(",")]
        if a.dry_run:
            for cell in cmd.grid:
                print(cell.version, C.format_shared(cell.shared), cell.setting)
            print(f"{len(cmd.grid)} cells x {len(seeds)} seeds")
            return
        train_set = D.load_manifest(_require(a.train, "--train"))
        test_set = D.load_manifest(_require(a.test, "--test"))
        out = a.out or out_root() / "sweep"
        out.mkdir(parents=True, exist_ok=True)
        run_sweep(cmd.config, cmd.grid, train_set, test_set, out, seeds, csv_path=out / "sweep.csv")
        print(out / "sweep.csv")
        return

    if cmd.name == "report":
        from .report import emit_report

        bundle = emit_report(a.sweep, a.out or out_root() / "report", a.eps, plots=not a.no_plots)
        for k, v in bundle.ordering.items():
            print(f"{k}: {v}")
        if bundle.missing:
            print(f"warning: {len(bundle.missing)} missing cells, see {bundle.files['warnings.json']}")
        return


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cmd = parse_cli(sys.argv[1:] if argv is None else argv)
        _run(cmd)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
