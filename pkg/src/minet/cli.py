"""Command-line entry point: ``minet <subcommand> ...``.

Every subcommand resolves its settings as defaults < ``--config`` file <
explicit flags < ``--set key=value`` pairs, echoes the resolved settings to
stdout, and writes them to ``<out>/config.txt`` when it has an output
directory, so ``--config <out>/config.txt`` reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, experiments, metrics, stability
from .model import MINetConfig, encode, init_minet
from .tensor import Tensor, no_grad
from .training import (
    Checkpoint,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    predict,
    write_log_csv,
)

log = logging.getLogger("minet")

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "out": "runs/minet",
    "manifest": "",
    "pairs": "8",
    "heldout": "8",
    "size": "32",
    "beta_min": "0.4",
    "beta_max": "1.6",
    "A_min": "0.7",
    "A_max": "1.0",
    "channels": "64",
    "T": "12",
    "dilations": "1,2,5",
    "eta": "1.0",
    "rca_reduction": "16",
    "downsample": "true",
    "block": "im",
    "mlf": "true",
    "rca": "true",
    "mlf_norm": "softmax",
    "iters": "2000",
    "batch_size": "2",
    "lr": "0.001",
    "lr_decay": "0.1",
    "lr_interval": "20000",
    "beta1": "0.99",
    "beta2": "0.999",
    "loss": "mse",
    "dtype": "float32",
    "checkpoint_every": "0",
}


class UsageError(Exception):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def resolve_config(file_path: str | None, flags: dict[str, str], overrides: list[str]) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    layers = []
    if file_path:
        layers.append(parse_config_text(Path(file_path).read_text(), file_path))
    layers.append(flags)
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    layers.append(pairs)
    unknown = sorted({k for layer in layers for k in layer} - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for layer in layers:
        cfg.update(layer)
    return cfg


def _bool(v: str) -> bool:
    s = v.lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def _triple(v: str) -> tuple[int, int, int]:
    parts = [int(p) for p in v.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise UsageError(f"expected one or three comma-separated integers, got {v!r}")
    return tuple(parts)


def net_config(c: dict[str, str]) -> MINetConfig:
    try:
        return MINetConfig(
            trunk_channels=int(c["channels"]),
            dilations=_triple(c["dilations"]),
            recursions=_triple(c["T"]),
            eta=float(c["eta"]),
            rca_reduction=int(c["rca_reduction"]),
            downsample=_bool(c["downsample"]),
            block=c["block"],
            use_mlf=_bool(c["mlf"]),
            use_rca=_bool(c["rca"]),
            mlf_norm=c["mlf_norm"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_config(c: dict[str, str]) -> TrainConfig:
    if c["dtype"] not in ("float32", "float64"):
        raise UsageError(f"dtype must be float32 or float64, got {c['dtype']!r}")
    return TrainConfig(
        iters=int(c["iters"]),
        batch_size=int(c["batch_size"]),
        base_lr=float(c["lr"]),
        lr_decay=float(c["lr_decay"]),
        lr_interval=int(c["lr_interval"]),
        beta1=float(c["beta1"]),
        beta2=float(c["beta2"]),
        loss=c["loss"],
        dtype=c["dtype"],
        checkpoint_every=int(c["checkpoint_every"]),
        out_dir=c["out"],
    )


def dataset_from_config(c: dict[str, str], heldout: bool = False) -> list[data.HazyPair]:
    if c["manifest"] and not heldout:
        path = Path(c["manifest"])
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest {path} not found")
        return data.load_dataset(path)
    size = int(c["size"])
    n = int(c["heldout"] if heldout else c["pairs"])
    return data.make_dataset(
        int(c["seed"]),
        n,
        size,
        size,
        (float(c["beta_min"]), float(c["beta_max"])),
        (float(c["A_min"]), float(c["A_max"])),
        start=1_000_000 if heldout else 0,
    )


def _echo(c: dict[str, str], out_dir: Path | None) -> None:
    text = format_config(c)
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(text)


# -- subcommands -------------------------------------------------------------------


def cmd_train(args, c) -> int:
    out = Path(c["out"])
    _echo(c, out)
    from .training import train_loop

    pairs = dataset_from_config(c)
    if not pairs:
        raise ValueError("dataset is empty")
    ckpt, rows = train_loop(pairs, net_config(c), train_config(c), int(c["seed"]))
    checkpoint_save(out / "final.minw", ckpt)
    write_log_csv(out / "train_log.csv", rows)
    if rows:
        print(f"final loss {rows[-1].loss:.6g}  train psnr {rows[-1].psnr_train:.3f} dB")
    print(f"checkpoint written to {out / 'final.minw'}")
    return 0


def _reflect_to_even(img: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[:2]
    ph, pw = h % 2, w % 2
    if ph or pw:
        print(f"note: reflect-padding {h}x{w} input to {h + ph}x{w + pw}", file=sys.stderr)
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    return img, (h, w)


def _run_network(ckpt: Checkpoint, images: list[np.ndarray]):
    outs, traces = [], []
    even = ckpt.config.downsample
    for img in images:
        padded, (h, w) = _reflect_to_even(img) if even else (img, img.shape[:2])
        (y,), (tr,) = predict(ckpt.params, [padded], batch_size=1)
        outs.append(y[:h, :w])
        traces.append(tr)
    return outs, traces


def cmd_infer(args, c) -> int:
    ckpt = checkpoint_load(args.checkpoint)
    img = data.load_ppm(args.input)
    (out,), (traces,) = _run_network(ckpt, [img])
    data.save_ppm(args.output, out)
    for i, tr in enumerate(traces, start=1):
        if tr.residuals:
            print(f"block {i} residuals: " + " ".join(f"{r:.6g}" for r in tr.residuals))
            print(f"block {i} final residual: {tr.final:.6g}")
        else:
            print(f"block {i}: explicit residual block, no fixed-point trace")
    return 0


def cmd_eval(args, c) -> int:
    rows = data.read_manifest(args.manifest)
    clean = [data.load_ppm(r.clean_path) for r in rows]
    hazy = [data.load_ppm(r.hazy_path) for r in rows]
    if args.checkpoint:
        outs, _ = _run_network(checkpoint_load(args.checkpoint), hazy)
    else:
        outs = hazy
    with ThreadPoolExecutor() as pool:
        reports = list(pool.map(metrics.evaluate, outs, clean))
    named = [(r.hazy_path.name, rep) for r, rep in zip(rows, reports)]
    mean = metrics.MetricReport(
        float(np.mean([rep.psnr_db for rep in reports])), float(np.mean([rep.ssim for rep in reports]))
    )
    named.append(("mean", mean))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        metrics.write_metrics_csv(args.out, named)
    print("filename,psnr_db,ssim")
    for name, rep in named:
        print(f"{name},{metrics.format_psnr(rep.psnr_db)},{rep.ssim:.6f}")
    return 0


def cmd_tsweep(args, c) -> int:
    out = Path(c["out"])
    _echo(c, out)
    T_list = [int(t) for t in args.T_list.split(",") if t.strip()]
    if not T_list:
        raise UsageError("empty T list")
    eval_pairs = dataset_from_config(c, heldout=True)
    train_pairs = dataset_from_config(c) if args.train else None
    rows = experiments.tsweep(
        net_config(c), T_list, eval_pairs, train_pairs, train_config(c), int(c["seed"]), args.repeats
    )
    experiments.write_sweep_csv(out / "tsweep.csv", rows)
    print("T,psnr,seconds_per_image")
    for r in rows:
        print(f"{r.T},{r.psnr:.6f},{r.seconds_per_image:.6f}")
    return 0


def cmd_ablate(args, c) -> int:
    out = Path(c["out"])
    _echo(c, out)
    train_pairs = dataset_from_config(c)
    held = dataset_from_config(c, heldout=True)
    rows = experiments.ablate(net_config(c), train_pairs, held, train_config(c), int(c["seed"]))
    experiments.write_ablation_csv(out / "ablation.csv", rows)
    print(f"identity baseline held-out psnr: {experiments.identity_psnr(held):.6f}")
    print("block,rca,mlf,params,psnr_train,psnr_heldout")
    for r in rows:
        print(f"{r.block},{int(r.rca)},{int(r.mlf)},{r.params},{r.psnr_train:.6f},{r.psnr_heldout:.6f}")
    return 0


def cmd_euler_demo(args, c) -> int:
    explicit, implicit = stability.euler_compare(args.lam, args.eta, args.steps, args.x0)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        stability.write_trajectories_csv(args.out, explicit, implicit)
    print("step,explicit,implicit")
    for k, (a, b) in enumerate(zip(explicit, implicit)):
        print(f"{k},{float(a)!r},{float(b)!r}")
    return 0


def cmd_stability(args, c) -> int:
    if args.checkpoint:
        params = checkpoint_load(args.checkpoint, dtype=np.float64).params
    else:
        _echo(c, None)
        params = init_minet(net_config(c), int(c["seed"]), np.float64)
    cfg = params.config
    if cfg.block != "im":
        raise ValueError("stability analysis needs an IM-block network")
    pair = dataset_from_config(c, heldout=True)[0]
    from .imblock import IMBlockConfig, im_block_forward, mle_forward

    with no_grad():
        x = encode(Tensor(data.to_batch([pair.hazy])), params)
    out = Path(c["out"])
    print("block,dilation,rho,threshold,status,converged")
    for level, (d, T) in enumerate(zip(cfg.dilations, cfg.recursions)):
        mle = params.blocks[level][0]

        def field(t, mle=mle):
            return mle_forward(t, mle)

        est = stability.estimate_spectral_radius(field, x, iters=args.power_iters, seed=int(c["seed"]))
        v = stability.verdict(est.rho, cfg.eta)
        stability.write_spectrum_csv(out / f"spectrum_block{level + 1}.csv", est)
        print(f"{level + 1},{d},{est.rho:.6f},{v.threshold:.6f},{v.status},{est.converged}")
        with no_grad():
            x, _ = im_block_forward(x, mle, IMBlockConfig(T, cfg.eta, d))
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "tsweep": cmd_tsweep,
    "ablate": cmd_ablate,
    "euler-demo": cmd_euler_demo,
    "stability": cmd_stability,
}

# flag name -> config key, for the subcommands that build a network/dataset
CONFIG_FLAGS = {
    "seed": "seed",
    "out": "out",
    "manifest": "manifest",
    "pairs": "pairs",
    "heldout": "heldout",
    "size": "size",
    "channels": "channels",
    "T": "T",
    "iters": "iters",
    "batch_size": "batch_size",
    "lr": "lr",
    "dtype": "dtype",
    "block": "block",
    "downsample": "downsample",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
    p.add_argument("--seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="on-disk dataset manifest (default: generate)")
    p.add_argument("--pairs", help="number of generated training pairs")
    p.add_argument("--heldout", help="number of generated held-out pairs")
    p.add_argument("--size", help="generated image side length")
    p.add_argument("--channels", help="trunk channel count")
    p.add_argument("--T", help="IM-block recursions, one value or three comma-separated")
    p.add_argument("--iters")
    p.add_argument("--batch-size", dest="batch_size")
    p.add_argument("--lr")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--block", choices=("im", "res1", "resT"))
    p.add_argument("--downsample", choices=("true", "false"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minet", description="Implicit-Euler dehazing network toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on generated or manifest pairs")
    _add_config_flags(p)

    p = sub.add_parser("infer", help="dehaze one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    p.add_argument("--checkpoint", help="omit to score the hazy images themselves")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("tsweep", help="inference time and PSNR versus recursion count")
    _add_config_flags(p)
    p.add_argument("--T-list", dest="T_list", default="1,4,8,12")
    p.add_argument("--train", action="store_true", help="train each T briefly before scoring")
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("ablate", help="train all block/RCA/MLF variants")
    _add_config_flags(p)

    p = sub.add_parser("euler-demo", help="explicit vs implicit Euler on dx/dt = lam*x")
    p.add_argument("--lam", type=float, default=-50.0)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--out", help="CSV output path")

    p = sub.add_parser("stability", help="spectral radius of each MLE field")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--power-iters", dest="power_iters", type=int, default=50)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        c = {}
        if hasattr(args, "set"):
            flags = {key: getattr(args, flag) for flag, key in CONFIG_FLAGS.items() if getattr(args, flag, None) is not None}
            c = resolve_config(args.config, flags, args.set)
        return COMMANDS[args.command](args, c)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"minet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"minet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
