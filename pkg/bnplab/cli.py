"""
Command-line front-end: `python run_lab.py <command> [flags]`.
"""
import argparse
import sys
from typing import Dict, List, Optional

from bnplab.commands import CommandRouter
from bnplab.config import Arch, DatasetName, Method, Mode, load_config
from bnplab.errors import ConfigError


def _tolerance(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tolerance for {name} is not a number: {value!r}")


def _widths(text: str):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bnplab", description="Batch normalization preconditioning lab: train, verify, trace."
    )
    parser.add_argument("command", choices=[m.value for m in Mode])
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--dataset-dir", dest="dataset_dir")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--method", choices=[m.value for m in Method])
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float, help="defaults to the tuned rate for dataset/arch/method/batch size")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--dataset", choices=[d.value for d in DatasetName])
    parser.add_argument("--arch", choices=[a.value for a in Arch])
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--rho", type=float, help="momentum of the BNP and BN running statistics")
    parser.add_argument("--eps1", type=float)
    parser.add_argument("--eps2", type=float)
    parser.add_argument("--max-steps", dest="max_steps", type=int)
    parser.add_argument("--log-every", dest="log_every", type=int)
    parser.add_argument("--precision", choices=["float64", "float32"])
    parser.add_argument("--full-dataset", dest="full_dataset", action="store_true", default=None)
    parser.add_argument("--batch-stats", dest="use_running_stats", action="store_false", default=None,
                        help="BNP uses mini-batch statistics instead of running averages")
    parser.add_argument("--scale-decades", dest="scale_decades", type=float)
    parser.add_argument("--widths", type=_widths)
    parser.add_argument("--tolerance", dest="tolerance_overrides", type=_tolerance, action="append",
                        metavar="CHECK=VALUE", help="override one verify tolerance (repeatable)")
    return parser


def _print_result(command: str, result: Dict) -> None:
    marker = "✅" if result.get("success") else "❌"
    headline = result.get("message") or result.get("error") or ""
    print(f"\n{marker} {command}: {headline}")
    for name, passed in result.get("checks", {}).items():
        print(f"   {'✅' if passed else '❌'} {name}")
    for row in result.get("rows", []):
        print(f"   width={row['width']:<6} q={row['q']:.3f}  mean ||G/q||/sqrt(N) = {row['mean_norm_ratio']:.4f}")
    for key in ("metrics_path", "checkpoint_path", "report_path", "trace_path", "table_path"):
        if key in result:
            print(f"   📄 {result[key]}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "tolerance_overrides")}
    overrides["mode"] = args.command
    if args.tolerance_overrides:
        overrides["tolerances"] = dict(args.tolerance_overrides)
    try:
        config = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"\n❌ {e}")
        return 1

    result = CommandRouter().dispatch(config)
    _print_result(args.command, result)
    return 0 if result.get("success") else 1


if __name__ == "__main__":
    sys.exit(main())
