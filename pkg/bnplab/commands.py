"""
Command functions and the dispatcher that runs them.
Every command takes a RunConfig and returns a result dict with a "success" flag.
"""
import csv
import json
import logging
import os
from typing import Any, Dict, List

from bnplab.checks import run_checks
from bnplab.config import Arch, DatasetName, Method, RunConfig
from bnplab.errors import BN_BATCH_SIZE_ONE, BnpLabError
from bnplab.hessian import norm_scaling_probe
from bnplab.linalg import make_rng
from bnplab.network import save_checkpoint
from bnplab.trainer import (
    COND_TRACE_HEADER,
    COND_TRACE_SCHEMA,
    METRICS_HEADER,
    METRICS_SCHEMA,
    load_training_data,
    run_cond_trace,
    run_training,
)

logger = logging.getLogger(__name__)

NORM_PROBE_SCHEMA = "# schema: bnplab-norm-probe v1"
NORM_PROBE_HEADER = ["width", "N", "q", "mean_norm_ratio"]
VERIFY_SCHEMA = "bnplab-verify v1"
COND_TRACE_MIN_FRACTION = 0.9
NORM_PROBE_MAX_SPREAD = 3.0


def _output_path(config: RunConfig, filename: str) -> str:
    os.makedirs(config.out, exist_ok=True)
    return os.path.join(config.out, filename)


def _write_csv(path: str, schema: str, header: List[str], rows: List[List[str]], trailer: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(schema + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        if trailer:
            f.write(trailer + "\n")


def cmd_train(config: RunConfig) -> Dict[str, Any]:
    """Train one method and write metrics.csv plus checkpoint.npz."""
    train, test = load_training_data(config)
    session = run_training(config, train, test)
    metrics_path = _output_path(config, "metrics.csv")
    _write_csv(metrics_path, METRICS_SCHEMA, METRICS_HEADER, [row.as_csv_row() for row in session.rows])
    checkpoint_path = save_checkpoint(_output_path(config, "checkpoint.npz"), session.network, session.bnp_states)
    final = next((r.test_accuracy for r in reversed(session.rows) if r.test_accuracy is not None), None)
    return {
        "success": True,
        "message": f"Trained {config.method.value} for {session.step} steps",
        "steps": session.step,
        "final_accuracy": final,
        "metrics_path": metrics_path,
        "checkpoint_path": checkpoint_path,
    }


def cmd_verify(config: RunConfig) -> Dict[str, Any]:
    """Run every numerical check and write verify_report.json."""
    results = run_checks(config.seed, tolerances=config.tolerances)
    passed = all(r.passed for r in results)
    report = {
        "schema": VERIFY_SCHEMA,
        "seed": config.seed,
        "passed": passed,
        "checks": [r.to_dict() for r in results],
    }
    path = _output_path(config, "verify_report.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    failed = [r.name for r in results if not r.passed]
    result: Dict[str, Any] = {
        "success": passed,
        "report_path": path,
        "checks": {r.name: r.passed for r in results},
    }
    if failed:
        result["error"] = f"Failed checks: {', '.join(failed)}"
        result["failed"] = failed
    else:
        result["message"] = f"All {len(results)} checks passed"
    return result


def cmd_cond_trace(config: RunConfig) -> Dict[str, Any]:
    """Trace Hessian condition numbers during training and write cond_trace.csv."""
    train, _ = load_training_data(config)
    rows, fraction = run_cond_trace(config, train)
    path = _output_path(config, "cond_trace.csv")
    _write_csv(path, COND_TRACE_SCHEMA, COND_TRACE_HEADER, [row.as_csv_row() for row in rows])
    result: Dict[str, Any] = {
        "success": fraction >= COND_TRACE_MIN_FRACTION,
        "trace_path": path,
        "logged_steps": len(rows),
        "improved_fraction": fraction,
    }
    if not result["success"]:
        result["error"] = (
            f"preconditioning lowered the condition number at only {fraction:.0%} of logged steps"
        )
    else:
        result["message"] = f"Preconditioning lowered the condition number at {fraction:.0%} of {len(rows)} logged steps"
    return result


def cmd_norm_probe(config: RunConfig) -> Dict[str, Any]:
    """Tabulate the scaled activation-matrix norm against layer width."""
    rows = norm_scaling_probe(config.widths, config.probe_batch, config.probe_trials, make_rng(config.seed))
    means = [row["mean_norm_ratio"] for row in rows]
    spread = max(means) / min(means)
    path = _output_path(config, "norm_probe.csv")
    _write_csv(
        path,
        NORM_PROBE_SCHEMA,
        NORM_PROBE_HEADER,
        [[str(r["width"]), str(r["N"]), repr(r["q"]), repr(r["mean_norm_ratio"])] for r in rows],
        trailer=f"# max_min_ratio={spread!r}",
    )
    result: Dict[str, Any] = {
        "success": spread <= NORM_PROBE_MAX_SPREAD,
        "table_path": path,
        "rows": rows,
        "max_min_ratio": spread,
    }
    if not result["success"]:
        result["error"] = f"norm ratio spread {spread:.3f} exceeds {NORM_PROBE_MAX_SPREAD}"
    else:
        result["message"] = f"Norm ratio spread {spread:.3f} across {len(rows)} widths"
    return result


AVAILABLE_COMMANDS = {
    "train": cmd_train,
    "verify": cmd_verify,
    "cond-trace": cmd_cond_trace,
    "norm-probe": cmd_norm_probe,
}


class CommandRouter:
    """
    Validates a config against the requested command and runs it.
    Library errors come back as {"success": False, "error": ...} instead of propagating.
    """

    def __init__(self):
        self.command_functions = AVAILABLE_COMMANDS

    def validate_and_dispatch(self, command: str, config: RunConfig) -> Dict[str, Any]:
        if command not in self.command_functions:
            return {
                "success": False,
                "error": f"Unknown command: {command}",
                "available": sorted(self.command_functions),
            }

        validation = self._validate_config_for_command(command, config)
        if not validation["valid"]:
            return {"success": False, "error": validation["message"]}

        try:
            result = self.command_functions[command](config)
        except BnpLabError as e:
            logger.error(f"{command} failed: {e}")
            return {"success": False, "error": str(e)}
        except (TypeError, OSError) as e:
            logger.error(f"{command} failed: {e}")
            return {"success": False, "error": f"Error executing {command}: {e}"}

        result["command"] = command
        return result

    def _validate_config_for_command(self, command: str, config: RunConfig) -> Dict[str, Any]:
        if command == "train":
            if config.method is Method.BN and config.batch_size == 1:
                return {"valid": False, "message": BN_BATCH_SIZE_ONE}
        elif command == "cond-trace":
            if config.arch is not Arch.MLP_2LAYER:
                return {"valid": False, "message": "cond-trace needs --arch mlp-2layer"}
            if config.dataset not in (DatasetName.CIFAR10, DatasetName.SYNTH):
                return {"valid": False, "message": "cond-trace needs --dataset cifar10 or synth"}
        return {"valid": True}

    def dispatch(self, config: RunConfig) -> Dict[str, Any]:
        """Run the command named by config.mode."""
        return self.validate_and_dispatch(config.mode.value, config)

