"""Batch normalization preconditioning lab."""

from bnplab.config import Arch, DatasetName, Method, Mode, RunConfig, load_config
from bnplab.commands import AVAILABLE_COMMANDS, CommandRouter
from bnplab.checks import AVAILABLE_CHECKS, CheckResult, run_checks
from bnplab.network import Network, build_network
from bnplab.precond import BnpState, precondition_bundle

__all__ = [
    'Arch',
    'DatasetName',
    'Method',
    'Mode',
    'RunConfig',
    'load_config',
    'AVAILABLE_COMMANDS',
    'CommandRouter',
    'AVAILABLE_CHECKS',
    'CheckResult',
    'run_checks',
    'Network',
    'build_network',
    'BnpState',
    'precondition_bundle',
]
