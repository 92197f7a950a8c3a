#!/usr/bin/env python3
"""
Entry script for the BNP lab.
Usage: python run_lab.py {train,verify,cond-trace,norm-probe} [flags]
"""
import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

logging.basicConfig(
    level=os.getenv("BNPLAB_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from bnplab.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
