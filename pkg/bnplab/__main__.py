"""`python -m bnplab <command>`."""
import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()
logging.basicConfig(level=os.getenv("BNPLAB_LOG_LEVEL", "INFO").upper())

from bnplab.cli import main  # noqa: E402

sys.exit(main())
