import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("SPLITSIM_LOG", "INFO").upper()
DATA_DIR = os.getenv("SPLITSIM_DATA_DIR", str(Path(__file__).resolve().parent.parent / "data"))

DEFAULT_JOBS = os.getenv("SPLITSIM_JOBS", "1")
DEFAULT_JOBS = max(1, int(DEFAULT_JOBS)) if DEFAULT_JOBS.isdigit() else 1
