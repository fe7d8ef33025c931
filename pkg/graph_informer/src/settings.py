import os

from dotenv import load_dotenv

from .errors import ConfigurationError

# Load environment variables from .env
load_dotenv()


def _as_bool(value) -> bool:
    if value is None:
        return False
    return str(value).strip().lower() in ("1", "true", "yes", "on")


DEBUG = _as_bool(os.getenv("GRAPH_INFORMER_DEBUG"))


def get_run_settings() -> dict:
    try:
        run_settings = {
            "debug": DEBUG,
            "report_dir": os.getenv("GRAPH_INFORMER_REPORT_DIR", "reports"),
            "checkpoint_dir": os.getenv("GRAPH_INFORMER_CHECKPOINT_DIR", "checkpoints"),
            "seed": int(os.getenv("GRAPH_INFORMER_SEED", "0")),
            "workers": int(os.getenv("GRAPH_INFORMER_WORKERS", "1")),
            "log_file": os.getenv("GRAPH_INFORMER_LOG_FILE") or None,
        }
    except ValueError as e:
        raise ConfigurationError(f"Invalid GRAPH_INFORMER_* environment value: {e}") from e

    if run_settings["workers"] < 1:
        raise ConfigurationError("GRAPH_INFORMER_WORKERS must be >= 1")

    return run_settings
