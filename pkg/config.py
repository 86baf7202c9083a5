"""
Configuration management for the DPT multi-behavior recommendation toolkit.
Loads process-level settings from environment variables with sensible defaults.
Run-level (per experiment) settings live in run_config.py.
"""
import os
from dotenv import load_dotenv
from typing import Dict, Any, List

# Load environment variables (if .env file exists)
load_dotenv(override=False)


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ['true', '1', 'yes', 'on']


class Config:
    """Central configuration class."""

    # Logging
    LOG_LEVEL: str = os.getenv('DPT_LOG_LEVEL', 'INFO')
    LOG_FILE: str = os.getenv('DPT_LOG_FILE', 'dpt.log')
    LOG_DIR: str = os.getenv('DPT_LOG_DIR', 'logs')
    LOG_TO_FILE: bool = _env_flag('DPT_LOG_TO_FILE', 'true')

    # Artifacts
    OUTPUT_DIR: str = os.getenv('DPT_OUTPUT_DIR', 'runs')

    # Reproducibility / execution
    DEFAULT_SEED: int = int(os.getenv('DPT_SEED', '7'))
    THREADS: int = int(os.getenv('DPT_THREADS', '1'))

    # Behavior labels used when a run config does not declare them (last = target)
    DEFAULT_BEHAVIORS: List[str] = [
        label.strip() for label in os.getenv('DPT_BEHAVIORS', 'click,fav,cart,buy').split(',')
        if label.strip()
    ]

    # Heavy statistical acceptance checks (200x200 fixture, 3 seeds)
    SLOW_TESTS: bool = _env_flag('DPT_SLOW_TESTS', 'false')

    # Numerical constants shared across modules
    PROB_CLIP: float = 1e-12
    GATE_CLAMP: float = 1e-4
    NEGATIVE_SAMPLING_TRIES: int = 100

    @classmethod
    def validate(cls) -> Dict[str, Any]:
        """
        Validate process configuration.
        Returns dict with 'valid' bool and 'errors' list.
        """
        errors = []

        if cls.LOG_LEVEL.upper() not in ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']:
            errors.append(f"DPT_LOG_LEVEL must be a logging level name, got {cls.LOG_LEVEL!r}")
        if cls.THREADS < 1:
            errors.append("DPT_THREADS must be at least 1")
        if cls.DEFAULT_SEED < 0:
            errors.append("DPT_SEED must be non-negative")
        if len(cls.DEFAULT_BEHAVIORS) < 1:
            errors.append("DPT_BEHAVIORS must name at least the target behavior")
        elif len(set(cls.DEFAULT_BEHAVIORS)) != len(cls.DEFAULT_BEHAVIORS):
            errors.append("DPT_BEHAVIORS contains duplicate labels")

        return {
            'valid': len(errors) == 0,
            'errors': errors
        }

    @classmethod
    def get_config_summary(cls) -> str:
        """Return a summary of current configuration (safe for logging)."""
        return f"""
DPT Toolkit Configuration:
  Log Level: {cls.LOG_LEVEL}
  Log File: {os.path.join(cls.LOG_DIR, cls.LOG_FILE) if cls.LOG_TO_FILE else 'disabled'}
  Output Dir: {cls.OUTPUT_DIR}
  Default Seed: {cls.DEFAULT_SEED}
  Threads: {cls.THREADS}
  Default Behaviors: {', '.join(cls.DEFAULT_BEHAVIORS)} (target: {cls.DEFAULT_BEHAVIORS[-1] if cls.DEFAULT_BEHAVIORS else '-'})
  Slow Tests: {'✓ Enabled' if cls.SLOW_TESTS else '✗ Disabled'}
"""


if __name__ == "__main__":
    # Quick config check
    validation = Config.validate()
    if validation['valid']:
        print("✓ Configuration valid")
        print(Config.get_config_summary())
    else:
        print("✗ Configuration errors:")
        for error in validation['errors']:
            print(f"  - {error}")
