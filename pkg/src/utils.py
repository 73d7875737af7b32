import logging
import os
import re
import sys

import numpy as np

from src.config import DEFAULT_LOG_LEVEL, LOG_ENV_VAR
from src.errors import ValidationError

logger = logging.getLogger(__name__)

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

_ARCH_PATTERN = re.compile(r"^dense:(\d+(?:,\d+)*)(?:\s+dropout:([0-9]*\.?[0-9]+))?$")
_BLOBS_PATTERN = re.compile(r"^blobs:(\d+),(\d+),([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)$")
_SLOT_PATTERN = re.compile(r"^([A-Za-z0-9_\-]+):(\d+)(?::(\d+))?$")


def configure_logging(level_name=None):
    """
    Installs one stderr handler on the root logger.
    The level comes from UQWIZ_LOG unless given explicitly.
    """
    level_name = (level_name or os.environ.get(LOG_ENV_VAR) or DEFAULT_LOG_LEVEL).lower()
    level = LOG_LEVELS.get(level_name, logging.WARNING)

    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_uqwiz", False):
            root.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(processName)s] %(name)s: %(message)s"))
    handler._uqwiz = True
    root.addHandler(handler)
    root.setLevel(level)
    if level_name not in LOG_LEVELS:
        logger.warning("Unknown log level '%s' in %s, using warn; expected one of %s",
                       level_name, LOG_ENV_VAR, ", ".join(LOG_LEVELS))
    return level


def derive_seed(base_seed, model_id):
    """
    Per-model 64-bit seed from (base_seed, model_id), identical in every process.
    """
    sequence = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(model_id),))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def parse_arch(arch):
    """
    Parses an architecture string such as "dense:16,8 dropout:0.1".
    Returns (hidden_sizes, dropout_rate); dropout_rate is None when absent.
    """
    if not arch:
        raise ValidationError("Architecture is required, e.g. 'dense:16 dropout:0.1'")
    match = _ARCH_PATTERN.match(arch.strip())
    if not match:
        raise ValidationError(f"Cannot parse architecture '{arch}'; expected 'dense:<h1>,<h2>,... dropout:<p>'")

    hidden_sizes = [int(h) for h in match.group(1).split(",")]
    if any(h < 1 for h in hidden_sizes):
        raise ValidationError("Hidden layer sizes must be positive")

    rate = None
    if match.group(2) is not None:
        rate = float(match.group(2))
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"Dropout rate must be in [0, 1), got {rate}")
    return hidden_sizes, rate


def parse_dataset_spec(spec):
    """
    "blobs:<N>,<C>,<spread>" -> ("blobs", (N, C, spread))
    anything else is treated as a CSV path -> ("csv", path)
    """
    if not spec:
        raise ValidationError("Dataset is required")
    if spec.startswith("blobs:"):
        match = _BLOBS_PATTERN.match(spec.strip())
        if not match:
            raise ValidationError(f"Cannot parse dataset '{spec}'; expected 'blobs:<N>,<C>,<spread>'")
        return "blobs", (int(match.group(1)), int(match.group(2)), float(match.group(3)))
    return "csv", spec


def parse_slots(slots):
    """
    Parses "A:1,B:1" (device_id:capacity[:memory_hint]) into a list of tuples.
    """
    if not slots:
        raise ValidationError("Device slots are required for the device context, e.g. 'A:1,B:1'")
    parsed = []
    for part in slots.split(","):
        match = _SLOT_PATTERN.match(part.strip())
        if not match:
            raise ValidationError(f"Cannot parse device slot '{part}'; expected '<device_id>:<capacity>'")
        memory_hint = int(match.group(3)) if match.group(3) else None
        parsed.append((match.group(1), int(match.group(2)), memory_hint))
    return parsed


def parse_processes_list(value):
    try:
        counts = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"Cannot parse processes list '{value}'")
    if not counts or any(c < 0 for c in counts):
        raise ValidationError(f"Processes list must contain non-negative integers, got '{value}'")
    return counts


def parse_bool(value):
    cleaned = str(value).strip().lower()
    if cleaned in ("true", "1", "yes", "y"):
        return True
    if cleaned in ("false", "0", "no", "n"):
        return False
    raise ValidationError(f"Expected true or false, got '{value}'")
