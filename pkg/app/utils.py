"""
Utility functions for Kernel CT Reconstruction
Logging, configuration, error types, seeded streams and flag parsing
"""

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Dict, List, Any, Optional, Union

import numpy as np
from pydantic import BaseModel

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler('kernel_ct.log'),
        logging.StreamHandler()
    ]
)

logger = logging.getLogger(__name__)


class KernelCTError(Exception):
    """Base error for the reconstruction library"""


class InvalidArgumentError(KernelCTError, ValueError):
    """Input outside the domain of an operation"""


class DataFormatError(KernelCTError):
    """Malformed or inconsistent file contents"""


class NumericalError(KernelCTError):
    """Factorization or accuracy failure"""

    def __init__(self, message: str, condition: Optional[float] = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class RankZeroError(NumericalError):
    """Gram matrix without a nonzero eigenvalue"""


class VerificationError(KernelCTError):
    """An oracle check did not pass"""


class ValidationUtils:
    """Validation utilities"""

    @staticmethod
    def as_vector(value: Any, name: str = "vector") -> np.ndarray:
        """Coerce a scalar or sequence to a 1-D float array"""
        arr = np.atleast_1d(np.asarray(value, dtype=float))
        if arr.ndim != 1:
            raise InvalidArgumentError(f"{name} must be one-dimensional, got shape {arr.shape}")
        return arr

    @staticmethod
    def check_unit_vector(theta: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Reject vectors whose norm differs from 1"""
        theta = ValidationUtils.as_vector(theta, "theta")
        norm = float(np.linalg.norm(theta))
        if abs(norm - 1.0) > tol:
            raise InvalidArgumentError(f"theta must be a unit vector, got norm {norm!r}")
        return theta

    @staticmethod
    def check_in_ball(points: np.ndarray, name: str = "point", tol: float = 1e-12) -> np.ndarray:
        """Reject points outside the closed unit ball (last axis is the coordinate axis)"""
        points = np.asarray(points, dtype=float)
        norms = np.linalg.norm(np.atleast_1d(points), axis=-1) if points.ndim else np.abs(points)
        if np.any(norms > 1.0 + tol):
            raise InvalidArgumentError(f"{name} lies outside the unit ball (max norm {float(np.max(norms)):.6g})")
        return points

    @staticmethod
    def check_probability(value: float, name: str) -> float:
        """Reject values outside [0, 1]"""
        if not 0.0 <= value <= 1.0:
            raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")
        return float(value)


class ValueParser:
    """Parse CLI values such as 2^11, 2^-7 and 2^5..2^15"""

    _POWER = re.compile(r'^\s*([+-]?\d+(?:\.\d+)?)\s*\^\s*([+-]?\d+(?:\.\d+)?)\s*$')

    @staticmethod
    def parse_number(text: Union[str, float, int]) -> float:
        """Parse a plain float or base^exponent notation"""
        if isinstance(text, (int, float)):
            return float(text)
        match = ValueParser._POWER.match(text)
        if match:
            return float(match.group(1)) ** float(match.group(2))
        try:
            return float(text)
        except ValueError:
            raise InvalidArgumentError(f"Cannot parse number: {text!r}")

    @staticmethod
    def parse_range(text: str) -> List[float]:
        """Expand 'b^k1..b^k2' in unit exponent steps, or a single value"""
        if '..' not in text:
            return [ValueParser.parse_number(text)]
        left, right = (part.strip() for part in text.split('..', 1))
        lo = ValueParser._POWER.match(left)
        hi = ValueParser._POWER.match(right)
        if not lo or not hi or lo.group(1) != hi.group(1):
            raise InvalidArgumentError(f"Ranges must share a base, e.g. 2^5..2^15: {text!r}")
        base = float(lo.group(1))
        k1, k2 = int(float(lo.group(2))), int(float(hi.group(2)))
        step = 1 if k2 >= k1 else -1
        return [base ** k for k in range(k1, k2 + step, step)]

    @staticmethod
    def parse_list(text: str) -> List[float]:
        """Parse a comma-separated list whose items may be ranges"""
        values: List[float] = []
        for item in text.split(','):
            if item.strip():
                values.extend(ValueParser.parse_range(item))
        return values


def config_hash(params: Dict[str, Any]) -> str:
    """Digest of a parameter set, stable under key order"""
    canonical = json.dumps(params, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def seeded_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one named stream of a seed.

    Philox keyed by (stream << 64) | seed: stream 0 draws angle grids,
    stream 1 + i draws the noise row of angle i, and
    Monte-Carlo draw k uses stream 2**62 + k.
    """
    key = (int(stream) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def ensure_parent(path: Union[str, Path]) -> Path:
    """Create the parent directory of an output path"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


class ConfigManager:
    """Manage configuration settings"""

    def __init__(self, config_file: str = "config.json"):
        self.config_file = config_file
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Any]:
        """Load configuration from file"""
        default_config = {
            "kernel_settings": {
                "gamma": 2048.0,
                "nu": 0.0078125
            },
            "grid_settings": {
                "n_angles": 40,
                "n_mesh": 100,
                "grid": "random",
                "lambda": 0.0,
                "seed": 0,
                "unit": "pixel"
            },
            "numerics": {
                "tau_parallel": 1e-8,
                "delta_boundary": 1e-6,
                "tau_rank": 1e-10,
                "tol_hlcc": 1e-3,
                "oracle_order": 64,
                "oracle_panels": 1,
                "workers": 4
            },
            "fbp_settings": {
                "padding": 2
            },
            "paths": {
                "cache_dir": "cache",
                "results_dir": "results"
            }
        }

        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                config = json.load(f)
            merged = dict(default_config)
            for key, value in config.items():
                if isinstance(value, dict) and isinstance(merged.get(key), dict):
                    merged[key] = {**merged[key], **value}
                else:
                    merged[key] = value
            return merged
        except FileNotFoundError:
            logger.info(f"Config file not found, using defaults")
            return default_config
        except json.JSONDecodeError as e:
            logger.error(f"Error parsing config file {self.config_file}: {e}")
            return default_config

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value"""
        return self.config.get(key, default)

    def setting(self, section: str, key: str, default: Any = None) -> Any:
        """Get a value from a nested section"""
        return self.config.get(section, {}).get(key, default)


# Global configuration instance
config = ConfigManager()


class RunConfig(BaseModel):
    """Parameters of one command run; config_hash is embedded in every output"""

    command: str
    params: Dict[str, Any] = {}

    @property
    def config_hash(self) -> str:
        return config_hash({"command": self.command, **self.params})
