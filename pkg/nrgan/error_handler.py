"""Centralized error handling for nrgan.

Defines the exception hierarchy raised by the library and an
:class:`ErrorHandler` that turns any exception into a user-facing message,
a log record at the right level, and a CLI exit status.
"""

from __future__ import annotations

import logging
import traceback
from enum import Enum
from typing import Any, Dict, Optional, Tuple


class NRGanError(Exception):
    """Base class for errors raised by nrgan."""


class ValidationError(NRGanError, ValueError):
    """A spec, shape or parameter violates a documented invariant."""


class PreconditionError(NRGanError, ValueError):
    """An input is valid on its own but not for this operation."""


class ConfigurationError(NRGanError, RuntimeError):
    """The run is configured in a way that cannot work."""


class DivergenceError(NRGanError, RuntimeError):
    """Training produced a non-finite or exploding loss."""


class CheckpointError(NRGanError, RuntimeError):
    """A checkpoint cannot be read or does not match what was expected."""


class FingerprintMismatchError(NRGanError, ValueError):
    """Feature statistics come from different extractors."""


class ErrorCategory(Enum):
    """Categories of errors that can occur in a run."""

    NOISE_MODEL = "noise_model"
    CONFIG = "config"
    DATA = "data"
    CHECKPOINT = "checkpoint"
    TRAINING = "training"
    EVALUATION = "evaluation"
    UNKNOWN = "unknown"


class ErrorSeverity(Enum):
    """Severity levels for errors."""

    LOW = "low"  # run can continue
    MEDIUM = "medium"  # this command fails, artifacts are still usable
    HIGH = "high"  # run stopped, partial artifacts left behind
    CRITICAL = "critical"  # nothing useful was produced


# CLI exit statuses per category
EXIT_CODES = {
    ErrorCategory.TRAINING: 3,
    ErrorCategory.CONFIG: 2,
    ErrorCategory.NOISE_MODEL: 2,
    ErrorCategory.DATA: 1,
    ErrorCategory.CHECKPOINT: 1,
    ErrorCategory.EVALUATION: 1,
    ErrorCategory.UNKNOWN: 1,
}


class ErrorHandler:
    """Centralized error handler with user-friendly messages and suggestions."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def categorize_error(self, error: Exception) -> ErrorCategory:
        """Categorize an error based on its type and message."""
        error_msg = str(error).lower()

        if isinstance(error, DivergenceError):
            return ErrorCategory.TRAINING
        if isinstance(error, CheckpointError):
            return ErrorCategory.CHECKPOINT
        if isinstance(error, FingerprintMismatchError):
            return ErrorCategory.EVALUATION
        if isinstance(error, ConfigurationError):
            return ErrorCategory.CONFIG

        # noise specs are the most common source of validation errors
        if isinstance(error, (ValidationError, PreconditionError)):
            if "noise" in error_msg or "variant" in error_msg or "sigma" in error_msg:
                return ErrorCategory.NOISE_MODEL
            if "config" in error_msg or "schema" in error_msg:
                return ErrorCategory.CONFIG
            return ErrorCategory.DATA

        if isinstance(error, (FileNotFoundError, PermissionError)):
            if "config" in error_msg or ".json" in error_msg:
                return ErrorCategory.CONFIG
            return ErrorCategory.DATA

        if "checkpoint" in error_msg:
            return ErrorCategory.CHECKPOINT

        return ErrorCategory.UNKNOWN

    def get_severity(self, error: Exception, category: ErrorCategory) -> ErrorSeverity:
        """Determine the severity of an error."""
        if category == ErrorCategory.TRAINING:
            return ErrorSeverity.HIGH
        elif category in (ErrorCategory.CONFIG, ErrorCategory.NOISE_MODEL):
            return ErrorSeverity.MEDIUM
        elif category in (ErrorCategory.CHECKPOINT, ErrorCategory.EVALUATION):
            return ErrorSeverity.MEDIUM
        elif category == ErrorCategory.DATA:
            return ErrorSeverity.MEDIUM
        else:
            return ErrorSeverity.CRITICAL

    def generate_user_message(
        self, error: Exception, category: ErrorCategory
    ) -> Tuple[str, str]:
        """Return ``(title, message)`` for ``error``."""
        if category == ErrorCategory.NOISE_MODEL:
            title = "Invalid Noise Model"
            message = (
                "The noise specification is not valid.\n\n"
                "Check the noise section of the config: sigma ranges must satisfy "
                "lo <= hi, mixture weights must sum to 1, kernels must be odd.\n\n"
                f"Details: {error}"
            )
        elif category == ErrorCategory.CONFIG:
            title = "Configuration Error"
            message = (
                "The experiment configuration cannot be used.\n\n"
                "Run `nrgan build-data --help` to see every key and its default.\n\n"
                f"Details: {error}"
            )
        elif category == ErrorCategory.DATA:
            title = "Data Error"
            message = (
                "The images or tensors passed in do not fit the operation.\n\n"
                f"Details: {error}"
            )
        elif category == ErrorCategory.CHECKPOINT:
            title = "Checkpoint Error"
            message = (
                "The checkpoint could not be used.\n\n"
                "It may come from another variant, another kind of model, or an "
                "older format version.\n\n"
                f"Details: {error}"
            )
        elif category == ErrorCategory.TRAINING:
            title = "Training Diverged"
            message = (
                "A training step produced a non-finite or exploding loss.\n\n"
                "Parameters were rolled back to the last good step and a DIVERGED "
                "marker was written next to the partial artifacts.\n\n"
                f"Details: {error}"
            )
        elif category == ErrorCategory.EVALUATION:
            title = "Evaluation Error"
            message = (
                "Feature statistics cannot be compared.\n\n"
                "Delete the cached real_stats_*.npz or use the same extractor seed.\n\n"
                f"Details: {error}"
            )
        else:
            title = "Unexpected Error"
            message = (
                "An unexpected error occurred.\n\n"
                "Check the run log for the traceback.\n\n"
                f"Details: {error}"
            )
        return title, message

    def handle_error(
        self, error: Exception, context: Optional[str] = None
    ) -> Dict[str, Any]:
        """Process an error and return structured information about it.

        Args:
            error: The exception that occurred
            context: Optional description of where it occurred

        Returns:
            Dictionary with title, message, category, severity, exit code and
            suggestions.
        """
        category = self.categorize_error(error)
        severity = self.get_severity(error, category)
        title, message = self.generate_user_message(error, category)

        log_message = f"Error in {context or 'unknown context'}: {error}"
        if severity == ErrorSeverity.CRITICAL:
            self.logger.critical(log_message, exc_info=True)
        elif severity == ErrorSeverity.HIGH:
            self.logger.error(log_message, exc_info=True)
        elif severity == ErrorSeverity.MEDIUM:
            self.logger.warning(log_message)
        else:
            self.logger.info(log_message)

        return {
            "title": title,
            "message": message,
            "category": category,
            "severity": severity,
            "exit_code": EXIT_CODES[category],
            "technical_details": str(error),
            "traceback": (
                traceback.format_exc()
                if severity in (ErrorSeverity.HIGH, ErrorSeverity.CRITICAL)
                else None
            ),
            "context": context,
            "suggestions": self._get_recovery_suggestions(category),
        }

    def _get_recovery_suggestions(self, category: ErrorCategory) -> list[str]:
        if category == ErrorCategory.NOISE_MODEL:
            return [
                "Start from NoiseSpec.preset(<variant>) and change one key at a time",
                "Keep patch sizes no larger than the image side",
            ]
        if category == ErrorCategory.CONFIG:
            return [
                "Compare against config.canonical of a working run",
                "Use filter_mode=blurvh for Poisson noise or set "
                "allow_unfiltered_poisson",
            ]
        if category == ErrorCategory.TRAINING:
            return [
                "Lower the learning rate",
                "Raise r1_gamma",
                "Resume from the last checkpoint in ckpt/",
            ]
        if category == ErrorCategory.CHECKPOINT:
            return ["Check the variant and preset the checkpoint was written with"]
        if category == ErrorCategory.EVALUATION:
            return ["Recompute real statistics with the current extractor"]
        if category == ErrorCategory.DATA:
            return ["Check tensor shapes are [N, H, W, C] and the value range"]
        return ["Check the log file", "Re-run with NRGAN_VERBOSE=1"]


# Global error handler instance
error_handler = ErrorHandler()
