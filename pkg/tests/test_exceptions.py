"""Unit tests for onestepvc exceptions module."""

import pytest

from onestepvc.exceptions import (
    BenchmarkError,
    CheckpointError,
    ConditioningError,
    ConfigurationError,
    CorpusError,
    DivergenceError,
    DomainError,
    GeometryError,
    JudgeError,
    OneStepVCError,
    ScheduleError,
    ShapeError,
)


class TestExceptionHierarchy:
    """Tests for exception inheritance hierarchy."""

    def test_all_exceptions_inherit_from_base(self):
        """All custom exceptions should inherit from OneStepVCError."""
        exceptions = [
            ConfigurationError,
            ScheduleError,
            ShapeError,
            GeometryError,
            DomainError,
            ConditioningError,
            DivergenceError,
            CheckpointError,
            CorpusError,
            BenchmarkError,
            JudgeError,
        ]

        for exc_class in exceptions:
            assert issubclass(exc_class, OneStepVCError)
            assert issubclass(exc_class, Exception)

    def test_geometry_error_is_a_shape_error(self):
        assert issubclass(GeometryError, ShapeError)


class TestExceptionRaising:
    def test_message_is_preserved(self):
        with pytest.raises(OneStepVCError) as exc_info:
            raise CheckpointError("Checkpoint has format version 2")

        assert "format version 2" in str(exc_info.value)

    def test_catch_geometry_as_shape(self):
        """GeometryError should be catchable as ShapeError."""
        try:
            raise GeometryError("test")
        except ShapeError as e:
            assert isinstance(e, GeometryError)
