"""Tests for streams.py module."""

import numpy as np
import pytest

from dsre.streams import Purpose, stream


class TestStream:
    """Tests for counter-based streams."""

    def test_same_key_reproduces(self):
        """Should yield identical draws for the same (seed, purpose, index)."""
        a = stream(7, Purpose.WALK, 3).random(16)
        b = stream(7, Purpose.WALK, 3).random(16)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize(
        "other",
        [
            (8, Purpose.WALK, 3),
            (7, Purpose.CONDUCTANCE, 3),
            (7, Purpose.WALK, 4),
        ],
    )
    def test_different_keys_differ(self, other: tuple):
        """Should separate seeds, purposes and stream indices."""
        a = stream(7, Purpose.WALK, 3).random(16)
        b = stream(*other).random(16)
        assert not np.array_equal(a, b)

    def test_independent_of_draw_order(self):
        """Should not depend on what other streams consumed before."""
        first = stream(1, Purpose.WALK, 10).random(4)
        for index in range(10):
            stream(1, Purpose.WALK, index).random(1000)
        np.testing.assert_array_equal(stream(1, Purpose.WALK, 10).random(4), first)

    @pytest.mark.parametrize("seed,index", [(-1, 0), (2**64, 0), (0, -1), (0, 2**64)])
    def test_rejects_out_of_range(self, seed: int, index: int):
        """Should reject seeds and indices outside [0, 2**64)."""
        with pytest.raises(ValueError):
            stream(seed, Purpose.TEST_FIELD, index)
