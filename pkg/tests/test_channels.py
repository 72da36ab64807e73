import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glaciermap.channels import (
    ChannelRegistry,
    ChannelStack,
    ChannelSubsetSpec,
    add_index_channels,
    attach_terrain,
    compute_index,
    normalized_difference,
    select_channels,
)
from glaciermap.errors import ConfigurationError, ValidationError

from conftest import make_tile


def le7_tile(rng, size=8):
    data = rng.random((5, size, size)).astype(np.float32)
    return make_tile(data, channels=["B1", "B2", "B3", "B4", "B5"])


class TestComputeIndex:
    def test_ndsi_hand_value(self, rng):
        tile = le7_tile(rng)
        tile.data[1] = 0.6  # B2
        tile.data[4] = 0.2  # B5
        ndsi = compute_index(tile, "NDSI")
        np.testing.assert_allclose(ndsi, 0.5, rtol=1e-6)

    def test_zero_denominator_gives_zero(self, rng):
        tile = le7_tile(rng)
        tile.data[1] = 0.0
        tile.data[4] = 0.0
        assert (compute_index(tile, "NDSI") == 0.0).all()

    def test_equal_bands_give_zero(self, rng):
        tile = le7_tile(rng)
        tile.data[3] = tile.data[2] = np.abs(tile.data[2]) + 0.5
        assert (compute_index(tile, "NDVI") == 0.0).all()

    def test_nan_propagates(self, rng):
        tile = le7_tile(rng)
        tile.data[:, 2, 3] = np.nan
        tile.nodata_mask[2, 3] = True
        ndwi = compute_index(tile, "NDWI")
        assert np.isnan(ndwi[2, 3])
        assert np.isfinite(ndwi[0, 0])

    def test_band_pairs_follow_registry(self, rng):
        tile = le7_tile(rng)
        expected = {
            "NDSI": (tile.channel("B2"), tile.channel("B5")),
            "NDVI": (tile.channel("B4"), tile.channel("B3")),
            "NDWI": (tile.channel("B4"), tile.channel("B5")),
        }
        for kind, (a, b) in expected.items():
            np.testing.assert_array_equal(
                compute_index(tile, kind), normalized_difference(a, b)
            )

    def test_missing_band_errors(self, rng):
        tile = make_tile(rng.random((2, 4, 4)), channels=["B1", "B3"])
        with pytest.raises(ConfigurationError):
            compute_index(tile, "NDSI")

    def test_custom_registry_pair(self, rng):
        tile = le7_tile(rng)
        registry = ChannelRegistry(index_bands={"NDWI": ("B2", "B4")})  # McFeeters
        np.testing.assert_array_equal(
            compute_index(tile, "NDWI", registry),
            normalized_difference(tile.channel("B2"), tile.channel("B4")),
        )

    def test_index_range_property(self, rng):
        tile = le7_tile(rng)
        for kind in ("NDSI", "NDVI", "NDWI"):
            idx = compute_index(tile, kind)
            ok = np.isfinite(idx)
            assert (idx[ok] >= -1.0).all() and (idx[ok] <= 1.0).all()

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.floats(1e-3, 1e3),
        b=st.floats(1e-3, 1e3),
        c=st.floats(1e-3, 1e3),
    )
    def test_scale_invariance(self, a, b, c):
        one = normalized_difference(
            np.float32([[a]]), np.float32([[b]])
        )[0, 0]
        scaled = normalized_difference(
            np.float32([[a * c]]), np.float32([[b * c]])
        )[0, 0]
        assert abs(one - scaled) < 1e-6


class TestAttachTerrain:
    def test_channel_count_grows_by_two(self, rng):
        tile = le7_tile(rng, size=64)
        out = attach_terrain(tile, rng.random((64, 64)), rng.random((64, 64)))
        assert len(out.channels) == len(tile.channels) + 2
        assert out.channels[-2:] == ["ELEVATION", "SLOPE"]

    def test_mismatched_grid_rejected(self, rng):
        tile = le7_tile(rng, size=64)
        with pytest.raises(ValidationError):
            attach_terrain(tile, rng.random((32, 64)), rng.random((64, 64)))

    def test_duplicate_channel_rejected(self, rng):
        tile = le7_tile(rng)
        once = attach_terrain(tile, rng.random((8, 8)), rng.random((8, 8)))
        with pytest.raises(ConfigurationError):
            attach_terrain(once, rng.random((8, 8)), rng.random((8, 8)))

    def test_attached_grid_roundtrips_bitwise(self, rng):
        tile = le7_tile(rng)
        elev = rng.random((8, 8)).astype(np.float32)
        out = attach_terrain(tile, elev, rng.random((8, 8)))
        np.testing.assert_array_equal(
            out.channel("ELEVATION").view(np.uint32), elev.view(np.uint32)
        )

    def test_existing_channels_untouched(self, rng):
        tile = le7_tile(rng)
        out = attach_terrain(tile, rng.random((8, 8)), rng.random((8, 8)))
        np.testing.assert_array_equal(out.data[:5], tile.data)


class TestSelectChannels:
    def test_false_color_subset_order(self, rng):
        tile = attach_terrain(
            add_index_channels(le7_tile(rng)), rng.random((8, 8)), rng.random((8, 8))
        )
        stack = ChannelStack(tile, list(tile.channels))
        out = select_channels(stack, ChannelSubsetSpec("false_color", ["B5", "B4", "B2"]))
        assert out.names == ["B5", "B4", "B2"]
        np.testing.assert_array_equal(
            out.tensor(),
            np.stack([tile.channel("B5"), tile.channel("B4"), tile.channel("B2")]),
        )

    def test_full_subset_is_identity(self, rng):
        tile = le7_tile(rng)
        stack = ChannelStack(tile, list(tile.channels))
        out = select_channels(stack, ChannelSubsetSpec("all", tile.channels))
        assert out.names == stack.names
        np.testing.assert_array_equal(out.tensor(), stack.tensor())

    def test_true_color_subset(self, rng):
        stack = ChannelStack(le7_tile(rng), ["B1", "B2", "B3", "B4", "B5"])
        out = select_channels(stack, ChannelSubsetSpec("true_color", ["B3", "B2", "B1"]))
        assert out.names == ["B3", "B2", "B1"]

    def test_unknown_channel_errors(self, rng):
        stack = ChannelStack(le7_tile(rng), ["B1", "B2"])
        with pytest.raises(ConfigurationError):
            select_channels(stack, ChannelSubsetSpec("bad", ["B9"]))

    def test_nested_selection_composes(self, rng):
        stack = ChannelStack(le7_tile(rng), ["B1", "B2", "B3", "B4", "B5"])
        inner = select_channels(stack, ChannelSubsetSpec("s1", ["B5", "B3", "B2", "B1"]))
        outer = select_channels(inner, ChannelSubsetSpec("s2", ["B2", "B5"]))
        direct = select_channels(stack, ChannelSubsetSpec("s", ["B2", "B5"]))
        assert outer.names == direct.names
        np.testing.assert_array_equal(outer.tensor(), direct.tensor())

    def test_empty_subset_rejected(self):
        with pytest.raises(ConfigurationError):
            ChannelSubsetSpec("empty", [])


class TestRegistry:
    def test_json_roundtrip(self):
        reg = ChannelRegistry()
        back = ChannelRegistry.from_json(reg.to_json())
        assert back.raw_bands == reg.raw_bands
        assert back.index_bands == reg.index_bands
        assert back.terrain == reg.terrain

    def test_default_covers_fifteen_band_layout(self):
        # 9 LE7 bands + 3 indices + elevation + slope; a 15th slot stays
        # user-registrable rather than hard-coded
        reg = ChannelRegistry()
        assert len(reg.all_channels) == 14
        reg.raw_bands.append("QA")
        assert len(reg.all_channels) == 15
