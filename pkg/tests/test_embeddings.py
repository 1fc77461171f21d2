import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowcast.embeddings import (N_FEATURES, FeatureBuilder, assemble_features, constant_maps,
                                 feature_names, position_embedding, time_embedding)
from flowcast.grid import GridSpec


def statics(g):
    return np.zeros(g.shape), np.ones(g.shape)


def test_channel_recipe_count():
    # 4 time + 6 position + 4*6 products + 4 constants
    assert N_FEATURES == 4 + 6 + 24 + 4 == 38
    names = feature_names()
    assert len(set(names)) == len(names) == 38
    assert names[:4] == ("sin_day", "cos_day", "sin_year", "cos_year")
    assert names[-4:] == ("lat_map", "lon_map", "lsm", "oro")


def test_time_embedding_values():
    np.testing.assert_allclose(time_embedding(0.0), [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(time_embedding(0.25)[:2], [1, 0], atol=1e-15)
    np.testing.assert_allclose(time_embedding(365 / 4)[2:], [1, 0], atol=1e-12)


@given(st.floats(0, 1000), st.integers(-3, 3))
def test_daily_channels_are_one_day_periodic(t, k):
    np.testing.assert_allclose(time_embedding(t)[:2], time_embedding(t + k)[:2], atol=1e-9)


def test_position_embedding_channels():
    g = GridSpec.regular(4, 8)
    p = position_embedding(g)
    lat = np.deg2rad(np.asarray(g.lat_deg))[:, None]
    lon = np.deg2rad(np.asarray(g.lon_deg))[None, :]
    np.testing.assert_allclose(p[0], np.broadcast_to(np.sin(lat), g.shape))
    np.testing.assert_allclose(p[5], np.sin(lat) * np.sin(lon))
    np.testing.assert_allclose(p[0] ** 2 + p[1] ** 2, 1.0)


def test_products_are_time_major():
    g = GridSpec.regular(4, 8)
    lsm, oro = statics(g)
    fs = assemble_features(3.3, g, lsm, oro)
    te, pe = time_embedding(3.3), position_embedding(g)
    assert fs.values.shape == (38, 4, 8) and fs.C == 38
    for i in range(4):
        for j in range(6):
            np.testing.assert_allclose(fs.values[10 + 6 * i + j], te[i] * pe[j])
    np.testing.assert_allclose(fs.values[34], np.asarray(g.lat_deg)[:, None] / 90 * np.ones(8))
    np.testing.assert_array_equal(fs.values[37], oro)


def test_constant_maps_validate_shape():
    g = GridSpec.regular(4, 8)
    with pytest.raises(ValueError):
        constant_maps(g, np.zeros((3, 8)), np.zeros((4, 8)))


def test_builder_is_pure_in_time():
    g = GridSpec.regular(4, 8)
    b = FeatureBuilder(g, *statics(g))
    a1 = b.values(1.5).copy()
    b.values(2.0)
    np.testing.assert_array_equal(b.values(1.5), a1)
    np.testing.assert_array_equal(FeatureBuilder(g, *statics(g)).values(1.5), a1)
