import numpy as np
import pytest

from mvsweep.errors import DimensionMismatch, ImageTooSmall, NoValidFlow
from mvsweep.matching import (
    PYRAMID_KERNELS,
    CorrelationVolume,
    FeatureMap,
    FeatureParams,
    FlowField,
    FlowParams,
    ImageBuffer,
    build_correlation_volume,
    build_pyramid,
    extract_features,
    flow_to_matches,
    lookup,
    solve_flow,
    solve_flow_with_diagnostics,
)
from mvsweep import synth


def random_feature_map(rng, h, w, d=8, scale=4):
    f = rng.normal(size=(h, w, d))
    f /= np.linalg.norm(f, axis=2, keepdims=True)
    return FeatureMap(f, scale=scale)


def textured_image(seed=3, size=256):
    scene = synth.plane_scene(num_views=1, width=size, height=size, seed=seed)
    img, _, _ = synth.render(scene, 0)
    return img


# --- ImageBuffer ---


def test_image_buffer_validation():
    with pytest.raises(ImageTooSmall):
        ImageBuffer(np.zeros((8, 32)))
    with pytest.raises(ValueError):
        ImageBuffer(np.full((32, 32), 1.5))
    with pytest.raises(ValueError):
        ImageBuffer(np.full((32, 32), np.nan))
    buf = ImageBuffer(np.zeros((32, 48)))
    assert buf.height == 32 and buf.width == 48 and buf.channels == 1


# --- extract_features ---


def test_constant_image_gives_identical_unit_descriptors():
    img = ImageBuffer(np.full((64, 64), 0.4))
    fmap = extract_features(img)
    f = fmap.features
    assert np.abs(np.linalg.norm(f, axis=2) - 1.0).max() < 1e-6
    assert np.abs(f - f[0, 0]).max() < 1e-9


def test_descriptor_norms_are_unit():
    img = textured_image(seed=5, size=128)
    f = extract_features(img).features
    norms = np.linalg.norm(f, axis=2)
    assert norms.min() > 1 - 1e-6 and norms.max() < 1 + 1e-6


def test_mirrored_image_mirrors_symmetric_channels():
    img = textured_image(seed=6, size=128)
    mirrored = ImageBuffer(img.pixels[:, ::-1])
    f = extract_features(img).features
    g = extract_features(mirrored).features
    # Channels invariant under horizontal mirroring: gray bands, d/dy pair,
    # gradient magnitude, and the bias channel (layout per extract_features).
    symmetric = [0, 1, 3, 5, 6, f.shape[2] - 1]
    assert np.abs(g[:, ::-1][:, :, symmetric] - f[:, :, symmetric]).max() < 1e-9


def test_extract_features_rejects_tiny_grid():
    with pytest.raises(ImageTooSmall):
        extract_features(ImageBuffer(np.zeros((16, 16))), FeatureParams(block=8))


def test_extract_features_deterministic():
    img = textured_image(seed=7, size=96)
    a = extract_features(img).features
    b = extract_features(img).features
    assert np.array_equal(a, b)


# --- correlation volume ---


def test_self_correlation_peaks_on_diagonal():
    rng = np.random.default_rng(0)
    fmap = random_feature_map(rng, 6, 7)
    vol = build_correlation_volume(fmap, fmap).corr
    for i in range(6):
        for j in range(7):
            flat = vol[i, j].reshape(-1)
            assert flat.argmax() == i * 7 + j
            assert abs(vol[i, j, i, j] - 1.0) < 1e-12


def test_orthogonal_descriptors_give_zero():
    e0 = np.zeros((1, 1, 4))
    e0[..., 0] = 1.0
    e1 = np.zeros((1, 1, 4))
    e1[..., 1] = 1.0
    vol = build_correlation_volume(FeatureMap(e0, 4), FeatureMap(e1, 4)).corr
    assert abs(vol[0, 0, 0, 0]) < 1e-7


def test_volume_matches_quadruple_loop_oracle():
    rng = np.random.default_rng(1)
    f1 = random_feature_map(rng, 4, 4)
    f2 = random_feature_map(rng, 4, 4)
    vol = build_correlation_volume(f1, f2).corr
    for i in range(4):
        for j in range(4):
            for k in range(4):
                for l in range(4):
                    want = sum(
                        f1.features[i, j, d] * f2.features[k, l, d] for d in range(8)
                    )
                    assert abs(vol[i, j, k, l] - want) <= 1e-7


def test_volume_swap_symmetry():
    rng = np.random.default_rng(2)
    f1 = random_feature_map(rng, 3, 5)
    f2 = random_feature_map(rng, 4, 6)
    a = build_correlation_volume(f1, f2).corr
    b = build_correlation_volume(f2, f1).corr
    assert np.abs(a - np.transpose(b, (2, 3, 0, 1))).max() < 1e-12


def test_volume_entries_within_cosine_range():
    rng = np.random.default_rng(3)
    vol = build_correlation_volume(
        random_feature_map(rng, 5, 5), random_feature_map(rng, 5, 5)
    ).corr
    assert vol.min() >= -1.0 - 1e-6 and vol.max() <= 1.0 + 1e-6


def test_volume_dimension_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(DimensionMismatch):
        build_correlation_volume(
            random_feature_map(rng, 4, 4, d=8), random_feature_map(rng, 4, 4, d=16)
        )
    with pytest.raises(DimensionMismatch):
        build_correlation_volume(
            random_feature_map(rng, 4, 4, scale=4), random_feature_map(rng, 4, 4, scale=2)
        )


# --- pyramid ---


def test_pyramid_constant_volume():
    vol = CorrelationVolume(np.full((3, 3, 8, 8), 0.25))
    pyr = build_pyramid(vol)
    for level in pyr.levels:
        assert np.abs(level - 0.25).max() < 1e-12


def test_pyramid_block_means_match_hand_oracle():
    rng = np.random.default_rng(5)
    vals = rng.uniform(-1, 1, size=(1, 1, 4, 4))
    pyr = build_pyramid(CorrelationVolume(vals))
    level1 = pyr.levels[1][0, 0]
    for a in range(2):
        for b in range(2):
            want = vals[0, 0, 2 * a : 2 * a + 2, 2 * b : 2 * b + 2].mean()
            assert abs(level1[a, b] - want) < 1e-12
    # kernel 4 pools everything; kernel 8 covers it as one partial block
    assert abs(pyr.levels[2][0, 0, 0, 0] - vals.mean()) < 1e-12
    assert abs(pyr.levels[3][0, 0, 0, 0] - vals.mean()) < 1e-12


def test_pyramid_partial_edge_blocks():
    rng = np.random.default_rng(6)
    vals = rng.uniform(-1, 1, size=(1, 1, 5, 5))
    level1 = build_pyramid(CorrelationVolume(vals)).levels[1][0, 0]
    assert level1.shape == (3, 3)
    for a in range(3):
        for b in range(3):
            block = vals[0, 0, 2 * a : min(2 * a + 2, 5), 2 * b : min(2 * b + 2, 5)]
            assert abs(level1[a, b] - block.mean()) < 1e-12


def test_pyramid_shapes_and_mean_preservation():
    rng = np.random.default_rng(7)
    vals = rng.uniform(-1, 1, size=(2, 3, 16, 24))
    pyr = build_pyramid(CorrelationVolume(vals))
    for level, k in zip(pyr.levels, PYRAMID_KERNELS):
        assert level.shape == (2, 3, int(np.ceil(16 / k)), int(np.ceil(24 / k)))
        # 16 and 24 split into full blocks for k in {1, 2, 4, 8}; mean-pooling
        # full blocks preserves the mean.
        assert abs(level.mean() - vals.mean()) < 1e-6


# --- lookup ---


def test_lookup_center_on_self_correlation():
    rng = np.random.default_rng(8)
    fmap = random_feature_map(rng, 6, 6)
    pyr = build_pyramid(build_correlation_volume(fmap, fmap))
    zero_flow = FlowField(np.zeros((6, 6, 2)), np.ones((6, 6), bool))
    feats = lookup(pyr, zero_flow, radius=1)
    center = feats[:, :, 4]  # window index (dy=0, dx=0) of level 0
    assert np.abs(center - 1.0).max() < 1e-9


def test_lookup_integer_flow_equals_direct_indexing():
    rng = np.random.default_rng(9)
    f1 = random_feature_map(rng, 5, 6)
    f2 = random_feature_map(rng, 7, 8)
    vol = build_correlation_volume(f1, f2)
    pyr = build_pyramid(vol)
    flow_arr = rng.integers(-3, 4, size=(5, 6, 2)).astype(float)
    flow = FlowField(flow_arr, np.ones((5, 6), bool))
    r = 2
    side = 2 * r + 1
    feats = lookup(pyr, flow, radius=r)[:, :, : side * side]
    for i in range(5):
        for j in range(6):
            for oy in range(-r, r + 1):
                for ox in range(-r, r + 1):
                    k = int(j + flow_arr[i, j, 0]) + ox
                    l = int(i + flow_arr[i, j, 1]) + oy
                    want = vol.corr[i, j, l, k] if 0 <= l < 7 and 0 <= k < 8 else 0.0
                    got = feats[i, j, (oy + r) * side + (ox + r)]
                    assert got == want


def test_lookup_outside_returns_zero():
    rng = np.random.default_rng(10)
    fmap = random_feature_map(rng, 6, 6)
    pyr = build_pyramid(build_correlation_volume(fmap, fmap))
    far = FlowField(np.full((6, 6, 2), 500.0), np.ones((6, 6), bool))
    feats = lookup(pyr, far, radius=2)
    assert np.all(feats == 0.0)


def test_lookup_feature_length():
    rng = np.random.default_rng(11)
    fmap = random_feature_map(rng, 4, 4)
    pyr = build_pyramid(build_correlation_volume(fmap, fmap))
    flow = FlowField(np.zeros((4, 4, 2)), np.ones((4, 4), bool))
    assert lookup(pyr, flow, radius=3).shape == (4, 4, 4 * 7 * 7)


# --- solve_flow ---


@pytest.fixture(scope="module")
def shift_pair():
    img = textured_image(seed=3, size=256)
    f1 = extract_features(img)
    f2 = FeatureMap(np.roll(f1.features, 3, axis=1), scale=f1.scale)
    return f1, f2


def interior_mask(shape, margin=6):
    m = np.zeros(shape, bool)
    m[margin:-margin, margin:-margin] = True
    return m


def test_flow_identical_images(shift_pair):
    f1, _ = shift_pair
    flow = solve_flow(f1, f1)
    assert np.hypot(flow.flow[..., 0], flow.flow[..., 1]).mean() < 0.05


def test_flow_recovers_known_shift(shift_pair):
    f1, f2 = shift_pair
    flow = solve_flow(f1, f2)
    interior = interior_mask(flow.valid.shape)
    err = np.hypot(flow.flow[..., 0] - 3.0, flow.flow[..., 1])
    assert (err[interior] < 0.5).mean() >= 0.95


def test_flow_mean_correlation_monotone(shift_pair):
    f1, f2 = shift_pair
    _, stage_means = solve_flow_with_diagnostics(f1, f2)
    for means in stage_means:
        assert all(b >= a - 1e-6 for a, b in zip(means, means[1:]))


def test_flow_deterministic(shift_pair):
    f1, f2 = shift_pair
    a = solve_flow(f1, f2)
    b = solve_flow(f1, f2)
    assert np.array_equal(a.flow, b.flow)
    assert np.array_equal(a.valid, b.valid)


def test_flow_forward_backward_roundtrip(shift_pair):
    f1, f2 = shift_pair
    fwd = solve_flow(f1, f2)
    bwd = solve_flow(f2, f1)
    h, w = fwd.valid.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tx = np.clip(np.round(xs + fwd.flow[..., 0]).astype(int), 0, w - 1)
    ty = np.clip(np.round(ys + fwd.flow[..., 1]).astype(int), 0, h - 1)
    rt = fwd.flow + bwd.flow[ty, tx]
    err = np.hypot(rt[..., 0], rt[..., 1])
    interior = interior_mask(fwd.valid.shape)
    assert (err[interior] < 0.5).mean() >= 0.9


def test_flow_field_zeroes_invalid_pixels():
    flow = np.ones((4, 4, 2))
    valid = np.zeros((4, 4), bool)
    valid[0, 0] = True
    field = FlowField(flow, valid)
    assert np.all(field.flow[~valid] == 0.0)
    assert np.all(field.flow[0, 0] == 1.0)


def test_flow_params_validation():
    with pytest.raises(ValueError):
        FlowParams(iterations=0)
    with pytest.raises(ValueError):
        FlowParams(smooth_lambda=1.0)
    with pytest.raises(ValueError):
        FlowParams(radius=0)


# --- flow_to_matches ---


def test_flow_to_matches_empty_mask():
    field = FlowField(np.zeros((4, 4, 2)), np.zeros((4, 4), bool))
    with pytest.raises(NoValidFlow):
        flow_to_matches(field, scale=4)


def test_flow_to_matches_identity_grid():
    field = FlowField(np.zeros((32, 32, 2)), np.ones((32, 32), bool))
    matches = flow_to_matches(field, scale=1, stride=8)
    assert len(matches) == 16
    for m in matches:
        assert np.array_equal(m.x, m.x_prime)
        assert m.x[0] % 8 == 0 and m.x[1] % 8 == 0


def test_flow_to_matches_shift(shift_pair):
    f1, f2 = shift_pair
    flow = solve_flow(f1, f2)
    matches = flow_to_matches(flow, scale=4, stride=4)
    exact = 0
    for m in matches:
        if 32 < m.x[0] < 200 and 32 < m.x[1] < 200:
            if np.abs(m.x_prime - (m.x + [12.0, 0.0])).max() < 1e-6:
                exact += 1
    assert exact > 0.9 * sum(1 for m in matches if 32 < m.x[0] < 200 and 32 < m.x[1] < 200)
    assert all(0.0 <= m.weight <= 1.0 for m in matches)
