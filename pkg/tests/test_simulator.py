import numpy as np
import pytest

from ereformer.events import encode_bin, split_into_bins
from ereformer.simulator import Plane, SceneSpec, camera_offset, emit_events, random_scene, render_depth, \
    render_intensity


def two_plane_spec(**kw):
    base = dict(width=32, height=32, duration_us=100_000, velocity=(1.0, 0.0),
                planes=[Plane(10.0, 1), Plane(2.0, 2, (-0.3, 0.3, -0.5, 0.5))], seed=0)
    base.update(kw)
    return SceneSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(width=30, height=32)
    with pytest.raises(ValueError):
        SceneSpec(threshold=0.0)
    with pytest.raises(ValueError):
        SceneSpec(planes=[Plane(-1.0)])


def test_static_scene_renders_identically_and_emits_nothing():
    spec = two_plane_spec(velocity=(0.0, 0.0))
    np.testing.assert_array_equal(render_intensity(spec, 0), render_intensity(spec, 70_000))
    assert emit_events(spec).stream.num_events == 0


def test_intensity_range():
    img = render_intensity(random_scene(3, 32, 32, 100_000), 50_000)
    assert img.min() > 0 and img.max() <= 1


def test_single_plane_shift_matches_pinhole_disparity():
    # f = 32 px, depth 4 m, v = 2 m/s: disparity rate 16 px/s, so 250 ms shifts 4 px
    spec = SceneSpec(32, 32, 1_000_000, (2.0, 0.0), [Plane(4.0, 5)])
    a = render_intensity(spec, 100_000)
    b = render_intensity(spec, 350_000)
    np.testing.assert_allclose(b[:, :-4], a[:, 4:], atol=1e-9)


def test_occlusion_ordering():
    spec = two_plane_spec()
    depth, mask = render_depth(spec, 0)
    assert mask.all()
    centre = depth[12:20, 14:18]
    assert np.all(centre == 2.0)
    assert depth[0, 0] == 10.0


def test_single_plane_depth_exact():
    spec = SceneSpec(32, 32, 100_000, (1.0, 0.0), [Plane(5.0, 1, (-1.0, 1.0, -1.0, 1.0))])
    depth, mask = render_depth(spec, 0)
    # f = 32: the 2 m wide rectangle at 5 m spans 12.8 px about the centre
    u = np.arange(32) + 0.5 - 16
    inside = (np.abs(u) * 5.0 / 32 < 1.0)
    expected = np.outer(inside, inside)
    np.testing.assert_array_equal(mask, expected)
    assert np.all(depth[mask] == 5.0) and np.all(depth[~mask] == 0)


def test_threshold_monotonicity():
    counts = [emit_events(two_plane_spec(threshold=th)).stream.num_events for th in (0.1, 0.2, 0.4)]
    assert counts[0] > counts[1] > counts[2] > 0


def test_determinism_and_sorted():
    a = emit_events(random_scene(4, 32, 32, 200_000))
    b = emit_events(random_scene(4, 32, 32, 200_000))
    assert encode_bin(a.stream) == encode_bin(b.stream)
    assert a.depths.tobytes() == b.depths.tobytes()
    s = a.stream
    key = np.stack([s.t, s.y, s.x, s.p])
    order = np.lexsort(key[::-1])
    np.testing.assert_array_equal(order, np.arange(len(order)))
    s.validate()


def test_depth_maps_align_with_bins():
    seq = emit_events(random_scene(2, 32, 32, 180_000), dt_us=50_000)
    assert seq.num_bins == len(split_into_bins(seq.stream, 50_000)) == 4
    assert seq.depths.shape == (4, 32, 32)


def test_polarity_flips_with_direction():
    fwd = emit_events(SceneSpec(32, 32, 100_000, (5.0, 0.0), [Plane(2.0, 9)]))
    bwd = emit_events(SceneSpec(32, 32, 100_000, (-5.0, 0.0), [Plane(2.0, 9)]))
    # per-pixel net polarity over the first bin should mostly reverse
    def net(seq):
        s = seq.stream
        sel = s.t < 20_000
        grid = np.zeros((32, 32))
        np.add.at(grid, (s.y[sel], s.x[sel]), s.p[sel])
        return grid
    a, b = net(fwd), net(bwd)
    active = (a != 0) & (b != 0)
    assert active.sum() > 50
    assert np.mean(np.sign(a[active]) != np.sign(b[active])) > 0.8


def test_stop_and_go_motion_pauses():
    spec = SceneSpec(32, 32, 400_000, (1.0, 0.0), [Plane(3.0, 1)], pause_period_us=200_000, pause_fraction=0.5)
    off = camera_offset(spec, np.array([0, 100_000, 150_000, 200_000, 300_000]))
    np.testing.assert_allclose(off[:, 0], [0, 0.1, 0.1, 0.1, 0.2])
    s = emit_events(spec).stream
    paused = (s.t > 101_000) & (s.t < 200_000)
    assert paused.sum() == 0 and s.num_events > 0
