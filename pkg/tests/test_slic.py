import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from superpix.errors import LengthMismatch, StepTooLarge
from superpix.imgio import MultiChannelImage
from superpix.metrics import achievable_iou, undersegmentation_error
from superpix.slic import (
    ClusterCenter,
    Clusters,
    SlicParams,
    assign_step,
    color_distance_sq,
    enforce_connectivity,
    init_clusters,
    objective,
    slic_iterate,
    slic_segment,
    total_distance_sq,
    update_step,
)
from superpix.synthetic import quadrant_image


def image(data, names=None):
    return MultiChannelImage.from_array(data, names)


def brute_force_assign(img, clusters, params, labels=None):
    """Scalar reference: every pixel against every cluster inside the Chebyshev 2S window."""
    h, w = img.height, img.width
    out = np.full((h, w), -1) if labels is None else labels.copy()
    for y in range(h):
        for x in range(w):
            best, arg = np.inf, None
            for k in range(len(clusters)):
                c = clusters[k]
                if max(abs(c.x - x), abs(c.y - y)) > 2 * params.step:
                    continue
                d = total_distance_sq((x, y), img.data[:, y, x], c, params)
                if d < best:
                    best, arg = d, k
            if arg is not None:
                out[y, x] = arg
    return out


def is_4_connected(labels):
    for v in np.unique(labels):
        _, n = ndimage.label(labels == v)
        if n != 1:
            return False
    return True


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            SlicParams(step=1)
        with pytest.raises(ValueError):
            SlicParams(step=4, compactness=0)
        with pytest.raises(ValueError):
            SlicParams(step=4, iterations=0)
        with pytest.raises(ValueError):
            SlicParams(step=4, alpha=(0, 0, 0))
        with pytest.raises(ValueError):
            SlicParams(step=4, alpha=(1, -1, 1))

    def test_weights(self):
        p = SlicParams(step=4, alpha=(1, 2, 3), beta=(0.5,))
        np.testing.assert_array_equal(p.weights(3), [1, 2, 3])
        np.testing.assert_array_equal(p.weights(5), [1, 2, 3, 0.5, 0.5])
        with pytest.raises(LengthMismatch):
            SlicParams(step=4, beta=(1, 2)).weights(6)
        with pytest.raises(LengthMismatch):
            SlicParams(step=4, beta=()).weights(4)


class TestInit:
    def test_8x8(self):
        c = init_clusters(image(np.zeros((3, 8, 8))), 4)
        np.testing.assert_array_equal(c.pos, [[2, 2], [6, 2], [2, 6], [6, 6]])

    def test_partial_column_dropped(self):
        c = init_clusters(image(np.zeros((3, 8, 10))), 4)
        assert len(c) == 4
        assert set(c.pos[:, 0]) == {2, 6}

    def test_single(self):
        c = init_clusters(image(np.zeros((3, 4, 4))), 4)
        np.testing.assert_array_equal(c.pos, [[2, 2]])

    def test_features_copied(self):
        data = np.random.default_rng(0).normal(size=(3, 8, 8))
        c = init_clusters(image(data), 4)
        np.testing.assert_array_equal(c.features[3], data[:, 6, 6])

    def test_too_large(self):
        with pytest.raises(StepTooLarge):
            init_clusters(image(np.zeros((3, 8, 16))), 9)

    def test_perturbation_moves_off_edges(self):
        data = np.zeros((3, 8, 8))
        data[:, :, 2:] = 50.0  # strong vertical edge through the first seed column
        c = init_clusters(image(data), 4, perturb=True)
        assert c.pos[0, 0] != 2 or c.pos[0, 1] != 2


class TestDistances:
    def test_color_identity(self):
        assert color_distance_sq([1, 2, 3], [1, 2, 3], (1, 1, 1)) == 0

    def test_color_arithmetic(self):
        assert color_distance_sq([2, 0, 0], [0, 0, 0], (1, 1, 1)) == 4
        assert color_distance_sq([2, 0, 0, 2], [0, 0, 0, 0], (1, 1, 1), (0.5,)) == 6

    def test_color_length(self):
        with pytest.raises(LengthMismatch):
            color_distance_sq([1, 2, 3], [1, 2, 3], (1, 1, 1), (1,))

    def test_total(self):
        p = SlicParams(step=16, compactness=10)
        c = ClusterCenter(16.0, 0.0, np.zeros(3))
        assert total_distance_sq((0, 0), np.zeros(3), ClusterCenter(0.0, 0.0, np.zeros(3)), p) == 0
        assert total_distance_sq((0, 0), np.zeros(3), c, p) == pytest.approx(100.0)

    def test_small_sigma_limit(self):
        rng = np.random.default_rng(0)
        f, g = rng.normal(size=3), rng.normal(size=3)
        p = SlicParams(step=8, compactness=1e-9)
        d = total_distance_sq((0, 0), f, ClusterCenter(5.0, 3.0, g), p)
        assert d == pytest.approx(color_distance_sq(f, g, (1, 1, 1)), rel=1e-12)


class TestAssign:
    def test_uniform_is_voronoi(self):
        img = image(np.full((3, 16, 16), 5.0))
        p = SlicParams(step=4)
        c = init_clusters(img, 4)
        labels = assign_step(img, c, p)
        ys, xs = np.mgrid[0:16, 0:16]
        d = (c.pos[None, None, :, 0] - xs[..., None]) ** 2 + (c.pos[None, None, :, 1] - ys[..., None]) ** 2
        np.testing.assert_array_equal(labels, np.argmin(d, axis=2))

    def test_two_color_split_brute_force(self):
        data = np.zeros((3, 8, 16))
        data[0, :, 8:] = 60.0
        img = image(data)
        p = SlicParams(step=4, compactness=0.5)
        c = Clusters(np.array([[7.0, 3.0], [9.0, 3.0]]), np.array([[0.0, 0, 0], [60.0, 0, 0]]))
        labels = assign_step(img, c, p)
        np.testing.assert_array_equal(labels, brute_force_assign(img, c, p))
        np.testing.assert_array_equal(labels, np.where(np.arange(16) < 8, 0, 1)[None, :].repeat(8, 0))

    def test_random_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            img = image(rng.normal(scale=10, size=(4, 12, 12)), ("L", "a", "b", "f0"))
            p = SlicParams(step=4, compactness=rng.uniform(1, 20), beta=(0.7,))
            c = init_clusters(img, 4)
            c.pos += rng.uniform(-1.5, 1.5, c.pos.shape)
            np.testing.assert_array_equal(assign_step(img, c, p), brute_force_assign(img, c, p))

    def test_one_cluster_window(self):
        img = image(np.zeros((3, 20, 20)))
        c = Clusters(np.array([[2.0, 2.0]]), np.zeros((1, 3)))
        labels = assign_step(img, c, SlicParams(step=2))
        assert (labels[:7, :7] == 0).all()
        assert (labels[7:, :] == -1).all() and (labels[:, 7:] == -1).all()

    def test_no_candidate_keeps_previous(self):
        img = image(np.zeros((3, 20, 20)))
        c = Clusters(np.array([[2.0, 2.0]]), np.zeros((1, 3)))
        prev = np.full((20, 20), 9)
        labels = assign_step(img, c, SlicParams(step=2), prev)
        assert labels[19, 19] == 9 and labels[0, 0] == 0

    def test_tie_lowest_index(self):
        img = image(np.zeros((3, 4, 4)))
        c = Clusters(np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros((2, 3)))
        assert (assign_step(img, c, SlicParams(step=2)) == 0).all()


class TestUpdate:
    def test_identical_pixels(self):
        data = np.zeros((3, 4, 4))
        data[:, :2, :2] = np.array([1.0, 2.0, 3.0])[:, None, None]
        img = image(data)
        labels = np.ones((4, 4), int)
        labels[:2, :2] = 0
        c = update_step(img, labels, Clusters(np.zeros((2, 2)), np.zeros((2, 3))))
        np.testing.assert_array_equal(c.features[0], [1, 2, 3])
        np.testing.assert_array_equal(c.pos[0], [0.5, 0.5])
        np.testing.assert_array_equal(c.counts, [4, 12])

    def test_mean_position(self):
        labels = np.full((1, 5), -1)
        labels[0, [0, 4]] = 0
        c = update_step(image(np.zeros((3, 1, 5))), labels, Clusters(np.zeros((1, 2)), np.zeros((1, 3))))
        assert c.pos[0, 0] == 2.0

    def test_empty_cluster_frozen(self):
        c0 = Clusters(np.array([[1.0, 1.0], [7.5, 2.5]]), np.array([[0.0, 0, 0], [9.0, 9, 9]]))
        c = update_step(image(np.ones((3, 4, 4))), np.zeros((4, 4), int), c0)
        np.testing.assert_array_equal(c.pos[1], [7.5, 2.5])
        np.testing.assert_array_equal(c.features[1], [9, 9, 9])


class TestObjective:
    def test_monotone_steps(self):
        rng = np.random.default_rng(2)
        for trial in range(4):
            img = image(ndimage.gaussian_filter(rng.normal(scale=20, size=(3, 32, 32)), (0, 1.5, 1.5)))
            p = SlicParams(step=8, compactness=rng.uniform(2, 20))
            c = init_clusters(img, 8)
            labels = assign_step(img, c, p)
            prev = objective(img, labels, c, p)
            for _ in range(5):
                c = update_step(img, labels, c)
                after_update = objective(img, labels, c, p)
                assert after_update <= prev * (1 + 1e-12)
                labels = assign_step(img, c, p, labels)
                after_assign = objective(img, labels, c, p)
                assert after_assign <= after_update * (1 + 1e-12)
                prev = after_assign

    @pytest.mark.parametrize("scale", [0.25, 4.0, 9.0])
    def test_weight_scaling_invariance(self, scale):
        rng = np.random.default_rng(3)
        img = image(rng.normal(scale=10, size=(5, 24, 24)))
        p = SlicParams(step=6, compactness=7.0, alpha=(1.0, 0.5, 2.0), beta=(0.3, 1.2))
        q = SlicParams(
            step=6,
            compactness=7.0 * np.sqrt(scale),
            alpha=tuple(scale * a for a in p.alpha),
            beta=tuple(scale * b for b in p.beta),
        )
        c = init_clusters(img, 6)
        np.testing.assert_array_equal(assign_step(img, c, p), assign_step(img, c, q))


class TestConnectivity:
    def test_connected_map_renumbered(self):
        labels = np.array([[5, 5, 2, 2], [5, 5, 2, 2], [9, 9, 9, 9]])
        out = enforce_connectivity(labels, step=2, min_component_frac=0.25).labels
        np.testing.assert_array_equal(out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 2, 2]])

    def test_orphan_absorbed(self):
        labels = np.zeros((8, 8), int)
        labels[3, 3] = 1
        out = enforce_connectivity(labels, step=4, min_component_frac=0.25).labels
        assert (out == 0).all()

    def test_split_label_becomes_components(self):
        labels = np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0]])
        out = enforce_connectivity(labels, step=1, min_component_frac=0.25).labels
        np.testing.assert_array_equal(out, [[0, 1, 2]] * 3)

    def test_two_small_fragments(self):
        # two 2-pixel fragments side by side inside a large region; both must vanish
        labels = np.zeros((8, 8), int)
        labels[4:6, 5:7] = 7
        labels[:, :3] = 3
        labels[2, 3] = 1
        labels[2, 4] = 2
        out = enforce_connectivity(labels, step=4, min_component_frac=0.25).labels
        assert is_4_connected(out)
        sizes = np.bincount(out.ravel())
        assert sizes.min() >= 4
        # each fragment went to the neighbour with the longest shared boundary
        assert out[2, 3] == out[0, 4] and out[2, 4] == out[0, 4]

    def test_longest_boundary_wins(self):
        labels = np.array(
            [
                [0, 0, 0, 0, 0, 0],
                [0, 0, 0, 0, 0, 0],
                [0, 0, 9, 9, 0, 0],
                [1, 1, 1, 1, 1, 1],
                [1, 1, 1, 1, 1, 1],
                [1, 1, 1, 1, 1, 1],
            ]
        )
        # fragment 9 touches region 0 on 4 edges and region 1 on 2 edges
        out = enforce_connectivity(labels, step=4, min_component_frac=0.25).labels
        assert out[2, 2] == out[0, 0]

    def test_tie_goes_to_lower_id(self):
        labels = np.array([[0, 0, 0], [0, 5, 1], [1, 1, 1]])
        labels[1, 0] = 0
        # pixel (1, 1): neighbours 0 (up, left) and 1 (right, down) -> tie -> component 0
        out = enforce_connectivity(labels, step=4, min_component_frac=0.25).labels
        assert out[1, 1] == out[0, 0]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 5))
    def test_output_connected_and_contiguous(self, seed, step):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, (12, 12))
        out = enforce_connectivity(labels, step=step).labels
        assert is_4_connected(out)
        np.testing.assert_array_equal(np.unique(out), np.arange(out.max() + 1))
        first = [np.flatnonzero(out.ravel() == v)[0] for v in range(out.max() + 1)]
        assert first == sorted(first)


class TestSegment:
    def test_quadrants(self):
        img, gt = quadrant_image(64)
        sp = slic_segment(img, SlicParams(step=16, compactness=10))
        assert sp.n_labels == 16
        assert achievable_iou(sp.labels, gt) == 1.0
        assert undersegmentation_error(sp.labels, gt) == 0.0

    def test_uniform_grid(self):
        sp = slic_segment(image(np.full((3, 32, 32), 40.0)), SlicParams(step=8))
        assert sp.n_labels == 16
        # pixels equidistant from two seeds go to the lower index, so cells differ by a row or column
        for v in range(16):
            ys, xs = np.nonzero(sp.labels == v)
            assert 7 <= np.ptp(xs) + 1 <= 9 and 7 <= np.ptp(ys) + 1 <= 9
            assert len(xs) == (np.ptp(xs) + 1) * (np.ptp(ys) + 1)  # a full rectangle

    def test_deterministic(self):
        img = image(np.random.default_rng(4).normal(scale=10, size=(3, 32, 32)))
        p = SlicParams(step=8)
        a = slic_segment(img, p).labels
        b = slic_segment(img, p).labels
        assert a.tobytes() == b.tobytes()

    def test_zero_beta_ignores_extra_channels(self):
        rng = np.random.default_rng(5)
        lab = rng.normal(scale=10, size=(3, 32, 32))
        extra = rng.normal(scale=50, size=(2, 32, 32))
        p3 = SlicParams(step=8)
        p5 = SlicParams(step=8, beta=(0.0, 0.0))
        a = slic_segment(image(lab), p3).labels
        b = slic_segment(image(np.concatenate([lab, extra])), p5).labels
        np.testing.assert_array_equal(a, b)

    def test_iterate_returns_clusters(self):
        img = image(np.random.default_rng(6).normal(size=(3, 16, 16)))
        labels, c = slic_iterate(img, SlicParams(step=8), iterations=2)
        assert labels.shape == (16, 16) and len(c) == 4
        assert c.counts.sum() == 256
