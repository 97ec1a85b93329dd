import numpy as np
import pytest

from scribseg import dataio, seeding
from scribseg.errors import DataError, SolverError
from scribseg.util import UNKNOWN


def scribble_map(shape, points):
    s = np.full(shape, UNKNOWN, dtype=np.uint8)
    for (y, x), label in points:
        s[y, x] = label
    return s


def test_uniform_chain_is_linear():
    image = np.full((1, 5), 0.5, dtype=np.float32)
    scribbles = scribble_map((1, 5), [((0, 0), 0), ((0, 4), 1)])
    probs = seeding.random_walker(image, scribbles, 2, seeding.SeedConfig())
    expected = np.array([1.0, 0.75, 0.5, 0.25, 0.0])
    assert np.abs(probs[0, 0] - expected).max() < 1e-9
    assert np.abs(probs[1, 0] - expected[::-1]).max() < 1e-9


def dense_reference(image, scribbles, num_labels, beta):
    """Dense direct solve of the reduced Laplacian system (test-side oracle)."""
    h, w = image.shape
    n = h * w
    img = image.astype(np.float64).ravel()
    lap = np.zeros((n, n))
    for y in range(h):
        for x in range(w):
            i = y * w + x
            for ny, nx in ((y + 1, x), (y, x + 1)):
                if ny < h and nx < w:
                    j = ny * w + nx
                    wt = np.exp(-beta * (img[i] - img[j]) ** 2)
                    lap[i, j] -= wt
                    lap[j, i] -= wt
                    lap[i, i] += wt
                    lap[j, j] += wt
    flat = scribbles.ravel()
    u = np.flatnonzero(flat == UNKNOWN)
    s = np.flatnonzero(flat != UNKNOWN)
    probs = np.zeros((num_labels, n))
    for label in range(num_labels):
        m = (flat[s] == label).astype(np.float64)
        x = np.linalg.solve(lap[np.ix_(u, u)], -lap[np.ix_(u, s)] @ m)
        probs[label, u] = x
        probs[label, s] = m
    return probs.reshape(num_labels, h, w)


def test_3x3_matches_dense_solve():
    rng = np.random.default_rng(3)
    for image in (np.full((3, 3), 0.4, dtype=np.float32),
                  rng.random((3, 3)).astype(np.float32)):
        scribbles = scribble_map((3, 3), [((0, 0), 0), ((2, 2), 1)])
        cfg = seeding.SeedConfig(beta=90.0)
        probs = seeding.random_walker(image, scribbles, 2, cfg)
        ref = dense_reference(image, scribbles, 2, cfg.beta)
        assert np.abs(probs - ref).max() < 1e-7


def test_seed_pixels_are_exact_onehot():
    rng = np.random.default_rng(5)
    image = rng.random((8, 8)).astype(np.float32)
    scribbles = scribble_map((8, 8), [((0, 0), 0), ((7, 7), 1), ((3, 4), 2)])
    probs = seeding.random_walker(image, scribbles, 3, seeding.SeedConfig())
    assert probs[0, 0, 0] == 1.0 and probs[1, 0, 0] == 0.0 and probs[2, 0, 0] == 0.0
    assert probs[2, 3, 4] == 1.0 and probs[0, 3, 4] == 0.0


def test_harmonicity_max_principle_normalization():
    # operating-regime contrast: structures + noise, not iid-uniform pixels
    rng = np.random.default_rng(7)
    image = np.clip(0.5 + 0.3 * (rng.random((16, 16)) - 0.5), 0, 1).astype(np.float32)
    image[4:12, 4:12] += 0.25
    scribbles = scribble_map((16, 16), [((1, 1), 0), ((14, 14), 1), ((8, 3), 2), ((2, 12), 0)])
    cfg = seeding.SeedConfig()
    probs = seeding.random_walker(image, scribbles, 3, cfg)

    assert probs.min() >= -1e-9 and probs.max() <= 1 + 1e-9
    assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-7

    img = image.astype(np.float64)
    h, w = image.shape
    for label in range(3):
        p = probs[label]
        for y in range(h):
            for x in range(w):
                if scribbles[y, x] != UNKNOWN:
                    continue
                num, den = 0.0, 0.0
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w:
                        wt = np.exp(-cfg.beta * (img[y, x] - img[ny, nx]) ** 2)
                        num += wt * p[ny, nx]
                        den += wt
                assert abs(p[y, x] - num / den) < 1e-6


def test_threshold_rules():
    probs = np.array([[[0.995, 0.6]], [[0.005, 0.4]]])
    scribbles = np.full((1, 2), UNKNOWN, dtype=np.uint8)
    out = seeding.threshold_seeds(probs, scribbles, 0.99)
    assert out[0, 0] == 0
    assert out[0, 1] == UNKNOWN
    # scribbles override the probability map
    scribbles[0, 1] = 1
    out = seeding.threshold_seeds(probs, scribbles, 0.99)
    assert out[0, 1] == 1


def test_threshold_monotone_in_tau():
    rng = np.random.default_rng(11)
    image = np.clip(0.5 + 0.3 * (rng.random((12, 12)) - 0.5), 0, 1).astype(np.float32)
    scribbles = scribble_map((12, 12), [((0, 0), 0), ((11, 11), 1)])
    probs = seeding.random_walker(image, scribbles, 2, seeding.SeedConfig())
    labeled_low = seeding.threshold_seeds(probs, scribbles, 0.6) != UNKNOWN
    labeled_high = seeding.threshold_seeds(probs, scribbles, 0.9) != UNKNOWN
    assert (labeled_high <= labeled_low).all()


def test_missing_label_scribble_is_input_error():
    image = np.zeros((4, 4), dtype=np.float32)
    scribbles = scribble_map((4, 4), [((0, 0), 0), ((3, 3), 1)])
    with pytest.raises(DataError, match="without scribbles"):
        seeding.random_walker(image, scribbles, 3, seeding.SeedConfig())


def test_cg_budget_exhaustion_raises():
    rng = np.random.default_rng(13)
    image = rng.random((16, 16)).astype(np.float32)
    scribbles = scribble_map((16, 16), [((0, 0), 0), ((15, 15), 1)])
    cfg = seeding.SeedConfig(cg_max_iters=1, cg_tol=1e-12)
    with pytest.raises(SolverError, match="residual"):
        seeding.random_walker(image, scribbles, 2, cfg)


def test_seed_soundness_on_synthetic(tmp_path):
    ds = dataio.synth_dataset(tmp_path, 8, 0, 0, size=64, seed=21)
    cfg = seeding.SeedConfig(tau=0.99)
    total, correct = 0, 0
    for rec in ds.records:
        image, mask, scribbles = ds.image(rec), ds.mask(rec), ds.scribbles(rec)
        seeds = seeding.generate_seeds(image, scribbles, ds.num_labels, cfg)
        on = seeds != UNKNOWN
        total += int(on.sum())
        correct += int((seeds[on] == mask[on]).sum())
    assert total > 0
    assert correct / total >= 0.99, f"seed purity {correct / total:.4f}"
