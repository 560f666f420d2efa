import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdmnet.episodes import (
    FAMILIES, AllBackground, GroundTruthOracle, SplitSpec, evaluate, foreground_iou, generate_class_bank, miou,
    render_shape, sample_episode, sample_episodes,
)


def test_bank_is_deterministic():
    assert generate_class_bank(8, 3) == generate_class_bank(8, 3)


def test_bank_ids_and_uniqueness():
    bank = generate_class_bank(8, 0)
    assert [c.class_id for c in bank] == list(range(8))
    assert len({(c.family, c.texture) for c in bank}) == 8
    assert {c.family for c in bank} <= set(FAMILIES)


def test_banks_differ_across_seeds():
    a, b = generate_class_bank(8, 0), generate_class_bank(8, 1)
    assert any(x.texture != y.texture for x, y in zip(a, b))


def test_bank_needs_two_classes():
    with pytest.raises(ValueError):
        generate_class_bank(1, 0)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_renders(family):
    m = render_shape(family, 32, 32, 16.0, 16.0, 10.0, 0.3)
    assert m.dtype == np.uint8 and 0 < m.sum() < 32 * 32


def test_unknown_family():
    with pytest.raises(ValueError):
        render_shape("star", 8, 8, 4, 4, 2, 0)


def test_k_shots(bank):
    ep = sample_episode(bank[2], 3, 32, 32, np.random.default_rng(0))
    assert ep.shots == 3 and len(ep.support_masks) == 3 and ep.class_id == 2


def test_shots_must_be_positive(bank):
    with pytest.raises(ValueError):
        sample_episode(bank[0], 0, 32, 32, np.random.default_rng(0))


def test_same_rng_state_same_episode(bank):
    a = sample_episode(bank[1], 2, 32, 32, np.random.default_rng(5))
    b = sample_episode(bank[1], 2, 32, 32, np.random.default_rng(5))
    np.testing.assert_array_equal(a.query_image, b.query_image)
    np.testing.assert_array_equal(a.support_masks[1], b.support_masks[1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), cls=st.integers(0, 7), shots=st.integers(1, 3))
def test_episode_invariants(seed, cls, shots):
    bank = generate_class_bank(8, 0)
    ep = sample_episode(bank[cls], shots, 32, 32, np.random.default_rng(seed))
    for img, m in [(ep.query_image, ep.query_mask), *zip(ep.support_images, ep.support_masks)]:
        assert img.shape == (3, 32, 32) and img.min() >= 0.0 and img.max() <= 1.0
        assert set(np.unique(m)) <= {0, 1} and m.sum() > 0


def test_sample_episodes_uses_only_requested_classes(bank):
    eps = sample_episodes(bank, (6, 7), 20, 1, 32, seed=0, stream=2)
    assert {e.class_id for e in eps} <= {6, 7}


def test_split_disjointness():
    with pytest.raises(ValueError):
        SplitSpec((0, 1, 2), (2, 3))


def test_iou_values():
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0, 0] = a[0, 1] = 1
    b[0, 1] = b[0, 2] = 1
    assert foreground_iou(a, b) == pytest.approx(1 / 3)
    assert foreground_iou(a, a) == 1.0
    assert foreground_iou(a, np.roll(a, 2, axis=0)) == 0.0
    assert foreground_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_miou_averages_per_class_first():
    p = [np.ones((1, 2)), np.ones((1, 2)), np.ones((1, 2))]
    g = [np.array([[1, 0]]), np.array([[1, 1]]), np.array([[1, 1]])]
    score, table = miou(p, g, [0, 1, 1])
    assert table == {0: 0.5, 1: 1.0}
    assert score == 0.75


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_miou_order_invariant(rnd):
    rng = np.random.default_rng(rnd.randint(0, 10**6))
    preds = [rng.integers(0, 2, (4, 4)) for _ in range(6)]
    gts = [rng.integers(0, 2, (4, 4)) for _ in range(6)]
    ids = [int(i) for i in rng.integers(0, 3, 6)]
    order = list(range(6))
    rnd.shuffle(order)
    a = miou(preds, gts, ids)
    b = miou([preds[i] for i in order], [gts[i] for i in order], [ids[i] for i in order])
    assert a[1] == pytest.approx(b[1], abs=1e-15)
    assert a[0] == pytest.approx(b[0], abs=1e-15)


def test_miou_input_errors():
    with pytest.raises(ValueError):
        miou([np.ones((2, 2))], [], [0])
    with pytest.raises(ValueError):
        miou([], [], [])
    with pytest.raises(ValueError):
        miou([np.ones((2, 2))], [np.ones((3, 3))], [0])


def test_oracle_scores_one_and_background_zero(bank):
    split = SplitSpec((0, 1, 2, 3, 4, 5), (6, 7))
    assert evaluate(GroundTruthOracle(), bank, split, 20, 1, seed=0, size=32).miou == 1.0
    assert evaluate(AllBackground(), bank, split, 20, 1, seed=0, size=32).miou == 0.0


def test_evaluate_is_reproducible(bank):
    split = SplitSpec((0, 1), (6, 7))
    a = evaluate(AllBackground(), bank, split, 10, 1, seed=4, size=32)
    b = evaluate(AllBackground(), bank, split, 10, 1, seed=4, size=32)
    assert a.format() == b.format() and a.episodes == 10 and a.seed == 4


def test_evaluate_needs_test_classes(bank):
    with pytest.raises(ValueError):
        evaluate(AllBackground(), bank, SplitSpec((0,), ()), 4, 1, seed=0)
