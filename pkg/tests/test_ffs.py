import numpy as np
import pytest

from dataset import CorpusSpec, NoiseMode, generate_corpus
from errors import ParameterError, ShapeError
from ffs import (
    FfsConfig,
    FilterReason,
    clears_threshold,
    ffs_corpus,
    keep_rate,
    keep_rate_by_mode,
    noise_rejection_audit,
    object_filter,
    pixel_fusion,
)
from mask_core import BinaryMask, Box, ImageSize, Label, ProbMap, dice, rasterize_boxes


def _strip_masks(first: int, count: int, overlap_start: int):
    """b covers pixels [first, first+count), p covers [overlap_start, overlap_start+count) on a 20x20 grid"""
    b = np.zeros(400, dtype=bool)
    p = np.zeros(400, dtype=bool)
    b[first:first + count] = True
    p[overlap_start:overlap_start + count] = True
    return BinaryMask(b.reshape(20, 20)), BinaryMask(p.reshape(20, 20))


def test_identical_masks_are_kept():
    b = rasterize_boxes([Box(2, 2, 9, 8)], ImageSize(12, 12))
    decision = object_filter(b, b)
    assert decision.dice_score == 1.0
    assert decision.kept
    assert decision.reason == FilterReason.KEPT


def test_dice_exactly_at_threshold_is_rejected():
    b, p = _strip_masks(0, 100, 30)
    decision = object_filter(b, p)
    assert decision.dice_score == pytest.approx(0.7, abs=1e-12)
    assert not decision.kept
    assert decision.reason == FilterReason.LOW_DICE


def test_dice_just_above_threshold_is_kept():
    b, p = _strip_masks(0, 100, 30)
    assert object_filter(b, p, FfsConfig(dice_threshold=0.7 - 1e-9)).kept


def _count_masks(b_count: int, p_count: int, overlap: int):
    """Masks on a 20x20 grid with the given sizes sharing exactly `overlap` pixels"""
    b = np.zeros(400, dtype=bool)
    p = np.zeros(400, dtype=bool)
    b[:b_count] = True
    start = b_count - overlap
    p[start:start + p_count] = True
    return BinaryMask(b.reshape(20, 20)), BinaryMask(p.reshape(20, 20))


@pytest.mark.parametrize("b_count, p_count, overlap", [
    (10, 10, 7), (7, 13, 7), (8, 12, 7), (100, 100, 70), (80, 120, 70),
])
def test_dice_of_exactly_seven_tenths_is_rejected(b_count, p_count, overlap):
    b, p = _count_masks(b_count, p_count, overlap)
    decision = object_filter(b, p)
    assert decision.dice_score == 0.7
    assert not decision.kept
    assert decision.reason == FilterReason.LOW_DICE


@pytest.mark.parametrize("b_count, p_count, overlap", [(10, 10, 8), (100, 100, 71), (80, 120, 71)])
def test_one_more_overlap_pixel_clears_the_threshold(b_count, p_count, overlap):
    b, p = _count_masks(b_count, p_count, overlap)
    assert object_filter(b, p).kept


def test_threshold_comparison_is_strict():
    assert clears_threshold(0.7 + 1e-9)
    assert clears_threshold(float(np.nextafter(0.7, 1.0)))
    assert not clears_threshold(0.7)
    assert not clears_threshold(0.7 - 1e-9)
    assert clears_threshold(0.7, FfsConfig(dice_threshold=0.7 - 1e-9))


def test_growing_overlap_never_rejects_a_kept_sample(rng):
    for _ in range(50):
        b_bits = rng.random((10, 10)) > 0.5
        b_bits[0, 0] = True
        p_bits = rng.random((10, 10)) > 0.5
        cfg = FfsConfig(dice_threshold=float(rng.uniform(0.0, 0.95)))
        b = BinaryMask(b_bits)
        previous = object_filter(b, BinaryMask(p_bits), cfg)
        while True:
            outside = np.argwhere(p_bits & ~b_bits)
            missing = np.argwhere(b_bits & ~p_bits)
            if len(outside) == 0 or len(missing) == 0:
                break
            # move one predicted pixel from outside the box into it; |p| stays fixed
            p_bits = p_bits.copy()
            p_bits[tuple(outside[rng.integers(len(outside))])] = False
            p_bits[tuple(missing[rng.integers(len(missing))])] = True
            decision = object_filter(b, BinaryMask(p_bits), cfg)
            assert decision.dice_score > previous.dice_score
            assert decision.kept or not previous.kept
            previous = decision


def test_filter_dice_matches_counting_oracle(rng):
    for _ in range(100):
        b = BinaryMask(rng.random((9, 11)) > 0.6)
        p = BinaryMask(rng.random((9, 11)) > 0.4)
        overlap = np.count_nonzero(b.bits & p.bits)
        total = b.count() + p.count()
        expected = 1.0 if total == 0 else 2 * overlap / total
        assert abs(object_filter(b, p).dice_score - expected) <= 1e-12


def test_disjoint_masks_rejected():
    size = ImageSize(10, 10)
    decision = object_filter(rasterize_boxes([Box(0, 0, 3, 3)], size), rasterize_boxes([Box(5, 5, 8, 8)], size))
    assert decision.dice_score == 0.0
    assert decision.reason == FilterReason.LOW_DICE


def test_empty_annotation_rejected_regardless_of_prediction():
    size = ImageSize(6, 6)
    empty = BinaryMask.zeros(size)
    for p in (empty, BinaryMask.ones(size)):
        decision = object_filter(empty, p)
        assert not decision.kept
        assert decision.reason == FilterReason.EMPTY_ANNOTATION


def test_filter_is_symmetric(rng):
    for _ in range(50):
        b = BinaryMask(rng.random((8, 8)) > 0.3)
        p = BinaryMask(rng.random((8, 8)) > 0.3)
        assert object_filter(b, p).dice_score == object_filter(p, b).dice_score


def test_size_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        object_filter(BinaryMask.zeros(ImageSize(3, 3)), BinaryMask.zeros(ImageSize(3, 4)))
    with pytest.raises(ShapeError):
        pixel_fusion(BinaryMask.zeros(ImageSize(3, 3)), BinaryMask.zeros(ImageSize(4, 3)))


def test_fusion_quadrant_example():
    size = ImageSize(4, 4)
    b = rasterize_boxes([Box(0, 0, 2, 4)], size)
    p = rasterize_boxes([Box(0, 0, 4, 2)], size)
    pseudo = pixel_fusion(b, p)
    assert pseudo.counts() == {"BG": 4, "UNCERTAIN": 8, "FG": 4}
    assert np.all(pseudo.labels[:2, :2] == Label.FG)
    assert np.all(pseudo.labels[2:, 2:] == Label.BG)


def test_fusion_total_disagreement_is_all_uncertain():
    size = ImageSize(5, 5)
    pseudo = pixel_fusion(BinaryMask.ones(size), BinaryMask.zeros(size))
    assert np.all(pseudo.labels == Label.UNCERTAIN)


def test_fusion_set_algebra_brute_force(rng):
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 33, size=2))
        b = rng.random((h, w)) > rng.random()
        p = rng.random((h, w)) > rng.random()
        pseudo = pixel_fusion(BinaryMask(b), BinaryMask(p))
        fg, bg, un = pseudo.fg.bits, pseudo.bg.bits, pseudo.uncertain.bits
        assert np.array_equal(fg, b & p)
        assert np.array_equal(bg, ~b & ~p)
        assert np.all(fg.astype(int) + bg.astype(int) + un.astype(int) == 1)
        assert not np.any(fg & ~b) and not np.any(fg & ~p)


def test_fusion_of_mask_with_itself_has_no_uncertain_pixels(rng):
    for _ in range(20):
        b = BinaryMask(rng.random((7, 9)) > 0.5)
        pseudo = pixel_fusion(b, b)
        assert pseudo.uncertain.is_empty()
        assert pseudo.fg == b


def test_corpus_of_perfect_predictions_is_all_kept():
    size = ImageSize(16, 16)
    boxes = [rasterize_boxes([Box(i, i, i + 6, i + 5)], size) for i in range(5)]
    pairs = [(b, ProbMap(b.bits.astype(float))) for b in boxes]
    results = ffs_corpus(pairs)
    assert [r.index for r in results] == list(range(5))
    assert all(r.decision.kept for r in results)
    assert all(r.pseudo.fg == b for r, b in zip(results, boxes))
    assert keep_rate(results) == 1.0


def test_empty_corpus():
    assert ffs_corpus([]) == []
    assert keep_rate([]) == 0.0


def test_bad_item_does_not_abort_batch():
    good = rasterize_boxes([Box(1, 1, 5, 5)], ImageSize(8, 8))
    pairs = [
        (good, ProbMap(good.bits.astype(float))),
        (good, ProbMap(np.zeros((6, 6)))),
        (good, ProbMap(np.zeros((8, 8)))),
    ]
    results = ffs_corpus(pairs)
    assert results[0].decision.kept
    assert results[1].decision is None and "size" in results[1].error.lower()
    assert results[2].decision.kept is False
    assert results[2].pseudo is None
    assert keep_rate(results) == 0.5


def test_parallel_results_match_serial(rng):
    size = ImageSize(12, 12)
    pairs = []
    for _ in range(30):
        b = BinaryMask(rng.random(size.shape) > 0.5)
        pairs.append((b, ProbMap(rng.random(size.shape))))
    serial = ffs_corpus(pairs, workers=1)
    parallel = ffs_corpus(pairs, workers=4)
    assert [r.index for r in parallel] == list(range(30))
    assert [r.decision for r in parallel] == [r.decision for r in serial]


def test_threshold_validation():
    with pytest.raises(ParameterError):
        FfsConfig(dice_threshold=1.5)
    with pytest.raises(ParameterError):
        FfsConfig(binarize_threshold=-0.1)


def test_keep_rate_by_mode_counts():
    size = ImageSize(6, 6)
    b = rasterize_boxes([Box(0, 0, 3, 3)], size)
    pairs = [(b, ProbMap(b.bits.astype(float))), (b, ProbMap(np.zeros(size.shape))), (b, ProbMap(np.zeros((2, 2))))]
    table = keep_rate_by_mode(["clean", "wrong_label", "clean"], ffs_corpus(pairs))
    assert table["clean"] == {"kept": 1, "rejected": 0, "failed": 1, "keep_rate": 1.0}
    assert table["wrong_label"]["keep_rate"] == 0.0


def test_clean_boxes_pass_and_wrong_labels_fail_with_perfect_predictions(tmp_path):
    spec = CorpusSpec(n_mask=0, n_box=400, test_sets={}, blur=0.0, no_polyp=0.0,
                      wrong_label=0.25, imprecise_box=0.0, seed=5)
    manifest = generate_corpus(spec, tmp_path)
    table = noise_rejection_audit(manifest)
    wrong = table[NoiseMode.WRONG_LABEL.value]
    clean = table[NoiseMode.CLEAN.value]
    assert wrong["kept"] + wrong["rejected"] == 100
    assert clean["kept"] + clean["rejected"] == 300
    assert wrong["rejected"] / 100 >= 0.9
    assert clean["keep_rate"] >= 0.8


def test_dice_oracle_agrees_with_mask_core(rng):
    b = BinaryMask(rng.random((10, 10)) > 0.5)
    p = BinaryMask(rng.random((10, 10)) > 0.5)
    assert object_filter(b, p).dice_score == dice(b, p)
