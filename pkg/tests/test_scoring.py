import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visprompt.backends import FixtureScorer
from visprompt.imagecore import Box
from visprompt.scoring import (CaptionSet, NegativeSet, ParsedCaption, Relation,
                               apply_relations, ensemble_scores, hungarian_assign,
                               parse_caption, relation_score, select_labels,
                               select_region, similarity_matrix, subtract_negatives)

from conftest import random_image
from oracles import exhaustive_assignment, relation_formula

def dyadic(rng, *shape):
    """Random floats that are exact in binary (so sums compare exactly)."""
    return rng.integers(-512, 512, size=shape).astype(np.float64) / 64

class TestSimilarityMatrix:
    def test_identical_images_identical_rows(self, rng):
        img = random_image(rng, 8, 8)
        backend = FixtureScorer(seed=3)
        sim = similarity_matrix(backend, [img, img.copy(), img.copy()],
                                CaptionSet(("a", "b")))
        assert np.array_equal(sim[0], sim[1])
        assert np.array_equal(sim[0], sim[2])

    def test_programmed_gram_matrix(self, rng):
        backend = FixtureScorer(dim=4)
        images = [random_image(rng, 4, 4) for _ in range(3)]
        texts = ("alpha", "beta")
        eye = np.eye(4)
        backend.program_image(images[0], eye[0])
        backend.program_image(images[1], eye[1])
        backend.program_image(images[2], (eye[0] + eye[1]) / math.sqrt(2))
        backend.program_text("alpha", eye[0])
        backend.program_text("beta", eye[1])
        sim = similarity_matrix(backend, images, CaptionSet(texts))
        want = np.array([[1, 0], [0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)]])
        assert np.allclose(sim, want, atol=1e-12)

    def test_single_cell_in_cosine_range(self, rng):
        sim = similarity_matrix(FixtureScorer(), [random_image(rng, 4, 4)],
                                CaptionSet(("only",)))
        assert sim.shape == (1, 1)
        assert -1.0 <= sim[0, 0] <= 1.0

    def test_embeddings_cached_per_distinct_input(self, rng):
        backend = FixtureScorer()
        img = random_image(rng, 4, 4)
        similarity_matrix(backend, [img, img.copy()], CaptionSet(("t", "t ", "t")))
        assert backend.calls["embed_image"] == 1
        assert backend.calls["embed_text"] == 2  # "t" and "t " differ

    def test_template_applied(self):
        backend = FixtureScorer()
        seen = []
        original = backend.embed_text

        def spy(text):
            seen.append(text)
            return original(text)

        backend.embed_text = spy
        similarity_matrix(backend, [np.zeros((2, 2, 3), np.uint8)],
                          CaptionSet(("cat",), template="a photo of "))
        assert seen == ["a photo of cat"]

class TestEnsemble:
    def test_single_matrix_mean_identity(self, rng):
        m = rng.random((3, 2))
        assert np.array_equal(ensemble_scores([m], "mean"), m)

    def test_identical_matrices(self, rng):
        m = rng.random((4, 3))
        assert np.allclose(ensemble_scores([m, m.copy()], "mean"), m)

    def test_mean_arithmetic(self):
        a = np.array([[0.0], [1.0]])
        b = np.array([[1.0], [0.0]])
        assert np.array_equal(ensemble_scores([a, b], "mean"), np.array([[0.5], [0.5]]))

    def test_softmax_mean_is_distribution_per_text(self, rng):
        mats = [rng.random((5, 3)) for _ in range(2)]
        out = ensemble_scores(mats, "softmax_mean")
        assert np.allclose(out.sum(axis=0), 1.0)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            ensemble_scores([rng.random((2, 2)), rng.random((3, 2))])

    def test_mean_of_k_copies_identity(self, rng):
        m = rng.random((3, 3))
        assert np.allclose(ensemble_scores([m] * 5, "mean"), m)

class TestParseCaption:
    def test_absolute_left(self):
        got = parse_caption("elephant on the left")
        assert got == ParsedCaption(head="elephant", relation=Relation.LEFT,
                                    anchor=None, absolute=True)

    def test_no_relation(self):
        got = parse_caption("cat")
        assert got.relation is Relation.NONE and got.head == "cat"

    def test_anchored_left(self):
        got = parse_caption("dog left of the car")
        assert got == ParsedCaption(head="dog", relation=Relation.LEFT,
                                    anchor="the car", absolute=False)

    @pytest.mark.parametrize("caption,relation,anchor", [
        ("bowl right of the mug", Relation.RIGHT, "the mug"),
        ("lamp above the desk", Relation.ABOVE, "the desk"),
        ("ball under the table", Relation.BELOW, "the table"),
        ("cloth beneath the vase", Relation.BELOW, "the vase"),
        ("box bigger than the cup", Relation.BIGGER, "the cup"),
        ("toy smaller than the chair", Relation.SMALLER, "the chair"),
        ("spoon inside the jar", Relation.INSIDE, "the jar"),
        ("book on top of the shelf", Relation.ABOVE, "the shelf"),
    ])
    def test_keyword_table(self, caption, relation, anchor):
        got = parse_caption(caption)
        assert got.relation is relation and got.anchor == anchor and not got.absolute

    def test_in_front_of_maps_to_none(self):
        got = parse_caption("man in front of the store")
        assert got.relation is Relation.NONE
        assert got.head == "man in front of the store"

    def test_anchored_keyword_without_tail_degrades_to_absolute(self):
        got = parse_caption("the sign above")
        assert got.relation is Relation.ABOVE and got.absolute and got.anchor is None

    def test_word_boundaries_respected(self):
        # 'plover' must not match 'over', 'thunder' must not match 'under'
        assert parse_caption("the plover").relation is Relation.NONE
        assert parse_caption("thunder cloud").relation is Relation.NONE

    def test_table_order_first_match_wins(self):
        # 'left of' is checked before 'on the right'
        got = parse_caption("boy left of the girl on the right")
        assert got.relation is Relation.LEFT and got.head == "boy"

    def test_empty_caption_rejected(self):
        with pytest.raises(ValueError):
            parse_caption("   ")

class TestRelationScore:
    def test_left_by_center(self):
        a = Box(5, 0, 10, 10)   # cx 10
        b = Box(45, 0, 10, 10)  # cx 50
        assert relation_score(Relation.LEFT, a, b) == 1
        assert relation_score(Relation.LEFT, b, a) == 0

    def test_bigger_strict(self):
        a = Box(0, 0, 10, 10)
        assert relation_score(Relation.BIGGER, a, Box(20, 20, 10, 10)) == 0

    def test_inside_with_margin(self):
        assert relation_score(Relation.INSIDE, Box(2, 2, 4, 4), Box(0, 0, 10, 10)) == 1
        assert relation_score(Relation.INSIDE, Box(0, 0, 10, 10), Box(2, 2, 4, 4)) == 0

    def test_absolute_against_image_center(self):
        assert relation_score(Relation.LEFT, Box(0, 0, 10, 10), (100, 100)) == 1
        assert relation_score(Relation.RIGHT, Box(0, 0, 10, 10), (100, 100)) == 0
        assert relation_score(Relation.ABOVE, Box(0, 80, 10, 10), (100, 100)) == 0
        assert relation_score(Relation.BELOW, Box(0, 80, 10, 10), (100, 100)) == 1

    def test_absolute_size_uses_median(self):
        big = Box(0, 0, 40, 40)
        assert relation_score(Relation.BIGGER, big, (100, 100), median_area=100.0) == 1
        assert relation_score(Relation.SMALLER, big, (100, 100), median_area=100.0) == 0

def _anchored_case(rng, n, agg):
    boxes = [Box(float(x), float(y), float(w), float(h))
             for x, y, w, h in zip(rng.uniform(0, 80, n), rng.uniform(0, 80, n),
                                   rng.uniform(5, 30, n), rng.uniform(5, 30, n))]
    head = dyadic(rng, n)
    anchor = dyadic(rng, n)
    relation = Relation(rng.choice(["left", "right", "above", "below",
                                    "bigger", "smaller", "inside"]))
    parsed = ParsedCaption(head="h", relation=relation, anchor="a", absolute=False)
    scores = head[:, None].copy()
    got = apply_relations(scores, boxes, [parsed], head[:, None], anchor[:, None],
                          image_size=(100, 100), agg=agg)
    rel = np.array([[relation_score(relation, boxes[i], boxes[j]) if i != j else 0
                     for j in range(n)] for i in range(n)], dtype=float)
    if not rel.any():
        want = head
    else:
        want = relation_formula(head, anchor, rel, agg)
    return got[:, 0], want

class TestApplyRelations:
    def test_none_relation_column_untouched(self, rng):
        scores = rng.random((4, 2))
        boxes = [Box(i * 10, 0, 5, 5) for i in range(4)]
        parsed = [ParsedCaption(head="x"), ParsedCaption(head="y")]
        out = apply_relations(scores, boxes, parsed, rng.random((4, 2)),
                              rng.random((4, 2)), (50, 50))
        assert np.array_equal(out, scores)

    def test_absolute_left_zeroes_right_proposal(self):
        boxes = [Box(0, 0, 10, 10), Box(90, 0, 10, 10)]
        head = np.array([[0.6], [0.8]])
        parsed = [ParsedCaption(head="thing", relation=Relation.LEFT, absolute=True)]
        out = apply_relations(np.array([[0.5], [0.5]]), boxes, parsed, head,
                              np.zeros((2, 1)), image_size=(100, 100))
        assert out[0, 0] == 0.6
        assert out[1, 0] == 0.0

    def test_two_proposal_anchored_hand_case(self):
        # "X left of Y": proposal 0 at cx 10, proposal 1 at cx 50
        boxes = [Box(5, 0, 10, 10), Box(45, 0, 10, 10)]
        head = np.array([[0.7], [0.9]])
        anchor = np.array([[0.2], [0.4]])
        parsed = [ParsedCaption(head="X", relation=Relation.LEFT, anchor="Y", absolute=False)]
        out = apply_relations(np.zeros((2, 1)), boxes, parsed, head, anchor, (60, 60))
        # proposal 0 is left of proposal 1 -> 0.7 * (0.4 * 1); proposal 1 left of nothing
        assert out[0, 0] == pytest.approx(0.7 * 0.4)
        assert out[1, 0] == 0.0

    @pytest.mark.parametrize("agg", ["max", "sum"])
    def test_matches_direct_formula_oracle(self, agg, rng):
        for _ in range(100):
            n = int(rng.integers(2, 7))
            got, want = _anchored_case(rng, n, agg)
            assert np.allclose(got, want, atol=1e-12)

    def test_positive_scaling_keeps_argmax(self, rng):
        for _ in range(25):
            n = int(rng.integers(2, 7))
            boxes = [Box(float(x), 0, 5, 5) for x in rng.uniform(0, 50, n)]
            head = rng.random((n, 1))
            anchor = rng.random((n, 1))
            parsed = [ParsedCaption(head="h", relation=Relation.LEFT, anchor="a",
                                    absolute=False)]
            base = apply_relations(np.zeros((n, 1)), boxes, parsed, head, anchor, (60, 60))
            scaled = apply_relations(np.zeros((n, 1)), boxes, parsed, 3.5 * head,
                                     anchor, (60, 60))
            assert select_region(base) == select_region(scaled)

    def test_no_satisfying_pair_falls_back_to_head(self):
        boxes = [Box(0, 0, 10, 10), Box(0, 20, 10, 10)]  # same cx: nobody left of anybody
        head = np.array([[0.3], [0.9]])
        parsed = [ParsedCaption(head="h", relation=Relation.LEFT, anchor="a", absolute=False)]
        out = apply_relations(np.zeros((2, 1)), boxes, parsed, head,
                              np.ones((2, 1)), (40, 40))
        assert np.array_equal(out, head)

    def test_single_proposal_anchored_falls_back(self):
        boxes = [Box(0, 0, 10, 10)]
        head = np.array([[0.4]])
        parsed = [ParsedCaption(head="h", relation=Relation.LEFT, anchor="a", absolute=False)]
        out = apply_relations(np.zeros((1, 1)), boxes, parsed, head, np.ones((1, 1)), (40, 40))
        assert np.array_equal(out, head)

class TestSubtractNegatives:
    def test_zero_q_identity(self, rng):
        s = rng.random((3, 2))
        out = subtract_negatives(s, NegativeSet(texts=[], scores=np.zeros((3, 0))))
        assert np.array_equal(out, s)

    def test_constant_negatives_shift(self, rng):
        s = dyadic(rng, 3, 2)
        neg = np.full((3, 4), 0.25)
        out = subtract_negatives(s, NegativeSet(texts=["n"] * 4, scores=neg))
        assert np.array_equal(out, s - 0.25)

    def test_hand_case_exact(self):
        s = np.array([[1.0, 0.5], [0.25, -0.75]])
        neg = np.array([[0.5, 0.25], [-0.25, 0.75]])
        out = subtract_negatives(s, NegativeSet(texts=["a", "b"], scores=neg))
        want = np.array([[1.0 - 0.375, 0.5 - 0.375], [0.25 - 0.25, -0.75 - 0.25]])
        assert np.array_equal(out, want)

    def test_random_cases_match_hand_loop(self, rng):
        for _ in range(100):
            n, m, q = (int(rng.integers(1, 6)), int(rng.integers(1, 5)),
                       int(rng.integers(1, 7)))
            s = dyadic(rng, n, m)
            neg = dyadic(rng, n, q)
            out = subtract_negatives(s, NegativeSet(texts=["x"] * q, scores=neg))
            for i in range(n):
                mu = math.fsum(float(v) for v in neg[i]) / q
                for j in range(m):
                    assert out[i, j] == s[i, j] - mu

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            subtract_negatives(rng.random((3, 2)),
                               NegativeSet(texts=["x"], scores=rng.random((4, 1))))

    def test_uniform_shift_invariance_with_labels(self, rng):
        s = dyadic(rng, 4, 3)
        neg = dyadic(rng, 4, 5)
        base = select_labels(subtract_negatives(s, NegativeSet(["x"] * 5, neg)))
        shifted = select_labels(subtract_negatives(s + 2.5, NegativeSet(["x"] * 5, neg + 2.5)))
        assert base == shifted

class TestSelectors:
    def test_select_region_basic(self):
        col = np.array([[0.1], [0.9], [0.3]])
        assert select_region(col) == [1]

    def test_select_region_tie_break(self):
        col = np.array([[0.5], [0.5], [0.5]])
        assert select_region(col) == [0]

    def test_select_region_matches_scan(self, rng):
        s = rng.random((6, 3))
        want = [max(range(6), key=lambda n: (s[n, m], -n)) for m in range(3)]
        assert select_region(s) == want

    def test_select_labels_basic(self):
        assert select_labels(np.array([[0.2, 0.8]])) == [1]
        assert select_labels(np.array([[0.42]])) == [0]

    def test_select_labels_matches_scan(self, rng):
        s = rng.random((4, 5))
        want = [max(range(5), key=lambda m: (s[n, m], -m)) for n in range(4)]
        assert select_labels(s) == want

    def test_select_region_monotone_invariance(self, rng):
        s = rng.random((5, 2))
        assert select_region(s) == select_region(np.exp(4 * s))

class TestHungarian:
    def test_diagonal_dominant_identity(self):
        sim = np.eye(4) * 10 + 0.1
        assert hungarian_assign(sim) == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_one_by_one(self):
        assert hungarian_assign(np.array([[0.3]])) == [(0, 0)]

    def test_matches_factorial_oracle_square(self, rng):
        for trial in range(100):
            n = int(rng.integers(1, 8))
            sim = dyadic(rng, n, n)
            got = hungarian_assign(sim)
            want_total, want_pairs = exhaustive_assignment(sim)
            got_total = math.fsum(float(sim[r, c]) for r, c in got)
            assert got_total == want_total, f"trial {trial}"
            assert got == want_pairs, f"trial {trial}"

    def test_matches_factorial_oracle_rectangular(self, rng):
        for trial in range(100):
            n = int(rng.integers(1, 8))
            m = int(rng.integers(1, 8))
            sim = dyadic(rng, n, m)
            got = hungarian_assign(sim)
            want_total, want_pairs = exhaustive_assignment(sim)
            assert len(got) == min(n, m)
            got_total = math.fsum(float(sim[r, c]) for r, c in got)
            assert got_total == want_total, f"trial {trial} ({n}x{m})"
            assert got == want_pairs, f"trial {trial} ({n}x{m})"

    def test_tie_resolution_is_lexicographic(self):
        sim = np.zeros((3, 3))
        assert hungarian_assign(sim) == [(0, 0), (1, 1), (2, 2)]
        sim = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert hungarian_assign(sim) == [(0, 0), (1, 1)]

    def test_beats_greedy_rowwise(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 7))
            sim = dyadic(rng, n, n)
            pairs = hungarian_assign(sim)
            total = math.fsum(float(sim[r, c]) for r, c in pairs)
            taken = set()
            greedy = 0.0
            for r in range(n):
                free = [c for c in range(n) if c not in taken]
                best = max(free, key=lambda c: sim[r, c])
                taken.add(best)
                greedy += float(sim[r, best])
            assert total >= greedy - 1e-12

    def test_irrational_cosines_keep_pair_count(self, rng):
        # real unit-vector similarities (nothing dyadic about them)
        for _ in range(30):
            n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            imgs = rng.standard_normal((n, 16))
            txts = rng.standard_normal((m, 16))
            imgs /= np.linalg.norm(imgs, axis=1, keepdims=True)
            txts /= np.linalg.norm(txts, axis=1, keepdims=True)
            sim = imgs @ txts.T
            pairs = hungarian_assign(sim)
            assert len(pairs) == min(n, m)
            assert len({r for r, _ in pairs}) == len(pairs)
            assert len({c for _, c in pairs}) == len(pairs)

    def test_negative_similarities_still_full_matching(self):
        sim = np.array([[-1.0, -2.0], [-3.0, -4.0], [-5.0, -6.0]])
        pairs = hungarian_assign(sim)
        assert len(pairs) == 2
        total = math.fsum(float(sim[r, c]) for r, c in pairs)
        want_total, want_pairs = exhaustive_assignment(sim)
        assert total == want_total and pairs == want_pairs

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_hungarian_property_random(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    sim = rng.integers(-64, 64, size=(n, m)).astype(np.float64) / 16
    got = hungarian_assign(sim)
    want_total, want_pairs = exhaustive_assignment(sim)
    assert got == want_pairs
    assert math.fsum(float(sim[r, c]) for r, c in got) == want_total
