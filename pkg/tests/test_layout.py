import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setseg.layout import (Seg, SequenceLayout, assemble, build_causal_mask, build_hybrid_mask,
                           mask_from_text, mask_to_text)


def L(*tags):
    return SequenceLayout(tuple(tags))


def test_assemble_default_example():
    lay = assemble(4, [5, 6, 7], [8, 9], 10)
    assert lay.length == 21
    assert lay.trigger_index == 9
    assert lay.labels[:4] == (Seg.VISION,) * 4
    assert lay.labels[4:7] == (Seg.TEXT,) * 3
    assert lay.labels[7:9] == (Seg.PHRASE,) * 2
    assert lay.labels[10:20] == (Seg.QUERY,) * 10
    assert lay.labels[20] == Seg.MASK_END


def test_assemble_minimal_has_no_mask_end():
    lay = assemble(1, [5], [], 1)
    assert lay.labels == (Seg.VISION, Seg.TEXT, Seg.TRIGGER, Seg.QUERY)


@pytest.mark.parametrize("kwargs", [dict(K=0), dict(text=[]), dict(vision=0)])
def test_assemble_rejects(kwargs):
    args = dict(vision=2, text=[1], phrase=[], K=2) | kwargs
    with pytest.raises(ValueError):
        assemble(args["vision"], args["text"], args["phrase"], args["K"])


def test_pure_text_is_causal():
    allow = build_hybrid_mask(L(Seg.TEXT, Seg.TEXT))
    assert allow.astype(int).tolist() == [[1, 0], [1, 1]]


def test_vision_trigger_queries():
    allow = build_hybrid_mask(L(Seg.VISION, Seg.TRIGGER, Seg.QUERY, Seg.QUERY)).astype(int)
    assert allow[2].tolist() == [1, 1, 1, 1]
    assert allow[3].tolist() == [1, 1, 1, 1]
    assert allow[0].tolist() == [1, 0, 0, 0]
    assert allow[1].tolist() == [1, 1, 0, 0]


def test_mask_end_row_and_column():
    allow = build_hybrid_mask(L(Seg.TEXT, Seg.TRIGGER, Seg.QUERY, Seg.MASK_END)).astype(int)
    assert allow[3].tolist() == [1, 1, 1, 1]
    assert allow[2, 3] == 0


def test_causal_mask_length_three():
    lay = L(Seg.TEXT, Seg.TRIGGER, Seg.QUERY)
    assert build_causal_mask(lay).astype(int).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]


def _all_layouts(max_len):
    """Every well-formed layout up to max_len: prefix, optional trigger+queries, optional mask-end."""
    prefix_tags = (Seg.VISION, Seg.TEXT, Seg.PHRASE)
    for n in range(1, max_len + 1):
        for n_pre in range(0, n + 1):
            for pre in itertools.product(prefix_tags, repeat=n_pre):
                rest = n - n_pre
                if rest == 0:
                    if pre:
                        yield SequenceLayout(pre)
                    continue
                for me in (0, 1):
                    k = rest - 1 - me
                    if k < 0 or (me and k == 0):
                        continue
                    yield SequenceLayout(pre + (Seg.TRIGGER,) + (Seg.QUERY,) * k + (Seg.MASK_END,) * me)


def test_causal_equals_hybrid_exactly_when_at_most_one_query():
    # exhaustive over L <= 6: the masks coincide iff the query block has size <= 1
    seen_k1_with_end = False
    for lay in _all_layouts(6):
        same = np.array_equal(build_causal_mask(lay), build_hybrid_mask(lay))
        assert same == (lay.K <= 1), lay.labels
        if lay.K == 1 and Seg.MASK_END in lay.labels:
            seen_k1_with_end = True
    assert seen_k1_with_end


def test_text_round_trip():
    allow = build_hybrid_mask(assemble(3, [1, 2], [3], 4))
    text = mask_to_text(allow)
    assert set(text) <= {"0", "1", "\n"}
    assert np.array_equal(mask_from_text(text), allow)


def test_golden_mask_file(tmp_path):
    text = mask_to_text(build_hybrid_mask(assemble(2, [1], [2], 2)))
    # V V T P trig q q end
    assert text == (
        "10000000\n"
        "11000000\n"
        "11100000\n"
        "11110000\n"
        "11111000\n"
        "11111110\n"
        "11111110\n"
        "11111111\n"
    )


@st.composite
def layouts(draw, max_len=64):
    K = draw(st.integers(1, 20))
    me = draw(st.booleans())
    budget = max_len - K - 1 - int(me)
    v = draw(st.integers(1, max(1, budget - 1)))
    t = draw(st.integers(1, max(1, budget - v)))
    p = draw(st.integers(0, max(0, budget - v - t)))
    return assemble(v, [0] * t, [0] * p, K, mask_end=me)


@settings(max_examples=200, deadline=None)
@given(layouts())
def test_hybrid_invariants(lay):
    check_layout_invariants(lay)


def check_layout_invariants(lay: SequenceLayout) -> None:
    hyb = build_hybrid_mask(lay)
    cau = build_causal_mask(lay)
    labels = lay.label_array()
    q = labels == Seg.QUERY
    n = lay.length
    assert n == (labels != Seg.QUERY).sum() + lay.K
    assert lay.trigger_index < lay.query_slice.start
    # non-query rows are causal
    assert np.array_equal(hyb[~q], cau[~q])
    # query block all ones, query rows identical, and blind to mask-end
    assert hyb[np.ix_(q, q)].all()
    rows = hyb[q]
    assert (rows == rows[0]).all()
    assert np.array_equal(rows[0], labels != Seg.MASK_END)
    # causal rows never see a later query
    for i in np.flatnonzero(~q):
        assert not hyb[i, (np.arange(n) > i) & q].any()
    assert hyb.any(axis=1).all()
    assert np.array_equal(build_hybrid_mask(lay), hyb)
