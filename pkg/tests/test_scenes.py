from collections import Counter, deque
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setseg import rle, scenes, vocab
from setseg.scenes import (InstructionSpec, Sample, SceneConfig, SceneObject, filter_sample, generate, load_jsonl,
                           parse, render, resolve_objects, save_jsonl)


@pytest.fixture(scope="module")
def default_run():
    stats = scenes.GenStats()
    return generate(11, 2000, SceneConfig(), "train", stats), stats


def obj(oid, shape, color, r0, c0, size):
    return SceneObject(oid, shape, color, tuple((r0 + r, c0 + c) for r, c in scenes.shape_cells(shape, size)))


# ------------------------------------------------------------ oracle

def components(grid: np.ndarray):
    """Objects recovered from the rendered grid alone: (shape, color, cells)."""
    G = grid.shape[0]
    seen = np.zeros_like(grid, dtype=bool)
    out = []
    for r in range(G):
        for c in range(G):
            if grid[r, c] == 0 or seen[r, c]:
                continue
            cells, todo = [], deque([(r, c)])
            seen[r, c] = True
            while todo:
                y, x = todo.popleft()
                cells.append((y, x))
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < G and 0 <= nx < G and not seen[ny, nx] and grid[ny, nx] == grid[r, c]:
                        seen[ny, nx] = True
                        todo.append((ny, nx))
            shape, color = vocab.attr_parts(int(grid[r, c]))
            out.append((shape, color, frozenset(cells)))
    return out


def oracle_targets(words: list[str], grid: np.ndarray) -> set[frozenset]:
    """Brute-force reading of an instruction over the recovered objects."""
    objs = components(grid)
    plural = {"squares": "square", "circles": "circle", "triangles": "triangle", "shapes": "shape"}

    def selector(ws):
        color = ws[0] if ws[0] in vocab.COLORS else None
        noun = plural.get(ws[-1], ws[-1])
        return [o for o in objs if (color is None or o[1] == color) and (noun == "shape" or o[0] == noun)]

    def left(o):
        return min(c for _, c in o[2])

    def top(o):
        return min(r for r, _ in o[2])

    body = words[1:]
    if body[0] in ("all", "every"):
        if "except" in body:
            cut = body.index("except")
            pool = selector(body[1:cut])
            tail = body[cut + 1:]
            if tail[-1] == "ones":
                return {o[2] for o in pool if o[1] != tail[0]}
            return {o[2] for o in pool if o[0] != plural[tail[0]]}
        return {o[2] for o in selector(body[1:])}
    assert body[0] == "the"
    if body[1] in ("two", "three"):
        n = 2 if body[1] == "two" else 3
        pool = selector(body[3:])
        best = sorted(pool, key=lambda o: (-len(o[2]), left(o), top(o)))
        return {o[2] for o in best[:n]}
    pool = selector(body[2:])
    if not pool:
        return set()
    key = {"leftmost": lambda o: (left(o), top(o)), "rightmost": lambda o: (-left(o), top(o)),
           "largest": lambda o: (-len(o[2]), left(o), top(o))}[body[1]]
    return {min(pool, key=key)[2]}


def mask_sets(masks):
    return {frozenset(map(tuple, np.argwhere(m))) for m in masks}


# ------------------------------------------------------------ tests

def test_resolve_examples():
    objs = [obj(0, "square", "red", 0, 0, 1), obj(1, "square", "red", 0, 3, 2), obj(2, "square", "red", 4, 0, 1),
            obj(3, "square", "blue", 4, 4, 1), obj(4, "square", "blue", 6, 6, 1)]
    got = resolve_objects(InstructionSpec("red", "square"), objs)
    assert [o.id for o in got] == [0, 2, 1]
    circles = [obj(0, "circle", "green", 0, 5, 2), obj(1, "circle", "blue", 4, 2, 2)]
    assert resolve_objects(InstructionSpec(None, "circle", "Leftmost"), circles)[0].left == 2


def test_leftmost_tie_broken_by_top():
    objs = [obj(0, "square", "red", 5, 1, 1), obj(1, "square", "red", 1, 1, 1)]
    assert resolve_objects(InstructionSpec("red", None, "Leftmost"), objs)[0].id == 1
    assert resolve_objects(InstructionSpec("red", None, "Rightmost"), objs)[0].id == 1


def test_largest_and_count():
    objs = [obj(0, "square", "red", 0, 0, 1), obj(1, "triangle", "red", 0, 3, 3), obj(2, "square", "red", 5, 5, 3)]
    assert resolve_objects(InstructionSpec("red", None, "Largest"), objs)[0].id == 2
    two = resolve_objects(InstructionSpec("red", None, "CountK", count=2), objs)
    assert {o.id for o in two} == {1, 2}


def test_except_predicates():
    objs = [obj(0, "square", "red", 0, 0, 1), obj(1, "circle", "red", 0, 3, 2), obj(2, "square", "blue", 5, 5, 1)]
    assert [o.id for o in resolve_objects(InstructionSpec("red", None, "Except", except_shape="circle"), objs)] == [0]
    assert [o.id for o in resolve_objects(InstructionSpec(None, "square", "Except", except_color="blue"), objs)] == [0]


def test_render_examples():
    assert " ".join(render(InstructionSpec("red", "square"))) == "segment all red squares"
    assert " ".join(render(InstructionSpec(None, "circle", template=1))) == "find every circle"
    assert " ".join(render(InstructionSpec("blue", None, "Largest", template=2))) == "highlight the largest blue shape"
    spec = InstructionSpec(None, "triangle", "CountK", count=3)
    assert " ".join(render(spec)) == "segment the three largest triangles"
    assert scenes.canonical_phrase(InstructionSpec("red", "square", "Leftmost")) == ["red", "square"]


specs = st.builds(
    lambda color, shape, mod, count, exc, ecol, tpl: InstructionSpec(
        color, shape if (color or shape) else "square", mod,
        count=count if mod == "CountK" else None,
        except_color=ecol if mod == "Except" and exc else None,
        except_shape=None if mod != "Except" or exc else "circle",
        template=tpl),
    st.sampled_from((None, *vocab.COLORS)), st.sampled_from((None, *vocab.SHAPES)),
    st.sampled_from(scenes.MODIFIERS), st.sampled_from((2, 3)), st.booleans(),
    st.sampled_from(vocab.COLORS), st.integers(0, 2))


@settings(max_examples=300, deadline=None)
@given(specs)
def test_render_parse_round_trip(spec):
    back = parse(render(spec))
    if spec.modifier == "None":
        assert back == replace(spec, modifier="All")
    else:
        assert back == spec
    assert vocab.decode(vocab.encode(render(spec))) == render(spec)


@pytest.mark.parametrize("text", ["", "paint all squares", "segment all purple squares", "segment the squares",
                                  "segment all squares except", "find every red"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        parse(text)


def test_generation_is_deterministic(tmp_path):
    a = generate(1, 1)
    b = generate(1, 1)
    save_jsonl(tmp_path / "a.jsonl", a)
    save_jsonl(tmp_path / "b.jsonl", b)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate(2, 1)[0].to_json() != a[0].to_json() or generate(3, 1)[0].to_json() != a[0].to_json()


def test_prefix_stable_across_counts():
    long = generate(5, 45)
    short = generate(5, 20)
    assert [s.to_json() for s in short] == [s.to_json() for s in long[:20]]


def test_default_run_properties(default_run):
    samples, stats = default_run
    counts = Counter(s.stratum for s in samples)
    for name, p in zip(scenes.STRATA, (0.50, 0.35, 0.15)):
        assert abs(counts[name] / len(samples) - p) <= 0.02
    assert stats.rejection_rate < 0.05
    for s in samples:
        assert 1 <= len(s.objects) <= 6
        assert s.n_targets <= 10
        assert s.instruction
        cells = [c for o in s.objects for c in o.cells]
        assert len(cells) == len(set(cells))


def test_semantic_oracle_500(default_run):
    samples, _ = default_run
    checked = Counter()
    for s in samples[:500]:
        words = vocab.decode(s.instruction)
        assert oracle_targets(words, s.grid) == mask_sets(s.masks), s.instruction_text
        checked[s.spec.modifier] += 1
    assert checked["Except"] > 0 and checked["CountK"] > 0


def test_self_validating_masks(default_run):
    samples, _ = default_run
    for s in samples[:300]:
        for r, c in np.argwhere(s.grid):
            assert any((r, c) in o.cells for o in s.objects)
        objs = {frozenset(o.cells) for o in s.objects}
        assert mask_sets(s.masks) <= objs
        d = s.to_json()
        for code, m in zip(d["masks"], s.masks):
            assert np.array_equal(rle.decode(code, s.grid.shape), m)


def test_jsonl_round_trip(tmp_path, default_run):
    samples, _ = default_run
    save_jsonl(tmp_path / "d.jsonl", samples[:50])
    back = load_jsonl(tmp_path / "d.jsonl")
    assert [b.to_json() for b in back] == [s.to_json() for s in samples[:50]]


def test_split_ids_disjoint_and_content_differs():
    cfg = SceneConfig()
    tr, va, te = (generate(0, 40, cfg, split) for split in ("train", "val", "test"))
    ids = [{s.id for s in x} for x in (tr, va, te)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert tr[0].grid.tolist() != va[0].grid.tolist()


def _sample(objects, spec, masks=None, grid=8):
    masks = scenes._masks_for(resolve_objects(spec, objects), grid) if masks is None else masks
    return Sample("x", "x", scenes.render_grid(objects, grid), objects, spec,
                  vocab.encode(render(spec)), vocab.encode(scenes.canonical_phrase(spec)), masks)


def test_filter_cases():
    objs = [obj(i, "square", "red", 2 * (i // 4), 2 * (i % 4), 1) for i in range(12)]
    over = _sample(objs, InstructionSpec("red", "square"))
    assert over.n_targets == 12
    assert filter_sample(over, 10) == (False, "over-capacity")
    good = _sample(objs[:1], InstructionSpec("red", "square"))
    assert filter_sample(good, 10) == (True, "ok")
    empty = replace(good, masks=np.zeros((1, 8, 8), bool))
    assert filter_sample(empty, 10) == (False, "empty-mask")
    wrong = replace(good, masks=objs[1].mask(8)[None])
    assert filter_sample(wrong, 10) == (False, "inconsistent")
    garbled = replace(good, instruction=vocab.encode(["segment", "the", "red"]))
    assert filter_sample(garbled, 10) == (False, "unparseable")
    assert filter_sample(good, 10, {good.instruction_text}) == (False, "duplicate")


def test_no_target_samples():
    samples = generate(4, 60)
    nt = [s for s in samples if s.stratum == "none"]
    assert nt
    for s in nt:
        assert s.n_targets == 0 and s.spec.modifier == "None" and s.instruction


def test_noise_is_caught_by_filter():
    stats = scenes.GenStats()
    samples = generate(3, 200, SceneConfig(noise_rate=0.3), "train", stats)
    assert not any(s.corrupted for s in samples)
    assert stats.rejected.get("inconsistent", 0) > 0
    raw = generate(3, 200, SceneConfig(noise_rate=0.3, apply_filter=False))
    assert any(s.corrupted for s in raw)


@pytest.mark.parametrize("bad", [dict(max_objects=17, grid=8), dict(min_objects=0), dict(mix=(0.5, 0.5, 0.5)),
                                 dict(modifiers=("Most",)), dict(noise_rate=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SceneConfig(**bad).validate()


def test_capacity_bound_is_reachable():
    cfg = SceneConfig(grid=4, min_objects=4, max_objects=4, max_tries=4000)
    cfg.validate()
    s = generate(0, 3, replace(cfg, mix=(1.0, 0.0, 0.0)))
    assert all(len(x.objects) == 4 for x in s)
