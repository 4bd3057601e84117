import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepseg import infer as I
from sepseg.sepnet import NetworkSpec, build_sepnet
from sepseg.volgrid import LabelMap, ProbMap, Volume, desk_phantom_spec, generate_phantom
from sepseg.xform import preset


def partitions(n, largest=None):
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    for k in range(min(n, largest), 0, -1):
        for rest in partitions(n - k, k):
            yield (k,) + rest


def partition_entropy(parts):
    n = sum(parts)
    return -sum(k / n * math.log(k / n) for k in parts)


def members_for(parts):
    """One-voxel label maps realising a partition of members into label groups."""
    labels = [lab for lab, k in enumerate(parts) for _ in range(k)]
    return [np.array([[[lab]]]) for lab in labels]


def test_rank_members_examples():
    table = np.array([[0.5], [0.9], [0.7], [0.1], [0.8], [0.3]])
    np.testing.assert_array_equal(I.rank_members(table)[:, 0], [1, 5, 3, 1, 4, 1])
    np.testing.assert_array_equal(I.rank_members([[0.2], [0.9]])[:, 0], [4, 5])
    np.testing.assert_array_equal(I.rank_members(np.full((6, 1), 0.5))[:, 0], [5, 4, 3, 1, 1, 1])
    np.testing.assert_array_equal(I.rank_members(np.full((8, 1), 0.5))[:, 0], [5, 4, 3, 1, 1, 1, 1, 1])


def test_rank_members_is_per_class():
    w = I.rank_members([[0.9, 0.1], [0.1, 0.9]])
    np.testing.assert_array_equal(w, [[5, 4], [4, 5]])


def test_fuse_identical_members():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=(2, 3, 3)).transpose(3, 0, 1, 2)
    fused = I.ensemble_fuse([ProbMap(p, (3, 1, 1))] * 4, rng.uniform(1, 5, size=(4, 3)))
    np.testing.assert_allclose(fused.probs, p, rtol=0, atol=1e-15)


def test_fuse_two_members_hand_value():
    a = np.zeros((2, 1, 1, 1))
    a[1] = 1.0
    a[0] = 0.0
    b = np.zeros((2, 1, 1, 1))
    b[0] = 1.0
    fused = I.ensemble_fuse([a, b], [[5, 5], [4, 4]]).probs
    assert fused[1, 0, 0, 0] == 5 / 9
    assert fused[0, 0, 0, 0] == 4 / 9


def test_fuse_channel_sums_can_deviate():
    a = np.array([0.9, 0.1]).reshape(2, 1, 1, 1)
    b = np.array([0.1, 0.9]).reshape(2, 1, 1, 1)
    fused = I.ensemble_fuse([a, b], [[5, 4], [4, 5]]).probs.ravel()
    np.testing.assert_allclose(fused, [(4.5 + 0.4) / 9, (0.4 + 4.5) / 9])
    np.testing.assert_allclose(I.ensemble_fuse([a, b], [[5, 1], [1, 5]]).probs.ravel(),
                               [4.6 / 6, 4.6 / 6])
    assert I.ensemble_fuse([a, b], [[5, 1], [1, 5]]).probs.sum() > 1.0


def test_fuse_rejects_mismatch():
    with pytest.raises(ValueError, match="geometry"):
        I.ensemble_fuse([np.zeros((2, 1, 1, 1)), np.zeros((2, 1, 1, 2))], np.ones((2, 2)))
    with pytest.raises(ValueError, match="weights"):
        I.ensemble_fuse([np.zeros((2, 1, 1, 1))] * 2, np.ones((3, 2)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 6))
def test_fuse_is_convex_combination(seed, m):
    rng = np.random.default_rng(seed)
    stack = rng.random((m, 3, 2, 3, 3))
    fused = I.ensemble_fuse(list(stack), rng.uniform(0.1, 10, size=(m, 3))).probs
    assert np.all(fused >= stack.min(axis=0) - 1e-12)
    assert np.all(fused <= stack.max(axis=0) + 1e-12)


@pytest.mark.parametrize("parts,expected", [
    ((6,), 0.0), ((5, 1), 0.451), ((4, 2), 0.6365), ((3, 3), 0.693), ((4, 1, 1), 0.8676), ((3, 2, 1), 1.0114),
])
def test_entropy_levels_six_members(parts, expected):
    h = float(I.entropy_map(members_for(parts)).entropy.ravel()[0])
    assert h == pytest.approx(expected, abs=1e-3)


def test_entropy_matches_partition_oracle_for_small_ensembles():
    for n in range(1, 9):
        for parts in partitions(n):
            h = float(I.entropy_map(members_for(parts)).entropy.ravel()[0])
            assert abs(h - partition_entropy(parts)) <= 1e-12


def test_entropy_invariant_to_member_order_and_label_names():
    rng = np.random.default_rng(1)
    maps = [rng.integers(0, 4, size=(2, 3, 4)) for _ in range(6)]
    base = I.entropy_map(maps).entropy
    perm = [maps[i] for i in rng.permutation(6)]
    np.testing.assert_array_equal(I.entropy_map(perm).entropy, base)
    relabel = np.array([3, 0, 2, 1])
    np.testing.assert_allclose(I.entropy_map([relabel[m] for m in maps]).entropy, base, atol=1e-15)


def test_entropy_map_keeps_spacing_and_member_count():
    lm = LabelMap(np.zeros((1, 2, 2), np.uint8), 2, (3, 1, 1))
    u = I.entropy_map([lm, lm, lm])
    assert u.num_members == 3 and u.spacing_mm == (3, 1, 1)


def test_vvc_examples():
    assert I.vvc([5, 5, 5]) == 0.0
    assert I.vvc([90, 100, 110]) == pytest.approx(0.08165, abs=1e-5)
    assert I.vvc([0, 0, 0]) == 0.0
    assert I.vvc([90, 100, 110], spacing=(3, 1, 1)) == pytest.approx(I.vvc([90, 100, 110]), rel=1e-15)


def test_structure_vvc():
    a = np.zeros((1, 1, 10), int)
    maps = []
    for n in (9, 10, 11):
        m = a.copy()
        m[0, 0, :n - 8] = 1
        maps.append(m)
    out = I.structure_vvc(maps, 3)
    assert out[1] == pytest.approx(I.vvc([1, 2, 3]))
    assert out[2] == 0.0


def brute_report(maps, gt, pred):
    n = len(maps)
    tally = {}
    for idx in np.ndindex(gt.shape):
        labs = [int(m[idx]) for m in maps]
        h = -sum(labs.count(v) / n * math.log(labs.count(v) / n) for v in set(labs))
        h = round(h, 9)
        region = "foreground" if pred[idx] else "background"
        for r in ("whole", region):
            e, t = tally.get((r, h), (0, 0))
            tally[(r, h)] = (e + int(pred[idx] != gt[idx]), t + 1)
    return tally


def test_uncertainty_report_matches_brute_force():
    rng = np.random.default_rng(4)
    gt = rng.integers(0, 3, size=(3, 5, 5))
    maps = [np.where(rng.random(gt.shape) < 0.3, rng.integers(0, 3, gt.shape), gt) for _ in range(2)]
    rep = I.uncertainty_report(maps, gt, prediction=maps[0])
    assert rep["levels"] == sorted(rep["levels"])
    tally = brute_report(maps, gt, maps[0])
    for region in ("whole", "background", "foreground"):
        for lv, (e, t), rate in zip(rep["levels"], rep["counts"][region], rep["error_rate"][region]):
            assert (e, t) == tally.get((region, round(lv, 9)), (0, 0))
            assert rate == (e / t if t else None)
        wrong = sum(c[0] for c in rep["counts"][region])
        if wrong:
            assert sum(rep["error_level_distribution"][region]) == pytest.approx(1.0)


def test_uncertainty_report_all_agree():
    gt = np.array([[[0, 1, 2]]])
    rep = I.uncertainty_report([gt] * 3, gt)
    assert rep["levels"] == [0.0]
    assert rep["error_rate"]["whole"] == [0.0]


def test_majority_vote_ties_go_to_lower_label():
    maps = [np.array([[[2]]]), np.array([[[1]]])]
    assert I.majority_vote(maps)[0, 0, 0] == 1


# --- prediction -----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_model():
    return build_sepnet(NetworkSpec(num_classes=3, base_channels=4, num_scales=2), dtype=np.float64, seed=3)


def test_uniform_logits_give_background():
    m = build_sepnet(NetworkSpec(num_classes=3, base_channels=4, num_scales=2), dtype=np.float64, seed=3)
    m.params["head.weight"].data[...] = 0.0
    m.params["head.bias"].data[...] = 0.0
    v = Volume(np.zeros((4, 8, 8), np.int16), (3, 1, 1))
    pm, lm = I.predict(m, v, preset("SLF1"))
    np.testing.assert_allclose(pm.probs, 1 / 3, atol=1e-15)
    assert not lm.labels.any()


def test_tiling_matches_single_pass(toy_model):
    x = np.random.default_rng(0).random((6, 8, 8))
    one = I.predict_probs(toy_model, x)
    tiled = I.predict_probs(toy_model, x, tile_depth=6)
    np.testing.assert_allclose(tiled, one, atol=1e-6)


def test_tiling_covers_long_volumes(toy_model):
    x = np.random.default_rng(0).random((11, 8, 8))
    out = I.predict_probs(toy_model, x, tile_depth=4)
    assert out.shape == (3, 11, 8, 8)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


def test_predict_pads_and_windows(toy_model):
    v, _ = generate_phantom(desk_phantom_spec(0, dims=(4, 14, 18)))
    pm, lm = I.predict(toy_model, v, preset("SLF1"), window=10)
    assert pm.probs.shape == (3, 4, 14, 18)
    assert np.all(pm.probs[0, :, :2] == 1.0) and np.all(pm.probs[0, :, :, :4] == 1.0)
    pm2, _ = I.predict(toy_model, v, preset("SLF1"), window=10)
    np.testing.assert_array_equal(pm.probs, pm2.probs)


def test_ensemble_spec_json_roundtrip():
    spec = I.EnsembleSpec([I.EnsembleMember("a.sepn", preset("SLF1")), I.EnsembleMember("b.sepn", preset("NLF2"))],
                          [[0.1, 0.2], [0.3, 0.4]])
    back = I.EnsembleSpec.from_json(spec.to_json())
    assert back.members == spec.members
    np.testing.assert_array_equal(back.dsc_table, spec.dsc_table)
    np.testing.assert_array_equal(back.weights(), [[4, 4], [5, 5]])


def test_ensemble_spec_accepts_preset_names():
    spec = I.EnsembleSpec.from_json(json.dumps({"members": [{"checkpoint": "a", "transform": "SLF2"}],
                                              "dsc_table": [[0.9, 0.8]]}))
    assert spec.members[0].transform == preset("SLF2")
    with pytest.raises(ValueError, match="preset"):
        I.EnsembleSpec.from_json(json.dumps({"members": [{"checkpoint": "a", "transform": "SLF7"}],
                                           "dsc_table": [[0.9, 0.8]]}))
