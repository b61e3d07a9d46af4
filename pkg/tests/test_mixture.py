import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixopt import model as mo
from mixopt.errors import (DimensionMismatchError, InvalidInputError,
                           ManifestSchemaError, MissingFileError,
                           ReferenceOverlapError)
from mixopt.linalg import seeded_rng
from mixopt.loop import ModelSettings
from mixopt.mixture import (DomainDataset, MixtureState, Provenance,
                            apply_beta, load_manifest, synth_scenario,
                            write_dataset_files)


def tiny_state(sizes, seed=0, dim=2, classes=2):
    rng = seeded_rng(seed)
    domains = []
    for i, n in enumerate(sizes):
        ex = mo.Examples(rng.standard_normal((n, dim)),
                         rng.integers(0, classes, n))
        domains.append(DomainDataset(name=f"d{i}", examples=ex,
                                     provenance=Provenance(kind="synthetic")))
    ref = DomainDataset(name="reference",
                        examples=mo.Examples(rng.standard_normal((10, dim)),
                                             rng.integers(0, classes, 10)),
                        provenance=Provenance(kind="synthetic"))
    return MixtureState(iteration=0, domains=tuple(domains), reference=ref,
                        n_classes=classes)


def example_keys(ex):
    return {(ex.X[i].tobytes(), int(ex.y[i])) for i in range(ex.n)}


# --------------------------------------------------------------- apply_beta

def test_apply_beta_paper_anchored_growth():
    state = tiny_state([5000])
    new = apply_beta(state, [0.10], seeded_rng(0))
    assert new.sizes == [5500]
    assert new.iteration == 1


def test_apply_beta_zero_is_identity():
    state = tiny_state([300, 200])
    new = apply_beta(state, [0.0, 0.0], seeded_rng(1))
    assert new.sizes == [300, 200]
    assert new.iteration == 1
    assert len(new.beta_history) == 1
    for old, upd in zip(state.domains, new.domains):
        assert np.array_equal(old.examples.X, upd.examples.X)


def test_apply_beta_downsample_is_subset():
    state = tiny_state([1000])
    new = apply_beta(state, [-0.15], seeded_rng(2))
    assert new.sizes == [850]
    parent = example_keys(state.domains[0].examples)
    child = example_keys(new.domains[0].examples)
    assert len(child) == 850  # all distinct
    assert child <= parent


def test_apply_beta_upsample_preserves_support():
    state = tiny_state([40])
    new = apply_beta(state, [0.5], seeded_rng(3))
    assert new.sizes == [60]
    assert example_keys(new.domains[0].examples) == \
        example_keys(state.domains[0].examples)


def test_apply_beta_floor_of_one():
    state = tiny_state([2])
    new = apply_beta(state, [-0.99], seeded_rng(4))
    assert new.sizes == [1]


def test_apply_beta_is_deterministic():
    state = tiny_state([100, 100])
    a = apply_beta(state, [0.2, -0.2], seeded_rng(5))
    b = apply_beta(state, [0.2, -0.2], seeded_rng(5))
    for da, db in zip(a.domains, b.domains):
        assert np.array_equal(da.examples.X, db.examples.X)
        assert np.array_equal(da.examples.y, db.examples.y)


def test_apply_beta_rejects_invalid():
    state = tiny_state([10, 10])
    with pytest.raises(InvalidInputError):
        apply_beta(state, [-1.0, 0.0], seeded_rng(0))
    with pytest.raises(InvalidInputError):
        apply_beta(state, [0.1], seeded_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 400), min_size=1, max_size=4),
       st.integers(0, 10_000))
def test_apply_beta_size_law_property(sizes, seed):
    rng = seeded_rng(seed)
    beta = rng.uniform(-0.9, 1.5, size=len(sizes))
    state = tiny_state(sizes, seed=seed)
    new = apply_beta(state, beta, rng)
    for n_old, b, n_new, old_dom, new_dom in zip(
            sizes, beta, new.sizes, state.domains, new.domains):
        assert n_new == max(1, int(np.floor((1.0 + b) * n_old + 0.5)))
        if n_new <= n_old:
            assert example_keys(new_dom.examples) <= example_keys(old_dom.examples)
        else:
            assert example_keys(new_dom.examples) == example_keys(old_dom.examples)


# ---------------------------------------------------------------- manifests

def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def valid_manifest(tmp_path, overlap=False, bad_dim=False):
    rows_a = [{"x": [float(i), 0.0], "y": i % 2} for i in range(6)]
    rows_b = [{"x": [0.5, float(i)], "y": i % 2} for i in range(4)]
    rows_ref = [{"x": [9.0 + i, 9.0], "y": i % 2, "origin": "a"}
                for i in range(5)]
    if overlap:
        rows_ref[0] = dict(rows_a[0])
    if bad_dim:
        rows_b[1] = {"x": [1.0, 2.0, 3.0], "y": 0}
    write_jsonl(tmp_path / "a.jsonl", rows_a)
    write_jsonl(tmp_path / "b.jsonl", rows_b)
    write_jsonl(tmp_path / "ref.jsonl", rows_ref)
    manifest = {"feature_dim": 2, "classes": 2,
                "domains": [{"name": "a", "path": "a.jsonl"},
                            {"name": "b", "path": "b.jsonl"}],
                "reference": {"path": "ref.jsonl"}}
    mp = tmp_path / "manifest.json"
    mp.write_text(json.dumps(manifest))
    return mp


def test_load_manifest_happy_path(tmp_path):
    state = load_manifest(valid_manifest(tmp_path))
    assert state.iteration == 0
    assert state.beta_history == ()
    assert state.sizes == [6, 4]
    assert state.reference.origins is not None


def test_load_manifest_reference_overlap_names_domain(tmp_path):
    with pytest.raises(ReferenceOverlapError, match="'a'"):
        load_manifest(valid_manifest(tmp_path, overlap=True))


def test_load_manifest_dimension_mismatch(tmp_path):
    with pytest.raises(DimensionMismatchError, match="'b' line 2"):
        load_manifest(valid_manifest(tmp_path, bad_dim=True))


def test_load_manifest_missing_files(tmp_path):
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "nope.json")
    mp = valid_manifest(tmp_path)
    (tmp_path / "b.jsonl").unlink()
    with pytest.raises(MissingFileError, match="'b'"):
        load_manifest(mp)


def test_load_manifest_schema_violations(tmp_path):
    mp = valid_manifest(tmp_path)
    doc = json.loads(mp.read_text())
    doc["extra"] = 1
    mp.write_text(json.dumps(doc))
    with pytest.raises(ManifestSchemaError):
        load_manifest(mp)

    mp2 = valid_manifest(tmp_path)
    write_jsonl(tmp_path / "a.jsonl", [{"x": [0.0, 0.0], "y": 5}])
    with pytest.raises(ManifestSchemaError, match="'a' line 1"):
        load_manifest(mp2)


def test_dataset_files_roundtrip(tmp_path):
    state = synth_scenario("conflict", [30, 30], seed=8)
    write_dataset_files(state, tmp_path)
    back = load_manifest(tmp_path / "manifest.json")
    assert back.sizes == state.sizes
    for a, b in zip(state.domains, back.domains):
        assert np.array_equal(a.examples.X, b.examples.X)
        assert np.array_equal(a.examples.y, b.examples.y)
    assert np.array_equal(back.reference.origins, state.reference.origins)


# ------------------------------------------------------- synthetic scenarios

def test_synth_same_seed_is_identical():
    a = synth_scenario("benign", [50, 50, 50], seed=12)
    b = synth_scenario("benign", [50, 50, 50], seed=12)
    for da, db in zip(a.domains + (a.reference,), b.domains + (b.reference,)):
        assert np.array_equal(da.examples.X, db.examples.X)
        assert np.array_equal(da.examples.y, db.examples.y)


def test_synth_rejects_bad_args():
    with pytest.raises(InvalidInputError):
        synth_scenario("nope", [10], seed=0)
    with pytest.raises(InvalidInputError):
        synth_scenario("benign", [0, 10], seed=0)


def test_synth_skewed_reference_overweights_domain_zero():
    state = synth_scenario("skewed-reference", [100, 100, 100], seed=3)
    tags = state.reference.origins.tolist()
    assert tags.count("dom0") >= 0.7 * len(tags)


def train_and_eval(spec, train_ex, eval_ex):
    trained = mo.train_to_convergence(spec, train_ex, mo.TrainConfig(tol=1e-7))
    assert trained.train_meta.converged
    return mo.loss(trained, eval_ex, include_reg=False)


def ref_slice(state, tag):
    idx = np.flatnonzero(state.reference.origins == tag)
    return state.reference.examples.subset(idx)


def test_benign_scenario_joint_matches_specific():
    # no conflict: joint training does not hurt any domain's slice
    state = synth_scenario("benign", [500, 500, 500], seed=1)
    spec = ModelSettings(l2_reg=2e-2).build_spec(state.feature_dim,
                                                 state.n_classes)
    for i, dom in enumerate(state.domains):
        ours = ref_slice(state, dom.name)
        q_joint = train_and_eval(spec, state.union(), ours)
        q_specific = train_and_eval(spec, dom.examples, ours)
        assert q_joint <= 1.05 * q_specific


def test_conflict_scenario_specific_beats_joint_on_own_slice():
    state = synth_scenario("conflict", [400, 400, 400], seed=1)
    spec = ModelSettings(l2_reg=2e-2).build_spec(state.feature_dim,
                                                 state.n_classes)
    for i, dom in enumerate(state.domains):
        ours = ref_slice(state, dom.name)
        q_joint = train_and_eval(spec, state.union(), ours)
        q_specific = train_and_eval(spec, dom.examples, ours)
        assert q_specific < q_joint
