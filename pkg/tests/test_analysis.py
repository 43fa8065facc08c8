import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissue_manifold.analysis import (FingerprintMismatch, LatentCorpus, cluster_corpus,
                                      encode_corpus, extreme_cluster_pairs, generate_images,
                                      interpolate_linear, pca_2d, read_enrichment_csv,
                                      reconstruct, reduce_to_2d, select_cluster_representative,
                                      survival_enrichment)
from tissue_manifold.checkpoint import load_checkpoint, load_gan
from tissue_manifold.dataset import (CohortManifest, PatientRecord, TissuePatch, load_image,
                                     normalize_image)
from tissue_manifold.gmm import fit_gmm


def subset(manifest, n):
    patches = manifest.patches[:n]
    keep = {p.patient_id for p in patches}
    return CohortManifest(patches, [p for p in manifest.patients if p.patient_id in keep],
                          manifest.resolution, manifest.root)


def images(manifest, n):
    return np.stack([normalize_image(load_image(manifest.resolve(p))) for p in manifest.patches[:n]])


# ----------------------------------------------------------------- corpus


def test_corpus_shape(synth_cohort, toy_checkpoints):
    corpus = encode_corpus(toy_checkpoints[0], subset(synth_cohort.manifest, 100))
    assert corpus.rows.shape == (100, 200) and corpus.rows.dtype == np.float32
    assert corpus.patch_ids == [p.patch_id for p in synth_cohort.manifest.patches[:100]]
    assert corpus.checkpoint_fingerprint == load_checkpoint(toy_checkpoints[0]).fingerprint("encoder")


def test_corpus_deterministic_and_batch_invariant(tmp_path, synth_cohort, toy_checkpoints):
    m = subset(synth_cohort.manifest, 40)
    a = encode_corpus(toy_checkpoints[0], m, batch_size=7)
    b = encode_corpus(toy_checkpoints[0], m, batch_size=32)
    c = encode_corpus(toy_checkpoints[0], m, batch_size=7)
    a.save(tmp_path / "a.bin"); b.save(tmp_path / "b.bin"); c.save(tmp_path / "c.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()


def test_corpus_file_round_trip(tmp_path, rng):
    corpus = LatentCorpus(rng.normal(size=(5, 200)).astype(np.float32),
                          ["a", "bé", "c", "d", "e"], "abc123")
    corpus.save(tmp_path / "c.bin")
    back = LatentCorpus.load(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.rows, corpus.rows)
    assert back.patch_ids == corpus.patch_ids and back.checkpoint_fingerprint == "abc123"
    assert (tmp_path / "c.bin").read_bytes()[:8] == b"TMCORPUS"


def test_corpus_rejects_non_finite():
    with pytest.raises(ValueError):
        LatentCorpus(np.array([[np.nan, 0.0]]), ["a"], "")


def test_corpus_resolution_mismatch(synth_cohort, toy_checkpoints):
    m = subset(synth_cohort.manifest, 4)
    wrong = CohortManifest(m.patches, m.patients, 56, m.root)
    with pytest.raises(ValueError, match="resolution"):
        encode_corpus(toy_checkpoints[0], wrong)


# ----------------------------------------------------------------- reconstruction


def test_reconstruct_shape_range_determinism(synth_cohort, toy_checkpoints):
    x = images(synth_cohort.manifest, 3)
    out = reconstruct(toy_checkpoints[0], toy_checkpoints[0], x)
    assert out.shape == x.shape
    assert np.all((out > 0) & (out < 1))
    np.testing.assert_array_equal(out, reconstruct(toy_checkpoints[0], toy_checkpoints[0], x))


def test_reconstruct_refuses_mixed_runs(synth_cohort, toy_checkpoints):
    x = images(synth_cohort.manifest, 2)
    with pytest.raises(FingerprintMismatch):
        reconstruct(toy_checkpoints[0], toy_checkpoints[1], x)
    assert reconstruct(toy_checkpoints[0], toy_checkpoints[1], x, allow_mismatch=True).shape == x.shape


def test_reconstruct_bad_shape(toy_checkpoints):
    with pytest.raises(ValueError):
        reconstruct(toy_checkpoints[0], toy_checkpoints[0], np.zeros((1, 56, 56, 3)))


def test_generate_images_range(toy_checkpoints, rng):
    gan = load_gan(toy_checkpoints[0])
    out = generate_images(gan, rng.normal(size=(2, 200)))
    assert out.shape == (2, 28, 28, 3) and np.all((out > 0) & (out < 1))


# ----------------------------------------------------------------- reduction


def test_reduce_shape(rng):
    assert reduce_to_2d(rng.normal(size=(500, 200))).shape == (500, 2)


def test_reduce_too_few_points():
    with pytest.raises(ValueError):
        reduce_to_2d(np.zeros((2, 5)))


def test_pca_preserves_planar_distances(rng):
    basis, _ = np.linalg.qr(rng.normal(size=(200, 2)))
    coords = rng.normal(size=(60, 2)) * [5.0, 1.0]
    data = coords @ basis.T + rng.normal(size=200)
    emb = pca_2d(data)
    d_in = np.linalg.norm(data[:, None] - data[None], axis=-1)
    d_out = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-6)


def test_pca_variance_equals_top_eigenvalues(rng):
    data = rng.normal(size=(300, 20)) @ rng.normal(size=(20, 20))
    emb = pca_2d(data)
    eig = np.sort(np.linalg.eigvalsh(np.cov(data.T)))[::-1][:2]
    np.testing.assert_allclose(emb.var(axis=0, ddof=1), eig, rtol=0, atol=1e-8 * eig[0])


def test_pca_permutation_invariance(rng):
    data = rng.normal(size=(50, 8)) * np.arange(1, 9)
    perm = rng.permutation(50)
    np.testing.assert_allclose(np.abs(pca_2d(data[perm])), np.abs(pca_2d(data)[perm]), atol=1e-10)


def test_pluggable_reducer(rng):
    data = rng.normal(size=(10, 4))
    out = reduce_to_2d(data, method="umap", reducer=lambda x: x[:, :2])
    np.testing.assert_array_equal(out, data[:, :2])
    with pytest.raises(ValueError):
        reduce_to_2d(data, method="umap", reducer=lambda x: x[:, :3])
    with pytest.raises(ValueError):
        reduce_to_2d(data, method="tsne")


def test_cluster_corpus_pipeline_deterministic(rng):
    rows = np.vstack([rng.normal(c, 0.3, (30, 200)) for c in (-2.0, 0.0, 2.0)]).astype(np.float32)
    corpus = LatentCorpus(rows, [f"p{i:03d}" for i in range(90)], "")
    a = cluster_corpus(corpus, k=3, seed=1)
    b = cluster_corpus(corpus, k=3, seed=1)
    assert np.array_equal(a.labels, b.labels)
    assert len(set(a.labels[:30])) == len(set(a.labels[30:60])) == len(set(a.labels[60:])) == 1
    assert cluster_corpus(corpus, k=3, seed=1, raw=False).embedding.shape == (90, 2)


# ----------------------------------------------------------------- interpolation


def test_interpolation_endpoints_and_spacing(rng):
    a, b = rng.normal(size=200), rng.normal(size=200)
    pts = interpolate_linear(a, b)
    assert pts.shape == (10, 200)
    assert np.array_equal(pts[0], a) and np.array_equal(pts[-1], b)
    steps = np.diff(pts, axis=0)
    assert np.abs(steps - steps[0]).max() < 1e-9


def test_interpolation_third_point():
    pts = interpolate_linear(np.zeros(200), np.ones(200))
    np.testing.assert_allclose(pts[3], 1 / 3, rtol=0, atol=1e-15)


def test_interpolation_needs_two_points():
    with pytest.raises(ValueError):
        interpolate_linear(np.zeros(3), np.ones(3), n_points=1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
       st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.integers(2, 30))
def test_interpolation_stays_on_segment(a, b, n):
    a, b = np.array(a), np.array(b)
    pts = interpolate_linear(a, b, n)
    assert np.all(pts >= np.minimum(a, b)) and np.all(pts <= np.maximum(a, b))


# ----------------------------------------------------------------- representatives


def corpus_1d(values, ids=None):
    rows = np.zeros((len(values), 200), np.float32)
    rows[:, 0] = values
    return LatentCorpus(rows, ids or [f"p{i}" for i in range(len(values))], "")


def test_medoid_single_member():
    pid, w = select_cluster_representative(corpus_1d([0, 5, 9]), [0, 1, 0], 1)
    assert pid == "p1" and w[0] == 5


def test_medoid_collinear():
    pid, w = select_cluster_representative(corpus_1d([0, 1, 10]), [2, 2, 2], 2)
    assert pid == "p1" and w[0] == 1


def test_medoid_tie_break():
    pid, _ = select_cluster_representative(corpus_1d([-1, 1], ["zeta", "alpha"]), [0, 0], 0)
    assert pid == "alpha"


def test_medoid_empty_cluster():
    with pytest.raises(ValueError):
        select_cluster_representative(corpus_1d([0, 1]), [0, 0], 4)


def test_extreme_pairs_farthest_first(rng):
    pts = np.array([[0, 0], [1, 0], [10, 0], [0.2, 0.1]] * 20, float) + rng.normal(0, 0.01, (80, 2))
    model = fit_gmm(pts, k=4, seed=0)
    labels = np.argmin(((pts[:, None] - model.means[None]) ** 2).sum(-1), axis=1)
    pairs = extreme_cluster_pairs(model, labels, n_pairs=2)
    far = max(range(4), key=lambda j: model.means[j, 0])
    assert far in pairs[0]


# ----------------------------------------------------------------- enrichment


def recipe_labels(synth_cohort):
    return {pid: (3 if kind == 3 else 0) for pid, kind in synth_cohort.texture_of.items()}


def test_enrichment_recipe_row(synth_cohort):
    report = survival_enrichment(recipe_labels(synth_cohort), synth_cohort.manifest)
    row = report.row(3)
    assert (row.cluster_id, row.pct_patients_high_risk, row.pct_patients_low_risk,
            row.enrichment_ratio) == (3, 80.0, 10.0, 8.0)
    assert row.highlighted
    assert report.rows[0].cluster_id == 3


def test_enrichment_brute_force(synth_cohort, rng):
    m = synth_cohort.manifest
    labels = {p.patch_id: int(rng.integers(0, 6)) for p in m.patches}
    report = survival_enrichment(labels, m)
    high = [p.patient_id for p in m.patients if p.survival_months <= 60]
    low = [p.patient_id for p in m.patients if p.survival_months > 60]
    for row in report.rows:
        owners = {m.patch(pid).patient_id for pid, lab in labels.items() if lab == row.cluster_id}
        assert row.pct_patients_high_risk == 100.0 * sum(p in owners for p in high) / len(high)
        assert row.pct_patients_low_risk == 100.0 * sum(p in owners for p in low) / len(low)


def test_enrichment_full_coverage(synth_cohort):
    report = survival_enrichment({p.patch_id: 7 for p in synth_cohort.manifest.patches},
                                 synth_cohort.manifest)
    row = report.row(7)
    assert (row.pct_patients_high_risk, row.pct_patients_low_risk, row.enrichment_ratio) == (100.0, 100.0, 1.0)


def test_enrichment_patient_level_counting(synth_cohort):
    m = synth_cohort.manifest
    labels = recipe_labels(synth_cohort)
    base = survival_enrichment(labels, m)
    # reassigning more of an owner's patches to the same cluster adds no patients
    owner_patches = [p.patch_id for p in m.patches if p.patient_id == "P0000"]
    labels2 = dict(labels, **{pid: 3 for pid in owner_patches})
    assert survival_enrichment(labels2, m).row(3) == base.row(3)


def nki_like(n_long=198, n_short=49):
    patients = [PatientRecord(f"N{i}", "NKI", 120.0 if i < n_long else 30.0, True)
                for i in range(n_long + n_short)]
    patches = [TissuePatch(f"N{i}_0", f"N{i}", "x.png", 28, 28) for i in range(n_long + n_short)]
    return CohortManifest(patches, patients, 28)


def test_enrichment_group_sizes_and_header(tmp_path):
    m = nki_like()
    report = survival_enrichment({p.patch_id: 0 for p in m.patches}, m, cohort_filter="NKI")
    assert (report.group_size_high, report.group_size_low) == (49, 198)
    report.write_csv(tmp_path / "e.csv")
    assert "group_size_high=49 group_size_low=198" in (tmp_path / "e.csv").read_text().splitlines()[0]
    back = read_enrichment_csv(tmp_path / "e.csv")
    assert back.rows == report.rows and back.group_size_low == 198 and back.cohort == "NKI"


def test_enrichment_infinite_and_undefined_ratios():
    m = nki_like(2, 2)
    labels = {"N2_0": 1, "N3_0": 1, "N0_0": 2, "N1_0": 2}
    report = survival_enrichment(labels, m)
    assert math.isinf(report.row(1).enrichment_ratio)
    assert report.rows[0].cluster_id == 1
    assert report.row(2).enrichment_ratio == 0.0


def test_enrichment_empty_group():
    m = nki_like(3, 0)
    with pytest.raises(ValueError, match="high-risk"):
        survival_enrichment({p.patch_id: 0 for p in m.patches}, m)
    m = nki_like(0, 3)
    with pytest.raises(ValueError, match="low-risk"):
        survival_enrichment({p.patch_id: 0 for p in m.patches}, m)


def test_enrichment_unknown_patch(synth_cohort):
    with pytest.raises(ValueError, match="ghost"):
        survival_enrichment({"ghost": 0}, synth_cohort.manifest)
