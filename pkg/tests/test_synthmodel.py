import numpy as np
import pytest

from morphfill.facemodel import FaceModel
from morphfill.store import read_container, write_container
from morphfill.synthmodel import SyntheticModelSpec, generate_synthetic_model


def _equal(m1: FaceModel, m2: FaceModel) -> bool:
    return all(np.array_equal(getattr(m1, k), getattr(m2, k))
               for k in ("mean_shape", "shape_bases", "expr_bases", "triangles",
                         "uv_of_vertex", "tri_of_texel", "bary_of_texel",
                         "landmark_indices", "landmark_mirror", "vertex_mirror"))


def test_deterministic_generation():
    spec = SyntheticModelSpec(seed=7)
    assert _equal(generate_synthetic_model(spec), generate_synthetic_model(spec))


def test_different_seeds_differ():
    m1 = generate_synthetic_model(SyntheticModelSpec(seed=1))
    m2 = generate_synthetic_model(SyntheticModelSpec(seed=2))
    assert not np.array_equal(m1.shape_bases, m2.shape_bases)


def test_mean_shape_mirror_symmetry(model):
    mirrored = model.mean_shape[model.vertex_mirror] * np.array([-1.0, 1.0, 1.0])
    assert np.abs(mirrored - model.mean_shape).max() < 1e-6


def test_bases_mirror_symmetrized(model):
    flip = np.array([-1.0, 1.0, 1.0])[None, :, None]
    for bases in (model.shape_bases, model.expr_bases):
        mirrored = bases[model.vertex_mirror] * flip
        assert np.abs(mirrored - bases).max() < 1e-6


def test_uv_layout_mirror_consistent(model):
    w = model.uv_shape[1]
    u = model.uv_of_vertex[:, 0]
    u_m = model.uv_of_vertex[model.vertex_mirror, 0]
    assert np.abs(u_m - (w - 1 - u)).max() < 1e-9
    v = model.uv_of_vertex[:, 1]
    assert np.array_equal(model.uv_of_vertex[model.vertex_mirror, 1], v)


def test_uv_flip_is_exact_texel_permutation(model):
    h, w = model.uv_shape
    valid = model.texel_valid
    assert np.array_equal(valid, valid[:, ::-1])


def test_texel_tables_cover_and_normalize(model):
    assert model.texel_valid.all()  # grid parameterization tiles the full UV rect
    s = model.bary_of_texel.sum(axis=2)
    assert np.abs(s[model.texel_valid] - 1.0).max() < 1e-6
    assert model.bary_of_texel.min() >= 0.0
    tri = model.tri_of_texel[model.texel_valid]
    assert tri.min() >= 0 and tri.max() < model.n_triangles


def test_landmarks_valid_and_stable():
    spec = SyntheticModelSpec(seed=11)
    m1 = generate_synthetic_model(spec)
    m2 = generate_synthetic_model(spec)
    assert np.array_equal(m1.landmark_indices, m2.landmark_indices)
    assert len(np.unique(m1.landmark_indices)) == 68
    assert m1.landmark_indices.min() >= 0
    assert m1.landmark_indices.max() < m1.n_vertices


def test_landmark_mirror_permutation(model):
    perm = model.landmark_mirror
    assert np.array_equal(np.sort(perm), np.arange(68))
    # mirrored landmark indices are the vertex mirrors of the originals
    assert np.array_equal(model.landmark_indices[perm],
                          model.vertex_mirror[model.landmark_indices])


def test_zero_coefficient_gives_mean_exactly(model):
    from morphfill.facemodel import assemble_shape
    d = model.d_shape + model.d_expr
    assert np.array_equal(assemble_shape(model, np.zeros(d)), model.mean_shape)


def test_spec_validation():
    with pytest.raises(ValueError, match="landmarks"):
        SyntheticModelSpec(vertex_count=10)
    with pytest.raises(ValueError, match="even"):
        SyntheticModelSpec(uv_w=47)
    with pytest.raises(ValueError, match="d_shape"):
        SyntheticModelSpec(d_shape=0)


def test_model_container_roundtrip(model, tmp_path):
    path = tmp_path / "model.af3d"
    write_container(path, model.to_entries())
    back = FaceModel.from_entries(read_container(path).as_dict())
    assert _equal(model, back)
    back.validate()
