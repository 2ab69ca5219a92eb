import os

import numpy as np
import pytest
import torch

from avatarfit import synth
from avatarfit.energies import e_lmk, e_normal, e_phot, e_semantic
from avatarfit.headmodel import LID_LANDMARKS, N_LANDMARKS, generate_procedural_template
from avatarfit.mesh import Region
from avatarfit.render import project_landmarks, quantize_to_uint8, render
from avatarfit.synth import DatasetError, generate_subject, load_dataset, render_sequence

RES = 400  # subject mesh resolution for tests


@pytest.fixture(scope="module")
def subject():
    return generate_subject(seed=3, style="short_hair", resolution=RES)


@pytest.fixture(scope="module")
def dataset(subject, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds") / "subject3")
    render_sequence(subject, out, n_train=20, n_val=10, resolution=48)
    return load_dataset(out)


# ----------------------------------------------------------------- subjects


def test_generate_subject_deterministic():
    a = generate_subject(seed=5, style="bun", resolution=RES)
    b = generate_subject(seed=5, style="bun", resolution=RES)
    assert np.array_equal(a.static_offsets, b.static_offsets)
    assert np.array_equal(a.neck_gain, b.neck_gain)
    assert np.array_equal(a.model.template.vertices, b.model.template.vertices)


def test_unknown_style_rejected():
    with pytest.raises(ValueError, match="hair style"):
        generate_subject(seed=0, style="mohawk")


def test_bald_scalp_offsets_exactly_zero():
    s = generate_subject(seed=2, style="bald", resolution=RES)
    scalp = s.model.template.region == int(Region.SCALP)
    assert scalp.any()
    assert np.all(s.static_offsets[scalp] == 0.0)


def test_long_hair_exceeds_short_hair():
    for seed in (0, 1, 2):
        short = generate_subject(seed=seed, style="short_hair", resolution=RES)
        long_ = generate_subject(seed=seed, style="long_hair", resolution=RES)
        scalp = short.model.template.region == int(Region.SCALP)
        m_short = np.linalg.norm(short.static_offsets[scalp], axis=1).max()
        m_long = np.linalg.norm(long_.static_offsets[scalp], axis=1).max()
        assert m_long > m_short


def test_offsets_depend_on_neck_pose(subject):
    o0 = subject.offsets(np.zeros(3))
    o1 = subject.offsets(np.array([0.3, -0.2, 0.1]))
    assert np.array_equal(o0, subject.static_offsets)
    neck = np.isin(subject.model.template.region,
                   [int(Region.NECK), int(Region.LOWER_NECK)])
    assert np.abs(o1 - o0)[neck].max() > 0
    assert np.array_equal(o0[~neck], o1[~neck])


def test_topology_differs_from_fitting_template(subject):
    fitting = generate_procedural_template(seed=3, resolution=700)
    assert (subject.model.template.n_vertices != fitting.template.n_vertices
            or not np.array_equal(subject.model.template.faces, fitting.template.faces))


def test_subject_mesh_watertight(subject):
    # every edge shared by exactly two faces -> closed surface
    faces = subject.model.template.faces
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert (counts == 2).all()


def test_track_covers_both_profiles(subject, dataset):
    track = subject.track(30, dataset.camera)
    yaws = np.array([float(p.global_rot[1]) for p in track])
    assert yaws.max() > np.deg2rad(35)
    assert yaws.min() < -np.deg2rad(35)
    # jaw opens and eyes blink at least once
    assert max(float(p.phi_raw[1, 0]) for p in track) > 0.5
    assert max(float(p.psi[0]) for p in track) > 1.0


# ------------------------------------------------------------------ dataset


def test_dataset_layout_complete(dataset):
    assert dataset.n_train == 20 and dataset.n_val == 10
    assert len(dataset.frames) == 30
    assert len(dataset.train_frames) == 20
    assert len(dataset.val_frames) == 10
    for i in range(30):
        d = os.path.join(dataset.path, "frames", f"{i:04d}")
        for fname in ("rgb.png", "normal.bin", "semantic.bin",
                      "landmarks.txt", "mesh.obj"):
            assert os.path.isfile(os.path.join(d, fname)), (i, fname)


def test_gt_normals_unit_on_covered_pixels(dataset):
    for f in dataset.frames[:5]:
        norms = np.linalg.norm(f.normal[f.mask], axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6


def test_semantic_channels_sum_to_coverage(dataset):
    for f in dataset.frames:
        s = f.semantic.sum(axis=2)
        assert set(np.unique(s)) <= {0.0, 1.0}


def test_visible_landmarks_inside_bounds(dataset):
    for f in dataset.frames:
        uv = f.landmarks[f.visible]
        assert (uv >= 0).all()
        assert (uv < dataset.resolution).all()


def test_frame0_rerender_bit_exact(subject, dataset):
    f0 = dataset.frames[0]
    params = f0.params(subject.model, camera=dataset.camera)
    posed = subject.posed(params)
    buf = render(dataset.camera, subject.model, posed, texture=subject.texture())
    assert np.array_equal(quantize_to_uint8(buf.rgb),
                          np.rint(f0.rgb * 255).astype(np.uint8))
    assert np.array_equal(buf.normal.detach().numpy(), f0.normal)
    assert np.array_equal(synth.hard_semantic(buf), f0.semantic)
    # the stored posed mesh matches the recomputed one exactly (obj stores
    # full float precision)
    assert np.array_equal(f0.mesh.vertices, posed.detach().numpy())


def test_gt_vs_gt_energies_zero(subject, dataset):
    for f in [dataset.frames[0], dataset.frames[12]]:
        params = f.params(subject.model, camera=dataset.camera)
        posed = subject.posed(params)
        buf = render(dataset.camera, subject.model, posed,
                     texture=subject.texture())
        uv, valid = project_landmarks(dataset.camera, subject.model, posed)
        lid_t = [abs(f.landmarks[b, 1] - f.landmarks[a, 1]) for a, b in LID_LANDMARKS]
        lid_p = [(uv[b, 1] - uv[a, 1]).abs() for a, b in LID_LANDMARKS]
        lmk = e_lmk(torch.as_tensor(f.landmarks), torch.tensor(lid_t), uv,
                    torch.stack(lid_p), 1.0,
                    (dataset.resolution, dataset.resolution),
                    valid=torch.as_tensor(f.visible))
        nrm = e_normal(torch.as_tensor(f.normal), buf.normal,
                       torch.as_tensor(f.mask))
        sem = e_semantic(torch.as_tensor(f.semantic),
                         torch.as_tensor(synth.hard_semantic(buf)))
        pho = e_phot(torch.as_tensor(f.rgb),
                     torch.as_tensor(quantize_to_uint8(buf.rgb) / 255.0),
                     torch.as_tensor(f.mask), buf.coverage)
        for name, val in [("lmk", lmk), ("normal", nrm), ("semantic", sem),
                          ("phot", pho)]:
            assert abs(float(val)) <= 1e-10, (f.index, name, float(val))


def test_load_roundtrip_preserves_arrays(dataset):
    again = load_dataset(dataset.path)
    for a, b in zip(dataset.frames, again.frames):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.normal, b.normal)
        assert np.array_equal(a.semantic, b.semantic)
        assert np.array_equal(a.landmarks, b.landmarks)
        assert np.array_equal(a.psi, b.psi)


def test_landmark_parse_matches_brute_force(dataset):
    path = os.path.join(dataset.path, "frames", "0003", "landmarks.txt")
    uv, visible = synth.parse_landmarks(path)
    # independent re-parse
    ref = {}
    for line in open(path):
        tok = line.split()
        ref[int(tok[0])] = (float(tok[1]), float(tok[2]), int(tok[3]))
    assert len(ref) == N_LANDMARKS
    for k, (u, v, vis) in ref.items():
        assert uv[k, 0] == u and uv[k, 1] == v
        assert visible[k] == bool(vis)


def test_params_roundtrip_exact(subject, dataset):
    track = subject.track(30, dataset.camera)
    for i in (0, 7, 29):
        p = dataset.frames[i].params(subject.model)
        assert torch.equal(p.phi_raw, track[i].phi_raw)
        assert torch.equal(p.psi, track[i].psi)
        assert torch.equal(p.global_rot, track[i].global_rot)
        assert torch.equal(p.global_trans, track[i].global_trans)


def test_gt_model_archive_roundtrip(subject, dataset):
    model = dataset.gt_model()
    assert np.array_equal(model.template.vertices, subject.model.template.vertices)
    assert np.array_equal(model.shape_basis, subject.model.shape_basis)


# --------------------------------------------------------------- validation


def test_missing_file_error_names_frame(subject, tmp_path):
    out = str(tmp_path / "broken")
    render_sequence(subject, out, n_train=2, n_val=1, resolution=32)
    os.remove(os.path.join(out, "frames", "0001", "semantic.bin"))
    with pytest.raises(DatasetError, match=r"frame 0001.*semantic"):
        load_dataset(out)


def test_shape_mismatch_error_names_channel(subject, tmp_path):
    from avatarfit import arrayio
    out = str(tmp_path / "badshape")
    render_sequence(subject, out, n_train=1, n_val=1, resolution=32)
    frame = os.path.join(out, "frames", "0000")
    arrays = arrayio.load_arrays(frame)
    arrays["normal"] = arrays["normal"][:16]
    arrayio.save_arrays(frame, arrays)
    with pytest.raises(DatasetError, match=r"frame 0000.*normal"):
        load_dataset(out)


def test_missing_manifest_error(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(str(tmp_path / "nope"))


def test_malformed_landmark_line(subject, tmp_path):
    out = str(tmp_path / "badlmk")
    render_sequence(subject, out, n_train=1, n_val=1, resolution=32)
    path = os.path.join(out, "frames", "0000", "landmarks.txt")
    with open(path, "a") as fh:
        fh.write("oops\n")
    with pytest.raises(DatasetError):
        load_dataset(out)
