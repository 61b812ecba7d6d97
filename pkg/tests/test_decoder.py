import numpy as np
import pytest

from advseg import autodiff as ad
from advseg.autodiff import Tensor
from advseg.cloud import LabeledCloud
from advseg.decoder import (CanonicalFrame, DecoderModel, LatentGaussian,
                            decode_coarse, encode, enhance, init_decoder,
                            load_decoder, perturb_and_augment, restore,
                            save_decoder, sphere_template, train_decoder,
                            transfer_labels, _tensors, _trunk_global, _head,
                            _decode_coarse, _PARAM_ORDER)
from advseg.errors import StateError
from advseg.losses import chamfer, kl_gaussian_tensors
from advseg.scenes import shape_family_cloud


@pytest.fixture(scope="module")
def mini_decoder():
    """A quickly trained small decoder for pipeline-behavior tests."""
    train = [shape_family_cloud(i, num_points=200) for i in range(8)]
    return train_decoder(init_decoder(seed=0, coarse_points=64), train,
                         epochs=25, kl_weight=0.01, lr=3e-3, seed=0).model


def cloud_of(points):
    return LabeledCloud(points=points, labels=np.zeros(len(points), dtype=int))


# -- perturb_and_augment ---------------------------------------------------------


def test_identity_augmentation_is_identity():
    c = shape_family_cloud(0, num_points=100)
    out = perturb_and_augment(c, 0.0, seed=5, max_rotation=0.0,
                              scale_range=(1.0, 1.0))
    assert np.array_equal(out.points, c.points)
    assert np.array_equal(out.labels, c.labels)


def test_augmentation_deterministic():
    c = shape_family_cloud(1, num_points=100)
    a = perturb_and_augment(c, 0.05, seed=9)
    b = perturb_and_augment(c, 0.05, seed=9)
    assert np.array_equal(a.points, b.points)


def test_noise_sigma_statistics(rng):
    c = cloud_of(rng.normal(size=(100_000, 3)))
    seed = 31
    out = perturb_and_augment(c, 0.05, seed=seed)
    # recover the rotation/scale (redraw the same stream) and invert them
    check = np.random.default_rng(seed)
    check.normal(0.0, 0.05, c.points.shape)
    angle = check.uniform(0.0, 2 * np.pi)
    scale = check.uniform(0.95, 1.05)
    cs, sn = np.cos(angle), np.sin(angle)
    rot = np.array([[cs, -sn, 0], [sn, cs, 0], [0, 0, 1.0]])
    recovered = (out.points / scale) @ rot
    noise = recovered - c.points
    assert abs(noise.std() - 0.05) / 0.05 < 0.02


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        perturb_and_augment(shape_family_cloud(0), -0.1)


# -- canonical frame ---------------------------------------------------------------


def test_canonical_frame_inverts():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    frame = CanonicalFrame.from_points(pts)
    assert np.allclose(frame.from_canonical(frame.to_canonical(pts)), pts, atol=1e-12)


def test_canonical_frame_rotation_consistency():
    rng = np.random.default_rng(1)
    # asymmetric two-lobe shape: stable principal direction and sign
    pts = np.vstack([rng.normal(size=(80, 3)) * 0.2 + [2.0, 0, 0],
                     rng.normal(size=(30, 3)) * 0.5])
    theta = 1.3
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
    a = CanonicalFrame.from_points(pts).to_canonical(pts)
    b = CanonicalFrame.from_points(pts @ rot.T).to_canonical(pts @ rot.T)
    assert np.allclose(a, b, atol=1e-9)


# -- encode -----------------------------------------------------------------------


def test_encode_permutation_invariant(rng):
    model = init_decoder(seed=1, coarse_points=32)
    c = shape_family_cloud(2, num_points=150)
    g1, lat1 = encode(model, c, "prior")
    perm = rng.permutation(150)
    g2, lat2 = encode(model, cloud_of(c.points[perm]), "prior")
    assert np.allclose(g1, g2, atol=1e-9)
    assert np.allclose(lat1.mean, lat2.mean, atol=1e-9)
    assert np.allclose(lat1.deviation, lat2.deviation, atol=1e-9)


def test_encode_deviations_strictly_positive(rng):
    model = init_decoder(seed=2, coarse_points=32)
    for s in range(5):
        _, lat = encode(model, shape_family_cloud(s, num_points=80), "posterior")
        assert (lat.deviation > 0).all()


def test_encode_duplication_invariant():
    model = init_decoder(seed=3, coarse_points=32)
    c = shape_family_cloud(4, num_points=100)
    doubled = cloud_of(np.vstack([c.points, c.points]))
    g1, lat1 = encode(model, c, "prior")
    g2, lat2 = encode(model, doubled, "prior")
    assert np.allclose(g1, g2, atol=1e-9)
    assert np.allclose(lat1.mean, lat2.mean, atol=1e-9)


def test_encode_rejects_empty_and_bad_path():
    model = init_decoder(seed=0, coarse_points=16)
    with pytest.raises(ValueError):
        encode(model, cloud_of(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        encode(model, shape_family_cloud(0), path="sideways")


def test_prior_and_posterior_heads_differ(rng):
    model = init_decoder(seed=4, coarse_points=16)
    c = shape_family_cloud(5, num_points=90)
    _, lp = encode(model, c, "prior")
    _, lq = encode(model, c, "posterior")
    assert not np.allclose(lp.mean, lq.mean)


# -- decode / enhance ---------------------------------------------------------------


def test_decode_zero_parameters_at_origin():
    model = init_decoder(seed=5, coarse_points=40)
    for k in model.params:
        if k.startswith("dec_"):
            model.params[k] = np.zeros_like(model.params[k])
    coarse = decode_coarse(model, np.zeros(model.latent_dim), np.zeros(128))
    assert np.array_equal(coarse, np.zeros((40, 3)))


def test_decode_deterministic(rng):
    model = init_decoder(seed=6, coarse_points=24)
    z = rng.normal(size=model.latent_dim)
    g = rng.normal(size=128)
    assert np.array_equal(decode_coarse(model, z, g), decode_coarse(model, z, g))


def test_decode_rejects_wrong_latent_dim():
    model = init_decoder(seed=0, coarse_points=8)
    with pytest.raises(ValueError):
        decode_coarse(model, np.zeros(model.latent_dim + 1), np.zeros(128))


def test_sphere_template_unit_norm():
    t = sphere_template(64)
    assert np.allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-9)


def test_enhance_zero_offset_parameters_repeats(rng):
    model = init_decoder(seed=7, coarse_points=16)
    for k in ("enh_lin", "enh_bias"):
        model.params[k] = np.zeros_like(model.params[k])
    c = shape_family_cloud(6, num_points=120)
    coarse = rng.normal(size=(16, 3))
    fine = enhance(model, coarse, c)
    assert fine.shape == (64, 3)
    assert np.allclose(fine, np.repeat(coarse, 4, axis=0), atol=1e-12)


def test_enhance_output_count_always_4m(mini_decoder):
    for n in (30, 77, 200):
        c = shape_family_cloud(8, num_points=n)
        coarse = decode_coarse(mini_decoder, np.zeros(mini_decoder.latent_dim),
                               np.zeros(128))
        fine = enhance(mini_decoder, coarse, c)
        assert fine.shape == (mini_decoder.coarse_points * 4, 3)


def test_enhance_offsets_bounded(mini_decoder, rng):
    c = shape_family_cloud(9, num_points=150)
    coarse = rng.normal(size=(mini_decoder.coarse_points, 3)) * 2
    fine = enhance(mini_decoder, coarse, c)
    delta = np.abs(fine - np.repeat(coarse, 4, axis=0))
    assert delta.max() <= 0.5 + 1e-9


def test_enhance_improves_over_coarse_on_held_out(mini_decoder):
    wins = 0
    for s in range(10):
        clean = shape_family_cloud(500 + s, num_points=200)
        noisy = perturb_and_augment(clean, 0.05, seed=s, max_rotation=0.0,
                                    scale_range=(1.0, 1.0))
        frame = CanonicalFrame.from_points(noisy.points)
        g, lat = encode(mini_decoder, noisy, "prior")
        coarse = decode_coarse(mini_decoder, lat.mean, g)
        fine = enhance(mini_decoder, coarse, noisy)
        cw = frame.from_canonical(coarse)
        fw = frame.from_canonical(fine)
        wins += chamfer(fw, clean.points) <= chamfer(cw, clean.points)
    assert wins >= 8


# -- training ------------------------------------------------------------------------


def test_train_decoder_requires_clouds():
    with pytest.raises(ValueError):
        train_decoder(init_decoder(seed=0), [], epochs=1)


def test_train_loss_trace_length_and_progress():
    train = [shape_family_cloud(i, num_points=150) for i in range(6)]
    res = train_decoder(init_decoder(seed=1, coarse_points=48), train,
                        epochs=30, kl_weight=0.01, lr=3e-3, seed=1)
    assert len(res.loss_trace) == 30
    assert np.mean(res.loss_trace[-10:]) <= np.mean(res.loss_trace[:10])
    assert res.model.trained


def test_zero_kl_weight_leaves_prior_head_ungraded():
    model = init_decoder(seed=2, coarse_points=32)
    clean = shape_family_cloud(3, num_points=120)
    x_g = perturb_and_augment(clean, 0.05, seed=0)
    frame_g = CanonicalFrame.from_points(x_g.points)
    p = _tensors(model, train=True)
    g_g = _trunk_global(p, frame_g.to_canonical(x_g.points))
    mu_p, dev_p = _head(p, "prior", g_g)
    frame_c = CanonicalFrame.from_points(clean.points)
    g_c = _trunk_global(p, frame_c.to_canonical(clean.points))
    mu_q, dev_q = _head(p, "post", g_c)
    z = ad.add(mu_q, ad.mul(dev_q, np.zeros((1, model.latent_dim))))
    coarse = _decode_coarse(p, z, g_g, model.coarse_points)
    from advseg.losses import chamfer_to_target
    loss = chamfer_to_target(coarse, clean.points)   # no KL term at weight 0
    loss.backward()
    assert p["prior_wm"].grad is None or np.all(p["prior_wm"].grad == 0.0)
    assert p["prior_wd"].grad is None or np.all(p["prior_wd"].grad == 0.0)


def test_reparameterized_kl_gradient_matches_fd(rng):
    mu_q = rng.normal(size=(1, 8))
    t = Tensor(mu_q, requires_grad=True)
    sd_q = Tensor(rng.random((1, 8)) + 0.3)
    mu_p = Tensor(rng.normal(size=(1, 8)))
    sd_p = Tensor(rng.random((1, 8)) + 0.3)
    kl_gaussian_tensors(t, sd_q, mu_p, sd_p).backward()
    h = 1e-5
    for j in (0, 5):
        m = mu_q.copy()
        m[0, j] += h
        up = kl_gaussian_tensors(Tensor(m), sd_q, mu_p, sd_p).item()
        m[0, j] -= 2 * h
        dn = kl_gaussian_tensors(Tensor(m), sd_q, mu_p, sd_p).item()
        fd = (up - dn) / (2 * h)
        assert abs(fd - t.grad[0, j]) / max(abs(fd), 1e-8) <= 1e-4


# -- restore --------------------------------------------------------------------------


def test_restore_requires_training():
    with pytest.raises(StateError):
        restore(init_decoder(seed=0), shape_family_cloud(0))


def test_restore_deterministic_and_counts(mini_decoder):
    noisy = perturb_and_augment(shape_family_cloud(700, num_points=123), 0.05, seed=1)
    a = restore(mini_decoder, noisy)
    b = restore(mini_decoder, noisy)
    assert np.array_equal(a.points, b.points)
    assert len(a) == mini_decoder.coarse_points * 4
    assert a.unlabeled


def test_restore_vertical_rotation_equivariant(mini_decoder):
    rng = np.random.default_rng(3)
    # asymmetric composition keeps the canonical frame stable
    pts = np.vstack([rng.normal(size=(120, 3)) * 0.2 + [1.5, 0, 0],
                     rng.normal(size=(60, 3)) * 0.4])
    cloud = cloud_of(pts)
    theta = 0.9
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0], [0, 0, 1.0]])
    out = restore(mini_decoder, cloud)
    out_rot = restore(mini_decoder, cloud_of(pts @ rot.T))
    assert chamfer(out_rot.points, out.points @ rot.T) <= 1e-3


def test_restore_denoises_on_average(mini_decoder):
    # the full acceptance benchmark trains longer; here the cheap decoder
    # must at least come close to the noisy input's chamfer
    ratios = []
    for s in range(8):
        clean = shape_family_cloud(900 + s, num_points=200)
        noisy = perturb_and_augment(clean, 0.05, seed=s, max_rotation=0.0,
                                    scale_range=(1.0, 1.0))
        r = restore(mini_decoder, noisy)
        ratios.append(chamfer(r.points, clean.points) /
                      chamfer(noisy.points, clean.points))
    assert np.median(ratios) < 1.6


# -- label transfer / checkpoints -------------------------------------------------------


def test_transfer_labels_distance_gate():
    restored = cloud_of(np.array([[0.0, 0, 0], [1.0, 0, 0], [5.0, 0, 0]]))
    reference = cloud_of(np.array([[0.05, 0, 0], [1.2, 0, 0]]))
    reference_valid = np.array([True, False])
    labels, valid = transfer_labels(restored, reference, reference_valid,
                                    np.array([3, 4]), max_distance=0.3)
    assert valid.tolist() == [True, False, False]
    assert labels[0] == 3


def test_transfer_labels_no_valid_reference():
    restored = cloud_of(np.zeros((2, 3)))
    reference = cloud_of(np.ones((3, 3)))
    labels, valid = transfer_labels(restored, reference, np.zeros(3, dtype=bool),
                                    np.array([1, 2, 3]))
    assert not valid.any()


def test_decoder_checkpoint_round_trip(tmp_path, mini_decoder):
    path = tmp_path / "dec.ckpt"
    save_decoder(mini_decoder, path)
    back = load_decoder(path)
    assert back.trained
    assert back.coarse_points == mini_decoder.coarse_points
    save_decoder(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    noisy = perturb_and_augment(shape_family_cloud(42, num_points=99), 0.05, seed=0)
    a = restore(back, noisy)
    # float32 storage: restored geometry agrees to float32 precision
    b = restore(mini_decoder, noisy)
    assert np.allclose(a.points, b.points, atol=1e-4)
