import math

import numpy as np
import pytest

from scanloc import autodiff as ad
from scanloc.dataset import SamplingConfig, ScanRecord
from scanloc.descriptor import (
    DESCRIPTOR_DIM,
    DescriptorExtractor,
    OrientedDescriptorNet,
    TrainConfig,
    TrainingDiverged,
    augmented_yaw_target,
    default_architecture,
    orientation_loss,
    split_trunk_specs,
    train,
    triplet_loss,
    yaw_from_encoding,
)
from scanloc.geometry import PlanarPose, ProjectionGeometry, normalize_angle, rotate_yaw
from scanloc.synthworld import simulate_scan
from oracles import central_difference, chamfer_heading, max_relative_error, scalar_triplet

SMALL = ProjectionGeometry(height=8, width=64)


def _small_arch():
    return {"trunk": [ad.maxpool((1, 4)), ad.conv(4), ad.prelu(), ad.maxpool((2, 2)),
                      ad.conv(4), ad.prelu(), ad.maxpool((2, 1)), ad.conv(4), ad.prelu()],
            "place_head": [ad.maxpool((1, 8)), ad.flatten(), ad.dense(16), ad.prelu(),
                           ad.dense(DESCRIPTOR_DIM)],
            "orientation_head": [ad.flatten(), ad.dense(DESCRIPTOR_DIM)],
            "yaw_head": [ad.dense(16), ad.prelu(), ad.dense(2)]}


def test_triplet_identities():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.normal(size=64)
        m = float(rng.uniform(0.01, 2.0))
        loss, _ = triplet_loss(v, v, v, m)
        assert loss == m
    a = np.zeros(4)
    s = np.array([0.1, 0, 0, 0])
    d = np.array([2.0, 0, 0, 0])
    assert triplet_loss(a, s, d, 0.5)[0] == 0.0


def test_triplet_matches_scalar_loops():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, s, d = rng.normal(scale=0.3, size=(3, 64))
        loss, _ = triplet_loss(a, s, d, 0.5)
        assert abs(loss - scalar_triplet(a, s, d, 0.5)) < 1e-12


def test_literal_triplet_variant():
    a, s, d = np.zeros(2), np.array([1.0, 0.0]), np.array([0.0, 2.0])
    loss, _ = triplet_loss(a, s, d, 0.5, literal=True)
    assert loss == 1.0 - 16.0 + 0.5


def test_triplet_loss_gradients():
    rng = np.random.default_rng(2)
    for literal in (False, True):
        for _ in range(20):
            a, s, d = rng.normal(scale=0.5, size=(3, 8))
            _, grads = triplet_loss(a, s, d, 0.5, literal)
            for vec, g in zip((a, s, d), grads):
                num = central_difference(lambda: float(triplet_loss(a, s, d, 0.5, literal)[0]),
                                         vec)
                assert max_relative_error(g, num) < 1e-4


def test_orientation_loss_examples():
    rng = np.random.default_rng(3)
    for d in rng.uniform(-10, 10, size=100):
        assert orientation_loss([math.cos(d), math.sin(d)], d)[0] == 0.0
        assert orientation_loss([0.0, 0.0], d)[0] == 0.5
    assert orientation_loss([0.0, 1.0], 0.0)[0] == 1.0
    with pytest.raises(ValueError):
        orientation_loss([0.0, 0.0], float("inf"))


def test_yaw_decoding():
    assert yaw_from_encoding([1.0, 0.0]) == 0.0
    assert yaw_from_encoding([-1.0, 0.0]) == -math.pi
    y = np.random.default_rng(4).normal(size=(200, 2))
    out = yaw_from_encoding(y)
    assert np.all(out >= -math.pi) and np.all(out < math.pi)


def test_architecture_requires_width_multiple_of_8():
    with pytest.raises(ValueError):
        default_architecture(16, 100)
    net = OrientedDescriptorNet((1, 16, 360))
    assert net.networks["trunk"].output_shape == (64, 4, 45)


def test_split_layout_builds():
    net = OrientedDescriptorNet((1, 16, 64), {"trunk": split_trunk_specs()})
    assert not net.branched
    out = net.descriptors(np.random.default_rng(0).random((2, 16, 64)))
    assert out.shape == (2, 128)


def test_extraction_contract(line_records):
    est = DescriptorExtractor(SMALL, architecture=_small_arch()).init_untrained()
    img = SMALL.project(line_records[0].cloud)
    p1, p2 = est.extract(img), est.extract(img)
    assert p1.v.shape == (64,) and p1.w.shape == (64,)
    assert p1.v.tobytes() == p2.v.tobytes() and p1.w.tobytes() == p2.w.tobytes()
    with pytest.raises(ValueError, match="does not match"):
        est.transform(np.zeros((1, 16, 360)))
    full = np.roll(img.data, 64, axis=1)
    assert est.transform(full[None]).tobytes() == est.transform(img.data[None]).tobytes()


def test_place_descriptor_invariant_to_aligned_shifts():
    net = OrientedDescriptorNet((1, 16, 360), seed=3)
    img = np.random.default_rng(5).random((1, 16, 360))
    v0 = net.descriptors(img)[0, :DESCRIPTOR_DIM]
    for k in (8, 80, 352):
        v = net.descriptors(np.roll(img, k, axis=2))[0, :DESCRIPTOR_DIM]
        np.testing.assert_allclose(v, v0, rtol=0, atol=1e-12)


def test_estimate_yaw_range(line_records):
    est = DescriptorExtractor(SMALL, architecture=_small_arch()).init_untrained()
    d = est.transform(line_records[:4])
    for a in d:
        for b in d:
            y = est.estimate_yaw(a[64:], b[64:])
            assert -math.pi <= y < math.pi


def test_joint_loss_gradient_through_both_heads():
    rng = np.random.default_rng(6)
    net = OrientedDescriptorNet((1, 8, 64), _small_arch(), seed=1)
    imgs = rng.random((3, 2, 8, 64))
    delta = rng.uniform(-math.pi, math.pi, 2)

    def total():
        l_pr, l_th = net.joint_loss(imgs[0], imgs[1], imgs[2], delta, 2.0, backward=False)
        return l_pr + l_th

    net.zero_grad()
    net.joint_loss(imgs[0], imgs[1], imgs[2], delta, 2.0)
    # sample a handful of coordinates per tensor to keep the check fast
    for p in net.params:
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-5
            fp = total()
            flat[i] = old - 1e-5
            fm = total()
            flat[i] = old
            num = (fp - fm) / 2e-5
            ana = p.grad.reshape(-1)[i]
            assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num), 1e-6)


def test_augmented_target_matches_cloud_registration(scene):
    """Rotate two co-located scans and recover their relative heading by brute force."""
    rng = np.random.default_rng(7)
    for _ in range(4):
        ta, ts = rng.uniform(-math.pi, math.pi, 2)
        pa, ps = PlanarPose(36.0, 0.0, ta), PlanarPose(36.0, 0.0, ts)
        ca, cs = simulate_scan(scene, pa), simulate_scan(scene, ps)
        da, ds = rng.uniform(-math.pi, math.pi, 2)
        ra, rs = rotate_yaw(ca, da), rotate_yaw(cs, ds)
        phi = chamfer_heading(ra.points, rs.points, grid_deg=1.0)
        target = augmented_yaw_target(normalize_angle(ts - ta), da, ds)
        assert abs(normalize_angle(phi - target)) < math.radians(1.5)


def test_train_overfits_single_triplet(line_records):
    recs = [line_records[0], line_records[1], line_records[4]]
    sampling = SamplingConfig()
    net = OrientedDescriptorNet((1, 8, 64), _small_arch(), seed=0)
    trace = train(net, recs, TrainConfig(epochs=1, steps_per_epoch=200, batch_size=1,
                                         stage_switch_epoch=1, seed=0),
                  sampling, SMALL)
    first = np.mean([t[3] for t in trace[:20]])
    last = np.mean([t[3] for t in trace[-20:]])
    assert last < first


def test_training_is_deterministic(line_records, tmp_path):
    def run(tag):
        est = DescriptorExtractor(SMALL, epochs=2, steps_per_epoch=3, batch_size=2,
                                  architecture=_small_arch(), random_state=4,
                                  log_path=tmp_path / f"{tag}.log",
                                  checkpoint_dir=tmp_path / tag)
        est.fit(line_records)
        est.save(tmp_path / f"{tag}.ckpt")
        return est

    run("a")
    run("b")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.log").read_text() == (tmp_path / "b.log").read_text()
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert [int(x.split()[0]) for x in lines] == list(range(6))
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["epoch_000.ckpt",
                                                                 "epoch_001.ckpt"]


def test_checkpoint_round_trip(line_records, tmp_path):
    est = DescriptorExtractor(SMALL, architecture=_small_arch(), random_state=2).init_untrained()
    est.save(tmp_path / "m.ckpt")
    back = DescriptorExtractor.load(tmp_path / "m.ckpt")
    assert back.geometry == SMALL
    a = est.transform(line_records[:2])
    b = back.transform(line_records[:2])
    assert a.tobytes() == b.tobytes()
    back.save(tmp_path / "m2.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_divergence_aborts_with_last_checkpoint(line_records, tmp_path, monkeypatch):
    net = OrientedDescriptorNet((1, 8, 64), _small_arch(), seed=0)
    calls = {"n": 0}
    real = OrientedDescriptorNet.joint_loss

    def flaky(self, *args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 3:
            return float("nan"), 0.0
        return real(self, *args, **kwargs)

    monkeypatch.setattr(OrientedDescriptorNet, "joint_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(net, line_records, TrainConfig(epochs=3, steps_per_epoch=2, batch_size=1),
              SamplingConfig(), SMALL, checkpoint_dir=tmp_path)
    assert info.value.last_good_checkpoint == tmp_path / "epoch_000.ckpt"


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(margin=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert TrainConfig(epochs=10).switch_epoch == 5


def test_records_without_clouds_rejected():
    recs = [ScanRecord(i, None, PlanarPose(i, 0, 0)) for i in range(3)]
    with pytest.raises(ValueError, match="point clouds"):
        train(OrientedDescriptorNet((1, 8, 64), _small_arch()), recs, TrainConfig(),
              SamplingConfig(), SMALL)
