import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddlab import data as D


def vol(x):
    return D.Volume(np.asarray(x, dtype=np.float64))


# -- percentile and clipping ------------------------------------------------------

def test_percentile_matches_numpy_linear():
    v = np.arange(1, 101, dtype=np.float64)
    assert D.percentile(v, 99) == pytest.approx(99.01, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=rng.integers(2, 500))
        p = float(rng.uniform(0, 100))
        assert D.percentile(x, p) == pytest.approx(np.percentile(x, p), abs=1e-12)


def test_clip_percentile():
    v = vol(np.arange(1, 101).reshape(1, 10, 10))
    out = D.clip_percentile(v, 99).voxels
    assert out.max() == pytest.approx(99.01, abs=1e-12)
    assert np.array_equal(out.ravel()[:99], np.arange(1, 100))
    const = vol(np.full((2, 3, 3), 4.0))
    assert np.array_equal(D.clip_percentile(const).voxels, const.voxels)
    rnd = vol(np.random.default_rng(1).normal(size=(3, 5, 5)))
    assert np.array_equal(D.clip_percentile(rnd, 100).voxels, rnd.voxels)
    with pytest.raises(D.DataError):
        D.clip_percentile(rnd, 0)


# -- standardize and rescale ---------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100), st.floats(0.01, 100))
def test_standardize_contract(seed, loc, scale):
    x = np.random.default_rng(seed).normal(loc, scale, size=(3, 6, 6))
    out = D.standardize(vol(x)).voxels
    assert abs(out.mean()) < 1e-6 and abs(out.var() - 1) < 1e-6
    again = D.standardize(D.Volume(out)).voxels
    assert np.allclose(again, out, atol=1e-6)


def test_standardize_constant():
    with pytest.raises(D.ZeroVarianceError):
        D.standardize(vol(np.ones((2, 2, 2))))


def test_rescale_examples():
    out = D.rescale(vol(np.array([-3.0, 1.0, 5.0]).reshape(1, 1, 3))).voxels.ravel()
    assert out.tolist() == [-1.0, 0.0, 1.0]
    x = np.random.default_rng(2).uniform(-1, 1, size=(2, 4, 4))
    x.flat[0], x.flat[1] = -1.0, 1.0
    assert np.allclose(D.rescale(vol(x)).voxels, x, atol=1e-15)
    with pytest.raises(D.DataError):
        D.rescale(vol(x), 1.0, 1.0)
    with pytest.raises(D.ConstantVolumeError):
        D.rescale(vol(np.zeros((1, 2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_preprocess_range(seed):
    x = np.random.default_rng(seed).gamma(2.0, 3.0, size=(4, 8, 8))
    out = D.preprocess(vol(x)).voxels
    assert out.min() == -1.0 and out.max() == 1.0


# -- slicing ---------------------------------------------------------------------

def test_slice_and_pad_exact_fit():
    s = D.slice_and_pad(vol(np.zeros((10, 256, 256))))
    assert len(s) == 10 and s[0].image.shape == (256, 256) and s[0].crop == (0, 0, 0, 0)


def test_slice_and_pad_centering():
    x = np.random.default_rng(0).uniform(1, 2, size=(10, 200, 200))
    s = D.slice_and_pad(vol(x), np.ones((10, 200, 200), np.uint8))
    assert len(s) == 10 and s[3].crop == (28, 28, 28, 28)
    img = s[3].image
    assert np.all(img[:28] == 0) and np.all(img[-28:] == 0)
    assert np.all(img[:, :28] == 0) and np.all(img[:, -28:] == 0)
    assert np.allclose(img[28:-28, 28:-28], x[3].astype(np.float32))
    assert s[3].label[:28].sum() == 0 and s[3].label[28:-28, 28:-28].all()
    odd = D.slice_and_pad(vol(np.ones((1, 5, 4))), out_size=(8, 8))[0]
    assert odd.crop == (1, 2, 2, 2)


def test_slice_too_large():
    with pytest.raises(D.SliceTooLargeError):
        D.slice_and_pad(vol(np.zeros((1, 300, 300))))


def _labeled_volume(seed, shape=(6, 20, 18)):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape), rng.integers(0, 3, size=shape).astype(np.uint8)


@pytest.mark.parametrize("seed", range(5))
def test_reassemble_roundtrip(seed):
    x, y = _labeled_volume(seed)
    s = D.slice_and_pad(vol(x), y, out_size=(32, 32))
    assert np.array_equal(D.reassemble(s), y)
    shuffled = [s[i] for i in np.random.default_rng(seed).permutation(len(s))]
    assert np.array_equal(D.reassemble(shuffled), y)


def test_reassemble_other_axis():
    x, y = _labeled_volume(0)
    s = D.slice_and_pad(vol(x), y, axis=2, out_size=(32, 32))
    assert len(s) == 18
    assert np.array_equal(D.reassemble(s, axis=2), y)


def test_reassemble_errors():
    x, y = _labeled_volume(0, (10, 8, 8))
    s = D.slice_and_pad(vol(x), y, out_size=(8, 8))
    with pytest.raises(D.MissingSliceError):
        D.reassemble(s[:3] + s[4:])
    with pytest.raises(D.DuplicateSliceError):
        D.reassemble(s + [s[2]])
    with pytest.raises(D.MissingSliceError):
        D.reassemble([])


# -- synthetic generation ---------------------------------------------------------

def test_shift_spec_validation():
    for kw in (dict(contrast_gamma=0), dict(noise_sigma=-1), dict(bias_field_amplitude=-0.1)):
        with pytest.raises(D.InvalidSpecError):
            D.DomainShiftSpec(**kw).validate()
    assert D.DomainShiftSpec.identity().is_identity
    d = D.DomainShiftSpec.desk()
    assert (d.intensity_gain, d.bias_field_amplitude, d.noise_sigma, d.contrast_gamma) == (
        0.6, 0.4, 0.05, 1.8)


def test_generation_is_deterministic():
    a = D.generate_synthetic_pair(2, 2, D.DomainShiftSpec.desk(3), 5, (32, 32), 4)
    b = D.generate_synthetic_pair(2, 2, D.DomainShiftSpec.desk(3), 5, (32, 32), 4)
    for x, y in ((a.source, b.source), (a.target, b.target)):
        assert np.array_equal(x.images, y.images)
    assert np.array_equal(a.source.labels, b.source.labels)
    assert np.array_equal(a.target_eval_labels, b.target_eval_labels)
    c = D.generate_synthetic_pair(2, 2, D.DomainShiftSpec.desk(3), 6, (32, 32), 4)
    assert not np.array_equal(a.source.labels, c.source.labels)


def test_generated_samples():
    pair = D.generate_synthetic_pair(3, 2, D.DomainShiftSpec.desk(), 0, (32, 32), 4)
    assert len(pair.source) == 12 and len(pair.target) == 8
    assert pair.target.labels is None and pair.target_eval_labels is not None
    for ds in (pair.source, pair.target):
        assert ds.images.dtype == np.float32 and ds.images.shape[1:] == (32, 32)
        assert ds.images.min() >= -1 and ds.images.max() <= 1
    assert set(np.unique(pair.source.labels)) <= {0, 1, 2}
    assert {1, 2} <= set(np.unique(pair.source.labels))


def test_label_marginals_match_across_domains():
    n = 200
    src = D.generate_volumes(n, D.DomainShiftSpec.identity(), 0, (32, 32), 2, domain="source")
    tgt = D.generate_volumes(n, D.DomainShiftSpec.desk(), 0, (32, 32), 2, domain="target")
    a = (src.labels > 0).sum() / n
    b = (tgt.labels > 0).sum() / n
    assert abs(a - b) / a < 0.05


def test_invalid_counts():
    with pytest.raises(D.InvalidSpecError):
        D.generate_synthetic_pair(0, 1, D.DomainShiftSpec.desk())


# -- dataset files --------------------------------------------------------------------

@pytest.fixture()
def dataset():
    return D.generate_synthetic_pair(2, 2, D.DomainShiftSpec.desk(), 0, (32, 32), 4)


def test_dataset_roundtrip(tmp_path, dataset):
    for ds, name in ((dataset.source, "s"), (dataset.target, "t")):
        D.save_dataset(ds, tmp_path / name)
        back = D.load_dataset(tmp_path / name, with_eval_labels=True)
        assert np.array_equal(back.images, ds.images)
        assert (back.labels is None) == (ds.labels is None)
        if ds.labels is not None:
            assert np.array_equal(back.labels, ds.labels)
        assert back.volumes == ds.volumes and back.domain == ds.domain
    t = D.load_dataset(tmp_path / "t")
    assert t.labels is None and t.eval_labels is None
    assert np.array_equal(D.load_dataset(tmp_path / "t", True).eval_labels,
                          dataset.target.eval_labels)


def test_dataset_errors(tmp_path, dataset):
    p = D.save_dataset(dataset.source, tmp_path / "s")
    (p / "images.bin").write_bytes(np.zeros(100, "<f4").tobytes())
    with pytest.raises(D.DatasetShapeError):
        D.load_dataset(p)
    p = D.save_dataset(dataset.source, tmp_path / "s")
    raw = (p / "meta.json").read_text()
    (p / "meta.json").write_text(raw[: len(raw) // 2])
    with pytest.raises(D.CorruptHeaderError):
        D.load_dataset(p)
    p = D.save_dataset(dataset.source, tmp_path / "s")
    meta = json.loads((p / "meta.json").read_text())
    meta["version"] = 99
    (p / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(D.VersionMismatchError):
        D.load_dataset(p)
    with pytest.raises(FileNotFoundError):
        D.save_dataset(dataset.source, tmp_path / "missing" / "s")


def test_identity_shift_has_no_gap():
    from mddlab.adaptation import PretrainConfig, pretrain
    from mddlab.evaluation import evaluate_dataset
    from mddlab.model import UNetConfig, build_model

    pair = D.generate_synthetic_pair(48, 1, D.DomainShiftSpec.identity(), 0, (64, 64), 12)
    model = build_model(UNetConfig.desk(), 0)
    pretrain(model, pair.source, PretrainConfig(epochs=8))
    src = D.generate_volumes(16, D.DomainShiftSpec.identity(), 10_000, (64, 64), 12,
                             domain="source")
    tgt = D.generate_volumes(16, D.DomainShiftSpec.identity(), 10_000, (64, 64), 12,
                             domain="target")
    d_src = evaluate_dataset(model, src)["dice_mean"]
    d_tgt = evaluate_dataset(model, tgt)["dice_mean"]
    assert d_src > 0.5
    assert abs(d_src - d_tgt) <= 0.03
