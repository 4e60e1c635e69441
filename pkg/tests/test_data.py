import dataclasses

import numpy as np
import pytest

from featstyle.data import (
    SHAPES,
    TaskConfig,
    all_splits,
    balanced_batches,
    domain_specs,
    generate_task,
    leave_one_domain_out,
    load_dataset,
    random_pose,
    render,
    save_dataset,
    shape_mask,
)
from featstyle.errors import ParameterError

SMALL = TaskConfig(num_domains=3, num_classes=4, per_domain=40, image_size=16, seed=3)


@pytest.fixture(scope="module")
def default_task():
    return generate_task(TaskConfig())


def softmax_probe(x_train, y_train, k, iters=1000, lr=0.5, l2=1e-3):
    """Multinomial logistic regression by full-batch gradient descent."""
    mu, sd = x_train.mean(0), x_train.std(0) + 1e-8
    x = (x_train - mu) / sd
    w, b, onehot = np.zeros((x.shape[1], k)), np.zeros(k), np.eye(k)[y_train]
    for _ in range(iters):
        z = x @ w + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(0)
    return lambda z: ((z - mu) / sd @ w + b).argmax(axis=1)


def shape_features(images):
    """Translation-invariant spectra of the grey image and of its 2x2 high-pass residual."""
    g = images.mean(axis=1)
    n = g.shape[-1]
    blocks = g.reshape(len(g), n // 2, 2, n // 2, 2).mean(axis=(2, 4))
    high = g - np.repeat(np.repeat(blocks, 2, 1), 2, 2)
    out = []
    for h in (g - g.mean(axis=(1, 2), keepdims=True), high):
        f = np.abs(np.fft.fft2(h))[:, : n // 2, : n // 2].reshape(len(g), -1)
        out.append(f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-12))
    return np.concatenate(out, axis=1)


# -- generation ------------------------------------------------------------------------
def test_generation_is_deterministic():
    a, b = generate_task(SMALL), generate_task(SMALL)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_task(dataclasses.replace(SMALL, seed=4))
    assert c.images.tobytes() != a.images.tobytes()


def test_shapes_and_ranges():
    ds = generate_task(SMALL)
    assert ds.images.shape == (120, 3, 16, 16) and ds.images.dtype == np.float32
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for d in range(3):
        counts = np.bincount(ds.labels[ds.domains == d], minlength=4)
        assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize(
    "bad",
    [dict(num_domains=1), dict(image_size=15), dict(num_classes=0), dict(num_classes=len(SHAPES) + 1), dict(per_domain=0)],
)
def test_invalid_config(bad):
    with pytest.raises(ParameterError):
        generate_task(dataclasses.replace(SMALL, **bad))


def test_same_class_different_domain_shift_matches_configured_colours():
    specs = domain_specs(4)
    pose = random_pose(np.random.default_rng(0), 32)
    mask = shape_mask(2, pose, 32)
    for spec in specs:
        no_noise = dataclasses.replace(spec, noise=0.0, texture=0.0, color_jitter=0.0)
        img = render(2, pose, no_noise, np.random.default_rng(1), 32)
        bg, fg = np.asarray(spec.background), np.asarray(spec.foreground)
        expected = bg + spec.contrast * (fg - bg) * mask.mean()
        np.testing.assert_allclose(img.mean(axis=(1, 2)), expected, atol=1e-9)


def test_high_frequency_masks_are_domain_invariant():
    # generator introspection: same class and pose, every domain, sensor noise off
    specs = domain_specs(4)
    rng = np.random.default_rng(0)

    def energy(img):
        low = img.reshape(3, 16, 2, 16, 2).mean(axis=(2, 4))
        high = img - np.repeat(np.repeat(low, 2, 1), 2, 2)
        e = (high**2).sum(0)
        return (e > 0.25 * e.max()).astype(float).ravel()

    corr = []
    for trial in range(50):
        y, pose = int(rng.integers(7)), random_pose(rng, 32)
        maps = [energy(render(y, pose, dataclasses.replace(s, noise=0.0), np.random.default_rng(trial), 32)) for s in specs]
        corr += [np.corrcoef(maps[i], maps[j])[0, 1] for i in range(4) for j in range(i + 1, 4)]
    assert np.mean(corr) > 0.9


def test_domain_probe_on_channel_means(default_task):
    ds = default_task
    x = ds.images.mean(axis=(2, 3))
    test = np.arange(len(x)) % 5 == 0
    probe = softmax_probe(x[~test], ds.domains[~test], 4)
    assert (probe(x[test]) == ds.domains[test]).mean() > 0.9


@pytest.mark.parametrize("domain", range(4))
def test_shape_probe_within_domain(default_task, domain):
    ds = default_task
    idx = ds.domain_indices(domain)
    x, y = shape_features(ds.images[idx]), ds.labels[idx]
    accs = []
    for fold in range(5):
        test = np.arange(len(idx)) % 5 == fold
        probe = softmax_probe(x[~test], y[~test], 7)
        accs.append((probe(x[test]) == y[test]).mean())
    assert np.mean(accs) > 0.9


# -- protocol ----------------------------------------------------------------------------
def test_leave_one_domain_out_partition(default_task):
    ds = default_task
    splits = all_splits(ds)
    assert len(splits) == 4
    union = np.sort(np.concatenate([s.test for s in splits]))
    np.testing.assert_array_equal(union, np.arange(len(ds)))
    for s in splits:
        assert s.target_domain not in s.source_domains
        assert not np.any(ds.domains[s.train] == s.target_domain)
        assert not np.any(ds.domains[s.val] == s.target_domain)
        assert np.all(ds.domains[s.test] == s.target_domain)
        assert len(np.intersect1d(s.train, s.val)) == 0
        for d in s.source_domains:
            n_val = (ds.domains[s.val] == d).sum()
            assert n_val == round(0.1 * 500)


def test_unknown_target():
    with pytest.raises(ParameterError):
        leave_one_domain_out(generate_task(SMALL), 3)


def test_balanced_batches(default_task):
    ds = default_task
    split = leave_one_domain_out(ds, 0)
    batches = list(balanced_batches(split, ds.domains, 42, np.random.default_rng(0)))
    assert len(batches) == 450 // 42
    for b in batches:
        assert len(b) == 126
        np.testing.assert_array_equal(np.bincount(ds.domains[b], minlength=4), [0, 42, 42, 42])
    again = list(balanced_batches(split, ds.domains, 42, np.random.default_rng(0)))
    for a, b in zip(batches, again):
        np.testing.assert_array_equal(a, b)
    other = list(balanced_batches(split, ds.domains, 42, np.random.default_rng(1)))
    assert not np.array_equal(batches[0], other[0])
    with pytest.raises(ParameterError):
        next(balanced_batches(split, ds.domains, 451, np.random.default_rng(0)))
    with pytest.raises(ParameterError):
        next(balanced_batches(split, ds.domains, 0, np.random.default_rng(0)))


# -- container -----------------------------------------------------------------------------
def test_container_round_trip(tmp_path):
    ds = generate_task(SMALL)
    path = tmp_path / "task.bin"
    save_dataset(ds, path, manifest=True)
    back = load_dataset(path)
    assert back.images.tobytes() == ds.images.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domains, ds.domains)
    assert back.config == ds.config and back.specs == ds.specs
    lines = (tmp_path / "task.bin.csv").read_text().splitlines()
    assert lines[0].startswith("index,label,shape,domain") and len(lines) == 121
    save_dataset(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_container_rejects_other_files(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"\x00" * 64)
    with pytest.raises(ValueError):
        load_dataset(bad)
