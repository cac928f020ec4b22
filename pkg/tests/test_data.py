import numpy as np
import pytest

from dualattack import data as D
from dualattack import models as M
from dualattack.errors import ConfigError, TrainingDivergedError, ZooGateError

TINY = D.DatasetSpec(num_classes=4, image_h=16, image_w=16, train_per_class=30, eval_per_class=10,
                     noise_std=0.1, seed=3)
TINY_VIT = M.ViTConfig(image_h=16, image_w=16, patch_size=4, embed_dim=16, head_dim=8, num_heads=2,
                       depth=1, mlp_hidden=16, num_classes=4)


@pytest.fixture(scope="module")
def tiny():
    return D.gen_dataset(TINY)


def test_shapes_ranges_labels(tiny):
    train, ev = tiny
    assert train.images.shape == (120, 16, 16, 3) and ev.images.shape == (40, 16, 16, 3)
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0
    assert set(train.labels.tolist()) == {0, 1, 2, 3}
    assert np.bincount(train.labels).tolist() == [30] * 4


def test_same_seed_identical_bytes(tiny):
    again = D.gen_dataset(TINY)
    assert again[0].images.tobytes() == tiny[0].images.tobytes()
    assert again[1].digest() == tiny[1].digest()


def test_different_seed_differs(tiny):
    other = D.gen_dataset(D.DatasetSpec(**{**TINY.__dict__, "seed": 4}))
    assert other[0].digest() != tiny[0].digest()


def test_train_eval_disjoint(tiny):
    train, ev = tiny
    flat = {img.tobytes() for img in train.images}
    assert not any(img.tobytes() in flat for img in ev.images)


def test_noise_free_samples_differ_only_by_jitter():
    spec = D.DatasetSpec(num_classes=3, train_per_class=4, eval_per_class=1, noise_std=0.0, seed=0)
    train, _ = D.gen_dataset(spec)
    a, b = train.images[train.labels == 1][:2]
    # corners sit far from every jittered blob center: only the shared grating shows there
    for r, c in [(0, 0), (0, -1), (-1, 0), (-1, -1)]:
        assert np.max(np.abs(a[r, c] - b[r, c])) < 1e-2
    assert not np.array_equal(a, b)


def test_classes_have_distinct_renderings():
    spec = D.DatasetSpec(noise_std=0.0)
    imgs = [D.render(spec, k, (16, 16)) for k in range(spec.num_classes)]
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            assert np.max(np.abs(imgs[i] - imgs[j])) > 0.1


def test_spec_validation():
    with pytest.raises(ConfigError):
        D.DatasetSpec(channels=1)
    with pytest.raises(ConfigError):
        D.DatasetSpec(num_classes=1)


def test_zero_lr_keeps_parameters(tiny):
    hyper = D.TrainHyper(lr=0.0, epochs=1, batch_size=40)
    res = D.train_model(TINY_VIT, tiny[0], hyper, seed=1)
    init = D.init_model(TINY_VIT, D.RngStream(1).split("init"))
    for k in init.params:
        assert np.array_equal(res.model.params[k], init.params[k])


def test_training_deterministic_and_seed_sensitive(tiny):
    hyper = D.TrainHyper(epochs=1, batch_size=40)
    a = D.train_model(TINY_VIT, tiny[0], hyper, seed=1)
    b = D.train_model(TINY_VIT, tiny[0], hyper, seed=1)
    c = D.train_model(TINY_VIT, tiny[0], hyper, seed=2)
    assert a.model.digest() == b.model.digest()
    assert max(np.max(np.abs(a.model.params[k] - c.model.params[k])) for k in a.model.params) > 0


def test_training_learns(tiny):
    hyper = D.TrainHyper(lr=0.05, epochs=8, batch_size=20, grad_clip=0.5)
    res = D.train_model(TINY_VIT, tiny[0], hyper, seed=0, evaluation=tiny[1])
    assert res.history[-1] < res.history[0]
    assert res.eval_accuracy >= 0.9


def test_divergence_is_structured(tiny):
    hyper = D.TrainHyper(lr=1e200, epochs=2, batch_size=40, grad_clip=1e300, warmup_epochs=0)
    with pytest.raises(TrainingDivergedError):
        with np.errstate(all="ignore"):
            D.train_model(TINY_VIT, tiny[0], hyper, seed=0)


def test_roster_shape():
    names = [n for n, _, _ in D.ZOO_ROSTER]
    assert len(names) == 9 and len(set(names)) == 9
    vits = [a for _, a, _ in D.ZOO_ROSTER if isinstance(a, M.ViTConfig)]
    surrogates = [a for n, a, _ in D.ZOO_ROSTER if n.startswith("S")]
    assert len(surrogates) == 4 and len(vits) == 7
    assert {a.patch_size for a in surrogates} == {4, 8}
    assert {a.depth for a in surrogates} <= {2, 3, 4} and {a.num_heads for a in surrogates} <= {2, 3, 4}
    assert any(a.depth % 3 == 0 for a in surrogates)


def _tiny_roster():
    hyper = D.TrainHyper(lr=0.05, epochs=6, batch_size=20, grad_clip=0.5)
    cnn = M.CNNConfig(image_h=16, image_w=16, conv_channels=(6,), pools=(2,), num_classes=4)
    return (("S0", TINY_VIT, hyper), ("C0", cnn, D.TrainHyper(lr=0.1, epochs=6, batch_size=20, grad_clip=1.0)))


def test_zoo_cache_and_gate(tmp_path):
    roster = _tiny_roster()
    models = D.model_zoo(5, str(tmp_path), roster=roster, spec=TINY, min_accuracy=0.0)
    assert [m.label for m in models] == ["S0", "C0"]
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 2 and all(f.startswith("zoo_seed5_") for f in files)
    again = D.model_zoo(5, str(tmp_path), roster=roster, spec=TINY, min_accuracy=0.0)
    assert [m.digest() for m in again] == [m.digest() for m in models]
    with pytest.raises(ZooGateError):
        D.model_zoo(5, str(tmp_path), roster=roster, spec=TINY, min_accuracy=1.01)
