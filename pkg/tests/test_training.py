from pathlib import Path

import numpy as np
import pytest

from wavesplit import training
from wavesplit.acoustics import PointSource, Wavenumber, fibonacci_sphere, synthesize
from wavesplit.models import build_baseline, build_sfs, build_ssl, pack_ssl_input
from wavesplit.training import (
    SfsDataset,
    SslDataset,
    TrainConfig,
    TrainingDivergedError,
    load_train_config,
    make_sfs_batch,
    make_ssl_batch,
    train_baseline,
    train_sfs,
    train_sfs_frozen_ssl,
    train_ssl,
    write_curves,
)

SMALL_MICS = fibonacci_sphere(16)


def tiny_ssl(seed=0):
    return build_ssl(16, widths=(4, 4), mlp_widths=(16, 8, 8), seed=seed)


def tiny_sfs(seed=0):
    return build_sfs(16, 2, widths=(4, 4, 4), seed=seed)


def tiny_baseline(seed=0):
    return build_baseline(16, widths=(4, 4), mlp_widths=(16, 8, 8), seed=seed)


@pytest.fixture(scope="module")
def ssl_ds():
    return SslDataset.generate(200, 500.0, seed=4)


@pytest.fixture(scope="module")
def sfs_ds(ssl_ds):
    return SfsDataset.from_ssl(ssl_ds, n_train=150, n_val=30)


# datasets ------------------------------------------------------------------

def test_ssl_dataset_split_and_region():
    ds = SslDataset.generate(1000, 300.0, seed=1)
    assert len(ds) == 1000 and ds.n_train == 900
    assert ds.is_train.sum() == 900
    assert np.all(np.linalg.norm(ds.positions, axis=1) < 0.8)
    assert np.array_equal(SslDataset.generate(1000, 300.0, seed=1).positions, ds.positions)


def test_sfs_pairs_respect_split(ssl_ds, sfs_ds):
    train_set = {tuple(r) for r in ssl_ds.positions[ssl_ds.train_indices]}
    val_set = {tuple(r) for r in ssl_ds.positions[ssl_ds.val_indices]}
    for i, pair in enumerate(sfs_ds.pairs):
        pool = train_set if sfs_ds.is_train[i] else val_set
        other = val_set if sfs_ds.is_train[i] else train_set
        for member in pair:
            assert tuple(member) in pool and tuple(member) not in other
        assert not np.array_equal(pair[0], pair[1])


def test_make_ssl_batch_determinism(ssl_ds):
    idx = np.arange(8)
    x1, y1 = make_ssl_batch(ssl_ds, idx, np.random.default_rng(1), SMALL_MICS)
    x2, y2 = make_ssl_batch(ssl_ds, idx, np.random.default_rng(1), SMALL_MICS)
    x3, y3 = make_ssl_batch(ssl_ds, idx, np.random.default_rng(2), SMALL_MICS)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert not np.array_equal(x1, x3)
    assert np.array_equal(y1, y3)
    assert x1.shape == (8, 2, 16, 16) and y1.shape == (8, 3)


def test_make_ssl_batch_noiseless_composition(ssl_ds):
    k = Wavenumber(ssl_ds.frequency)
    x, _ = make_ssl_batch(ssl_ds, [3, 7], np.random.default_rng(0), SMALL_MICS, k, snr_range=None, phases=[0.0, 0.0])
    for row, i in zip(x, [3, 7]):
        p = synthesize([PointSource(ssl_ds.positions[i], 1.0)], SMALL_MICS, k)
        assert np.array_equal(row, pack_ssl_input(p))


def test_make_sfs_batch_noiseless_sum_identity(sfs_ds):
    b = make_sfs_batch(sfs_ds, np.arange(10), np.random.default_rng(0), SMALL_MICS, snr_range=None)
    t = b.targets
    summed = (t[:, 0] + t[:, 2] + 1j * (t[:, 1] + t[:, 3])) * b.scales[:, None]
    np.testing.assert_allclose(summed, b.mixture, rtol=0, atol=1e-12)
    q = (b.inputs[:, 0] + 1j * b.inputs[:, 1]) * b.scales[:, None]
    np.testing.assert_allclose(q, b.mixture, rtol=0, atol=1e-12)


def test_make_sfs_batch_zero_amplitude_gives_zero_target(sfs_ds):
    amps = np.array([[0.0, 0.5 - 0.2j], [0.0, -1j]])
    b = make_sfs_batch(sfs_ds, [0, 1], np.random.default_rng(0), SMALL_MICS, amplitudes=amps)
    assert np.all(b.targets[:, :2] == 0.0)
    assert np.all(np.abs(b.targets[:, 2:]).sum(axis=(1, 2)) > 0)


def test_make_sfs_batch_targets_are_noise_free(sfs_ds):
    rng = np.random.default_rng(9)
    noisy = make_sfs_batch(sfs_ds, np.arange(4), rng, SMALL_MICS, snr_range=(20.0, 20.0))
    clean = noisy.targets[:, 0] + noisy.targets[:, 2] + 1j * (noisy.targets[:, 1] + noisy.targets[:, 3])
    mixture = noisy.mixture / noisy.scales[:, None]
    assert np.abs(mixture - clean).max() > 1e-3


def test_make_sfs_batch_determinism(sfs_ds):
    a = make_sfs_batch(sfs_ds, np.arange(5), np.random.default_rng(3), SMALL_MICS)
    b = make_sfs_batch(sfs_ds, np.arange(5), np.random.default_rng(3), SMALL_MICS)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)


# config --------------------------------------------------------------------

def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=32, epochs=7, seed=2**40 + 1, noise=False)
    path = tmp_path / "train.cfg"
    path.write_text("# comment\n" + cfg.to_text())
    assert load_train_config(path) == cfg
    assert cfg.snr_range is None


@pytest.mark.parametrize("text", ["bogus=1\n", "epochs\n", "batch_size=0\n", "snr_low=50\nsnr_high=20\n"])
def test_config_rejects_bad_files(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ValueError):
        load_train_config(path)


# loops ---------------------------------------------------------------------

def test_zero_learning_rate_is_noop():
    ds = SslDataset.generate(12, 500.0, seed=0, train_fraction=10 / 12)
    net = tiny_ssl()
    before = [a.copy() for _, a in net.named_arrays()]
    res = train_ssl(ds, SMALL_MICS, TrainConfig(learning_rate=0.0, batch_size=4, epochs=2), net=net)
    for b, (_, a) in zip(before, net.named_arrays()):
        assert np.array_equal(a, b)
    # unchanged weights see identical validation draws
    assert res.val_loss[0] == res.val_loss[1]


def test_identical_seeds_identical_curves(ssl_ds):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=50, epochs=2, seed=5)
    a = train_ssl(ssl_ds, SMALL_MICS, cfg, net=tiny_ssl())
    b = train_ssl(ssl_ds, SMALL_MICS, cfg, net=tiny_ssl())
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss


def test_ssl_loss_decreases(ssl_ds):
    res = train_ssl(ssl_ds, SMALL_MICS, TrainConfig(learning_rate=2e-3, batch_size=20, epochs=8, seed=1), net=tiny_ssl())
    assert all(np.isfinite(res.train_loss + res.val_loss))
    assert res.train_loss[-1] < 0.5 * res.train_loss[0]
    assert 1 <= res.best_epoch <= 8
    best = res.best_network()
    assert best.descriptor == res.network.descriptor


def test_sfs_loss_decreases(sfs_ds):
    res = train_sfs(sfs_ds, SMALL_MICS, TrainConfig(learning_rate=3e-3, batch_size=25, epochs=6, seed=1), net=tiny_sfs())
    assert res.train_loss[-1] < res.train_loss[0]


def test_baseline_loss_finite_and_decreases(sfs_ds):
    res = train_baseline(sfs_ds, SMALL_MICS, TrainConfig(learning_rate=2e-3, batch_size=25, epochs=6, seed=1),
                         net=tiny_baseline())
    assert all(v >= 0 and np.isfinite(v) for v in res.train_loss)
    assert res.train_loss[-1] < res.train_loss[0]


def test_frozen_variant_leaves_localizer_untouched(sfs_ds):
    ssl = tiny_ssl(seed=3)
    ssl_before = [a.copy() for _, a in ssl.named_arrays()]
    sfs = tiny_sfs()
    sfs_before = [a.copy() for _, a in sfs.named_arrays()]
    train_sfs_frozen_ssl(sfs_ds, SMALL_MICS, ssl, TrainConfig(learning_rate=1e-3, batch_size=50, epochs=1), net=sfs)
    for b, (_, a) in zip(ssl_before, ssl.named_arrays()):
        assert np.array_equal(a, b)
    assert all(p.tensor.requires_grad for p in ssl.parameters())
    assert all(p.step_count == 0 for p in ssl.parameters())
    assert any(not np.array_equal(a, b) for b, (_, a) in zip(sfs_before, sfs.named_arrays()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    ds = SslDataset(np.full((4, 3), np.nan), 3, 500.0)
    with pytest.raises(TrainingDivergedError):
        train_ssl(ds, SMALL_MICS, TrainConfig(epochs=1, batch_size=2), net=tiny_ssl())


def test_curves_csv(tmp_path, ssl_ds):
    res = train_ssl(ssl_ds, SMALL_MICS, TrainConfig(epochs=2, batch_size=100), net=tiny_ssl())
    path = tmp_path / "curves.csv"
    write_curves(path, res)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3 and lines[1].startswith("1,")
    assert float(lines[2].split(",")[1]) == res.train_loss[1]


@pytest.mark.parametrize("name", ["ssl", "sfs", "baseline", "sfs_frozen"])
def test_checked_in_configs_match_presets(name):
    root = Path(__file__).parents[1] / "configs"
    assert training.load_train_config(root / f"desk_{name}.cfg") == getattr(training, f"DESK_{name.upper()}")
    assert training.load_train_config(root / f"full_{name}.cfg") == getattr(training, f"FULL_{name.upper()}")
