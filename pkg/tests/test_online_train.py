import json
import math

import numpy as np
import pytest

from oaid import detector as D
from oaid import online_train as O
from oaid.augment import AugmentConfig
from oaid.corpus import Corpus, build_timeline
from oaid.metrics import build_matrix
from conftest import small_manifest


def _config(**kw):
    base = dict(epochs=2, batch_size=8, learning_rate=3e-3, min_batches=2, seed=0,
                augment=AugmentConfig(crop_size=32))
    base.update(kw)
    return O.TrainConfig(**base)


def _refs(sizes, n_real):
    refs = [O.SampleRef("real", i, 0) for i in range(n_real)]
    for k, n in enumerate(sizes):
        refs += [O.SampleRef(f"s{k}", i, 1) for i in range(n)]
    return refs


def test_every_batch_is_half_real():
    refs = _refs([90], 10)
    batches = list(O.class_balanced_batches(refs, 10, np.random.default_rng(0)))
    assert len(batches) == 18
    for b in batches:
        assert sum(r.label == 0 for r in b) == 5 and len(b) == 10


def test_min_batches_floor():
    refs = _refs([4], 4)
    assert len(list(O.class_balanced_batches(refs, 4, np.random.default_rng(0), min_batches=7))) == 7


def test_fake_source_proportions_within_four_sigma():
    refs = _refs([10, 20, 70], 100)
    rng = np.random.default_rng(1)
    counts = np.zeros(3)
    for batch in O.class_balanced_batches(refs, 10, rng):
        for r in batch:
            if r.label:
                counts[int(r.source_id[1])] += 1
    n = counts.sum()
    for c, p in zip(counts, (0.1, 0.2, 0.7)):
        assert abs(c - n * p) <= 4 * math.sqrt(n * p * (1 - p))


def test_single_class_pool_rejected():
    with pytest.raises(ValueError):
        list(O.class_balanced_batches(_refs([], 5), 4, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        list(O.class_balanced_batches(_refs([3], 0), 4, np.random.default_rng(0)))
    with pytest.raises(ValueError):
        list(O.class_balanced_batches(_refs([3], 3), 5, np.random.default_rng(0)))


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 7}, {"learning_rate": 0},
                                {"lr_schedule": "step"}, {"min_batches": -1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        _config(**kw)


def test_config_roundtrip_and_schedule():
    cfg = _config()
    assert O.TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.learning_rate_at(0, 10) == cfg.learning_rate
    assert cfg.learning_rate_at(5, 10) == pytest.approx(cfg.learning_rate / 2)
    assert _config(lr_schedule="constant").learning_rate_at(9, 10) == cfg.learning_rate


@pytest.fixture(scope="module")
def setup():
    m = small_manifest(0, counts=(12, 2, 6))
    return build_timeline(m), Corpus(m)


def test_train_stage_checks_stage_and_pool(setup):
    tl, corp = setup
    model = D.build_whole_image_net(32)
    pool = O.TrainingPool(corp, "real", tl.ids[:2])
    with pytest.raises(ValueError, match="stage"):
        O.train_stage(model, pool, _config(), 2)
    with pytest.raises(ValueError):
        O.train_stage(model, pool, _config(), 1)


def test_train_stage_deterministic(setup):
    tl, corp = setup
    pool = O.TrainingPool(corp, "real", tl.ids[:1])
    a, b = D.build_whole_image_net(32), D.build_whole_image_net(32)
    O.train_stage(a, pool, _config(), 1)
    O.train_stage(b, pool, _config(), 1)
    assert a.stage == 1
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_run_online_checkpoints(setup, tmp_path):
    tl, corp = setup
    ckpts = O.run_online(tl, corp, _config(), run_dir=tmp_path)
    assert [c.stage for c in ckpts] == [1, 2, 3]
    assert [c.cumulative_ids for c in ckpts] == [["real"] + tl.ids[:k] for k in (1, 2, 3)]
    for prev, cur in zip(ckpts, ckpts[1:]):
        assert set(prev.cumulative_ids) < set(cur.cumulative_ids)
        assert any(prev.model.params[k].tobytes() != cur.model.params[k].tobytes() for k in cur.model.params)
    assert all("real" in c.cumulative_ids for c in ckpts)
    files = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert files == sorted(O.checkpoint_name(c.stage, c.source_id) for c in ckpts)
    info = json.loads((tmp_path / "run_manifest.json").read_text())
    assert info["config_hash"] == _config().digest() and info["seed"] == 0

    # full rerun elsewhere reproduces every checkpoint byte for byte
    again = tmp_path / "again"
    O.run_online(tl, corp, _config(), run_dir=again)
    for name in files:
        assert (again / name).read_bytes() == (tmp_path / name).read_bytes()

    # matrix over the run is rectangular and tagged
    matrix = build_matrix(ckpts, tl, corp, AugmentConfig(crop_size=32))
    assert matrix.grid("auc").shape == (3, 3)
    assert all(matrix.regions[(r, i + 1)] == "diagonal" for i, r in enumerate(matrix.rows))
    for (row, k), region in matrix.regions.items():
        if region == "seen":
            assert row in ckpts[k - 1].cumulative_ids


def test_resume_retrains_only_missing_stage(setup, tmp_path, monkeypatch):
    tl, corp = setup
    O.run_online(tl, corp, _config(), run_dir=tmp_path)
    last = tmp_path / O.checkpoint_name(3, tl.ids[2])
    before = last.read_bytes()
    last.unlink()
    calls = []
    real_train = O.train_stage

    def spy(model, pool, config, stage, optimizer=None):
        calls.append(stage)
        return real_train(model, pool, config, stage, optimizer)

    monkeypatch.setattr(O, "train_stage", spy)
    O.run_online(tl, corp, _config(), run_dir=tmp_path)
    assert calls == [3]
    assert last.read_bytes() == before


def test_run_dir_with_other_config_rejected(setup, tmp_path):
    tl, corp = setup
    O.run_online(tl, corp, _config(), run_dir=tmp_path, stages=1)
    with pytest.raises(ValueError, match="different config"):
        O.run_online(tl, corp, _config(seed=5), run_dir=tmp_path, stages=1)


def test_checkpoint_roundtrip(setup, tmp_path):
    tl, corp = setup
    ckpt = O.run_online(tl, corp, _config(epochs=1), stages=1)[0]
    path = tmp_path / "c.ckpt"
    O.save_checkpoint(ckpt, path)
    back = O.load_checkpoint(path)
    assert (back.stage, back.source_id, back.cumulative_ids) == (1, ckpt.source_id, ckpt.cumulative_ids)
    assert all(back.model.params[k].tobytes() == ckpt.model.params[k].tobytes() for k in ckpt.model.params)
    x = corp.images("real", "test")
    assert D.predict_scores(back.model, x).tobytes() == D.predict_scores(ckpt.model, x).tobytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(D.CheckpointError, match="bad.ckpt"):
        O.load_checkpoint(bad)
    bare = tmp_path / "bare.ckpt"
    D.save_model(D.build_whole_image_net(32), bare)
    with pytest.raises(D.CheckpointError, match="metadata"):
        O.load_checkpoint(bare)


def test_training_reduces_loss():
    m = small_manifest(0, counts=(60, 2, 4), ids=("a1",))
    tl = build_timeline(m)
    ckpt = O.run_online(tl, Corpus(m), _config(epochs=3, min_batches=10, batch_size=16))[0]
    assert ckpt.epoch_losses[-1] < ckpt.epoch_losses[0]
