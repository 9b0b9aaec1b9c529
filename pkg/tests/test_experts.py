import json

import numpy as np
import pytest

from mope.backbone import BackboneConfig
from mope.errors import ContractError, FormatError
from mope.experts import ExpertPool, init_pool, load_pool, save_pool, select_expert


@pytest.fixture
def config():
    return BackboneConfig(vocab_size=30)


def test_default_pool_shapes(config):
    pool = init_pool(config, 1, 0)
    mats = pool.experts[0].matrices()
    assert len(mats) == 8
    assert all(m.shape == (10, 64) for m in mats)


def test_init_is_deterministic_and_experts_differ(config):
    a, b = init_pool(config, 2, 5), init_pool(config, 2, 5)
    for ea, eb in zip(a.experts, b.experts):
        for ma, mb in zip(ea.matrices(), eb.matrices()):
            assert ma.tobytes() == mb.tobytes()
    assert any(not np.array_equal(x, y) for x, y in
               zip(a.experts[0].matrices(), a.experts[1].matrices()))


def test_init_scale(config):
    mats = np.concatenate([m.ravel() for m in init_pool(config, 3, 1).experts[2].matrices()])
    assert 0.015 < mats.std() < 0.025


def test_init_rejects_empty_pool(config):
    with pytest.raises(ContractError):
        init_pool(config, 0, 0)


def test_select_expert(config):
    pool = init_pool(config, 3, 0)
    assert select_expert(pool, 0) is pool.experts[0]
    first = [m.copy() for m in select_expert(pool, 2).matrices()]
    again = select_expert(pool, 2).matrices()
    assert all(np.array_equal(x, y) for x, y in zip(first, again))
    with pytest.raises(ContractError):
        select_expert(pool, 3)
    with pytest.raises(ContractError):
        select_expert(pool, -1)


def test_pool_round_trip(tmp_path, config):
    pool = init_pool(config, 3, 4, {"k": 3, "seed": 4, "mode": "hidden"})
    save_pool(pool, tmp_path / "experts")
    loaded = load_pool(tmp_path / "experts")
    assert loaded.k == 3 and loaded.provenance == pool.provenance
    assert loaded.config == config
    for a, b in zip(pool.experts, loaded.experts):
        assert a.index == b.index
        for ma, mb in zip(a.matrices(), b.matrices()):
            assert ma.tobytes() == mb.tobytes()


def test_truncated_payload_is_format_error(tmp_path, config):
    save_pool(init_pool(config, 1, 0), tmp_path / "experts")
    p = tmp_path / "experts.bin"
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(FormatError):
        load_pool(tmp_path / "experts")


def test_manifest_k_disagreeing_with_payload(tmp_path, config):
    save_pool(init_pool(config, 2, 0), tmp_path / "experts")
    m = tmp_path / "experts.json"
    doc = json.loads(m.read_text())
    doc["k"] = 3
    m.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_pool(tmp_path / "experts")


def test_wrong_kind_is_format_error(tmp_path, config):
    from mope.backbone import init_backbone, save_backbone

    save_backbone(init_backbone(BackboneConfig(vocab_size=5, d_model=8, n_heads=2, d_ff=8),
                                0), tmp_path / "bb")
    with pytest.raises(FormatError):
        load_pool(tmp_path / "bb")


def test_pool_type(config):
    assert isinstance(init_pool(config, 2, 0), ExpertPool)
