import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mnvton import io, runs
from mnvton.config import RunConfig
from mnvton.errors import ConfigError
from mnvton.model import Denoiser, ModelConfig

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


# checkpoints -----------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(arrays=st.lists(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite), max_size=4
))
def test_checkpoint_round_trip_is_bit_exact(arrays, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "c.bin"
    state = {f"p{i}": a for i, a in enumerate(arrays)}
    io.save_checkpoint(path, state, {"variant": "mn_v3", "config_hash": "x"})
    back, header = io.load_checkpoint(path)
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].astype("<f8").tobytes()
    assert header == {"variant": "mn_v3", "config_hash": "x", "count": sum(a.size for a in arrays)}


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.bin"
    io.save_checkpoint(path, {"w": np.array([1.5, -2.0])}, {"step": 3})
    raw = path.read_bytes()
    assert raw[:8] == b"MNVTONCK"
    (n,) = struct.unpack("<Q", raw[8:16])
    head = json.loads(raw[16 : 16 + n])
    assert head["params"] == [{"name": "w", "offset": 0, "shape": [2]}]
    assert np.frombuffer(raw[16 + n :], "<f8").tolist() == [1.5, -2.0]


def test_model_state_round_trip(tmp_path):
    model = Denoiser(ModelConfig(d=12, heads=2), "dual", seed=3)
    io.save_checkpoint(tmp_path / "m.bin", model.state_dict(), {})
    state, _ = io.load_checkpoint(tmp_path / "m.bin")
    other = Denoiser(ModelConfig(d=12, heads=2), "dual", seed=4)
    other.load_state_dict(state)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), other.parameters()))


def test_corrupt_checkpoints(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ValueError):
        io.load_checkpoint(p)
    io.save_checkpoint(p, {"w": np.zeros(3)}, {})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="payload"):
        io.load_checkpoint(p)


def test_loading_into_wrong_shape_fails(tmp_path):
    model = Denoiser(ModelConfig(d=12, heads=2), "mn_v3")
    state = model.state_dict()
    bad = {k: (np.zeros(3) if i == 0 else v) for i, (k, v) in enumerate(state.items())}
    with pytest.raises(ValueError):
        model.load_state_dict(bad)


# JSON ------------------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.recursive(
    st.one_of(st.none(), st.booleans(), st.integers(), st.floats(allow_nan=False), st.text(max_size=5)),
    lambda c: st.one_of(st.lists(c, max_size=3), st.dictionaries(st.text(max_size=4), c, max_size=3)),
    max_leaves=10,
))
def test_json_round_trip(obj):
    if isinstance(obj, str) and obj in ("inf", "-inf"):
        return  # these strings are the encoding of infinities
    text = io.dumps(obj)
    assert io.dumps(io.loads(text)) == text


def test_json_infinities_and_key_order():
    text = io.dumps({"b": math.inf, "a": -math.inf})
    assert text.index('"a"') < text.index('"b"') and '"inf"' in text
    assert io.loads(text) == {"a": -math.inf, "b": math.inf}


def test_content_hash_ignores_key_order():
    assert io.content_hash({"a": 1, "b": [1.5]}) == io.content_hash({"b": [1.5], "a": 1})
    assert io.content_hash({"a": 1}) != io.content_hash({"a": 2})


# PPM -------------------------------------------------------------------------------------


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, size=(5, 7, 3))
    io.write_ppm(tmp_path / "a.ppm", img)
    data = (tmp_path / "a.ppm").read_bytes()
    assert data.startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(io.decode_ppm(data), io.to_bytes(img))
    io.write_ppm(tmp_path / "b.ppm", img[..., :1], scale=3)
    big = io.decode_ppm((tmp_path / "b.ppm").read_bytes())
    assert big.shape == (15, 21, 3) and np.all(big[..., 0] == big[..., 2])


def test_ppm_rejects_odd_channels():
    with pytest.raises(ValueError):
        io.encode_ppm(np.zeros((2, 2, 2)))


def test_pixel_quantisation():
    assert io.to_bytes(np.array([-1.0, 0.0, 1.0, 2.0])).tolist() == [0, 128, 255, 255]


# run configs -----------------------------------------------------------------------------


def test_config_round_trip_and_hash(tmp_path):
    cfg = RunConfig(variant="mn_v2", seed=7)
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.hash == cfg.hash
    assert cfg.replace(out="elsewhere").hash == cfg.hash
    assert cfg.replace(seed=8).hash != cfg.hash


def test_partial_config_uses_defaults():
    cfg = RunConfig.from_dict({"variant": "dual", "train": {"steps": 5}})
    assert cfg.train.steps == 5 and cfg.train.batch == RunConfig().train.batch


@pytest.mark.parametrize("doc", [
    {"variant": "mn_v9"},
    {"bogus": 1},
    {"train": {"steps": 5, "lr_typo": 1}},
    {"model": {"d": 10}},
    {"train": []},
    {"schedule": {"beta_start": 0.5, "beta_end": 0.1}},
    {"schedule": {"sample_steps": 101}},
    {"schedule": {"signal_scale": -1.0}},
    {"task": {"height": 8}},
])
def test_strict_config_rejects(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_config_file_must_be_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "c.json")


def test_run_dir_detects_tampered_config(tmp_path):
    cfg = RunConfig(out=str(tmp_path))
    runs.write_config(cfg, tmp_path)
    assert runs.read_config(tmp_path) == cfg
    doc = json.loads((tmp_path / runs.CONFIG_FILE).read_text())
    doc["seed"] = 99
    (tmp_path / runs.CONFIG_FILE).write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        runs.read_config(tmp_path)
