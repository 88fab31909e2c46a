"""Run configuration loading and the named-tensor container."""

import struct

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from countlab import tensorio
from countlab.config import RunConfig, from_dict, load_config
from countlab.patchgroup import PAPER_RATIOS


class TestRunConfig:
    def test_empty_config_is_an_error(self, tmp_path):
        path = tmp_path / "empty.toml"
        path.write_text("")
        with pytest.raises(ValueError, match="empty"):
            load_config(path)

    def test_unknown_key_rejected_with_section_name(self):
        with pytest.raises(ValueError, match=r"unknown key\(s\) in \[loss\]: bogus"):
            from_dict({"loss": {"bogus": 1}})

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="top level"):
            from_dict({"sed": 3})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match=r"\[data\.synth\]"):
            from_dict({"data": {"synth": {"radius": 2}}})

    def test_partial_section_keeps_other_defaults(self):
        cfg = from_dict({"loss": {"gamma": 0.0}, "data": {"synth": {"seed": 9}}})
        assert cfg.loss.gamma == 0.0
        assert cfg.loss.tau == RunConfig().loss.tau
        assert cfg.data.synth.seed == 9
        assert cfg.data.synth.image_size == RunConfig().data.synth.image_size
        assert cfg.data.count == RunConfig().data.count

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.groups.ratios == PAPER_RATIOS
        assert cfg.agglomerate.batch_size == 32 and cfg.agglomerate.epochs == 20
        assert cfg.agglomerate.lr == 1e-3 and cfg.agglomerate.min_lr == 1e-6
        assert cfg.agglomerate.warmup_epochs == 2
        assert cfg.head.n == 4 and cfg.head.temperature == 0.07

    @pytest.mark.parametrize(
        "data, message",
        [
            ({"groups": {"k": 3}}, "ratios"),
            ({"groups": {"M": 100}}, "multiple"),
            ({"agglomerate": {"strategy": "vote"}}, "strategy"),
            ({"agglomerate": {"tdrop_keep": 1.5}}, "tdrop_keep"),
            ({"teachers": {"noise": []}}, "at least one"),
            ({"teachers": {"noise": [-1.0]}}, ">= 0"),
            ({"loss": {"lambda_": [1.0]}}, "one weight per category"),
            ({"data": {"synth": {"image_size": 64}}}, "smaller than the crop"),
            ({"data": {"count": 10, "holdout": 10}}, "holdout"),
            ({"eval": {"grade_edges": [0.5, 0.01]}}, "ascending"),
            ({"loss": "x"}, "must be a table"),
        ],
    )
    def test_invalid_values(self, data, message):
        with pytest.raises(ValueError, match=message):
            from_dict(data)

    def test_desk_config_loads(self):
        cfg = load_config("configs/desk.toml")
        assert cfg.data.count == 2000 and cfg.data.holdout == 200
        assert cfg.groups.ratios == PAPER_RATIOS

    def test_to_dict_round_trip(self):
        cfg = load_config("configs/tiny.toml")
        assert from_dict(cfg.to_dict()) == cfg

    def test_with_seed(self):
        cfg = RunConfig().with_seed(5)
        assert cfg.seed == 5 and cfg.loss == RunConfig().loss


dtypes = st.sampled_from([np.float32, np.float64, np.int64, np.int32, np.uint8, np.bool_])
shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3)


class TestTensorIO:
    def test_header_layout(self):
        blob = tensorio.encode({"a": np.zeros(3, np.float32)}, {"k": 1})
        assert blob[:8] == tensorio.MAGIC
        version, L = struct.unpack("<IQ", blob[8:20])
        assert version == tensorio.VERSION
        assert len(blob) == 20 + L + 12

    @given(st.dictionaries(st.text("abc.", min_size=1, max_size=5), st.tuples(dtypes, shapes), max_size=4),
           st.integers(0, 2**31))
    def test_round_trip_bit_exact(self, spec, seed):
        gen = np.random.default_rng(seed)
        tensors = {}
        for name, (dt, shape) in spec.items():
            tensors[name] = np.asarray(gen.standard_normal(shape) * 100).astype(dt)
        blob = tensorio.encode(tensors, {"note": "x"})
        back, meta = tensorio.decode(blob)
        assert meta == {"note": "x"}
        assert set(back) == set(tensors)
        for k, v in tensors.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()
        assert tensorio.encode(back, meta) == blob

    def test_save_load_save_identical_bytes(self, tmp_path):
        model = torch.nn.Sequential(torch.nn.Linear(5, 3), torch.nn.LayerNorm(3))
        tensors = tensorio.state_to_tensors("m", model)
        tensors["rng.torch"] = torch.get_rng_state()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        tensorio.save(a, tensors, {"stage": "test", "config": {"seed": 1}})
        tensorio.save(b, *tensorio.load(a))
        assert a.read_bytes() == b.read_bytes()

    def test_state_dict_round_trip(self):
        model = torch.nn.Linear(4, 2)
        clone = torch.nn.Linear(4, 2)
        clone.load_state_dict(tensorio.tensors_to_state("m", tensorio.state_to_tensors("m", model)))
        for p, q in zip(model.parameters(), clone.parameters()):
            assert torch.equal(p, q)

    def test_bad_magic(self):
        blob = bytearray(tensorio.encode({"a": np.ones(2)}))
        blob[0] ^= 0xFF
        with pytest.raises(tensorio.CheckpointError, match="magic"):
            tensorio.decode(bytes(blob))

    def test_unknown_version(self):
        blob = bytearray(tensorio.encode({"a": np.ones(2)}))
        blob[8:12] = struct.pack("<I", 99)
        with pytest.raises(tensorio.CheckpointError, match="version"):
            tensorio.decode(bytes(blob))

    def test_truncated_payload(self):
        blob = tensorio.encode({"a": np.ones(4)})
        with pytest.raises(tensorio.CheckpointError, match="truncated"):
            tensorio.decode(blob[:-3])

    def test_unsupported_dtype(self):
        with pytest.raises(tensorio.CheckpointError, match="dtype"):
            tensorio.encode({"a": np.ones(2, np.complex64)})

    def test_payload_is_little_endian(self):
        blob = tensorio.encode({"a": np.array([1.0], dtype=">f8")})
        assert blob[-8:] == struct.pack("<d", 1.0)
