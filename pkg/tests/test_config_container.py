import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hsvlt.core.config import (
    CsaVariant,
    ExperimentConfig,
    Precision,
    desk_preset,
    dump_config,
    from_flat,
    get_preset,
    load_config,
    save_config,
    to_flat,
    with_overrides,
)
from hsvlt.core.container import (
    ContainerKind,
    detect_container_kind,
    encode_tensor,
    load_archive,
    load_tensor,
    save_archive,
    save_tensor,
)
from hsvlt.core.errors import ConfigError, ContainerError
from hsvlt.core.rng import Rng


class TestConfig:
    def test_flat_round_trip(self, tmp_path, tiny_cfg):
        save_config(tiny_cfg, tmp_path / "run.env")
        assert load_config(tmp_path / "run.env") == tiny_cfg
        assert from_flat(to_flat(tiny_cfg)) == tiny_cfg

    def test_dump_is_one_key_per_line(self, tiny_cfg):
        lines = dump_config(tiny_cfg).splitlines()
        assert "channels=4,6,8,10" in lines
        assert "target_map=" in lines
        assert len(lines) == len(to_flat(tiny_cfg))

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="gconv_size"):
            from_flat({"gconv_size": "7"})

    @pytest.mark.parametrize("key, value", [
        ("gconv_kernel", "4"),
        ("image_size", "40"),
        ("channels", "8,8,16,32"),
        ("depths", "1,1,1"),
        ("csa_stages", "0,2"),
        ("csa_enabled", "maybe"),
        ("lr", "-1"),
        ("precision", "float16"),
    ])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            from_flat({key: value})

    def test_overrides_keep_other_values(self):
        cfg = with_overrides(desk_preset(), csa_stages=[4, 2], csa_variant="mlp_concat_mlp", precision="float32")
        assert cfg.model.csa.stages_used == [2, 4]
        assert cfg.model.csa.variant == CsaVariant.MLP_CONCAT_MLP
        assert cfg.train.precision == Precision.FLOAT32
        assert cfg.model.channels == desk_preset().model.channels

    def test_presets(self):
        full = get_preset("full")
        assert isinstance(full, ExperimentConfig)
        assert full.model.channels == [96, 192, 384, 768]
        assert full.model.depths == [3, 3, 27, 3]
        assert get_preset("DESK") == desk_preset()
        with pytest.raises(ConfigError):
            get_preset("laptop")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.env")


class TestContainers:
    def test_f64_tensor_round_trip_is_exact(self, tmp_path):
        array = Rng(0).normal(1.0, (2, 3, 4))
        save_tensor(tmp_path / "x.hsvt", array, version=2)
        back = load_tensor(tmp_path / "x.hsvt")
        assert back.dtype == np.float64
        assert_array_equal(back, array)

    def test_f32_tensor_round_trip(self, tmp_path):
        array = Rng(1).normal(1.0, (5,))
        save_tensor(tmp_path / "x.hsvt", array)
        back = load_tensor(tmp_path / "x.hsvt")
        assert back.dtype == np.float32
        assert_array_equal(back, array.astype(np.float32))

    def test_header_layout(self):
        blob = encode_tensor(np.zeros((2, 3)), version=2)
        assert blob[:4] == b"HSVT"
        assert struct.unpack("<HHII", blob[4:16]) == (2, 2, 2, 3)
        assert len(blob) == 16 + 6 * 8

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "bad.hsvt").write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ContainerError, match="magic"):
            load_tensor(tmp_path / "bad.hsvt")
        blob = encode_tensor(np.ones((4, 4)), version=2)
        (tmp_path / "short.hsvt").write_bytes(blob[:-3])
        with pytest.raises(ContainerError, match="truncated"):
            load_tensor(tmp_path / "short.hsvt")

    def test_unknown_version(self, tmp_path):
        blob = bytearray(encode_tensor(np.ones(2)))
        blob[4:6] = struct.pack("<H", 9)
        (tmp_path / "v9.hsvt").write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="version"):
            load_tensor(tmp_path / "v9.hsvt")
        with pytest.raises(ContainerError):
            encode_tensor(np.ones(2), version=3)

    def test_archive_round_trip(self, tmp_path):
        tensors = {"a.weight": Rng(2).normal(1.0, (3, 2)), "b": np.arange(4.0)}
        save_archive(tmp_path / "ckpt.hsva", tensors, meta={"epoch": 3})
        back, meta = load_archive(tmp_path / "ckpt.hsva")
        assert meta == {"epoch": 3}
        assert list(back) == ["a.weight", "b"]
        for name in tensors:
            assert_array_equal(back[name], tensors[name])

    def test_archive_rejects_tensor_file(self, tmp_path):
        save_tensor(tmp_path / "x.hsvt", np.ones(3))
        with pytest.raises(ContainerError):
            load_archive(tmp_path / "x.hsvt")

    def test_detect_container_kind(self, tmp_path):
        save_tensor(tmp_path / "x.hsvt", np.ones(1))
        save_archive(tmp_path / "y.hsva", {})
        (tmp_path / "z.txt").write_text("hello")
        assert detect_container_kind(tmp_path / "x.hsvt") == ContainerKind.TENSOR
        assert detect_container_kind(tmp_path / "y.hsva") == ContainerKind.ARCHIVE
        assert detect_container_kind(tmp_path / "z.txt") == ContainerKind.UNKNOWN
        assert detect_container_kind(tmp_path / "missing") == ContainerKind.UNKNOWN
